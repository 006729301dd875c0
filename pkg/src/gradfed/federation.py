"""The communication-round loop: broadcast, score, select, aggregate, step.

Each round every client computes one stochastic gradient of its local
loss at the current global parameters, reports its score (gradient norm
or batch loss), the server keeps the configured subset, averages their
gradients and takes one step. Client computations are independent and
seeded per (master_seed, round, client), so sequential and concurrent
schedules produce bitwise-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .config import ExperimentConfig
from .datasets import (
    ClientShard,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    load_cifar10,
    load_idx,
    sample_batch,
    synthetic_logistic,
)
from .nn import Batch, MlpArchitecture
from .seeding import derive_seed
from .selection import ClientScore, SelectionStrategy, score_for, select

IMAGE_HIDDEN_DIMS = (200, 200)  # 199,210 params on 784 inputs; 656,810 on 3072

BYTES_PER_SCALAR = 8  # float64 on the wire


@dataclass(frozen=True)
class FederationState:
    """Everything needed to execute the next communication round."""

    round: int
    w: np.ndarray
    arch: MlpArchitecture
    train: Dataset
    shards: tuple[ClientShard, ...]
    strategy: SelectionStrategy
    eta: float
    batch_size: int
    master_seed: int
    test: Dataset | None = None
    weighted: bool = False  # |D_k|-weighted aggregation instead of plain mean

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be >= 0")
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        expected = nn.param_count(self.arch)
        if np.asarray(self.w).shape != (expected,):
            raise ValueError(f"w has length {len(self.w)}, architecture needs {expected}")
        object.__setattr__(self, "shards", tuple(self.shards))

    @property
    def num_clients(self) -> int:
        return len(self.shards)


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of one completed round (round counts from 1)."""

    round: int
    strategy: str
    selected: tuple[int, ...]
    per_client_norm: tuple[float, ...]
    per_client_loss: tuple[float, ...]
    mean_grad_norm: float
    max_grad_norm: float
    aggregated_norm: float
    step_norm: float
    train_loss: float
    test_accuracy: float
    test_loss: float
    uplink_bytes: int
    downlink_bytes: int


def communication_cost(
    K: int, C: int, d: int, bytes_per_scalar: int = BYTES_PER_SCALAR
) -> tuple[int, int]:
    """(uplink, downlink) bytes of one round.

    Downlink broadcasts the d-dimensional model to all K clients. Uplink
    is one scalar norm from every client plus full gradients from the C
    selected ones.
    """
    if min(K, C, d, bytes_per_scalar) < 1:
        raise ValueError("K, C, d and bytes_per_scalar must all be positive")
    downlink = K * d * bytes_per_scalar
    uplink = K * bytes_per_scalar + C * d * bytes_per_scalar
    return uplink, downlink


def client_round(state: FederationState, client_id: int) -> tuple[np.ndarray, float, float]:
    """One client's local computation: (gradient, batch loss, gradient norm)."""
    shard = state.shards[client_id]
    round_seed = derive_seed(state.master_seed, state.round)
    batch = sample_batch(state.train, shard, state.batch_size, round_seed)
    loss, grad = nn.backward(state.arch, state.w, batch)
    return grad, loss, nn.vector_norm(grad)


def aggregate(grads: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Mean of gradient vectors, accumulated in the given (client id) order.

    With `weights` (e.g. shard sizes) the mean is weighted instead; the
    summation order stays fixed either way so results are reproducible.
    """
    if len(grads) == 0:
        raise ValueError("cannot aggregate an empty gradient list")
    length = len(grads[0])
    if any(len(g) != length for g in grads):
        raise ValueError("gradient vectors differ in length")
    if weights is None:
        total = np.zeros(length)
        for g in grads:
            total += g
        return total / len(grads)
    if len(weights) != len(grads):
        raise ValueError("one weight per gradient is required")
    scale = float(sum(weights))
    if not scale > 0:
        raise ValueError("weights must have positive sum")
    total = np.zeros(length)
    for g, weight in zip(grads, weights):
        total += (weight / scale) * g
    return total


def evaluate(
    arch: MlpArchitecture, w: np.ndarray, ds: Dataset, chunk_size: int = 2048
) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of the model on a dataset.

    Prediction is the argmax logit; ties fall to the lowest class index.
    """
    if ds.input_dim != arch.input_dim:
        raise ValueError(
            f"dataset input dim {ds.input_dim} does not match architecture {arch.input_dim}"
        )
    n = len(ds)
    loss_sum = 0.0
    hits = 0
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        batch = Batch(inputs=ds.inputs[start:stop], labels=ds.labels[start:stop])
        logits = nn.forward_logits(arch, w, batch.inputs)
        loss_sum += nn.forward_loss(arch, w, batch) * (stop - start)
        hits += int((logits.argmax(axis=1) == batch.labels).sum())
    return loss_sum / n, hits / n


def _client_results(state: FederationState, workers: int):
    """Per-client (grad, loss, norm), collected into client-id order."""
    k = state.num_clients
    if workers <= 1:
        return [client_round(state, cid) for cid in range(k)]
    results: list = [None] * k
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(client_round, state, cid): cid for cid in range(k)}
        for future, cid in futures.items():
            results[cid] = future.result()
    return results


def run_round(
    state: FederationState,
    evaluate_test: bool = True,
    full_train_loss: bool = False,
    workers: int = 1,
) -> tuple[FederationState, RoundRecord]:
    """Execute one communication round and return the advanced state."""
    results = _client_results(state, workers)
    grads = [r[0] for r in results]
    losses = [r[1] for r in results]
    norms = [r[2] for r in results]

    scores = [
        ClientScore(cid, score_for(state.strategy.kind, grads[cid], losses[cid]))
        for cid in range(state.num_clients)
    ]
    selected = select(state.strategy, scores, state.round)

    weights = [len(state.shards[cid]) for cid in selected] if state.weighted else None
    agg = aggregate([grads[cid] for cid in selected], weights)
    aggregated_norm = nn.vector_norm(agg)
    selected_max_norm = max(norms[cid] for cid in selected)
    # Triangle inequality for a convex combination; violation means a bug.
    if aggregated_norm > selected_max_norm * (1.0 + 1e-9) + 1e-300:
        raise RuntimeError(
            f"round {state.round}: aggregated norm {aggregated_norm} exceeds "
            f"max client norm {selected_max_norm}"
        )
    w_next = nn.axpy(state.w, agg, state.eta)
    step_norm = nn.vector_norm(w_next - state.w)

    if full_train_loss:
        train_loss, _ = evaluate(state.arch, state.w, state.train)
    else:
        train_loss = float(np.mean(losses))

    test_loss = test_accuracy = float("nan")
    if evaluate_test and state.test is not None:
        test_loss, test_accuracy = evaluate(state.arch, w_next, state.test)

    uplink, downlink = communication_cost(
        state.num_clients, len(selected), len(state.w), BYTES_PER_SCALAR
    )
    record = RoundRecord(
        round=state.round + 1,
        strategy=state.strategy.kind.value,
        selected=tuple(selected),
        per_client_norm=tuple(norms),
        per_client_loss=tuple(losses),
        mean_grad_norm=float(np.mean(norms)),
        max_grad_norm=float(np.max(norms)),
        aggregated_norm=aggregated_norm,
        step_norm=step_norm,
        train_loss=train_loss,
        test_accuracy=test_accuracy,
        test_loss=test_loss,
        uplink_bytes=uplink,
        downlink_bytes=downlink,
    )
    return replace(state, round=state.round + 1, w=w_next), record


@dataclass
class ExperimentResult:
    """Trajectory of one run: records plus optional parameter checkpoints."""

    records: list[RoundRecord]
    final_w: np.ndarray
    initial_w: np.ndarray
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)


def run_federation(
    state: FederationState,
    rounds: int,
    eval_stride: int = 1,
    checkpoint_stride: int = 0,
    full_train_loss: bool = False,
    workers: int = 1,
) -> ExperimentResult:
    """Run `rounds` rounds from `state`, recording metrics per round.

    The test set is evaluated on rounds divisible by `eval_stride`. With
    `checkpoint_stride` > 0, the pre-update parameter vector w^t is kept
    for every t divisible by the stride (t = 0 included), plus the final
    parameters; these checkpoints feed the post-hoc convergence audits.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if eval_stride < 1:
        raise ValueError("eval_stride must be >= 1")
    initial_w = state.w.copy()
    records: list[RoundRecord] = []
    checkpoints: list[tuple[int, np.ndarray]] = []
    for t in range(rounds):
        if checkpoint_stride > 0 and t % checkpoint_stride == 0:
            checkpoints.append((t, state.w.copy()))
        evaluate_now = (t + 1) % eval_stride == 0
        state, record = run_round(
            state,
            evaluate_test=evaluate_now,
            full_train_loss=full_train_loss,
            workers=workers,
        )
        records.append(record)
    if checkpoint_stride > 0:
        checkpoints.append((rounds, state.w.copy()))
    return ExperimentResult(
        records=records,
        final_w=state.w,
        initial_w=initial_w,
        checkpoints=checkpoints,
    )


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets named by the config."""
    if config.dataset in ("mnist", "fmnist"):
        train = load_idx(config.train_images, config.train_labels, name=config.dataset)
        test = load_idx(config.test_images, config.test_labels, name=f"{config.dataset}-test")
        return train, test
    if config.dataset == "cifar10":
        train = load_cifar10(config.train_batches, name="cifar10")
        test = load_cifar10(config.test_batches, name="cifar10-test")
        return train, test
    full = synthetic_logistic(
        config.synth_train_n + config.synth_test_n,
        config.synth_dim,
        config.synth_classes,
        config.synth_seed,
    )
    train = Dataset(
        inputs=full.inputs[: config.synth_train_n],
        labels=full.labels[: config.synth_train_n],
        num_classes=full.num_classes,
        name=full.name,
    )
    test = Dataset(
        inputs=full.inputs[config.synth_train_n :],
        labels=full.labels[config.synth_train_n :],
        num_classes=full.num_classes,
        name=f"{full.name}-test",
    )
    return train, test


def architecture_for(config: ExperimentConfig, train: Dataset) -> MlpArchitecture:
    """The model trained on this dataset.

    Image datasets get the two-hidden-layer MLP; the synthetic task stays
    linear (no hidden layers) so its objective is convex and its
    smoothness constant has a closed form.
    """
    hidden = () if config.dataset == "synthetic" else IMAGE_HIDDEN_DIMS
    return MlpArchitecture(
        input_dim=train.input_dim, hidden_dims=hidden, output_dim=train.num_classes
    )


@dataclass
class PreparedExperiment:
    """Loaded data, partition, and the round-0 state for one config."""

    config: ExperimentConfig
    train: Dataset
    test: Dataset
    arch: MlpArchitecture
    shards: tuple[ClientShard, ...]
    state: FederationState


def prepare(
    config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None
) -> PreparedExperiment:
    """Deterministically assemble the starting state for a config."""
    config.validate()
    train, test = data if data is not None else load_data(config)
    arch = architecture_for(config, train)
    shards = tuple(
        dirichlet_partition(
            train,
            PartitionSpec(
                K=config.K,
                beta=config.beta,
                seed=config.partition_seed,
                min_shard_size=config.min_shard_size,
            ),
        )
    )
    strategy = SelectionStrategy(
        kind=config.strategy, clients_per_round=config.C, seed=config.master_seed
    )
    state = FederationState(
        round=0,
        w=nn.init_params(arch, config.master_seed),
        arch=arch,
        train=train,
        shards=shards,
        strategy=strategy,
        eta=config.eta,
        batch_size=config.batch_size,
        master_seed=config.master_seed,
        test=test,
        weighted=config.weighted_aggregation,
    )
    return PreparedExperiment(
        config=config, train=train, test=test, arch=arch, shards=shards, state=state
    )


def run_experiment(
    config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None
) -> ExperimentResult:
    """Run a full configured experiment and return its trajectory.

    `data` short-circuits dataset loading so sweeps can share one loaded
    copy across cells.
    """
    prepared = prepare(config, data)
    return run_federation(
        prepared.state,
        rounds=config.T,
        eval_stride=config.eval_stride,
        checkpoint_stride=config.checkpoint_stride,
        full_train_loss=config.full_train_loss,
        workers=config.workers,
    )
