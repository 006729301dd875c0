"""Dataset loading and non-iid partitioning across clients.

Supports the IDX image/label format (MNIST and FMNIST, optionally
gzip-compressed), the CIFAR-10 binary batch format, and a seeded synthetic
multinomial-logistic generator used for convergence verification on a
convex problem.

Partitioning follows a per-class Dirichlet allocation: for each class a
proportion vector over clients is drawn from Dir_K(beta) and that class's
samples are split accordingly. Small beta concentrates classes on few
clients (high heterogeneity); large beta approaches an even split.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Batch
from .seeding import derive_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


class DataError(Exception):
    """Base class for dataset loading and partitioning failures."""


class BadMagicError(DataError):
    """File header does not carry the expected magic number."""


class TruncatedFileError(DataError):
    """File ends before the payload announced by its header."""


class CountMismatchError(DataError):
    """Image and label files disagree on the number of items."""


class RecordSizeError(DataError):
    """Binary file length is not a whole number of records."""


class LabelRangeError(DataError):
    """A label byte falls outside the valid class range."""


class PartitionError(DataError):
    """No feasible partition for the requested constraints."""


@dataclass(frozen=True)
class Dataset:
    """Flattened inputs plus integer labels for one data split."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a nonempty 2-D matrix, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError("labels length does not match number of input rows")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def label_distribution(self, indices=None) -> np.ndarray:
        """Empirical class frequencies, over all rows or a subset."""
        labels = self.labels if indices is None else self.labels[np.asarray(indices)]
        counts = np.bincount(labels, minlength=self.num_classes).astype(np.float64)
        return counts / counts.sum()


@dataclass(frozen=True)
class ClientShard:
    """A client's identity and its index set into the parent dataset."""

    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if len(np.unique(indices)) != len(indices):
            raise ValueError(f"client {self.client_id} shard has duplicate indices")
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    """Parameters of a Dirichlet non-iid split across K clients."""

    K: int
    beta: float
    seed: int
    min_shard_size: int = 10

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.min_shard_size < 1:
            raise ValueError(f"min_shard_size must be >= 1, got {self.min_shard_size}")


def _open_maybe_gzip(path):
    """Open a binary file, transparently ungzipping on a 1F 8B prefix."""
    with open(path, "rb") as probe:
        is_gzip = probe.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if is_gzip else open(path, "rb")


def _read_exact(f, count, path):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: expected {count} more bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an IDX image/label file pair into a flat [0,1]-scaled dataset.

    Big-endian headers: images carry magic 0x803 and dims [n, rows, cols],
    labels carry magic 0x801 and dims [n]. Gzip files are detected by
    prefix, so `.gz` and plain files both work.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"{images_path}: bad magic {magic}, expected {IDX_IMAGE_MAGIC} (images)"
            )
        pixels = np.frombuffer(_read_exact(f, n * rows * cols, images_path), dtype=np.uint8)
    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"{labels_path}: bad magic {magic}, expected {IDX_LABEL_MAGIC} (labels)"
            )
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
    if n != n_labels:
        raise CountMismatchError(f"{images_path} has {n} images but {labels_path} has {n_labels} labels")
    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), num_classes=10, name=name)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels to IDX files.

    Exists so tests and tooling can round-trip the exact on-disk format.
    """
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar10(batch_paths: Sequence, name: str = "cifar10") -> Dataset:
    """Load CIFAR-10 binary batches (3073-byte records) into one dataset."""
    all_pixels = []
    all_labels = []
    for path in batch_paths:
        with _open_maybe_gzip(path) as f:
            blob = f.read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
            raise RecordSizeError(
                f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise LabelRangeError(f"{path}: label byte {labels.max()} exceeds 9")
        all_labels.append(labels.astype(np.int64))
        all_pixels.append(records[:, 1:])
    inputs = np.concatenate(all_pixels).astype(np.float64) / 255.0
    return Dataset(
        inputs=inputs,
        labels=np.concatenate(all_labels),
        num_classes=10,
        name=name,
    )


def synthetic_logistic(n: int, dim: int, num_classes: int, seed: int) -> Dataset:
    """Seeded multinomial-logistic data for convex-problem experiments.

    Generator, in draw order from one stream: inputs X ~ N(0,1) of shape
    (n, dim); a hidden linear map W ~ N(0,1) of shape (dim, num_classes);
    one uniform u per row. The label is the inverse-CDF sample of u from
    softmax(X @ W), i.e. searchsorted(cumsum(p_i), u_i).
    """
    if n < 1 or dim < 1 or num_classes < 1:
        raise ValueError("n, dim and num_classes must all be >= 1")
    rng = derive_rng(seed)
    inputs = rng.standard_normal((n, dim))
    hidden_map = rng.standard_normal((dim, num_classes))
    u = rng.random(n)
    logits = inputs @ hidden_map
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    labels = np.minimum(
        (cdf < u[:, None]).sum(axis=1),
        num_classes - 1,
    )
    return Dataset(
        inputs=inputs,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        name=f"synthetic(n={n},dim={dim},classes={num_classes},seed={seed})",
    )


def _allocate_largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`, proportional to `proportions`.

    Floors the quotas, then hands out the remaining units by descending
    fractional part, lowest client id winning ties.
    """
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    remaining = total - int(counts.sum())
    if remaining > 0:
        order = np.lexsort((np.arange(len(quotas)), -(quotas - counts)))
        counts[order[:remaining]] += 1
    return counts


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split a dataset into K disjoint shards with Dirichlet label skew.

    Attempt a = 0, 1, ...: with a generator seeded on (spec.seed, a), for
    each class c in ascending order draw p ~ Dir_K(beta), permute the
    class's indices, and hand them out contiguously in client order using
    largest-remainder counts from p. The first attempt in which every
    client ends up with at least min_shard_size samples wins; 100 failed
    attempts raise.
    """
    n = len(ds)
    if spec.K * spec.min_shard_size > n:
        raise PartitionError(
            f"cannot give {spec.K} clients >= {spec.min_shard_size} samples each "
            f"from {n} total"
        )
    for attempt in range(100):
        rng = derive_rng(spec.seed, attempt)
        per_client: list[list[np.ndarray]] = [[] for _ in range(spec.K)]
        for c in range(ds.num_classes):
            class_indices = np.flatnonzero(ds.labels == c)
            if len(class_indices) == 0:
                continue
            proportions = rng.dirichlet(np.full(spec.K, spec.beta))
            permuted = rng.permutation(class_indices)
            counts = _allocate_largest_remainder(proportions, len(class_indices))
            offset = 0
            for k in range(spec.K):
                per_client[k].append(permuted[offset : offset + counts[k]])
                offset += counts[k]
        sizes = [sum(len(chunk) for chunk in chunks) for chunks in per_client]
        if min(sizes) >= spec.min_shard_size:
            return [
                ClientShard(client_id=k, indices=np.sort(np.concatenate(per_client[k])))
                for k in range(spec.K)
            ]
    raise PartitionError(
        f"no partition with min shard size {spec.min_shard_size} found in 100 attempts "
        f"(K={spec.K}, beta={spec.beta}, n={n})"
    )


def sample_batch(ds: Dataset, shard: ClientShard, batch_size: int, round_seed: int) -> Batch:
    """Draw a client's batch: uniform without replacement from its shard.

    Fully determined by (round_seed, shard.client_id), so clients can run
    in any order or concurrently without changing their draws.
    """
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    rng = derive_rng(round_seed, shard.client_id)
    take = min(batch_size, len(shard))
    chosen = rng.permutation(shard.indices)[:take]
    return Batch(inputs=ds.inputs[chosen], labels=ds.labels[chosen])
