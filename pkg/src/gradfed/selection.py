"""Per-round client selection rules.

Each round every client reports a score; the server keeps the C clients
with the highest scores (gradient norm or loss), a uniform random subset,
or everyone. Score ties always break toward the lower client id so runs
are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .nn import vector_norm
from .seeding import derive_rng


class StrategyKind(str, Enum):
    GRAD_NORM = "grad_norm"
    LOSS = "loss"
    RANDOM = "random"
    FULL = "full"


@dataclass(frozen=True)
class ClientScore:
    client_id: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"client {self.client_id} has non-finite score {self.score}")


@dataclass(frozen=True)
class SelectionStrategy:
    """How many clients to pick per round, and by what rule."""

    kind: StrategyKind
    clients_per_round: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is not StrategyKind.FULL and self.clients_per_round < 1:
            raise ValueError(
                f"clients_per_round must be >= 1 for {self.kind.value}, "
                f"got {self.clients_per_round}"
            )


def score_for(kind: StrategyKind, grad: np.ndarray | None, loss: float) -> float:
    """A client's selection score under the given rule."""
    kind = StrategyKind(kind)
    if kind is StrategyKind.GRAD_NORM:
        return vector_norm(grad)
    if kind is StrategyKind.LOSS:
        if not np.isfinite(loss):
            raise ValueError(f"loss must be finite, got {loss}")
        return float(loss)
    return 0.0


def select(strategy: SelectionStrategy, scores: Sequence[ClientScore], round_index: int) -> list[int]:
    """Client ids participating this round, sorted ascending.

    Score-based kinds return the top-C scores (ties to the lower id), the
    random kind draws C ids uniformly without replacement from a stream
    keyed on (strategy.seed, round_index), and the full kind returns all.
    """
    ids = [s.client_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id in scores")
    k = len(ids)
    if k == 0:
        raise ValueError("scores must cover at least one client")

    if strategy.kind is StrategyKind.FULL:
        return sorted(ids)

    c = min(strategy.clients_per_round, k)
    if strategy.kind is StrategyKind.RANDOM:
        rng = derive_rng(strategy.seed, round_index)
        chosen = rng.choice(np.array(sorted(ids)), size=c, replace=False)
        return sorted(int(i) for i in chosen)

    ranked = sorted(scores, key=lambda s: (-s.score, s.client_id))
    return sorted(s.client_id for s in ranked[:c])
