"""Deterministic RNG derivation shared by all modules.

Every source of randomness in a run is a generator derived from a tuple of
integers (master seed plus a context path such as round and client id), so
results never depend on execution order or scheduling.
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def derive_rng(*parts: int) -> np.random.Generator:
    """Build a Generator keyed on an integer tuple.

    Negative seeds are mapped to their unsigned 64-bit representation so the
    full signed 64-bit range is accepted.
    """
    if not parts:
        raise ValueError("at least one seed component is required")
    return np.random.default_rng([int(p) & _U64 for p in parts])


def derive_seed(*parts: int) -> int:
    """Collapse an integer tuple into one well-mixed 64-bit seed."""
    if not parts:
        raise ValueError("at least one seed component is required")
    seq = np.random.SeedSequence([int(p) & _U64 for p in parts])
    return int(seq.generate_state(1, dtype=np.uint64)[0])
