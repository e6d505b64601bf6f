"""Counter-based child seeds so results never depend on execution order."""
from __future__ import annotations

import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """A 63-bit seed determined only by ``master`` and the integer ``keys``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    hi, lo = ss.generate_state(2)
    return int(((int(hi) << 32) | int(lo)) >> 1)


def derive_rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
