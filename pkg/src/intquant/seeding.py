"""Deterministic expansion of one global seed into per-component seeds."""

from __future__ import annotations

import zlib

import numpy as np


def split_seed(seed: int, component: str) -> int:
    """Seed for ``component``: the first word of ``SeedSequence([seed, crc32(component)])``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])
