"""Stable, process-independent RNG derivation.

Python's builtin ``hash`` is salted per process, so every seed that involves a
string goes through sha256 instead.  Identical (seed, tags...) always yield an
identical generator, on any platform.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np


def stable_words(*parts) -> list[int]:
    """Hash arbitrary parts (ints, strings) into eight 32-bit entropy words."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def stable_rng(*parts) -> np.random.Generator:
    """Deterministic generator keyed by the given parts."""
    return np.random.default_rng(np.random.SeedSequence(stable_words(*parts)))


def worker_count() -> int:
    """Worker cap from AFFORDANCE_THREADS, defaulting to the machine's cores."""
    cores = os.cpu_count() or 1
    raw = os.environ.get("AFFORDANCE_THREADS")
    if raw is None:
        return cores
    try:
        n = int(raw)
    except ValueError:
        return cores
    return max(1, min(n, cores))
