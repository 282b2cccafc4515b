"""Deterministic named-stream RNG derivation.

Every random draw in the package flows from one root seed.  Child streams
are derived by hashing (root, purpose, index), so adding a new consumer
never perturbs the streams of existing ones, and per-index derivation keeps
results independent of iteration order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, purpose: str, index: int = 0) -> int:
    """64-bit child seed for a named stream."""
    digest = hashlib.sha256(f"{root}:{purpose}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Fresh generator for the (purpose, index) stream of a root seed."""
    return np.random.default_rng(derive_seed(root, purpose, index))
