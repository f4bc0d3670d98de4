"""Deterministic sub-seed derivation.

Every random choice in the package is funneled through one master seed.
Component seeds are derived from (master, purpose-string) with a stable
hash, so any stage can be reproduced in isolation without replaying the
stages before it.
"""

import hashlib

import numpy as np


def derive_seed(master: int, purpose: str) -> int:
    """Map a master seed and a purpose label to a 63-bit sub-seed."""
    digest = hashlib.sha256(f"{master}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(master: int, purpose: str) -> np.random.Generator:
    """Fresh generator for one purpose, independent of call order."""
    return np.random.default_rng(derive_seed(master, purpose))
