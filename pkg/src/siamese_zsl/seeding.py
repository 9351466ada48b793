"""Seed derivation: one run seed fans out into independent per-purpose streams."""

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Stable 64-bit seed from ``seed`` and purpose tags (e.g. ``"train-pairs", 3``)."""
    text = "/".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
