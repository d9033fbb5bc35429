"""Deterministic named random streams.

All randomness in the package flows from a single 64-bit seed. Consumers ask
for a stream by purpose string; the stream seed is derived by hashing
(seed, purpose) with SHA-256, so adding a new consumer never perturbs the
draws of existing ones, and the derivation is stable across platforms and
Python processes (unlike the builtin ``hash``).
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(seed: int, purpose: str) -> int:
    """Derive the 64-bit seed of the named stream ``purpose``."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(purpose.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Return an independent generator for the named stream."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, purpose)))
