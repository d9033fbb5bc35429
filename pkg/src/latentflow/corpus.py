"""Synthetic character stream for the micro teacher.

An order-2 Markov source over 64 symbols with a fixed transition table
derived from seed 0, so every run sees the same language. Moderately peaked
rows give the source an entropy floor well below log(64), leaving headroom
to rank degradation across model surgeries.
"""
from __future__ import annotations

import numpy as np

from .errors import InputError
from .rng import stream

VOCAB = 64
_TABLE_LOGIT_STD = 2.0
_cdf_cache: np.ndarray | None = None


def _transition_cdf() -> np.ndarray:
    global _cdf_cache
    if _cdf_cache is None:
        rng = stream(0, "markov-table")
        logits = rng.normal(0.0, _TABLE_LOGIT_STD, size=(VOCAB, VOCAB, VOCAB))
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        _cdf_cache = np.cumsum(p, axis=-1)
    return _cdf_cache


def gen_corpus(n_tokens: int, seed: int) -> np.ndarray:
    """Sample a token stream of length n_tokens from the fixed source."""
    if n_tokens < 2:
        raise InputError("corpus needs at least 2 tokens")
    cdf = _transition_cdf()
    rng = stream(seed, "corpus")
    out = np.empty(n_tokens, dtype=np.int64)
    out[0], out[1] = rng.integers(0, VOCAB, size=2)
    draws = rng.random(n_tokens)
    for i in range(2, n_tokens):
        out[i] = np.searchsorted(cdf[out[i - 2], out[i - 1]], draws[i], side="right")
    return np.minimum(out, VOCAB - 1)


def split_corpus(tokens: np.ndarray, heldout_fraction: float = 0.1):
    """Split off the trailing fraction as the held-out evaluation stream."""
    cut = int(round(len(tokens) * (1.0 - heldout_fraction)))
    return tokens[:cut], tokens[cut:]


def windows(tokens: np.ndarray, length: int) -> np.ndarray:
    """Non-overlapping windows (n, length); trailing remainder is dropped."""
    n = len(tokens) // length
    if n == 0:
        raise InputError(f"corpus shorter than one window of {length}")
    return tokens[: n * length].reshape(n, length)
