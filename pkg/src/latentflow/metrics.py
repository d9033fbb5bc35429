"""Evaluation metrics: NMSE, categorical KL, logit-lens latent KL, perplexity."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .tensor import no_grad

EVAL_CSV_HEADER = ["method", "m", "n", "k", "nmse", "kl_latent", "kl_lm", "ppl", "n_tokens"]


@dataclass
class EvalReport:
    method: str
    m: int
    n: int
    k: int
    nmse: float
    kl_latent: float
    kl_lm: float
    ppl: float
    n_tokens: int

    def csv_row(self):
        return [self.method, self.m, self.n, self.k, repr(self.nmse),
                repr(self.kl_latent), repr(self.kl_lm), repr(self.ppl), self.n_tokens]


def write_eval_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def nmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error normalized by the mean squared target norm."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"nmse: shapes differ, {pred.shape} vs {target.shape}")
    denom = float((target ** 2).sum())
    if denom == 0.0:
        raise InputError("nmse undefined for an all-zero target")
    return float(((pred - target) ** 2).sum()) / denom


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_categorical(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Mean over rows of KL(softmax(p) || softmax(q)), in nats."""
    p_logits, q_logits = np.asarray(p_logits), np.asarray(q_logits)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(
            f"kl_categorical: shapes differ, {p_logits.shape} vs {q_logits.shape}")
    log_p = _log_softmax(p_logits)
    log_q = _log_softmax(q_logits)
    kl = (np.exp(log_p) * (log_p - log_q)).sum(axis=-1)
    return float(kl.reshape(-1).mean())


def latent_kl(x1: np.ndarray, x1_hat: np.ndarray, teacher) -> float:
    """KL between logit-lens projections of the target and predicted latents."""
    with no_grad():
        p = teacher.logit_lens(np.asarray(x1)).data
        q = teacher.logit_lens(np.asarray(x1_hat)).data
    return kl_categorical(p, q)


def perplexity(logits: np.ndarray, next_tokens: np.ndarray) -> float:
    """exp(mean next-token negative log-likelihood), natural log."""
    logits = np.asarray(logits)
    next_tokens = np.asarray(next_tokens)
    flat = logits.reshape(-1, logits.shape[-1])
    tflat = next_tokens.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise DimensionError(
            f"perplexity: {flat.shape[0]} rows of logits vs {tflat.shape[0]} targets")
    log_q = _log_softmax(flat)
    nll = -log_q[np.arange(flat.shape[0]), tflat]
    return float(np.exp(nll.mean()))
