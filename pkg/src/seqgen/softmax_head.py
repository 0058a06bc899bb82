"""Categorical output layer for text and the usual language-model metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import log_softmax, softmax_stable


@dataclass
class Vocab:
    symbols: list
    unknown: int | None = None
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, items) -> np.ndarray:
        out = []
        for s in items:
            i = self.index.get(s, self.unknown)
            if i is None:
                raise KeyError(f"symbol {s!r} not in vocabulary")
            out.append(i)
        return np.array(out, dtype=np.int64)

    def decode(self, ids, sep: str = "") -> str:
        syms = [self.symbols[int(i)] for i in ids]
        if syms and isinstance(syms[0], int):
            return bytes(syms).decode("latin-1")
        return sep.join(syms)

    def to_dict(self) -> dict:
        return {"symbols": list(self.symbols), "unknown": self.unknown}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["symbols"]), d.get("unknown"))


def text_step_loss(yhat_t, target: int):
    logp = log_softmax(yhat_t)
    dy = np.exp(logp)
    dy[target] -= 1.0
    return -float(logp[target]), dy


def text_sequence_loss(yhat: np.ndarray, targets: np.ndarray):
    """Summed loss in nats and per-step output derivatives for a (T, K) block."""
    targets = np.asarray(targets, dtype=np.int64)
    if yhat.shape[0] == 0:
        return 0.0, np.zeros_like(yhat)
    logp = log_softmax(yhat, axis=1)
    rows = np.arange(len(targets))
    loss = -float(np.sum(logp[rows, targets]))
    dy = np.exp(logp)
    dy[rows, targets] -= 1.0
    return loss, dy


def bpc(total_loss_nats: float, n_symbols: int) -> float:
    if n_symbols <= 0:
        raise ValueError("need at least one symbol")
    return total_loss_nats / (n_symbols * math.log(2.0))


def bpc_to_perplexity(bits: float, avg_word_len: float) -> float:
    return 2.0 ** (avg_word_len * bits)


def classification_error(yhat_seq, targets) -> float:
    yhat_seq = np.asarray(yhat_seq)
    targets = np.asarray(targets)
    if len(yhat_seq) != len(targets):
        raise ValueError("prediction and target lengths differ")
    if len(targets) == 0:
        return 0.0
    # np.argmax returns the first maximal index, i.e. lowest-index tie break
    wrong = np.argmax(yhat_seq, axis=1) != targets
    return 100.0 * float(np.mean(wrong))


def predictive_probs(yhat_t) -> np.ndarray:
    return softmax_stable(yhat_t)
