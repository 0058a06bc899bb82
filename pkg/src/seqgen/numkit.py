"""Small numeric kernels shared by every model component.

Everything works on float64 numpy arrays.  Random streams come from
``numpy.random.Generator`` backed by PCG64, which produces the same stream on
every platform for a given seed.
"""

from __future__ import annotations

import numpy as np

Rng = np.random.Generator


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def make_rng(seed: int | None) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply {W.shape} by {x.shape}")
    return W @ x


def softmax_stable(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v - logsumexp(v, axis=axis, keepdims=True)


def logsumexp(v: np.ndarray, axis: int | None = -1, keepdims: bool = False):
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if np.ndim(out) == 0:
        return float(out)
    return out


def sample_categorical(p: np.ndarray, rng: Rng) -> int:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability vector")
    # inverse CDF; searchsorted skips zero-probability slots because of 'right'
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, p.size - 1)


def sample_bivariate_gaussian(mu, sigma, rho: float, rng: Rng) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not -1.0 < rho < 1.0:
        raise ValueError(f"correlation {rho} outside (-1, 1)")
    if np.any(sigma < 0):
        raise ValueError("standard deviations must be non-negative")
    z1, z2 = rng.standard_normal(2)
    return np.array([
        mu[0] + sigma[0] * z1,
        mu[1] + sigma[1] * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2),
    ])


def sigmoid(x):
    # exp of a non-positive number never overflows and keeps full precision in both tails
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
