"""Mixture density output layer for pen offsets plus an end-of-stroke bit.

Raw output layout for M components (length 6M+1)::

    [e_hat | pi_hat (M) | mu1 (M) | mu2 (M) | sigma1_hat (M) | sigma2_hat (M) | rho_hat (M)]

All functions accept a single output vector or a (T, 6M+1) block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import Rng, log_softmax, logsumexp, sample_bivariate_gaussian, sample_categorical, sigmoid, \
    softmax_stable

RHO_LIMIT = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def output_size(M: int) -> int:
    return 6 * M + 1


def n_components(size: int) -> int:
    if size < 7 or (size - 1) % 6:
        raise ValueError(f"{size} is not a valid mixture output size")
    return (size - 1) // 6


@dataclass
class MixtureOut:
    e: np.ndarray | float
    pi: np.ndarray      # (..., M)
    mu: np.ndarray      # (..., M, 2)
    sigma: np.ndarray   # (..., M, 2)
    rho: np.ndarray     # (..., M)
    e_hat: np.ndarray | float
    log_pi: np.ndarray
    rho_free: np.ndarray  # False where the correlation hit its clamp

    @property
    def M(self) -> int:
        return self.pi.shape[-1]


def _slots(yhat, M):
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape[-1] != output_size(M):
        raise ValueError(f"expected {output_size(M)} outputs, got {yhat.shape[-1]}")
    e_hat = yhat[..., 0]
    pi_hat = yhat[..., 1:1 + M]
    mu = np.stack([yhat[..., 1 + M:1 + 2 * M], yhat[..., 1 + 2 * M:1 + 3 * M]], axis=-1)
    s_hat = np.stack([yhat[..., 1 + 3 * M:1 + 4 * M], yhat[..., 1 + 4 * M:1 + 5 * M]], axis=-1)
    rho_hat = yhat[..., 1 + 5 * M:]
    return e_hat, pi_hat, mu, s_hat, rho_hat


def _squash(e_hat, pi_hat, mu, s_hat, rho_hat):
    # note the sign: a larger e_hat gives a smaller end-of-stroke probability
    e = sigmoid(-np.asarray(e_hat))
    log_pi = log_softmax(pi_hat)
    rho = np.tanh(rho_hat)
    rho_free = np.abs(rho) <= RHO_LIMIT
    rho = np.clip(rho, -RHO_LIMIT, RHO_LIMIT)
    return MixtureOut(e, np.exp(log_pi), mu, np.exp(s_hat), rho, e_hat, log_pi, rho_free)


def split_outputs(yhat, M: int) -> MixtureOut:
    return _squash(*_slots(yhat, M))


def apply_bias(yhat, b: float, M: int) -> MixtureOut:
    """Sharpen the mixture: scales shrink by exp(-b), weight logits grow by (1+b)."""
    if b < 0:
        raise ValueError("probability bias must be >= 0")
    e_hat, pi_hat, mu, s_hat, rho_hat = _slots(yhat, M)
    return _squash(e_hat, pi_hat * (1.0 + b), mu, s_hat - b, rho_hat)


def bivariate_logdensity(x, mu, sigma, rho):
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    d = (x - mu) / sigma
    one_m = 1.0 - rho * rho
    Z = d[..., 0] ** 2 + d[..., 1] ** 2 - 2.0 * rho * d[..., 0] * d[..., 1]
    out = -(LOG_2PI + np.log(sigma[..., 0]) + np.log(sigma[..., 1]) + 0.5 * np.log(one_m)) - Z / (2.0 * one_m)
    return float(out) if np.ndim(out) == 0 else out


def _log_bernoulli(e_hat, eos):
    # log e = -softplus(e_hat), log(1-e) = -softplus(-e_hat)
    return np.where(eos > 0.5, -np.logaddexp(0.0, e_hat), -np.logaddexp(0.0, -e_hat))


@dataclass
class MdnBackCache:
    gamma: np.ndarray
    Z: np.ndarray
    C: np.ndarray
    d: np.ndarray  # standardized offsets (x - mu) / sigma, shape (..., M, 2)


def _targets(x_next):
    x_next = np.asarray(x_next, dtype=np.float64)
    return x_next[..., :2], x_next[..., 2]


def mdn_step_loss(mix: MixtureOut, x_next):
    """Negative log-likelihood in nats (summed over any leading axis)."""
    xy, eos = _targets(x_next)
    d = (xy[..., None, :] - mix.mu) / mix.sigma
    one_m = 1.0 - mix.rho ** 2
    Z = d[..., 0] ** 2 + d[..., 1] ** 2 - 2.0 * mix.rho * d[..., 0] * d[..., 1]
    log_n = -(LOG_2PI + np.log(mix.sigma[..., 0]) + np.log(mix.sigma[..., 1]) + 0.5 * np.log(one_m)) \
        - Z / (2.0 * one_m)
    joint = mix.log_pi + log_n
    lse = logsumexp(joint, axis=-1, keepdims=True)
    gamma = np.exp(joint - lse)
    loss = -np.sum(lse) - np.sum(_log_bernoulli(mix.e_hat, eos))
    return float(loss), MdnBackCache(gamma, Z, 1.0 / one_m, d)


def mdn_backward(mix: MixtureOut, cache: MdnBackCache, x_next) -> np.ndarray:
    """Derivatives of the loss with respect to the raw (pre-squash) outputs."""
    _, eos = _targets(x_next)
    g, C, d, rho = cache.gamma, cache.C, cache.d, mix.rho
    d1, d2 = d[..., 0], d[..., 1]
    s1, s2 = mix.sigma[..., 0], mix.sigma[..., 1]
    inner1 = d1 - rho * d2
    inner2 = d2 - rho * d1
    dlog_mu1 = C / s1 * inner1
    dlog_mu2 = C / s2 * inner2
    dlog_s1 = C * d1 * inner1 - 1.0
    dlog_s2 = C * d2 * inner2 - 1.0
    dlog_rho = (d1 * d2 + rho * (1.0 - C * cache.Z)) * mix.rho_free
    return np.concatenate([
        np.asarray(eos - mix.e)[..., None],
        mix.pi - g,
        -g * dlog_mu1, -g * dlog_mu2,
        -g * dlog_s1, -g * dlog_s2,
        -g * dlog_rho,
    ], axis=-1)


def mdn_sequence_loss(yhat: np.ndarray, targets: np.ndarray, M: int):
    """Summed loss and (T, 6M+1) output derivatives for a whole sequence."""
    if yhat.shape[0] == 0:
        return 0.0, np.zeros_like(yhat)
    mix = split_outputs(yhat, M)
    loss, cache = mdn_step_loss(mix, targets)
    return loss, mdn_backward(mix, cache, targets)


def mixture_density(mix: MixtureOut, points: np.ndarray) -> np.ndarray:
    """Offset density of a single-step mixture at an (N, 2) array of points."""
    log_n = bivariate_logdensity(points[:, None, :], mix.mu[None], mix.sigma[None], mix.rho[None])
    return np.exp(logsumexp(mix.log_pi[None] + log_n, axis=1))


def mdn_sample(mix: MixtureOut, rng: Rng) -> np.ndarray:
    pi = softmax_stable(mix.log_pi)
    j = sample_categorical(pi, rng)
    xy = sample_bivariate_gaussian(mix.mu[j], mix.sigma[j], float(mix.rho[j]), rng)
    eos = 1.0 if rng.random() < float(mix.e) else 0.0
    return np.array([xy[0], xy[1], eos])
