"""Gaussian soft window over a character string, and the conditioned network.

The window parameter vector emitted by the first hidden layer is laid out as
``[alpha_hat (K) | beta_hat (K) | kappa_hat (K)]``.  The first hidden layer
reads the previous step's window vector; higher layers read the current one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lstm import (
    ForwardCache, LayerCache, LayerState, ParamStore, StepCache, _cell, _find_nonfinite,
    _store_layer_grads, cell_backward_step, layer_backward, layer_forward, layer_grads,
    output_backward, output_forward, zero_states,
)
from .numkit import NumericError, ShapeError

log = logging.getLogger(__name__)

KAPPA_HAT_MAX = 50.0
EXP_LIMIT = 700.0


@dataclass
class WindowStep:
    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray      # weights for u = 1..U
    phi_end: float       # weight for u = U+1, used only by the stop check
    w: np.ndarray


@dataclass
class WindowCache:
    chars: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    offset: np.ndarray   # exp(kappa_hat), zero where clamping cut the gradient
    terms: np.ndarray    # (K, U) alpha_k exp(-beta_k (kappa_k - u)^2)


def encode_one_hot(ids, size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((len(ids), size))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def _exp_checked(v, name):
    if np.any(v > EXP_LIMIT):
        k = int(np.argmax(v > EXP_LIMIT))
        raise NumericError(f"exp overflow in window parameter {name}[{k}]")
    return np.exp(v)


def window_step(p_hat, kappa_prev, chars) -> tuple[WindowStep, WindowCache]:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    K = kappa_prev.shape[0]
    if p_hat.shape != (3 * K,):
        raise ShapeError(f"window parameters need length {3 * K}")
    U = chars.shape[0]
    alpha = _exp_checked(p_hat[:K], "alpha_hat")
    beta = _exp_checked(p_hat[K:2 * K], "beta_hat")
    k_hat = p_hat[2 * K:]
    clamped = k_hat > KAPPA_HAT_MAX
    if np.any(clamped):
        log.warning("window offset clamped at exp(%g); the alignment is diverging", KAPPA_HAT_MAX)
    offset = np.exp(np.minimum(k_hat, KAPPA_HAT_MAX))
    kappa = kappa_prev + offset
    u = np.arange(1, U + 2, dtype=np.float64)
    terms = alpha[:, None] * np.exp(-beta[:, None] * (kappa[:, None] - u[None, :]) ** 2)
    phi = terms.sum(axis=0)
    w = phi[:U] @ chars
    cache = WindowCache(chars, alpha, beta, kappa, np.where(clamped, 0.0, offset), terms[:, :U])
    return WindowStep(alpha, beta, kappa, phi[:U], float(phi[U]), w), cache


def window_backward(cache: WindowCache, dw, dkappa_next):
    """Returns (d alpha_hat, d beta_hat, d kappa_hat, d kappa_t)."""
    if cache is None:
        raise ValueError("window backward needs the forward cache")
    U = cache.chars.shape[0]
    u = np.arange(1, U + 1, dtype=np.float64)
    eps = cache.terms * (cache.chars @ dw)[None, :]
    diff = u[None, :] - cache.kappa[:, None]
    d_alpha_hat = eps.sum(axis=1)
    d_beta_hat = -cache.beta * np.sum(eps * diff ** 2, axis=1)
    d_kappa = dkappa_next + 2.0 * cache.beta * np.sum(eps * diff, axis=1)
    return d_alpha_hat, d_beta_hat, cache.offset * d_kappa, d_kappa


def stop_check(phi_row) -> bool:
    """True when the weight just past the text beats every in-text weight."""
    phi_row = np.asarray(phi_row, dtype=np.float64)
    return bool(phi_row[-1] > np.max(phi_row[:-1]))


@dataclass
class WindowTrace:
    phi: np.ndarray      # (T, U+1), last column is u = U+1
    kappa: np.ndarray    # (T, K)
    w: np.ndarray        # (T, A)


def _check_chars(params: ParamStore, chars):
    arch = params.arch
    if not arch.has_window:
        raise ShapeError("architecture has no window")
    chars = np.asarray(chars, dtype=np.float64)
    if chars.ndim != 2 or chars.shape[1] != arch.alphabet_size or chars.shape[0] < 1:
        raise ShapeError("character matrix must be (U >= 1, alphabet_size)")
    return chars


def synth_forward(params: ParamStore, x_seq, chars):
    """Returns (yhat, trace, cache)."""
    arch = params.arch
    chars = _check_chars(params, chars)
    x_seq = np.asarray(x_seq, dtype=np.float64).reshape(-1, arch.input_size)
    T, I, K = x_seq.shape[0], arch.input_size, arch.window_K
    block = params.layer(0)
    H = arch.layer_widths[0]
    W_win = block.W_x[:, I:]
    proj = x_seq @ block.W_x[:, :I].T + block.b
    W_p, b_p = params["window.W"], params["window.b"]
    h, c = np.zeros(H), np.zeros(H)
    w_prev, kappa = np.zeros(arch.alphabet_size), np.zeros(K)
    steps, win_caches, hs, ws, phis, kappas, inputs = [], [], [], [], [], [], []
    for t in range(T):
        h_new, c_new, acts, tanh_c = _cell(block, proj[t] + W_win @ w_prev, h, c)
        inputs.append(np.concatenate([x_seq[t], w_prev]))
        steps.append(StepCache(inputs[-1], h, c, acts, c_new, tanh_c))
        h, c = h_new, c_new
        ws_t, wc = window_step(W_p @ h + b_p, kappa, chars)
        kappa, w_prev = ws_t.kappa, ws_t.w
        hs.append(h)
        ws.append(ws_t.w)
        phis.append(np.append(ws_t.phi, ws_t.phi_end))
        kappas.append(kappa)
        win_caches.append(wc)
    U = chars.shape[0]
    h1 = np.array(hs) if T else np.zeros((0, H))
    wmat = np.array(ws) if T else np.zeros((0, arch.alphabet_size))
    layer_caches = [LayerCache(np.array(inputs) if T else np.zeros((0, I + arch.alphabet_size)),
                               steps, np.zeros(H), np.zeros(H))]
    hidden, finals = [h1], [LayerState(h, c)]
    below = h1
    for n in range(1, arch.n_layers):
        hn, final, lc = layer_forward(params.layer(n), np.concatenate([x_seq, below, wmat], axis=1),
                                      LayerState.zeros(arch.layer_widths[n]))
        hidden.append(hn)
        layer_caches.append(lc)
        finals.append(final)
        below = hn
    _find_nonfinite(hidden)
    yhat = output_forward(params, hidden)
    trace = WindowTrace(np.array(phis) if T else np.zeros((0, U + 1)),
                        np.array(kappas) if T else np.zeros((0, K)), wmat)
    cache = ForwardCache(layer_caches, hidden, finals, wmat, {"window": win_caches})
    return yhat, trace, cache


def synth_backward(params: ParamStore, cache: ForwardCache, dyhat, clip_range=None) -> ParamStore:
    if cache is None or "window" not in cache.extra:
        raise ValueError("synthesis backward needs the synthesis forward cache")
    arch = params.arch
    I, A, K = arch.input_size, arch.alphabet_size, arch.window_K
    grad = params.zeros_like()
    dyhat = np.asarray(dyhat, dtype=np.float64)
    T = cache.hidden[0].shape[0]
    dh = output_backward(params, grad, cache.hidden, dyhat)
    dw_now = np.zeros((T, A))
    for n in range(arch.n_layers - 1, 0, -1):
        _, g, dinputs, _, _ = layer_backward(params.layer(n), cache.layers[n], dh[n], clip_range)
        _store_layer_grads(grad, n, g)
        dh[n - 1] = dh[n - 1] + dinputs[:, I:I + arch.layer_widths[n - 1]]
        dw_now += dinputs[:, dinputs.shape[1] - A:]
    block = params.layer(0)
    W_p = params["window.W"]
    gW_p, gb_p = grad["window.W"], grad["window.b"]
    H = arch.layer_widths[0]
    dA = np.zeros((T, 4 * H))
    dh_rec, dc_next = np.zeros(H), np.zeros(H)
    dw_carry, dkappa = np.zeros(A), np.zeros(K)
    win_caches = cache.extra["window"]
    h1 = cache.hidden[0]
    for t in range(T - 1, -1, -1):
        da_hat, db_hat, dk_hat, dkappa = window_backward(win_caches[t], dw_now[t] + dw_carry, dkappa)
        dp = np.concatenate([da_hat, db_hat, dk_hat])
        gW_p += np.outer(dp, h1[t])
        gb_p += dp
        da, dh_rec, dc_next = cell_backward_step(block, cache.layers[0].steps[t],
                                                 dh[0][t] + W_p.T @ dp + dh_rec, dc_next, clip_range)
        dA[t] = da
        dw_carry = block.W_x[:, I:].T @ da
    _store_layer_grads(grad, 0, layer_grads(block, cache.layers[0], dA))
    return grad


class SynthesisStepper:
    """Incremental forward pass used by the samplers."""

    def __init__(self, params: ParamStore, chars):
        self.params = params
        self.arch = params.arch
        self.chars = _check_chars(params, chars)
        self.states = zero_states(self.arch)
        self.w = np.zeros(self.arch.alphabet_size)
        self.kappa = np.zeros(self.arch.window_K)

    def step(self, x_t):
        p, arch = self.params, self.arch
        x_t = np.asarray(x_t, dtype=np.float64)
        block = p.layer(0)
        h, c, _, _ = _cell(block, block.W_x @ np.concatenate([x_t, self.w]) + block.b,
                           self.states[0].h, self.states[0].c)
        self.states[0] = LayerState(h, c)
        ws, _ = window_step(p["window.W"] @ h + p["window.b"], self.kappa, self.chars)
        self.kappa, self.w = ws.kappa, ws.w
        y = p["out.b"] + p["out.W0"] @ h
        below = h
        for n in range(1, arch.n_layers):
            blk = p.layer(n)
            st = self.states[n]
            h, c, _, _ = _cell(blk, blk.W_x @ np.concatenate([x_t, below, self.w]) + blk.b, st.h, st.c)
            self.states[n] = LayerState(h, c)
            y = y + p[f"out.W{n}"] @ h
            below = h
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite output during sampling")
        return y, ws
