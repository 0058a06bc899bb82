"""Optimizers, weight noise, and the training / evaluation loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .lstm import ParamStore
from .numkit import NumericError, make_rng

log = logging.getLogger(__name__)

RMSPROP_DECAY = 0.95
RMSPROP_MOMENTUM = 0.9
RMSPROP_LR = 1e-4
RMSPROP_EPS = 1e-4


@dataclass
class RmspropState:
    n: np.ndarray
    g: np.ndarray
    delta: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "RmspropState":
        return cls(np.zeros(size), np.zeros(size), np.zeros(size))


def rmsprop_step(weights: np.ndarray, state: RmspropState, grads: np.ndarray,
                 decay: float = RMSPROP_DECAY, momentum: float = RMSPROP_MOMENTUM,
                 lr: float = RMSPROP_LR, eps: float = RMSPROP_EPS) -> np.ndarray:
    """One in-place update of ``weights``; the state buffers are updated in order n, g, delta."""
    state.n[...] = decay * state.n + (1.0 - decay) * grads * grads
    state.g[...] = decay * state.g + (1.0 - decay) * grads
    radicand = state.n - state.g * state.g + eps
    if np.any(radicand < 0):
        raise NumericError("negative variance estimate in rmsprop")
    state.delta[...] = momentum * state.delta - lr * grads / np.sqrt(radicand)
    weights += state.delta
    return weights


def sgd_momentum_step(weights: np.ndarray, velocity: np.ndarray, grads: np.ndarray,
                      lr: float, momentum: float) -> np.ndarray:
    velocity[...] = momentum * velocity - lr * grads
    weights += velocity
    return weights


def clip_elementwise(v, lo: float, hi: float):
    if lo > hi:
        raise ValueError("clip range is inverted")
    return np.minimum(np.maximum(v, lo), hi)


class Optimizer:
    """Holds the hyperparameters and buffers for either update rule."""

    def __init__(self, kind: str, size: int, lr: float, momentum: float,
                 decay: float = RMSPROP_DECAY, eps: float = RMSPROP_EPS):
        if kind not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum, self.decay, self.eps = kind, lr, momentum, decay, eps
        self.rms = RmspropState.zeros(size)
        self.velocity = np.zeros(size)

    def step(self, weights: np.ndarray, grads: np.ndarray) -> None:
        if self.kind == "rmsprop":
            rmsprop_step(weights, self.rms, grads, self.decay, self.momentum, self.lr, self.eps)
        else:
            sgd_momentum_step(weights, self.velocity, grads, self.lr, self.momentum)

    def state_dict(self) -> dict:
        d = {"kind": self.kind, "lr": self.lr, "momentum": self.momentum, "decay": self.decay, "eps": self.eps}
        if self.kind == "rmsprop":
            d.update(n=self.rms.n, g=self.rms.g, delta=self.rms.delta)
        else:
            d.update(velocity=self.velocity)
        return d

    @classmethod
    def from_state_dict(cls, d: dict, size: int) -> "Optimizer":
        opt = cls(d["kind"], size, d["lr"], d["momentum"], d["decay"], d["eps"])
        if opt.kind == "rmsprop":
            opt.rms = RmspropState(np.array(d["n"]), np.array(d["g"]), np.array(d["delta"]))
        else:
            opt.velocity = np.array(d["velocity"])
        return opt


class NoiseHandle:
    def __init__(self, clean: np.ndarray):
        self._clean = clean

    def restore(self, params: ParamStore) -> ParamStore:
        params.flat[...] = self._clean
        return params


def perturb_weights(params: ParamStore, std: float, rng) -> tuple[ParamStore, NoiseHandle]:
    """Add Gaussian noise in place; the handle puts the clean weights back exactly."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    handle = NoiseHandle(params.flat.copy())
    if std > 0:
        params.flat += rng.normal(0.0, std, size=params.flat.shape)
    return params, handle


def parse_range(value: str):
    value = value.strip().lower()
    if value in ("none", "off", ""):
        return None
    parts = [float(p) for p in value.split(",")]
    if len(parts) == 1:
        return (-abs(parts[0]), abs(parts[0]))
    if len(parts) != 2 or parts[0] > parts[1]:
        raise ValueError(f"bad clip range {value!r}")
    return (parts[0], parts[1])


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"bad boolean {value!r}")


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    learning_rate: float = RMSPROP_LR
    momentum: float = RMSPROP_MOMENTUM
    decay: float = RMSPROP_DECAY
    epsilon: float = RMSPROP_EPS
    lstm_clip: tuple | None = (-10.0, 10.0)
    output_clip: tuple | None = (-100.0, 100.0)
    weight_noise_std: float = 0.0
    reset_period: float = 1
    shuffle: bool = False
    epochs: int = 1
    patience: int = 3
    seed: int = 0
    max_updates: int | None = None

    def __post_init__(self):
        for r in (self.lstm_clip, self.output_clip):
            if r is not None and r[0] > r[1]:
                raise ValueError("clip ranges must be ordered")
        if self.weight_noise_std < 0:
            raise ValueError("weight_noise_std must be >= 0")
        if not self.reset_period >= 1:
            raise ValueError("reset_period must be >= 1 or inf")

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = str(d[f.name])
            if f.name in ("lstm_clip", "output_clip"):
                kw[f.name] = parse_range(raw)
            elif f.name == "shuffle":
                kw[f.name] = _parse_bool(raw)
            elif f.name in ("epochs", "patience", "seed"):
                kw[f.name] = int(raw)
            elif f.name == "max_updates":
                kw[f.name] = None if raw.lower() == "none" else int(raw)
            elif f.name == "reset_period":
                kw[f.name] = math.inf if raw.lower() in ("inf", "never") else int(raw)
            elif f.name == "optimizer":
                kw[f.name] = raw
            else:
                kw[f.name] = float(raw)
        return cls(**kw)

    def make_optimizer(self, size: int) -> Optimizer:
        return Optimizer(self.optimizer, size, self.learning_rate, self.momentum, self.decay, self.epsilon)


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_good: ParamStore, history):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    updates: int = 0
    best_valid: float = math.inf
    stopped_early: bool = False


def evaluate(model, items, reset_period: float = math.inf) -> tuple[float, int]:
    """Summed loss (nats) and prediction count with frozen weights."""
    total, n, state = 0.0, 0, None
    for k, item in enumerate(items):
        if _reset_due(k, reset_period):
            state = None
        r = model.run(item, state, grad=False)
        total += r.loss
        n += r.n
        state = r.state
    return total, n


def _reset_due(k: int, period: float) -> bool:
    return k == 0 if period == math.inf else k % int(period) == 0


def train_loop(model, train_items, valid_items, config: TrainConfig, metrics_path=None,
               checkpoint_path=None, save_fn=None) -> TrainResult:
    """Stateful per-sequence training with early stopping.

    The recurrent state is carried from one item to the next and reset every
    ``reset_period`` items; gradients never flow across item boundaries.
    """
    if not train_items:
        raise ValueError("no training data")
    rng = make_rng(config.seed)
    opt = config.make_optimizer(model.params.flat.size)
    result = TrainResult()
    best_flat, bad_epochs = model.params.flat.copy(), 0
    metrics = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            last_good = model.params.copy()
            order = rng.permutation(len(train_items)) if config.shuffle else range(len(train_items))
            total, count, state = 0.0, 0, None
            for k, idx in enumerate(order):
                if _reset_due(k, config.reset_period):
                    state = None
                _, handle = perturb_weights(model.params, config.weight_noise_std, rng)
                r = model.run(train_items[idx], state, True, config.output_clip, config.lstm_clip)
                handle.restore(model.params)
                if not math.isfinite(r.loss) or not np.all(np.isfinite(r.grad.flat)):
                    if checkpoint_path and save_fn:
                        model.params.flat[...] = last_good.flat
                        save_fn(checkpoint_path, model, opt.state_dict())
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, item {k}", last_good,
                                          result.history)
                opt.step(model.params.flat, r.grad.flat)
                result.updates += 1
                total += r.loss
                count += r.n
                state = r.state
                if config.max_updates is not None and result.updates >= config.max_updates:
                    break
            row = {"epoch": epoch, "updates": result.updates, "train_loss": total / max(count, 1)}
            if valid_items:
                vloss, vn = evaluate(model, valid_items, config.reset_period)
                row["valid_loss"] = vloss / max(vn, 1)
                if row["valid_loss"] < result.best_valid:
                    result.best_valid = row["valid_loss"]
                    best_flat = model.params.flat.copy()
                    bad_epochs = 0
                else:
                    bad_epochs += 1
            else:
                best_flat = model.params.flat.copy()
            result.history.append(row)
            log.info("epoch %d: %s", epoch, row)
            if metrics:
                metrics.write(json.dumps(row) + "\n")
                metrics.flush()
            if checkpoint_path and save_fn:
                save_fn(checkpoint_path, model, opt.state_dict())
            if config.max_updates is not None and result.updates >= config.max_updates:
                break
            if valid_items and bad_epochs >= config.patience:
                result.stopped_early = True
                break
    finally:
        if metrics:
            metrics.close()
    model.params.flat[...] = best_flat
    if checkpoint_path and save_fn:
        save_fn(checkpoint_path, model, opt.state_dict())
    return result


def dynamic_evaluate(model, items, config: TrainConfig) -> tuple[float, float]:
    """Bits per prediction with frozen weights and with per-item adaptation.

    In the adaptive pass each item is scored before the update that uses it.
    The weights are restored afterwards.
    """
    snapshot = model.params.flat.copy()
    static_loss, n = evaluate(model, items, config.reset_period)
    opt = config.make_optimizer(model.params.flat.size)
    dyn_loss, state = 0.0, None
    try:
        for k, item in enumerate(items):
            if _reset_due(k, config.reset_period):
                state = None
            r = model.run(item, state, True, config.output_clip, config.lstm_clip)
            dyn_loss += r.loss
            state = r.state
            opt.step(model.params.flat, r.grad.flat)
    finally:
        model.params.flat[...] = snapshot
    scale = 1.0 / (max(n, 1) * math.log(2.0))
    return static_loss * scale, dyn_loss * scale
