"""Free-running generation: text, unconditioned handwriting, synthesis, priming."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import StrokeSeq
from .lstm import PredictionStepper
from .mdn import apply_bias, mdn_sample
from .numkit import make_rng, sample_categorical, softmax_stable
from .window import SynthesisStepper, stop_check


@dataclass
class SampleConfig:
    max_steps: int | None = None   # None means 60 * len(text) + 300
    bias: float = 0.0
    seed: int = 0
    stop_mode: str = "heuristic"   # or "fixed"

    def __post_init__(self):
        if self.bias < 0:
            raise ValueError("bias must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.stop_mode not in ("heuristic", "fixed"):
            raise ValueError(f"unknown stop mode {self.stop_mode!r}")


def _tokens(model, text):
    gran = getattr(model, "granularity", "char")
    if gran == "byte":
        return list(text.encode("utf-8"))
    return text.split() if gran == "word" else list(text)


def sample_text(model, length: int, seed: int = 0, prime_text: str | None = None,
                argmax: bool = False) -> str:
    """Generate ``length`` symbols, optionally after feeding a priming string."""
    vocab = model.vocab
    K = len(vocab)
    rng = make_rng(seed)
    stepper = PredictionStepper(model.params)
    x = np.zeros(K)
    if length <= 0:
        return ""
    y = stepper.step(x)
    for idx in vocab.encode(_tokens(model, prime_text)) if prime_text else []:
        x = np.zeros(K)
        x[idx] = 1.0
        y = stepper.step(x)
    out = []
    for _ in range(length):
        idx = int(np.argmax(y)) if argmax else sample_categorical(softmax_stable(y), rng)
        out.append(idx)
        if len(out) == length:
            break
        x = np.zeros(K)
        x[idx] = 1.0
        y = stepper.step(x)
    return vocab.decode(out, " " if getattr(model, "granularity", "char") == "word" else "")


def sample_handwriting(model, steps: int = 700, seed: int = 0, bias: float = 0.0) -> StrokeSeq:
    rng = make_rng(seed)
    stepper = PredictionStepper(model.params)
    x = np.zeros(3)
    pts = []
    for _ in range(steps):
        y = stepper.step(x)
        x = mdn_sample(apply_bias(y, bias, model.M), rng)
        pts.append(x)
    return StrokeSeq(model.norm.invert(np.array(pts)))


@dataclass
class SynthSample:
    points: np.ndarray      # de-normalized (T, 3), may be empty
    phi: np.ndarray         # (steps, U+1) window weights, last column is u = U+1
    truncated: bool
    steps: int              # network steps taken after any priming
    prime_steps: int = 0

    @property
    def strokes(self) -> StrokeSeq:
        return StrokeSeq(self.points)


def _free_run(model, stepper, x, cfg: SampleConfig, max_steps: int, rng, phis):
    pts = []
    truncated = True
    steps = 0
    while steps < max_steps:
        y, ws = stepper.step(x)
        steps += 1
        phis.append(np.append(ws.phi, ws.phi_end))
        if cfg.stop_mode == "heuristic" and stop_check(phis[-1]):
            truncated = False
            break
        x = mdn_sample(apply_bias(y, cfg.bias, model.M), rng)
        pts.append(x)
    return pts, truncated, steps


def synth_sample(model, text: str, cfg: SampleConfig | None = None) -> SynthSample:
    cfg = cfg or SampleConfig()
    return primed_sample(model, None, "", text, cfg)


def primed_sample(model, prime_strokes: StrokeSeq | None, prime_text: str, synth_text: str,
                  cfg: SampleConfig | None = None) -> SynthSample:
    """Clamp the inputs to a real trace, then keep writing ``synth_text``.

    The prime trace is given in data units and normalized with the model's
    training statistics.  Predictions made while clamped are discarded.
    """
    cfg = cfg or SampleConfig()
    text = prime_text + synth_text
    if not text:
        raise ValueError("need at least one character to write")
    rng = make_rng(cfg.seed)
    stepper = SynthesisStepper(model.params, model.chars(text))
    max_steps = cfg.max_steps or 60 * len(synth_text or text) + 300
    phis = []
    x = np.zeros(3)
    prime = [] if prime_strokes is None else model.norm.apply(prime_strokes.points)
    for row in prime:
        _, ws = stepper.step(x)
        phis.append(np.append(ws.phi, ws.phi_end))
        x = row
    pts, truncated, steps = _free_run(model, stepper, x, cfg, max_steps, rng, phis)
    raw = model.norm.invert(np.array(pts)) if pts else np.zeros((0, 3))
    return SynthSample(raw, np.array(phis), truncated, steps, len(prime))
