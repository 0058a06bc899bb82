"""SVG renderings: pen traces, summed predictive densities, window weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import StrokeSeq
from .mdn import bivariate_logdensity, split_outputs
from .models import stroke_inputs
from .lstm import stack_forward
from .numkit import logsumexp
from .window import synth_forward

DEFAULT_RAMP = ("#000004", "#3b0f70", "#8c2981", "#de4968", "#fe9f6d", "#fcfdbf")


@dataclass
class RenderSpec:
    width: int = 800
    height: int = 240
    margin: float = 10.0
    stroke_width: float = 1.5
    grid: tuple[int, int] = (160, 48)   # heatmap cells along x and y
    ramp: tuple[str, ...] = DEFAULT_RAMP
    background: str = "#ffffff"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or min(self.grid) <= 0 or self.stroke_width <= 0:
            raise ValueError("render dimensions must be positive")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _doc(spec: RenderSpec, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{spec.width}" '
            f'height="{spec.height}" viewBox="0 0 {spec.width} {spec.height}">')
    bg = f'<rect x="0" y="0" width="{spec.width}" height="{spec.height}" fill="{spec.background}"/>'
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head, bg, *body, "</svg>"]) + "\n"


def _points_of(seq) -> np.ndarray:
    if isinstance(seq, StrokeSeq):
        return seq.points
    pts = np.asarray(seq, dtype=np.float64)
    return pts.reshape(-1, 3) if pts.size else np.zeros((0, 3))


def stroke_polylines(seq) -> list[np.ndarray]:
    """Absolute pen positions, split into one array per stroke."""
    pts = _points_of(seq)
    if len(pts) == 0:
        return []
    pos = np.cumsum(pts[:, :2], axis=0)
    lines, start = [], 0
    for t in np.where(pts[:, 2] > 0.5)[0]:
        lines.append(pos[start:t + 1])
        start = t + 1
    if start < len(pts):
        lines.append(pos[start:])
    return lines


def _fit(xmin, xmax, ymin, ymax, spec: RenderSpec):
    w = max(xmax - xmin, 1e-9)
    h = max(ymax - ymin, 1e-9)
    scale = min((spec.width - 2 * spec.margin) / w, (spec.height - 2 * spec.margin) / h)
    # data y grows upward, screen y grows downward
    tx = spec.margin - xmin * scale
    ty = spec.margin + ymax * scale
    return scale, tx, ty


def render_strokes_svg(seq, spec: RenderSpec | None = None) -> str:
    spec = spec or RenderSpec()
    lines = stroke_polylines(seq)
    if not lines:
        return _doc(spec, [])
    allpts = np.concatenate(lines)
    scale, tx, ty = _fit(allpts[:, 0].min(), allpts[:, 0].max(), allpts[:, 1].min(), allpts[:, 1].max(), spec)
    body = [f'<g transform="translate({_fmt(tx)},{_fmt(ty)}) scale({_fmt(scale)},{_fmt(-scale)})" '
            f'fill="none" stroke="#000000" stroke-width="{_fmt(spec.stroke_width / scale)}" '
            f'stroke-linecap="round" stroke-linejoin="round">']
    for line in lines:
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in line)
        body.append(f'<polyline points="{coords}"/>')
    body.append("</g>")
    return _doc(spec, body)


def _hex(c: str) -> np.ndarray:
    c = c.lstrip("#")
    return np.array([int(c[i:i + 2], 16) for i in (0, 2, 4)], dtype=np.float64)


def ramp_color(v: float, ramp) -> str:
    """Map v in [0, 1] onto a piecewise-linear color ramp."""
    v = min(max(float(v), 0.0), 1.0)
    pos = v * (len(ramp) - 1)
    k = min(int(pos), len(ramp) - 2)
    frac = pos - k
    rgb = (1 - frac) * _hex(ramp[k]) + frac * _hex(ramp[k + 1])
    return "#" + "".join(f"{int(round(x)):02x}" for x in rgb)


def _predictive_outputs(model, pts, text):
    x = stroke_inputs(model.norm.apply(pts))
    if model.kind == "synthesis":
        if not text:
            raise ValueError("density maps for synthesis models need the transcript")
        yhat, _, _ = synth_forward(model.params, x, model.chars(text))
    else:
        yhat, _, _ = stack_forward(model.params, x)
    return split_outputs(yhat, model.M)


def density_grid(model, seq, spec: RenderSpec | None = None, text: str | None = None):
    """Summed next-point densities on a grid of absolute pen positions.

    Returns (values, xs, ys) with values[j, i] the sum over timesteps of the
    predicted density of the next pen position at (xs[i], ys[j]), in data
    units.
    """
    spec = spec or RenderSpec()
    pts = _points_of(seq)
    nx, ny = spec.grid
    if len(pts) == 0:
        return np.zeros((ny, nx)), np.zeros(nx), np.zeros(ny)
    if text is None and isinstance(seq, StrokeSeq):
        text = seq.text
    mix = _predictive_outputs(model, pts, text)
    pos = np.cumsum(pts[:, :2], axis=0)
    origin = np.vstack([np.zeros(2), pos[:-1]])   # where the pen is before step t
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1e-6)
    xs = np.linspace(lo[0] - pad[0], hi[0] + pad[0], nx)
    ys = np.linspace(lo[1] - pad[1], hi[1] + pad[1], ny)
    gx, gy = np.meshgrid(xs, ys)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    mean, std = model.norm.mean, model.norm.std
    jac = 1.0 / (std[0] * std[1])
    total = np.zeros(len(cells))
    for t in range(len(pts)):
        z = (cells - origin[t] - mean) / std
        log_n = bivariate_logdensity(z[:, None, :], mix.mu[t][None], mix.sigma[t][None], mix.rho[t][None])
        total += np.exp(logsumexp(mix.log_pi[t][None] + log_n, axis=1)) * jac
    return total.reshape(ny, nx), xs, ys


def _heat_cells(values: np.ndarray, spec: RenderSpec, log_scale: bool, flip_rows: bool) -> list[str]:
    ny, nx = values.shape
    cw = spec.width / nx
    ch = spec.height / ny
    pos = values > 0
    if not np.any(pos):
        return []
    if log_scale:
        lv = np.log(values[pos])
        lo, hi = lv.min(), lv.max()
        norm = np.zeros_like(values)
        norm[pos] = (lv - lo) / (hi - lo) if hi > lo else 1.0
    else:
        norm = values / values.max()
    body = []
    for j in range(ny):
        row = ny - 1 - j if flip_rows else j
        for i in range(nx):
            if not pos[j, i]:
                continue
            body.append(f'<rect x="{_fmt(i * cw)}" y="{_fmt(row * ch)}" width="{_fmt(cw)}" '
                        f'height="{_fmt(ch)}" fill="{ramp_color(norm[j, i], spec.ramp)}" '
                        f'data-value="{values[j, i]:.12g}"/>')
    return body


def render_density_heatmap(model, seq, spec: RenderSpec | None = None, text: str | None = None) -> str:
    spec = spec or RenderSpec()
    values, _, _ = density_grid(model, seq, spec, text)
    # grid row 0 is the lowest y, drawn at the bottom of the canvas
    return _doc(spec, _heat_cells(values, spec, log_scale=True, flip_rows=True))


def render_window_heatmap(phi, spec: RenderSpec | None = None) -> str:
    """Window weights with time along x and character index along y (first character at the bottom)."""
    spec = spec or RenderSpec()
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.size == 0:
        return _doc(spec, [])
    # rows of the heat grid are characters, columns are timesteps
    return _doc(spec, _heat_cells(phi.T, spec, log_scale=False, flip_rows=True))
