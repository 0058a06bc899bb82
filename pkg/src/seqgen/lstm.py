"""Deep peephole-LSTM stack with skip connections and full BPTT.

Every layer sees the raw input, the layer below (if any) and, for conditioned
nets, a window vector; every layer also feeds the output layer directly.

Parameter layout (all views alias one flat float64 vector)::

    layer{n}.W_x   (4H, D)  columns ordered [input | below | window]
    layer{n}.W_h   (4H, H)  recurrent weights
    layer{n}.b     (4H,)
    layer{n}.peep  (3, H)   diagonal cell-to-gate weights for i, f, o
    out.W{n}       (O, H_n)
    out.b          (O,)
    window.W       (3K, H_1)   only when the architecture has a window
    window.b       (3K,)

Gate rows are stacked in the order input, forget, cell, output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit import NumericError, ShapeError, make_rng, sigmoid

GATES = ("i", "f", "c", "o")
CHECKPOINT_FORMAT = "seqgen-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_size: int
    layer_widths: tuple[int, ...]
    output_size: int
    has_window: bool = False
    window_K: int = 0
    alphabet_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths:
            raise ValueError("need at least one hidden layer")
        sizes = (self.input_size, self.output_size, *self.layer_widths)
        if min(sizes) < 1:
            raise ValueError("all sizes must be >= 1")
        if self.has_window and (self.window_K < 1 or self.alphabet_size < 1):
            raise ValueError("windowed nets need window_K >= 1 and alphabet_size >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    @property
    def window_size(self) -> int:
        return self.alphabet_size if self.has_window else 0

    def layer_input_size(self, n: int) -> int:
        below = self.layer_widths[n - 1] if n > 0 else 0
        return self.input_size + below + self.window_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def _layout(arch: Architecture) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for n, H in enumerate(arch.layer_widths):
        shapes += [
            (f"layer{n}.W_x", (4 * H, arch.layer_input_size(n))),
            (f"layer{n}.W_h", (4 * H, H)),
            (f"layer{n}.b", (4 * H,)),
            (f"layer{n}.peep", (3, H)),
        ]
    for n, H in enumerate(arch.layer_widths):
        shapes.append((f"out.W{n}", (arch.output_size, H)))
    shapes.append(("out.b", (arch.output_size,)))
    if arch.has_window:
        shapes += [
            ("window.W", (3 * arch.window_K, arch.layer_widths[0])),
            ("window.b", (3 * arch.window_K,)),
        ]
    return shapes


def param_count(arch: Architecture) -> int:
    total = 0
    I, O, A = arch.input_size, arch.output_size, arch.window_size
    prev = 0
    for H in arch.layer_widths:
        total += 4 * H * (I + prev + A) + 4 * H * H + 4 * H + 3 * H + O * H
        prev = H
    total += O
    if arch.has_window:
        total += 3 * arch.window_K * (arch.layer_widths[0] + 1)
    return total


@dataclass
class LayerBlock:
    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray
    peep: np.ndarray


class ParamStore:
    """Flat parameter vector with named views into it."""

    def __init__(self, arch: Architecture, flat: np.ndarray | None = None):
        self.arch = arch
        n = param_count(arch)
        if flat is None:
            flat = np.zeros(n)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({n},)")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        pos = 0
        for name, shape in _layout(arch):
            size = int(np.prod(shape))
            self.views[name] = flat[pos:pos + size].reshape(shape)
            pos += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def names(self) -> list[str]:
        return list(self.views)

    def layer(self, n: int) -> LayerBlock:
        v = self.views
        return LayerBlock(v[f"layer{n}.W_x"], v[f"layer{n}.W_h"], v[f"layer{n}.b"], v[f"layer{n}.peep"])

    def gate(self, name: str, gate: str) -> np.ndarray:
        """Rows of a stacked gate matrix or bias belonging to one gate."""
        n = int(name.split(".")[0][len("layer"):])
        H = self.arch.layer_widths[n]
        k = GATES.index(gate)
        return self.views[name][k * H:(k + 1) * H]

    def input_weights(self, n: int) -> np.ndarray:
        return self.views[f"layer{n}.W_x"][:, :self.arch.input_size]

    def below_weights(self, n: int) -> np.ndarray:
        I = self.arch.input_size
        below = self.arch.layer_widths[n - 1] if n > 0 else 0
        return self.views[f"layer{n}.W_x"][:, I:I + below]

    def window_weights(self, n: int) -> np.ndarray:
        A = self.arch.window_size
        W = self.views[f"layer{n}.W_x"]
        return W[:, W.shape[1] - A:]

    def copy(self) -> "ParamStore":
        return ParamStore(self.arch, self.flat.copy())

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.arch)


def init_params(arch: Architecture, seed: int, scale: float = 0.1) -> ParamStore:
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = make_rng(seed)
    params = ParamStore(arch)
    for name, view in params.views.items():
        leaf = name.split(".")[1]
        if leaf.startswith("W"):
            view[...] = rng.uniform(-scale, scale, size=view.shape)
    return params


@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, width: int) -> "LayerState":
        return cls(np.zeros(width), np.zeros(width))

    def copy(self) -> "LayerState":
        return LayerState(self.h.copy(), self.c.copy())


def zero_states(arch: Architecture) -> list[LayerState]:
    return [LayerState.zeros(H) for H in arch.layer_widths]


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    acts: np.ndarray  # i, f, cell input, o after their squashing functions
    c: np.ndarray
    tanh_c: np.ndarray


def _cell(block: LayerBlock, a: np.ndarray, h_prev, c_prev):
    # a holds the input and bias contributions; add recurrent and peephole terms
    H = h_prev.shape[0]
    a = a + block.W_h @ h_prev
    peep = block.peep
    i = sigmoid(a[:H] + peep[0] * c_prev)
    f = sigmoid(a[H:2 * H] + peep[1] * c_prev)
    g = np.tanh(a[2 * H:3 * H])
    c = f * c_prev + i * g
    o = sigmoid(a[3 * H:] + peep[2] * c)
    tanh_c = np.tanh(c)
    return o * tanh_c, c, np.concatenate([i, f, g, o]), tanh_c


def lstm_cell_step(block: LayerBlock, x_t, h_prev, c_prev):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (block.W_x.shape[1],) or h_prev.shape != (block.W_h.shape[1],):
        raise ShapeError("cell input shapes do not match the parameter block")
    h, c, acts, tanh_c = _cell(block, block.W_x @ x_t + block.b, h_prev, c_prev)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise NumericError("non-finite LSTM activation")
    return h, c, StepCache(x_t, h_prev, c_prev, acts, c, tanh_c)


def _clip(v, clip_range):
    if clip_range is None:
        return v
    return np.clip(v, clip_range[0], clip_range[1])


def cell_backward_step(block: LayerBlock, cache: StepCache, dh, dc_next, clip_range=None):
    """Backprop one timestep.

    ``dh`` is the full derivative reaching h_t, ``dc_next`` the derivative
    reaching c_t from timestep t+1.  Returns the clipped pre-activation
    derivative and the derivatives for h_{t-1} and c_{t-1}.
    """
    H = dh.shape[0]
    acts = cache.acts
    i, f, g, o = acts[:H], acts[H:2 * H], acts[2 * H:3 * H], acts[3 * H:]
    peep = block.peep
    da_o = _clip(dh * cache.tanh_c * o * (1.0 - o), clip_range)
    dc = dh * o * (1.0 - cache.tanh_c ** 2) + da_o * peep[2] + dc_next
    da_i = dc * g * i * (1.0 - i)
    da_f = dc * cache.c_prev * f * (1.0 - f)
    da_g = dc * i * (1.0 - g * g)
    da = _clip(np.concatenate([da_i, da_f, da_g]), clip_range)
    dc_prev = dc * f + da[:H] * peep[0] + da[H:2 * H] * peep[1]
    da = np.concatenate([da, da_o])
    return da, block.W_h.T @ da, dc_prev


@dataclass
class LayerCache:
    inputs: np.ndarray  # (T, D) concatenated layer inputs
    steps: list[StepCache]
    h0: np.ndarray
    c0: np.ndarray


def layer_forward(block: LayerBlock, inputs: np.ndarray, state: LayerState):
    """Run one layer over a whole (T, D) input matrix."""
    T = inputs.shape[0]
    proj = inputs @ block.W_x.T + block.b if T else np.zeros((0, block.b.shape[0]))
    h, c = state.h, state.c
    steps, hs = [], []
    for t in range(T):
        h_new, c_new, acts, tanh_c = _cell(block, proj[t], h, c)
        steps.append(StepCache(inputs[t], h, c, acts, c_new, tanh_c))
        hs.append(h_new)
        h, c = h_new, c_new
    H = block.W_h.shape[1]
    hmat = np.array(hs) if hs else np.zeros((0, H))
    return hmat, LayerState(h, c), LayerCache(inputs, steps, state.h, state.c)


def layer_backward(block: LayerBlock, cache: LayerCache, dh_seq: np.ndarray, clip_range=None,
                   dh_last=None, dc_last=None):
    """BPTT through one layer.

    Returns (dA, grads, dinputs, dh0, dc0) where dA holds the clipped
    pre-activation derivatives and grads is a LayerBlock of weight gradients.
    """
    T = len(cache.steps)
    H = block.W_h.shape[1]
    dA = np.zeros((T, 4 * H))
    dh_rec = np.zeros(H) if dh_last is None else dh_last
    dc_next = np.zeros(H) if dc_last is None else dc_last
    for t in range(T - 1, -1, -1):
        da, dh_rec, dc_next = cell_backward_step(block, cache.steps[t], dh_seq[t] + dh_rec, dc_next, clip_range)
        dA[t] = da
    grads = layer_grads(block, cache, dA)
    return dA, grads, dA @ block.W_x, dh_rec, dc_next


def layer_grads(block: LayerBlock, cache: LayerCache, dA: np.ndarray) -> LayerBlock:
    H = block.W_h.shape[1]
    T = len(cache.steps)
    if T == 0:
        return LayerBlock(np.zeros_like(block.W_x), np.zeros_like(block.W_h),
                          np.zeros_like(block.b), np.zeros_like(block.peep))
    h_prev = np.array([s.h_prev for s in cache.steps])
    c_prev = np.array([s.c_prev for s in cache.steps])
    c_cur = np.array([s.c for s in cache.steps])
    dpeep = np.stack([
        np.sum(dA[:, :H] * c_prev, axis=0),
        np.sum(dA[:, H:2 * H] * c_prev, axis=0),
        np.sum(dA[:, 3 * H:] * c_cur, axis=0),
    ])
    return LayerBlock(dA.T @ cache.inputs, dA.T @ h_prev, dA.sum(axis=0), dpeep)


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    hidden: list[np.ndarray]
    final_states: list[LayerState]
    window_inputs: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def output_forward(params: ParamStore, hidden: list[np.ndarray]) -> np.ndarray:
    T = hidden[0].shape[0]
    y = np.tile(params["out.b"], (T, 1))
    for n, h in enumerate(hidden):
        y += h @ params[f"out.W{n}"].T
    return y


def _find_nonfinite(hidden: list[np.ndarray]):
    for n, h in enumerate(hidden):
        bad = np.where(~np.all(np.isfinite(h), axis=1))[0]
        if bad.size:
            raise NumericError(f"non-finite activation at timestep {int(bad[0])} in layer {n}")


def stack_forward(params: ParamStore, x_seq, init_states=None, window_inputs=None):
    """Forward pass of the skip-connected stack.

    ``window_inputs`` (T, A) is an optional conditioning matrix fed to every
    layer at the same timestep.  Returns (yhat, hidden, cache).
    """
    arch = params.arch
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.size == 0:
        x_seq = np.zeros((0, arch.input_size))
    if x_seq.ndim != 2 or x_seq.shape[1] != arch.input_size:
        raise ShapeError(f"input rows must have {arch.input_size} entries")
    T = x_seq.shape[0]
    if arch.has_window:
        if window_inputs is None:
            window_inputs = np.zeros((T, arch.window_size))
        window_inputs = np.asarray(window_inputs, dtype=np.float64)
        if window_inputs.shape != (T, arch.window_size):
            raise ShapeError("window inputs do not match sequence length and alphabet size")
    elif window_inputs is not None:
        raise ShapeError("architecture has no window inputs")
    states = zero_states(arch) if init_states is None else init_states
    if len(states) != arch.n_layers:
        raise ShapeError("one state per layer required")
    hidden, layer_caches, finals = [], [], []
    below = None
    for n in range(arch.n_layers):
        parts = [x_seq] + ([below] if below is not None else []) + \
            ([window_inputs] if arch.has_window else [])
        inputs = np.concatenate(parts, axis=1)
        h, final, lc = layer_forward(params.layer(n), inputs, states[n])
        hidden.append(h)
        layer_caches.append(lc)
        finals.append(final)
        below = h
    _find_nonfinite(hidden)
    yhat = output_forward(params, hidden)
    return yhat, hidden, ForwardCache(layer_caches, hidden, finals, window_inputs)


def output_backward(params: ParamStore, grad: ParamStore, hidden, dyhat):
    grad["out.b"][...] += dyhat.sum(axis=0)
    dh = []
    for n, h in enumerate(hidden):
        W = params[f"out.W{n}"]
        grad[f"out.W{n}"][...] += dyhat.T @ h
        dh.append(dyhat @ W)
    return dh


def _store_layer_grads(grad: ParamStore, n: int, g: LayerBlock):
    grad[f"layer{n}.W_x"][...] += g.W_x
    grad[f"layer{n}.W_h"][...] += g.W_h
    grad[f"layer{n}.b"][...] += g.b
    grad[f"layer{n}.peep"][...] += g.peep


def stack_backward(params: ParamStore, cache: ForwardCache, dyhat, clip_range=None):
    """Full BPTT.  Returns (grad, dstates, dwindow).

    ``dstates`` holds (dh0, dc0) per layer; ``dwindow`` is the derivative for
    the window inputs or None for unconditioned nets.
    """
    if cache is None:
        raise ValueError("backward pass needs the cache from a forward pass")
    arch = params.arch
    dyhat = np.asarray(dyhat, dtype=np.float64)
    grad = params.zeros_like()
    T = cache.hidden[0].shape[0]
    if dyhat.shape != (T, arch.output_size):
        raise ShapeError("output derivative does not match the forward pass")
    dh = output_backward(params, grad, cache.hidden, dyhat)
    I = arch.input_size
    dwindow = np.zeros((T, arch.window_size)) if arch.has_window else None
    dstates = [None] * arch.n_layers
    for n in range(arch.n_layers - 1, -1, -1):
        block = params.layer(n)
        _, g, dinputs, dh0, dc0 = layer_backward(block, cache.layers[n], dh[n], clip_range)
        _store_layer_grads(grad, n, g)
        dstates[n] = (dh0, dc0)
        if n > 0:
            dh[n - 1] = dh[n - 1] + dinputs[:, I:I + arch.layer_widths[n - 1]]
        if arch.has_window:
            dwindow += dinputs[:, dinputs.shape[1] - arch.window_size:]
    return grad, dstates, dwindow


def _encode_array(a) -> list:
    return np.asarray(a, dtype=np.float64).ravel().tolist()


def save_checkpoint(path, params: ParamStore, optimizer_state: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a JSON checkpoint.

    Layout: {"format", "version", "arch", "params": [...flat floats...],
    "optimizer": {"kind", "buffers": {name: [...]}} | null, "meta": {...}}.
    Floats are written with Python's shortest round-trip repr, so reloading
    reproduces the flat vector bit for bit.
    """
    opt = None
    if optimizer_state is not None:
        opt = {k: (_encode_array(v) if isinstance(v, np.ndarray) else v)
               for k, v in optimizer_state.items()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "params": _encode_array(params.flat),
        "optimizer": opt,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arch = Architecture.from_dict(doc["arch"])
    params = ParamStore(arch, np.array(doc["params"], dtype=np.float64))
    opt = doc.get("optimizer")
    if opt is not None:
        opt = {k: (np.array(v, dtype=np.float64) if isinstance(v, list) else v) for k, v in opt.items()}
    return params, opt, doc.get("meta", {})


class PredictionStepper:
    """Incremental forward pass for free-running generation."""

    def __init__(self, params: ParamStore, states: list[LayerState] | None = None):
        if params.arch.has_window:
            raise ShapeError("use the synthesis stepper for windowed nets")
        self.params = params
        self.states = [s.copy() for s in states] if states is not None else zero_states(params.arch)

    def step(self, x_t) -> np.ndarray:
        p = self.params
        x_t = np.asarray(x_t, dtype=np.float64)
        y = p["out.b"].copy()
        below = None
        for n in range(p.arch.n_layers):
            blk = p.layer(n)
            inp = x_t if below is None else np.concatenate([x_t, below])
            st = self.states[n]
            h, c, _, _ = _cell(blk, blk.W_x @ inp + blk.b, st.h, st.c)
            self.states[n] = LayerState(h, c)
            y += p[f"out.W{n}"] @ h
            below = h
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite output during sampling")
        return y
