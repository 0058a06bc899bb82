"""The three trainable model kinds: text, handwriting prediction, synthesis.

Each wraps a ParamStore together with the head it needs and knows how to turn
one training item into a loss, a gradient and the carried recurrent state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import Alphabet, NormStats, StrokeSeq, encode_transcript
from .lstm import Architecture, ParamStore, init_params, load_checkpoint, save_checkpoint, \
    stack_backward, stack_forward, zero_states
from .mdn import mdn_sequence_loss, output_size
from .softmax_head import Vocab, text_sequence_loss
from .window import synth_backward, synth_forward


@dataclass
class TextChunk:
    """A slice of a token stream; ``prev`` is the token just before it, if any."""
    ids: np.ndarray
    prev: int | None = None

    def __len__(self) -> int:
        return len(self.ids)


def chunk_tokens(ids, seq_len: int) -> list[TextChunk]:
    ids = np.asarray(ids, dtype=np.int64)
    out = []
    for a in range(0, len(ids), seq_len):
        out.append(TextChunk(ids[a:a + seq_len], int(ids[a - 1]) if a else None))
    return out


@dataclass
class RunResult:
    loss: float          # nats, summed over predictions
    n: int               # number of predictions scored
    grad: ParamStore | None
    state: list | None   # recurrent state after the item


def _clip(dy, clip_range):
    return dy if clip_range is None else np.clip(dy, clip_range[0], clip_range[1])


class TextModel:
    kind = "text"

    def __init__(self, params: ParamStore, vocab: Vocab, granularity: str = "char"):
        self.params = params
        self.vocab = vocab
        self.granularity = granularity

    @classmethod
    def create(cls, vocab: Vocab, layer_widths, seed: int, scale: float = 0.1,
               granularity: str = "char") -> "TextModel":
        K = len(vocab)
        return cls(init_params(Architecture(K, tuple(layer_widths), K), seed, scale), vocab, granularity)

    def inputs(self, item: TextChunk, fresh: bool) -> np.ndarray:
        K = len(self.vocab)
        X = np.zeros((len(item), K))
        if len(item) > 1:
            X[np.arange(1, len(item)), item.ids[:-1]] = 1.0
        if len(item) and not fresh and item.prev is not None:
            X[0, item.prev] = 1.0
        return X

    def run(self, item: TextChunk, state=None, grad: bool = True, output_clip=None, lstm_clip=None):
        fresh = state is None
        yhat, _, cache = stack_forward(self.params, self.inputs(item, fresh), state)
        loss, dy = text_sequence_loss(yhat, item.ids)
        g = None
        if grad:
            g, _, _ = stack_backward(self.params, cache, _clip(dy, output_clip), lstm_clip)
        return RunResult(loss, len(item), g, cache.final_states)

    def meta(self) -> dict:
        return {"kind": self.kind, "vocab": self.vocab.to_dict(), "granularity": self.granularity}


def stroke_inputs(points: np.ndarray) -> np.ndarray:
    """Shift a trace by one step, with a null vector in front."""
    X = np.zeros_like(points)
    X[1:] = points[:-1]
    return X


class HandwritingModel:
    kind = "handwriting"

    def __init__(self, params: ParamStore, M: int, norm: NormStats):
        self.params = params
        self.M = M
        self.norm = norm

    @classmethod
    def create(cls, M: int, layer_widths, norm: NormStats, seed: int, scale: float = 0.1):
        return cls(init_params(Architecture(3, tuple(layer_widths), output_size(M)), seed, scale), M, norm)

    def run(self, item: StrokeSeq, state=None, grad: bool = True, output_clip=None, lstm_clip=None):
        yhat, _, cache = stack_forward(self.params, stroke_inputs(item.points), state)
        loss, dy = mdn_sequence_loss(yhat, item.points, self.M)
        g = None
        if grad:
            g, _, _ = stack_backward(self.params, cache, _clip(dy, output_clip), lstm_clip)
        return RunResult(loss, len(item), g, cache.final_states)

    def meta(self) -> dict:
        return {"kind": self.kind, "mixtures": self.M, "norm": self.norm.to_dict()}


# with a zero bias the window would cross a whole word in a few steps and lose
# its gradient; about twenty pen points per character is a sane starting pace
DEFAULT_OFFSET_BIAS = -3.0


class SynthesisModel:
    kind = "synthesis"

    def __init__(self, params: ParamStore, M: int, alphabet: Alphabet, norm: NormStats):
        self.params = params
        self.M = M
        self.alphabet = alphabet
        self.norm = norm

    @classmethod
    def create(cls, M: int, K: int, alphabet: Alphabet, layer_widths, norm: NormStats, seed: int,
               scale: float = 0.1, offset_bias: float = DEFAULT_OFFSET_BIAS):
        """``offset_bias`` starts the window moving at exp(offset_bias) characters per step."""
        arch = Architecture(3, tuple(layer_widths), output_size(M), True, K, alphabet.size)
        params = init_params(arch, seed, scale)
        params["window.b"][2 * K:] = offset_bias
        return cls(params, M, alphabet, norm)

    def chars(self, text: str) -> np.ndarray:
        return encode_transcript(text, self.alphabet)

    def run(self, item: StrokeSeq, state=None, grad: bool = True, output_clip=None, lstm_clip=None):
        # every synthesis sequence starts from zero state, window at the origin
        yhat, _, cache = synth_forward(self.params, stroke_inputs(item.points), self.chars(item.text))
        loss, dy = mdn_sequence_loss(yhat, item.points, self.M)
        g = synth_backward(self.params, cache, _clip(dy, output_clip), lstm_clip) if grad else None
        return RunResult(loss, len(item), g, None)

    def meta(self) -> dict:
        return {"kind": self.kind, "mixtures": self.M, "alphabet": self.alphabet.chars,
                "norm": self.norm.to_dict()}


def save_model(path, model, optimizer_state: dict | None = None) -> None:
    save_checkpoint(path, model.params, optimizer_state, model.meta())


def load_model(path):
    params, opt, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "text":
        model = TextModel(params, Vocab.from_dict(meta["vocab"]), meta.get("granularity", "char"))
    elif kind == "handwriting":
        model = HandwritingModel(params, int(meta["mixtures"]), NormStats.from_dict(meta["norm"]))
    elif kind == "synthesis":
        model = SynthesisModel(params, int(meta["mixtures"]), Alphabet(meta["alphabet"]),
                               NormStats.from_dict(meta["norm"]))
    else:
        raise ValueError(f"checkpoint has unknown model kind {kind!r}")
    return model, opt


def fresh_state(model):
    return None if model.kind == "synthesis" else zero_states(model.params.arch)
