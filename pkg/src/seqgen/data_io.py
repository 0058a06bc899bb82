"""Text corpora, stroke files, normalization and the toy glyph corpus.

Stroke files are JSON lines, one sequence per line::

    {"text": "ab", "strokes": [[dx, dy, eos], ...]}

An optional ``"coords": "absolute"`` marks rows as absolute pen positions,
which are differenced into offsets on load.  Split manifests are plain text
files with one sequence (line) index per line.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import make_rng
from .softmax_head import Vocab

UNKNOWN_WORD = "<unk>"
NON_LETTER = "<non-letter>"
STD_FLOOR = 1e-6


def build_vocab(items, limit: int | None = None, unknown_symbol=UNKNOWN_WORD) -> Vocab:
    counts = Counter(items)
    first = {}
    for pos, s in enumerate(items):
        first.setdefault(s, pos)
    ordered = sorted(counts, key=lambda s: (-counts[s], first[s]))
    if limit is not None and len(ordered) > limit:
        return Vocab(ordered[:limit] + [unknown_symbol], unknown=limit)
    return Vocab(ordered)


@dataclass
class TextCorpus:
    ids: np.ndarray
    vocab: Vocab
    splits: dict = field(default_factory=dict)  # name -> (start, stop) into ids

    def split(self, name: str) -> np.ndarray:
        a, b = self.splits[name]
        return self.ids[a:b]


def tokenize(data: bytes, granularity: str) -> list:
    if granularity == "byte":
        return list(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(f"input is not valid UTF-8: {exc}") from None
    if granularity == "char":
        return list(text)
    if granularity == "word":
        return text.split()
    raise ValueError(f"unknown granularity {granularity!r}")


def load_text_corpus(path, granularity: str = "char", vocab_limit: int | None = None,
                     val_fraction: float = 0.05, test_fraction: float = 0.05) -> TextCorpus:
    """Read a corpus and split it into contiguous train / validation / test spans."""
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path} is empty")
    items = tokenize(data, granularity)
    vocab = build_vocab(items, vocab_limit if granularity == "word" else None)
    ids = vocab.encode(items)
    n = len(ids)
    n_test = int(n * test_fraction)
    n_val = int(n * val_fraction)
    n_train = n - n_val - n_test
    splits = {"train": (0, n_train), "valid": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    return TextCorpus(ids, vocab, splits)


@dataclass
class StrokeSeq:
    points: np.ndarray  # (T, 3) rows of dx, dy, eos
    text: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a stroke sequence needs at least one point")
        if not np.all(np.isin(self.points[:, 2], (0.0, 1.0))):
            raise ValueError("end-of-stroke flags must be 0 or 1")
        if not np.all(np.isfinite(self.points[:, :2])):
            raise ValueError("offsets must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def to_json(self) -> str:
        return json.dumps({"text": self.text, "strokes": self.points.tolist()})


def absolute_to_offsets(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    out = np.empty((len(rows) - 1, 3))
    out[:, :2] = np.diff(rows[:, :2], axis=0)
    out[:, 2] = rows[1:, 2] if rows.shape[1] > 2 else 0.0
    return out


def split_long_steps(points: np.ndarray, max_step: float) -> np.ndarray:
    """Replace each step longer than max_step by equal sub-steps on the same line.

    The end-of-stroke flag stays on the last sub-step, so pen lifts are kept.
    """
    rows = []
    for dx, dy, eos in points:
        n = max(1, math.ceil(math.hypot(dx, dy) / max_step))
        for k in range(n):
            rows.append((dx / n, dy / n, eos if k == n - 1 else 0.0))
    return np.array(rows)


def load_strokes(path, max_step: float | None = None) -> list[StrokeSeq]:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                rows = np.asarray(doc["strokes"], dtype=np.float64)
                if rows.ndim != 2 or rows.shape[1] != 3:
                    raise ValueError("rows must be [x, y, eos] triples")
                if doc.get("coords", "offset") == "absolute":
                    rows = absolute_to_offsets(rows)
                if max_step is not None:
                    rows = split_long_steps(rows, max_step)
                seqs.append(StrokeSeq(rows, doc.get("text")))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return seqs


def save_strokes(path, seqs) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in seqs), encoding="utf-8")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        out = np.array(points, dtype=np.float64)
        out[:, :2] = (out[:, :2] - self.mean) / self.std
        return out

    def invert(self, points: np.ndarray) -> np.ndarray:
        out = np.array(points, dtype=np.float64)
        out[:, :2] = out[:, :2] * self.std + self.mean
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(2), np.ones(2))


def normalize_offsets(dataset: list[StrokeSeq], train_indices=None):
    """Standardize offsets with statistics from the training sequences only."""
    if not dataset:
        raise ValueError("empty dataset")
    idx = range(len(dataset)) if train_indices is None else train_indices
    stacked = np.concatenate([dataset[i].points[:, :2] for i in idx])
    stats = NormStats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR))
    return [StrokeSeq(stats.apply(s.points), s.text) for s in dataset], stats


@dataclass
class Alphabet:
    chars: str

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    @property
    def non_letter(self) -> int:
        return len(self.chars)

    def index(self, ch: str) -> int:
        i = self.chars.find(ch)
        return self.non_letter if i < 0 or len(ch) != 1 else i

    def symbol(self, i: int) -> str:
        return self.chars[i] if i < len(self.chars) else NON_LETTER

    @classmethod
    def from_texts(cls, texts) -> "Alphabet":
        return cls("".join(sorted({ch for t in texts for ch in t})))


def encode_transcript(text: str, alphabet: Alphabet) -> np.ndarray:
    out = np.zeros((len(text), alphabet.size))
    for u, ch in enumerate(text):
        out[u, alphabet.index(ch)] = 1.0
    return out


@dataclass
class ToyGlyphCorpus:
    sequences: list[StrokeSeq]
    motifs: np.ndarray   # (n_symbols, motif_len, 3)
    symbols: str

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.symbols)


def make_motifs(n_symbols: int, motif_len: int, rng) -> np.ndarray:
    motifs = np.zeros((n_symbols, motif_len, 3))
    for s in range(n_symbols):
        heading = rng.uniform(-math.pi, math.pi)
        turn = rng.uniform(-0.6, 0.6)
        for k in range(motif_len):
            heading += turn + rng.normal(0.0, 0.3)
            motifs[s, k, :2] = (math.cos(heading), math.sin(heading))
        motifs[s, -1, 2] = 1.0
    return motifs


def make_toy_glyph_corpus(n_symbols: int, motif_len: int, n_sequences: int, noise_std: float,
                          seed: int, min_len: int = 2, max_len: int = 5) -> ToyGlyphCorpus:
    """Synthetic handwriting: each symbol is a fixed pen motif ending in a pen lift."""
    if n_symbols < 2:
        raise ValueError("need at least two symbols")
    if n_symbols > 26:
        raise ValueError("at most 26 symbols")
    rng = make_rng(seed)
    symbols = "abcdefghijklmnopqrstuvwxyz"[:n_symbols]
    motifs = make_motifs(n_symbols, motif_len, rng)
    seqs = []
    for _ in range(n_sequences):
        ids = rng.integers(0, n_symbols, size=int(rng.integers(min_len, max_len + 1)))
        pts = np.concatenate([motifs[i] for i in ids])
        if noise_std > 0:
            pts[:, :2] += rng.normal(0.0, noise_std, size=(len(pts), 2))
        seqs.append(StrokeSeq(pts, "".join(symbols[i] for i in ids)))
    return ToyGlyphCorpus(seqs, motifs, symbols)


def _resample(seg: np.ndarray, n: int) -> np.ndarray:
    if len(seg) == n:
        return seg
    src = np.linspace(0.0, 1.0, len(seg))
    dst = np.linspace(0.0, 1.0, n)
    return np.column_stack([np.interp(dst, src, seg[:, 0]), np.interp(dst, src, seg[:, 1])])


def nearest_motif_decode(points: np.ndarray, motifs: np.ndarray, symbols: str) -> str:
    """Cut a trace at pen lifts and label each piece with the closest motif."""
    points = np.asarray(points, dtype=np.float64)
    cuts = np.where(points[:, 2] > 0.5)[0]
    bounds = np.concatenate([[-1], cuts])
    if len(points) and (not len(cuts) or cuts[-1] != len(points) - 1):
        bounds = np.append(bounds, len(points) - 1)
    out = []
    L = motifs.shape[1]
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = points[a + 1:b + 1, :2]
        if len(seg) == 0:
            continue
        seg = _resample(seg, L)
        dists = np.sum((motifs[:, :, :2] - seg[None]) ** 2, axis=(1, 2))
        out.append(symbols[int(np.argmin(dists))])
    return "".join(out)


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def make_split_manifests(n: int, fractions=(0.9, 0.05, 0.05), seed: int = 0) -> dict:
    order = make_rng(seed).permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return {
        "train": sorted(order[:n_train].tolist()),
        "valid": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }


def write_manifest(path, indices) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in indices))


def read_manifest(path) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]
