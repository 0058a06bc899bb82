"""Command-line entry point: ``seqgen train|sample|eval|viz``.

Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr.
Usage errors and missing files exit with status 2, anything else with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data_io import Alphabet, StrokeSeq, load_strokes, load_text_corpus, make_split_manifests, \
    make_toy_glyph_corpus, normalize_offsets, read_manifest, save_strokes, tokenize
from .models import DEFAULT_OFFSET_BIAS, HandwritingModel, SynthesisModel, TextModel, chunk_tokens, \
    load_model, save_model
from .numkit import NumericError
from .sampler import SampleConfig, primed_sample, sample_handwriting, sample_text
from .trainer import TrainConfig, TrainingAborted, parse_range, dynamic_evaluate, evaluate, read_config, train_loop
from .viz import RenderSpec, render_density_heatmap, render_strokes_svg, render_window_heatmap



class UsageError(Exception):
    pass


# keys understood by ``train`` on top of the TrainConfig fields
DATA_KEYS = {
    "kind": "text",
    "data": None,
    "granularity": "char",
    "vocab_limit": None,
    "seq_len": "100",
    "valid_fraction": "0.05",
    "test_fraction": "0.05",
    "layers": "100",
    "mixtures": "20",
    "window_components": "10",
    "init_scale": "0.1",
    "offset_bias": str(DEFAULT_OFFSET_BIAS),
    "max_step": None,
    "train_split": None,
    "valid_split": None,
    "toy_symbols": "5",
    "toy_motif_len": "10",
    "toy_sequences": "2000",
    "toy_noise": "0.05",
    "checkpoint": "model.json",
    "metrics": None,
}
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _path(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _layers(value: str) -> tuple[int, ...]:
    widths = tuple(int(w) for w in value.split(","))
    if not widths or min(widths) < 1:
        raise ValueError(f"bad layer widths {value!r}")
    return widths


def _stroke_splits(seqs, cfg, base, seed):
    tr, va = _path(base, cfg["train_split"]), _path(base, cfg["valid_split"])
    if tr is not None:
        train_idx = read_manifest(_need_file(tr))
        valid_idx = read_manifest(_need_file(va)) if va is not None else []
    else:
        m = make_split_manifests(len(seqs), seed=seed)
        train_idx, valid_idx = m["train"], m["valid"]
    normed, stats = normalize_offsets(seqs, train_idx)
    return [normed[i] for i in train_idx], [normed[i] for i in valid_idx], stats


def build_training(raw: dict, base: Path, seed: int):
    """Turn a parsed config into (model, train items, valid items, TrainConfig, cfg)."""
    unknown = set(raw) - set(DATA_KEYS) - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = {**DATA_KEYS, **{k: v for k, v in raw.items() if k in DATA_KEYS}}
    train_raw = {k: v for k, v in raw.items() if k in TRAIN_KEYS}
    train_raw["seed"] = seed
    kind = cfg["kind"]
    widths = _layers(cfg["layers"])
    scale = float(cfg["init_scale"])
    if kind == "text":
        train_raw.setdefault("lstm_clip", "-1,1")
        data = _need_file(_path(base, cfg["data"] or ""))
        corpus = load_text_corpus(data, cfg["granularity"],
                                  int(cfg["vocab_limit"]) if cfg["vocab_limit"] else None,
                                  float(cfg["valid_fraction"]), float(cfg["test_fraction"]))
        seq_len = int(cfg["seq_len"])
        model = TextModel.create(corpus.vocab, widths, seed, scale, cfg["granularity"])
        train = chunk_tokens(corpus.split("train"), seq_len)
        valid = chunk_tokens(corpus.split("valid"), seq_len)
    elif kind in ("handwriting", "synthesis"):
        max_step = float(cfg["max_step"]) if cfg["max_step"] else None
        if cfg["data"] == "toy":
            seqs = make_toy_glyph_corpus(int(cfg["toy_symbols"]), int(cfg["toy_motif_len"]),
                                         int(cfg["toy_sequences"]), float(cfg["toy_noise"]), seed).sequences
        else:
            seqs = load_strokes(_need_file(_path(base, cfg["data"] or "")), max_step)
        train, valid, stats = _stroke_splits(seqs, cfg, base, seed)
        M = int(cfg["mixtures"])
        if kind == "handwriting":
            model = HandwritingModel.create(M, widths, stats, seed, scale)
        else:
            if any(s.text is None for s in seqs):
                raise ValueError("synthesis training needs a transcript for every sequence")
            alphabet = Alphabet.from_texts(s.text for s in train)
            model = SynthesisModel.create(M, int(cfg["window_components"]), alphabet, widths, stats,
                                          seed, scale, float(cfg["offset_bias"]))
            # synthesis sequences never carry state over
            train_raw.setdefault("reset_period", "1")
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model, train, valid, TrainConfig.from_mapping(train_raw), cfg


def cmd_train(args) -> dict:
    cfg_path = _need_file(args.config)
    raw = read_config(cfg_path)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    base = cfg_path.parent
    model, train, valid, tcfg, cfg = build_training(raw, base, seed)
    ckpt = Path(args.checkpoint) if args.checkpoint else _path(base, cfg["checkpoint"])
    metrics = _path(base, cfg["metrics"])
    try:
        result = train_loop(model, train, valid, tcfg, metrics, ckpt, save_model)
    except TrainingAborted as exc:
        raise NumericError(f"{exc}; last good weights saved to {ckpt}") from None
    return {"checkpoint": str(ckpt), "updates": result.updates, "epochs": len(result.history),
            "best_valid_loss": None if math.isinf(result.best_valid) else result.best_valid,
            "stopped_early": result.stopped_early}


def _first_prime(path, index: int) -> StrokeSeq:
    seqs = load_strokes(_need_file(path))
    if not 0 <= index < len(seqs):
        raise ValueError(f"{path} has no sequence {index}")
    return seqs[index]


def cmd_sample(args) -> dict:
    model, _ = load_model(_need_file(args.checkpoint))
    if args.mode == "text":
        if model.kind != "text":
            raise ValueError(f"checkpoint holds a {model.kind} model, not a text model")
        out = sample_text(model, args.length, args.seed, args.prime_text)
        if args.out:
            Path(args.out).write_text(out, encoding="utf-8")
            return {"out": args.out, "length": args.length}
        sys.stdout.write(out + "\n")
        return None
    if args.mode == "handwriting":
        if model.kind != "handwriting":
            raise ValueError(f"checkpoint holds a {model.kind} model, not a handwriting model")
        seq = sample_handwriting(model, args.steps, args.seed, args.bias)
        save_strokes(args.out, [seq])
        return {"out": args.out, "steps": len(seq)}
    if model.kind != "synthesis":
        raise ValueError(f"checkpoint holds a {model.kind} model, not a synthesis model")
    if not args.text:
        raise UsageError("--text is required for synth sampling")
    prime = _first_prime(args.prime_strokes, args.prime_index) if args.prime_strokes else None
    prime_text = args.prime_text if args.prime_text is not None else (prime.text or "" if prime else "")
    cfg = SampleConfig(args.max_steps, args.bias, args.seed, args.stop)
    res = primed_sample(model, prime, prime_text, args.text, cfg)
    if len(res.points):
        save_strokes(args.out, [StrokeSeq(res.points, args.text)])
    else:
        Path(args.out).write_text("")
    if args.phi_out:
        np.savetxt(args.phi_out, res.phi, fmt="%.17g")
    return {"out": args.out, "steps": res.steps, "points": len(res.points),
            "truncated": res.truncated, "prime_steps": res.prime_steps}


def _eval_config(args, model) -> TrainConfig:
    text = model.kind == "text"
    return TrainConfig(learning_rate=args.lr,
                       lstm_clip=parse_range(args.lstm_clip or ("-1,1" if text else "-10,10")),
                       reset_period=math.inf if text else 1, seed=args.seed)


def cmd_eval(args) -> dict:
    model, _ = load_model(_need_file(args.checkpoint))
    data = _need_file(args.data)
    if model.kind == "text":
        ids = model.vocab.encode(tokenize(data.read_bytes(), model.granularity))
        items = chunk_tokens(ids, args.seq_len)
    else:
        items = [StrokeSeq(model.norm.apply(s.points), s.text) for s in load_strokes(data)]
    cfg = _eval_config(args, model)
    if args.dynamic:
        static, dynamic = dynamic_evaluate(model, items, cfg)
    else:
        loss, n = evaluate(model, items, cfg.reset_period)
        static, dynamic = loss / (max(n, 1) * math.log(2.0)), None
    return _eval_report(model, items, static, dynamic)


def _eval_report(model, items, static, dynamic) -> dict:
    n = sum(len(i) for i in items)
    if model.kind == "text":
        out = {"static_bpc": static, "predictions": n}
        if dynamic is not None:
            out["dynamic_bpc"] = dynamic
        return out
    # stroke models: report summed nats per sequence
    per_seq = n * math.log(2.0) / max(len(items), 1)
    out = {"static_nats_per_sequence": static * per_seq, "sequences": len(items)}
    if dynamic is not None:
        out["dynamic_nats_per_sequence"] = dynamic * per_seq
    return out


def cmd_viz(args) -> dict:
    spec = RenderSpec(width=args.width, height=args.height)
    src = _need_file(args.input)
    if args.kind == "window":
        svg = render_window_heatmap(np.loadtxt(src, ndmin=2), spec)
    else:
        seq = _first_prime(src, args.index)
        if args.kind == "strokes":
            svg = render_strokes_svg(seq, spec)
        else:
            if not args.checkpoint:
                raise UsageError("--checkpoint is required for density maps")
            model, _ = load_model(_need_file(args.checkpoint))
            if model.kind == "text":
                raise ValueError("density maps need a handwriting or synthesis checkpoint")
            svg = render_density_heatmap(model, seq, spec, args.text)
    Path(args.out).write_text(svg, encoding="utf-8")
    return {"out": args.out}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqgen", description="Train and sample recurrent sequence generators.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key=value config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--checkpoint", default=None, help="overrides the config checkpoint path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=("text", "handwriting", "synth"), required=True)
    s.add_argument("--text", default=None, help="transcript to write (synth)")
    s.add_argument("--length", type=int, default=200, help="symbols to generate (text)")
    s.add_argument("--steps", type=int, default=700, help="points to generate (handwriting)")
    s.add_argument("--max-steps", type=int, default=None, help="cap on synthesis steps")
    s.add_argument("--stop", choices=("heuristic", "fixed"), default="heuristic")
    s.add_argument("--bias", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.add_argument("--phi-out", default=None, help="write the window weights as a text matrix")
    s.add_argument("--prime-strokes", default=None, help="stroke file whose sequence primes the writer")
    s.add_argument("--prime-index", type=int, default=0)
    s.add_argument("--prime-text", default=None)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a data file with a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--dynamic", action="store_true", help="also adapt the weights while scoring")
    e.add_argument("--seq-len", type=int, default=100)
    e.add_argument("--lr", type=float, default=1e-4)
    e.add_argument("--lstm-clip", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render strokes, densities or window weights as SVG")
    v.add_argument("input")
    v.add_argument("--kind", choices=("strokes", "density", "window"), required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--checkpoint", default=None)
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--text", default=None, help="transcript for synthesis density maps")
    v.add_argument("--width", type=int, default=800)
    v.add_argument("--height", type=int, default=240)
    v.add_argument("--seed", type=int, default=0, help="accepted for uniformity; rendering is deterministic")
    v.set_defaults(func=cmd_viz)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sample" and args.mode != "text" and not args.out:
            raise UsageError("--out is required for stroke sampling")
        report = args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc), 2)
    except NumericError as exc:
        return _fail("numeric", str(exc), 1)
    except (ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    if report is not None:
        sys.stdout.write(json.dumps(report) + "\n")
    return 0
