"""End-to-end acceptance checks. Each test records one PASS/FAIL line in the run summary."""

import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from oracles import central_diff, rel_err
from seqgen.cli import main
from seqgen.data_io import (
    build_vocab, edit_distance, load_text_corpus, make_toy_glyph_corpus, nearest_motif_decode, normalize_offsets,
    save_strokes,
)
from seqgen.lstm import Architecture, init_params, stack_backward, stack_forward
from seqgen.mdn import apply_bias, mdn_sample, mdn_sequence_loss, mixture_density, output_size, split_outputs
from seqgen.models import SynthesisModel, TextChunk, TextModel, chunk_tokens
from seqgen.numkit import make_rng
from seqgen.sampler import SampleConfig, primed_sample, sample_text, synth_sample
from seqgen.softmax_head import bpc_to_perplexity, text_sequence_loss
from seqgen.trainer import (
    RMSPROP_DECAY, RMSPROP_EPS, RMSPROP_LR, RMSPROP_MOMENTUM, RmspropState, TrainConfig, dynamic_evaluate, evaluate,
    rmsprop_step, train_loop,
)
from seqgen.window import SynthesisStepper, encode_one_hot, synth_backward, synth_forward, window_backward, window_step

DATA = Path(__file__).parent / "data"
FD_TOL = 1e-4
FD_STEP = 1e-5
PHRASE = "The quick brown fox jumps over the lazy dog while the patient owl watches from a crooked oak branch."


def _fd_error(analytic, loss_fn, flat):
    """Worst relative error against central differences, and the same figure with a bare 1e-8 floor.

    A difference quotient in doubles cannot resolve anything below about
    eps * |loss| / step, so entries under that level are judged on it
    instead of on their own (meaningless) relative error.
    """
    fd = central_diff(loss_fn, flat, step=FD_STEP)
    num = np.array([fd[i] for i in range(flat.size)])
    a = np.ravel(analytic)
    resolution = 4 * np.finfo(np.float64).eps * abs(loss_fn()) / FD_STEP
    scale = np.maximum(np.maximum(np.abs(a), np.abs(num)), resolution / FD_TOL)
    return float(np.max(np.abs(a - num) / scale)), float(np.max(rel_err(a, num)))


def _uniform_net(arch, seed, scale=0.5):
    params = init_params(arch, seed, scale)
    params.flat[...] = make_rng(seed + 500).uniform(-scale, scale, size=params.flat.size)
    return params


def _strokes(rng, T):
    return np.column_stack([rng.normal(size=(T, 2)), rng.integers(2, size=T)]).astype(float)


def _lstm_error(seed):
    params = _uniform_net(Architecture(3, (6, 5), 3), seed)
    rng = make_rng(seed)
    x, target = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))

    def loss():
        return 0.5 * np.sum((stack_forward(params, x)[0] - target) ** 2)

    y, _, cache = stack_forward(params, x)
    grad, _, _ = stack_backward(params, cache, y - target)
    return _fd_error(grad.flat, loss, params.flat)


def _softmax_error(seed):
    rng = make_rng(seed)
    y = rng.normal(size=(20, 8)) * 2
    t = rng.integers(8, size=20)
    _, dy = text_sequence_loss(y, t)
    return _fd_error(dy, lambda: text_sequence_loss(y, t)[0], y.reshape(-1))


def _text_net_error(seed):
    vocab = build_vocab(list("abcdef"))
    model = TextModel.create(vocab, (5, 4), seed, scale=0.5)
    item = TextChunk(make_rng(seed).integers(6, size=12), prev=int(seed % 6))
    r = model.run(item, None, grad=True, output_clip=None, lstm_clip=None)
    return _fd_error(r.grad.flat, lambda: model.run(item, None, grad=False).loss, model.params.flat)


def _mdn_error(seed):
    M = 3
    rng = make_rng(seed)
    y = rng.normal(size=(20, output_size(M)))
    target = _strokes(rng, 20)
    _, dy = mdn_sequence_loss(y, target, M)
    return _fd_error(dy, lambda: mdn_sequence_loss(y, target, M)[0], y.reshape(-1))


def _window_error(seed):
    K, U, T = 2, 6, 12
    rng = make_rng(seed)
    chars = encode_one_hot(rng.integers(4, size=U), 4)
    p = rng.normal(size=(T, 3 * K)) * 0.5
    r = rng.normal(size=(T, 4))

    def run():
        kappa, caches, total = np.zeros(K), [], 0.0
        for t in range(T):
            ws, cache = window_step(p[t], kappa, chars)
            kappa = ws.kappa
            caches.append(cache)
            total += float(ws.w @ r[t])
        return total, caches

    _, caches = run()
    dp, dk_next = np.zeros_like(p), np.zeros(K)
    for t in reversed(range(T)):
        da, db, dk, dk_next = window_backward(caches[t], r[t], dk_next)
        dp[t] = np.concatenate([da, db, dk])
    return _fd_error(dp, lambda: run()[0], p.reshape(-1))


def _synthesis_error(seed):
    M, K, A, U, T = 3, 2, 4, 5, 12
    params = _uniform_net(Architecture(3, (6, 5), output_size(M), True, K, A), seed)
    rng = make_rng(seed)
    x, target = _strokes(rng, T), _strokes(rng, T)
    chars = encode_one_hot(rng.integers(A, size=U), A)

    def loss():
        return mdn_sequence_loss(synth_forward(params, x, chars)[0], target, M)[0]

    y, _, cache = synth_forward(params, x, chars)
    _, dy = mdn_sequence_loss(y, target, M)
    return _fd_error(synth_backward(params, cache, dy).flat, loss, params.flat)


GRADIENT_PATHS = {
    "lstm": _lstm_error, "softmax": _softmax_error, "text-net": _text_net_error, "mdn": _mdn_error,
    "window": _window_error, "synthesis": _synthesis_error,
}


def test_gradients_match_finite_differences(verdict):
    start = time.perf_counter()
    worst, raw = {}, {}
    for name, fn in GRADIENT_PATHS.items():
        errs = [fn(seed) for seed in range(10)]
        worst[name] = max(e[0] for e in errs)
        raw[name] = max(e[1] for e in errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < FD_TOL and elapsed < 120
    detail = (", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; 10 seeds in {elapsed:.0f}s"
              + f"; with a bare 1e-8 floor the worst is {max(raw.values()):.1e}")
    assert verdict(1, "analytic gradients vs central differences", ok, detail)


def test_mixture_density_integrates_to_one(verdict):
    rng = make_rng(11)
    errors = []
    for _ in range(20):
        M = int(rng.integers(1, 4))
        mix = split_outputs(rng.normal(size=output_size(M)) * 0.5, M)
        lo = np.min(mix.mu - 6 * mix.sigma, axis=0)
        hi = np.max(mix.mu + 6 * mix.sigma, axis=0)
        gx, gy = np.linspace(lo[0], hi[0], 1201), np.linspace(lo[1], hi[1], 1201)
        xx, yy = np.meshgrid(gx, gy)
        dens = mixture_density(mix, np.column_stack([xx.ravel(), yy.ravel()]))
        errors.append(abs(dens.sum() * (gx[1] - gx[0]) * (gy[1] - gy[0]) - 1.0))
    ok = max(errors) <= 1e-2
    assert verdict(2, "mixture density mass on a 6-sigma grid", ok, f"20 mixtures, max |mass - 1| = {max(errors):.1e}")


def _hand_rmsprop(w, n, g, d, grad):
    a, b, lr, eps = 0.95, 0.9, 1e-4, 1e-4
    n = [a * ni + (1 - a) * gi * gi for ni, gi in zip(n, grad)]
    g = [a * gi_ + (1 - a) * gi for gi_, gi in zip(g, grad)]
    d = [b * di - lr * gi / math.sqrt(ni - mi * mi + eps) for di, gi, ni, mi in zip(d, grad, n, g)]
    return [wi + di for wi, di in zip(w, d)], n, g, d


def test_rmsprop_and_perplexity_formulas(verdict):
    rng = make_rng(12)
    w = rng.normal(size=9)
    state = RmspropState.zeros(9)
    hand = (w.tolist(), [0.0] * 9, [0.0] * 9, [0.0] * 9)
    err = 0.0
    for _ in range(5):
        grad = rng.normal(size=9) * 3
        rmsprop_step(w, state, grad)
        hand = _hand_rmsprop(*hand, grad.tolist())
        err = max(err, float(np.max(np.abs(w - hand[0]))), float(np.max(np.abs(state.delta - hand[3]))))
    constants = (RMSPROP_DECAY, RMSPROP_MOMENTUM, RMSPROP_LR, RMSPROP_EPS) == (0.95, 0.9, 1e-4, 1e-4)
    ppl = bpc_to_perplexity(1.24, 5.6), bpc_to_perplexity(1.32, 5.6)
    ok = err <= 1e-12 and constants and 121 <= ppl[0] <= 126 and 165 <= ppl[1] <= 170
    assert verdict(3, "rmsprop update and perplexity conversion", ok,
                   f"max deviation {err:.1e} over 5 steps, perplexities {ppl[0]:.1f} and {ppl[1]:.1f}")


def test_overfit_single_string(verdict):
    start = time.perf_counter()
    vocab = build_vocab(list(PHRASE))
    model = TextModel.create(vocab, (64,), 0)
    item = [TextChunk(vocab.encode(list(PHRASE)))]
    train_loop(model, item, [], TrainConfig(epochs=2000, lstm_clip=(-1, 1)))
    loss, n = evaluate(model, item)
    bits = loss / n / math.log(2)
    regenerated = sample_text(model, len(PHRASE), argmax=True)
    elapsed = time.perf_counter() - start
    ok = bits < 0.15 and regenerated == PHRASE and elapsed < 180
    assert verdict(4, "memorize a 100-character string", ok,
                   f"{bits:.2e} bpc after 2000 steps, exact argmax replay {regenerated == PHRASE}, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def shakespeare():
    raw = (DATA / "shakespeare.txt").read_bytes()
    corpus = load_text_corpus(DATA / "shakespeare.txt", "char")
    model = TextModel.create(corpus.vocab, (128,), 0)
    start = time.perf_counter()
    cfg = TrainConfig(learning_rate=1e-3, lstm_clip=(-1, 1), reset_period=math.inf, max_updates=2000)
    train_loop(model, chunk_tokens(corpus.split("train"), 100), [], cfg)
    return model, corpus, raw.decode("utf-8"), time.perf_counter() - start


def _entropy_bits(text):
    counts = Counter(text)
    total = sum(counts.values())
    return -sum(c / total * math.log2(c / total) for c in counts.values())


def test_beats_unigram_entropy(shakespeare, verdict):
    model, corpus, text, minutes = shakespeare[0], shakespeare[1], shakespeare[2], shakespeare[3] / 60
    lo, hi = corpus.splits["valid"]
    baseline = _entropy_bits(text[lo:hi])
    loss, n = evaluate(model, chunk_tokens(corpus.split("valid"), 100))
    bits = loss / n / math.log(2)
    ok = bits < baseline and minutes <= 30
    assert verdict(5, "validation bpc below unigram entropy", ok,
                   f"{bits:.3f} vs {baseline:.3f} bits after {minutes:.1f} min of training on {len(text)} chars")


def test_dynamic_evaluation_helps(shakespeare, verdict):
    model, corpus, text = shakespeare[:3]
    passage = (DATA / "sonnet.txt").read_text()
    assert passage.splitlines()[0] not in text
    items = chunk_tokens(corpus.vocab.encode(list(passage * 3)), 100)
    static, dynamic = dynamic_evaluate(model, items, TrainConfig(lstm_clip=(-1, 1), reset_period=math.inf))
    assert verdict(6, "dynamic evaluation on a repeated unseen passage", dynamic < static,
                   f"dynamic {dynamic:.3f} vs static {static:.3f} bpc")


@pytest.fixture(scope="module")
def toy_synth():
    corpus = make_toy_glyph_corpus(5, 10, 2000, 0.05, seed=0)
    normed, norm = normalize_offsets(corpus.sequences)
    model = SynthesisModel.create(3, 3, corpus.alphabet, (100,), norm, seed=0)
    start = time.perf_counter()
    train_loop(model, normed, [], TrainConfig(epochs=4))
    return model, corpus, time.perf_counter() - start


def test_toy_synthesis(toy_synth, verdict):
    model, corpus, train_time = toy_synth
    start = time.perf_counter()
    rng = make_rng(123)
    texts = ["".join(rng.choice(list(corpus.symbols), size=int(rng.integers(2, 6)))) for _ in range(100)]
    forward = steps = stopped = right = total = 0
    for i, text in enumerate(texts):
        s = synth_sample(model, text, SampleConfig(seed=i))
        focus = np.argmax(s.phi[:, :-1], axis=1)
        forward += int(np.sum(np.diff(focus) >= 0))
        steps += len(focus) - 1
        stopped += (not s.truncated) and s.steps <= 1.5 * corpus.motifs.shape[1] * len(text)
        decoded = nearest_motif_decode(s.points, corpus.motifs, corpus.symbols) if len(s.points) else ""
        right += max(0, len(text) - edit_distance(decoded, text))
        total += len(text)
    minutes = (train_time + time.perf_counter() - start) / 60
    mono, stop, acc = forward / steps, stopped / 100, right / total
    ok = mono >= 0.95 and stop >= 0.95 and acc >= 0.90 and minutes < 20
    assert verdict(7, "toy glyph synthesis", ok,
                   f"monotone focus {mono:.1%}, timely stop {stop:.0%}, decoded symbols {acc:.1%}, {minutes:.1f} min")


def test_bias_shrinks_sample_variance(toy_synth, verdict):
    model, corpus, _ = toy_synth
    seq = corpus.sequences[0]
    stepper = SynthesisStepper(model.params, model.chars(seq.text))
    outputs, x = [], np.zeros(3)
    for row in model.norm.apply(seq.points):
        y, _ = stepper.step(x)
        outputs.append(y)
        x = row
    variances = []
    for b in (0.0, 0.5, 1.0, 2.0, 5.0):
        per_step = []
        for k, y in enumerate(outputs):
            rng, mix = make_rng(k), apply_bias(y, b, model.M)
            draws = np.array([mdn_sample(mix, rng) for _ in range(1000)])
            per_step.append(draws[:, :2].var(axis=0).sum())
        variances.append(float(np.mean(per_step)))
    ok = all(b < a for a, b in zip(variances, variances[1:]))
    assert verdict(8, "sampling bias lowers offset variance", ok,
                   "variance " + " > ".join(f"{v:.4f}" for v in variances))


PRIME_BUDGET = 0.25   # data units; one clean motif step has length 1


def test_primed_writing_follows_motifs(toy_synth, verdict):
    model, corpus, _ = toy_synth
    inside = steps = 0
    for i in range(20):
        prime, text = corpus.sequences[i], corpus.sequences[100 + i].text
        s = primed_sample(model, prime, prime.text, text, SampleConfig(seed=i, bias=1.0))
        ref = np.concatenate([corpus.motifs[corpus.symbols.index(ch)] for ch in text])[:, :2]
        for k, pt in enumerate(s.points):
            inside += k < len(ref) and math.hypot(*(pt[:2] - ref[k])) <= PRIME_BUDGET
        steps += len(s.points)
    ok = steps > 0 and inside / steps >= 0.90
    assert verdict(9, "primed writing stays near the motifs", ok,
                   f"{inside / max(steps, 1):.1%} of {steps} steps within {PRIME_BUDGET} of the motif")


def _cli(*argv):
    from io import StringIO
    import contextlib
    out = StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    assert code == 0, argv
    return out.getvalue()


def _run_all_commands(root: Path) -> dict:
    """Train, sample and evaluate one tiny model of each kind; return every output's bytes."""
    root.mkdir()
    text = (DATA / "shakespeare.txt").read_bytes()[:8000]
    (root / "corpus.txt").write_bytes(text)
    corpus = make_toy_glyph_corpus(5, 10, 20, 0.05, seed=9)
    save_strokes(root / "strokes.jsonl", corpus.sequences)
    (root / "text.cfg").write_text("kind = text\ndata = corpus.txt\nlayers = 12\nseq_len = 40\nmax_updates = 20\n"
                                   "weight_noise_std = 0.01\nshuffle = true\ncheckpoint = text.json\n")
    (root / "hw.cfg").write_text("kind = handwriting\ndata = toy\ntoy_sequences = 30\nlayers = 10\nmixtures = 2\n"
                                 "weight_noise_std = 0.01\nshuffle = true\ncheckpoint = hw.json\n")
    (root / "synth.cfg").write_text("kind = synthesis\ndata = toy\ntoy_sequences = 30\nlayers = 10\nmixtures = 2\n"
                                    "window_components = 2\ncheckpoint = synth.json\n")
    out = {}
    for name in ("text", "hw", "synth"):
        out[f"train-{name}"] = _cli("train", root / f"{name}.cfg", "--seed", 4)
        out[f"ckpt-{name}"] = (root / f"{name}.json").read_bytes()
    out["sample-text"] = _cli("sample", root / "text.json", "--mode", "text", "--length", 80, "--seed", 5)
    _cli("sample", root / "hw.json", "--mode", "handwriting", "--steps", 60, "--seed", 5, "--out", root / "hw.jsonl")
    _cli("sample", root / "synth.json", "--mode", "synth", "--text", "abc", "--bias", 0.5, "--seed", 5,
         "--out", root / "syn.jsonl", "--phi-out", root / "phi.txt")
    for f in ("hw.jsonl", "syn.jsonl", "phi.txt"):
        out[f] = (root / f).read_bytes()
    out["eval-text"] = _cli("eval", root / "text.json", DATA / "sonnet.txt", "--dynamic")
    out["eval-hw"] = _cli("eval", root / "hw.json", root / "strokes.jsonl", "--dynamic")
    out["eval-synth"] = _cli("eval", root / "synth.json", root / "strokes.jsonl", "--dynamic")
    return out


def test_commands_are_reproducible(tmp_path, verdict):
    first, second = _run_all_commands(tmp_path / "a"), _run_all_commands(tmp_path / "b")
    # the train report names its own checkpoint path, so compare it without that field
    for name in ("text", "hw", "synth"):
        for run in (first, second):
            doc = json.loads(run[f"train-{name}"])
            doc.pop("checkpoint")
            run[f"train-{name}"] = json.dumps(doc)
    differ = sorted(k for k in first if first[k] != second[k])
    ok = not differ
    assert verdict(10, "seeded commands are bit-reproducible", ok,
                   f"{len(first)} outputs compared" + (f", differing: {differ}" if differ else ", all identical"))
