import numpy as np
import pytest

from seqgen.data_io import Alphabet, NormStats, StrokeSeq, build_vocab, make_toy_glyph_corpus, normalize_offsets
from seqgen.mdn import split_outputs
from seqgen.models import HandwritingModel, SynthesisModel, TextModel, chunk_tokens
from seqgen.sampler import SampleConfig, primed_sample, sample_handwriting, sample_text, synth_sample
from seqgen.trainer import TrainConfig, train_loop
from seqgen.lstm import PredictionStepper


@pytest.fixture(scope="module")
def parrot():
    """Char model that has memorized one short phrase."""
    text = "hello world. "
    vocab = build_vocab(list(text * 2))
    model = TextModel.create(vocab, (32,), 0)
    items = chunk_tokens(vocab.encode(list(text * 4)), len(text) * 4)
    train_loop(model, items, [], TrainConfig(epochs=400, learning_rate=3e-3, lstm_clip=(-1, 1)))
    return model


@pytest.fixture(scope="module")
def toy_writer():
    corpus = make_toy_glyph_corpus(5, 10, 300, 0.05, seed=0)
    normed, stats = normalize_offsets(corpus.sequences)
    model = HandwritingModel.create(5, (32,), stats, seed=0)
    train_loop(model, normed, [], TrainConfig(epochs=4, learning_rate=1e-3))
    return model, corpus


def _synth_model(seed=0):
    return SynthesisModel.create(2, 2, Alphabet("abc"), (8,), NormStats(np.array([0.5, 0.0]), np.ones(2) * 2), seed,
                                 scale=0.3)


def test_text_sampling_basics(parrot):
    assert sample_text(parrot, 0) == ""
    assert sample_text(parrot, 30, seed=4) == sample_text(parrot, 30, seed=4)
    assert len(sample_text(parrot, 30, seed=4)) == 30


def test_primed_argmax_reproduces_memorized_text(parrot):
    assert sample_text(parrot, 8, prime_text="hello", argmax=True) == " world. "


def test_single_handwriting_step():
    model = HandwritingModel.create(2, (4,), NormStats.identity(), 0)
    assert sample_handwriting(model, 1, seed=0).points.shape == (1, 3)


def test_huge_bias_follows_the_means():
    model = HandwritingModel.create(1, (5,), NormStats.identity(), 3, scale=0.5)
    model.params["out.b"][0] = 50.0   # end-of-stroke probability ~ 0
    seq = sample_handwriting(model, 20, seed=1, bias=60.0)
    stepper = PredictionStepper(model.params)
    x = np.zeros(3)
    means = []
    for _ in range(20):
        mix = split_outputs(stepper.step(x), 1)
        x = np.array([mix.mu[0, 0], mix.mu[0, 1], 0.0])
        means.append(x)
    assert np.allclose(seq.points, means, atol=1e-12)


def test_handwriting_sampling_is_seeded():
    model = HandwritingModel.create(2, (4,), NormStats.identity(), 0)
    a = sample_handwriting(model, 30, seed=5).points
    assert np.array_equal(a, sample_handwriting(model, 30, seed=5).points)
    assert not np.array_equal(a, sample_handwriting(model, 30, seed=6).points)


def test_sampled_offset_scale_matches_training_data(toy_writer):
    model, corpus = toy_writer
    data = np.concatenate([s.points for s in corpus.sequences])
    data_mag = np.mean(np.hypot(data[:, 0], data[:, 1]))
    s = sample_handwriting(model, 500, seed=2).points
    assert abs(np.mean(np.hypot(s[:, 0], s[:, 1])) / data_mag - 1) < 0.3


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(bias=-1)
    with pytest.raises(ValueError):
        SampleConfig(max_steps=0)
    with pytest.raises(ValueError):
        SampleConfig(stop_mode="never")


def test_step_cap_reports_truncation():
    model = _synth_model()
    res = synth_sample(model, "abc", SampleConfig(max_steps=1, stop_mode="fixed"))
    assert res.truncated and res.steps == 1 and len(res.points) == 1
    assert res.phi.shape == (1, 4)


def test_default_step_cap():
    model = _synth_model()
    res = synth_sample(model, "ab", SampleConfig(stop_mode="fixed"))
    assert res.steps == 60 * 2 + 300 and res.truncated


def test_synth_sampling_is_seeded():
    model = _synth_model(1)
    cfg = SampleConfig(max_steps=50, bias=0.15, seed=3)
    a, b = synth_sample(model, "cab", cfg), synth_sample(model, "cab", cfg)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.phi, b.phi)


def test_empty_prime_is_plain_synthesis():
    model = _synth_model(2)
    cfg = SampleConfig(max_steps=40, seed=1)
    a = synth_sample(model, "abc", cfg)
    b = primed_sample(model, None, "", "abc", cfg)
    assert np.array_equal(a.points, b.points) and b.prime_steps == 0


def test_priming_feeds_the_prime_and_leaves_weights_alone():
    model = _synth_model(3)
    snapshot = model.params.flat.copy()
    prime = StrokeSeq(np.array([[1.0, 0.5, 0.0], [0.2, -0.3, 1.0], [0.0, 1.0, 0.0]]), "ab")
    res = primed_sample(model, prime, "ab", "c", SampleConfig(max_steps=10, seed=0, stop_mode="fixed"))
    assert res.prime_steps == 3
    assert res.phi.shape == (13, 4)   # U = len("abc"), plus the end column
    assert len(res.points) == 10
    assert np.array_equal(model.params.flat, snapshot)


def test_synthesis_needs_text():
    with pytest.raises(ValueError):
        synth_sample(_synth_model(), "")
