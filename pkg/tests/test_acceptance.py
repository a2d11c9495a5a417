"""Release gate for the toolkit, one test per numbered criterion.

Run with ``pytest -v tests/test_acceptance.py``: each line of the
report is the pass or fail verdict for one criterion. The checks here
deliberately re-derive expectations from independent oracles (brute
force selection, full DP tables, exhaustive tail counting) rather
than reusing library internals.
"""

import io
import math
import time

import numpy as np

from charnorm import attention as at
from charnorm import autodiff as ad
from charnorm import evaluation as ev
from charnorm import pipeline as pl
from charnorm import toygen
from charnorm import training as tr
from charnorm.alphabet import VOCAB_SIZE, default_alphabet
from charnorm.encoders import Code, EncoderConfig, count_parameters, make_encoder
from charnorm.model import Model, ModelConfig
from helpers import (assert_grads_close, finite_difference_grads,
                     reference_levenshtein)

ALPHA = default_alphabet()


def f64(rng, shape, scale=1.0, grad=True):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=grad,
                     dtype=np.float64)


# ---------------------------------------------------------------------------
# criterion 1: every layer type passes finite-difference gradient checks


def test_c01_layer_gradients_match_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(11)

    # dilated convolution, every padding mode
    for i in range(21):
        padding = ("symmetric", "causal-left", "causal-right")[i % 3]
        dilation = (1, 2, 4)[(i // 3) % 3]
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        k = int(rng.integers(2, 5))
        length = int(rng.integers(1, 11))
        shape = (2, c_in, length) if i % 2 else (c_in, length)
        x = f64(rng, shape)
        w = f64(rng, (c_out, c_in, k), scale=0.5)
        b = f64(rng, (c_out,))
        r = f64(rng, shape[:-2] + (c_out, length), grad=False)

        def build():
            return ad.sum_(ad.mul(
                ad.conv1d(x, w, b, dilation=dilation, padding=padding), r))

        build().backward()
        numeric = finite_difference_grads(build, [x, w, b])
        assert_grads_close([x.grad, w.grad, b.grad], numeric)

    # LSTM cell update
    for i in range(21):
        batch = int(rng.integers(1, 4))
        in_dim = int(rng.integers(1, 6))
        hidden = int(rng.integers(1, 5))
        x = f64(rng, (batch, in_dim))
        h = f64(rng, (batch, hidden), scale=0.5)
        c = f64(rng, (batch, hidden), scale=0.5)
        w_x = f64(rng, (in_dim, 4 * hidden), scale=0.5)
        w_h = f64(rng, (hidden, 4 * hidden), scale=0.5)
        b = f64(rng, (4 * hidden,), scale=0.5)
        r1 = f64(rng, (batch, hidden), grad=False)
        r2 = f64(rng, (batch, hidden), grad=False)

        def build():
            h2, c2 = ad.lstm_step(x, (h, c), w_x, w_h, b)
            return ad.add(ad.sum_(ad.mul(h2, r1)), ad.sum_(ad.mul(c2, r2)))

        build().backward()
        probe = [x, h, c, w_x, w_h, b]
        numeric = finite_difference_grads(build, probe)
        assert_grads_close([p.grad for p in probe], numeric)

    # attention scoring network
    for i in range(21):
        state_dim = int(rng.integers(1, 6))
        hidden = int(rng.integers(1, 6))
        channels = int(rng.integers(1, 6))
        length = int(rng.integers(1, 8))
        params = at.AttentionParams.create(np.random.default_rng(100 + i),
                                           hidden, channels, state_dim)
        tensors = [params.w_h, params.w_z, params.b, params.v]
        for p in tensors:
            p.data = p.data.astype(np.float64)
        batched = i % 2 == 0
        h = f64(rng, (2, state_dim) if batched else (state_dim,), scale=0.5)
        z = f64(rng, (2, channels, length) if batched else (channels, length))
        r = f64(rng, (2, length) if batched else (length,), grad=False)

        def build():
            return ad.sum_(ad.mul(at.score(h, z, params), r))

        build().backward()
        probe = tensors + [h, z]
        # the tanh in the scorer leaves visible truncation at the
        # default difference step
        numeric = finite_difference_grads(build, probe, step=1e-4)
        assert_grads_close([p.grad for p in probe], numeric)

    # one full decode step: embedding, selection, cell, projection
    for i in range(20):
        channels = int(rng.choice((4, 6)))
        length = int(rng.integers(2, 5))
        hidden = int(rng.integers(3, 6))
        batch = int(rng.integers(1, 3))
        cfg = ModelConfig(
            encoder=EncoderConfig(kind="cfe", channels=channels, layers=1,
                                  kernel=2),
            decoder_hidden=hidden, d=length, embed_dim=3, attn_hidden=4,
            max_output=8)
        model = Model(cfg, ALPHA, np.random.default_rng(200 + i))
        for p in model.parameters().values():
            p.data = p.data.astype(np.float64)
        # d covers the whole code and the scoring net is sharpened, so
        # the selected column order cannot flip within a difference step
        for t in (model.attn.v, model.attn.w_z, model.attn.w_h, model.attn.b):
            t.data = t.data * 6.0
        z = f64(rng, (batch, channels, length))
        code = Code(features=z, length=length)
        h0 = f64(rng, (batch, hidden), scale=0.3)
        c0 = f64(rng, (batch, hidden), scale=0.3)
        prev = rng.integers(0, 127, size=batch)
        r = f64(rng, (batch, VOCAB_SIZE), grad=False)

        def build():
            log_probs, _, _ = model.decode_step(prev, (h0, c0), code)
            return ad.sum_(ad.mul(log_probs, r))

        build().backward()
        pool = [model.attn.w_h, model.attn.w_z, model.attn.b, model.attn.v,
                model.dec_w_x, model.dec_w_h, model.dec_b, model.out_w,
                model.out_b, model.embed, z, h0, c0]
        probe = [pool[i % 13], pool[(i + 5) % 13], pool[(i + 9) % 13]]
        numeric = finite_difference_grads(build, probe, step=1e-4)
        assert_grads_close([p.grad for p in probe], numeric)

    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# criterion 2: the two causal halves never look across their boundary


def test_c02_cfe_halves_are_causal_bitwise():
    rng = np.random.default_rng(23)
    configs = ((1, 2), (2, 3), (3, 2), (2, 4))
    encoders = [make_encoder(
        EncoderConfig(kind="cfe", channels=8, layers=l, kernel=k),
        np.random.default_rng(5 + i)) for i, (l, k) in enumerate(configs)]
    for trial in range(100):
        enc = encoders[trial % len(encoders)]
        length = int(rng.integers(1, 65))
        t = int(rng.integers(0, length))
        x = rng.normal(size=(VOCAB_SIZE, length)).astype(np.float32)
        base = enc.encode(x).features.data
        after = x.copy()
        after[:, t + 1:] += rng.normal(size=(VOCAB_SIZE, length - t - 1))
        out = enc.encode(after.astype(np.float32)).features.data
        assert np.array_equal(out[:4, :t + 1], base[:4, :t + 1])
        before = x.copy()
        before[:, :t] += rng.normal(size=(VOCAB_SIZE, t))
        out = enc.encode(before.astype(np.float32)).features.data
        assert np.array_equal(out[4:, t:], base[4:, t:])


# ---------------------------------------------------------------------------
# criterion 3: kernel 2 with dilations 1/2/4 reaches back exactly 7


def test_c03_receptive_field_is_exactly_eight_wide():
    enc = make_encoder(EncoderConfig(kind="cfe", channels=4, layers=3,
                                     kernel=2), np.random.default_rng(31))
    # all-positive taps so an input bump can never cancel out
    for p in enc.parameters().values():
        p.data = np.abs(p.data) + 0.05
    length = 24
    x = np.full((VOCAB_SIZE, length), 0.3, dtype=np.float32)
    base = enc.encode(x).features.data
    for s in range(length):
        bumped = x.copy()
        bumped[:, s] += 1.0
        out = enc.encode(bumped).features.data
        changed = np.any(out[:2] != base[:2], axis=0)
        for t in range(length):
            assert changed[t] == (s <= t <= s + 7), f"s={s} t={t}"


# ---------------------------------------------------------------------------
# criterion 4: context selection agrees exactly with brute force


def brute_force_context(alpha, z, d):
    """Sort positions by weight, ties by lowest index, scale and pad."""
    channels, length = z.shape
    order = sorted(range(length), key=lambda i: (-alpha[i], i))[:d]
    out = np.zeros((channels, d), dtype=z.dtype)
    for slot, pos in enumerate(order):
        out[:, slot] = z[:, pos] * alpha[pos]
    idx = np.array(order + [-1] * (d - len(order)))
    return out, idx


def test_c04_context_selection_matches_brute_force():
    rng = np.random.default_rng(41)
    for trial in range(1000):
        channels = int(rng.integers(1, 7))
        length = int(rng.integers(1, 9))
        d = int(rng.integers(1, length + 3))
        alpha = rng.random(length).astype(np.float32)
        if trial % 3 == 0 and length > 1:
            # duplicated weights exercise tie handling
            alpha[int(rng.integers(0, length))] = alpha[
                int(rng.integers(0, length))]
        if trial % 11 == 0:
            alpha[:] = alpha[0]
        z = rng.normal(size=(channels, length)).astype(np.float32)
        got, idx = at.context_matrix(ad.Tensor(alpha), ad.Tensor(z), d)
        want, want_idx = brute_force_context(alpha, z, d)
        assert np.array_equal(got.data, want), f"trial {trial}"
        assert np.array_equal(idx, want_idx), f"trial {trial}"


# ---------------------------------------------------------------------------
# criterion 5: edit distance agrees exactly with the full-table DP


def test_c05_edit_distance_matches_reference():
    rng = np.random.default_rng(53)
    pools = ("ab", "abcde", "abcdefghijklmnop")
    for trial in range(1000):
        pool = list(pools[trial % 3])
        a = "".join(rng.choice(pool, size=int(rng.integers(0, 61))))
        b = "".join(rng.choice(pool, size=int(rng.integers(0, 61))))
        assert ev.levenshtein(a, b) == reference_levenshtein(a, b)


# ---------------------------------------------------------------------------
# criterion 6: the paired randomization test is calibrated


def test_c06_randomization_test_matches_exhaustive_tail():
    same = [ev.PredictionRecord(f"i{k}", "ref", "ref", False)
            for k in range(8)]
    assert ev.approx_randomization(same, list(same), metric="accuracy") == 1.0

    refs = [f"target {k}" for k in range(20)]
    a = [ev.PredictionRecord(f"i{k}", r, r, False)
         for k, r in enumerate(refs)]
    b = [ev.PredictionRecord(f"i{k}", r, "wrong", False)
         for k, r in enumerate(refs)]
    p = ev.approx_randomization(a, b, metric="accuracy", rounds=1000, seed=0)
    observed = abs(ev.accuracy(a) - ev.accuracy(b))
    # exhaustive tail over all 2^20 swap patterns, grouped by swap
    # count: the accuracy gap only depends on how many pairs swap
    tail = sum(math.comb(20, k) for k in range(21)
               if abs(20 - 2 * k) / 20 * 100 >= observed) / 2 ** 20
    assert abs(p - tail) <= 0.01


# ---------------------------------------------------------------------------
# criterion 7: the two convolutional encoders are parameter-matched


def test_c07_fe_and_cfe_parameter_counts_are_equal():
    for channels in (2, 4, 8, 16, 32, 64, 128, 256):
        for layers in (1, 2, 3, 4):
            for kernel in (2, 3, 4, 5):
                fe = count_parameters(EncoderConfig(
                    kind="fe", channels=channels, layers=layers,
                    kernel=kernel))
                cfe = count_parameters(EncoderConfig(
                    kind="cfe", channels=channels, layers=layers,
                    kernel=kernel))
                assert fe == cfe, (channels, layers, kernel)


# ---------------------------------------------------------------------------
# criterion 8: the causal encoder solves digits-to-words, the
# position-local one cannot


def _digits_split():
    pairs = toygen.gen_digits(7000, seed=0)
    split = pl.select_subset(pairs, 5000, "random", seed=0)
    # group the training pairs by input length: the encoder then sees
    # the same unpadded layout during training and greedy decoding
    train = sorted(split.train, key=lambda p: len(p.input), reverse=True)
    return pl.DatasetSplit(train=train, validation=split.validation,
                           test=split.test), split.test[:500]


def _train_and_score(kind, split, held_out, iterations):
    cfg = ModelConfig(
        encoder=EncoderConfig(kind=kind, channels=32, layers=3, kernel=2),
        decoder_hidden=64, d=5, embed_dim=16, attn_hidden=32, max_output=32)
    model = Model(cfg, ALPHA, np.random.default_rng(0))
    train_cfg = tr.TrainConfig(seed=0, batch_size=64, learning_rate=2e-3,
                               max_iterations=iterations)
    start = time.monotonic()
    tr.train(model, split, train_cfg)
    elapsed = time.monotonic() - start
    report, _ = ev.evaluate(model, held_out, batch_size=64)
    return report.accuracy_percent, elapsed


def test_c08_digits_task_separates_causal_from_local_encoder():
    budget_s = 20 * 60.0
    iterations = 5000
    split, held_out = _digits_split()
    cfe_acc, cfe_s = _train_and_score("cfe", split, held_out, iterations)
    assert cfe_s < budget_s
    assert cfe_acc >= 95.0, f"cfe reached only {cfe_acc:.1f}%"
    fcnn_acc, _ = _train_and_score("fcnn", split, held_out, iterations)
    assert fcnn_acc < cfe_acc, (fcnn_acc, cfe_acc)


# ---------------------------------------------------------------------------
# criterion 9: training is deterministic end to end


def test_c09_identical_seeds_reproduce_runs_bitwise(tmp_path):
    pairs = toygen.gen_copy(24, seed=4)
    split = pl.DatasetSplit(train=pairs, validation=[], test=[])

    def run(out_dir):
        cfg = ModelConfig(
            encoder=EncoderConfig(kind="cfe", channels=8, layers=1, kernel=2),
            decoder_hidden=12, d=2, embed_dim=6, attn_hidden=8,
            max_output=14)
        model = Model(cfg, ALPHA, np.random.default_rng(6))
        train_cfg = tr.TrainConfig(seed=3, batch_size=8, learning_rate=2e-3,
                                   max_iterations=25)
        return tr.train(model, split, train_cfg, run_dir=out_dir)

    run(tmp_path / "a")
    run(tmp_path / "b")
    log_a = tr.TrainLog.load(tmp_path / "a" / "log.tsv")
    log_b = tr.TrainLog.load(tmp_path / "b" / "log.tsv")
    # losses must agree bitwise; wall-clock stamps are excluded
    assert [(e.iteration, e.loss) for e in log_a.train[:10]] == \
           [(e.iteration, e.loss) for e in log_b.train[:10]]
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == \
           (tmp_path / "b" / "final.ckpt").read_bytes()


# ---------------------------------------------------------------------------
# criterion 10: the worked preprocessing sample reproduces byte for byte


RECORDS_SAMPLE = (
    '"Semiotic Class","Input Token","Output Token"\n'
    '"PLAIN","Rosemary","<self>"\n'
    '"PLAIN","is","<self>"\n'
    '"PLAIN","a","<self>"\n'
    '"PLAIN","plant","<self>"\n'
    '"PUNCT",".","sil"\n'
    '"<eos>","<eos>",""\n'
    '"DATE","2006","two thousand six"\n'
    '"LETTERS","IUCN","i u c n"\n'
    '"PUNCT",".","sil"\n'
    '"<eos>","<eos>",""\n'
)

PAIRS_SAMPLE = (
    '"Input Token","Output Token"\n'
    '"2006 IUCN .","two thousand six i u c n ."\n'
    '"Rosemary is a plant .","Rosemary is a plant ."\n'
)


def test_c10_sample_records_preprocess_byte_for_byte():
    records = pl.parse_records(io.StringIO(RECORDS_SAMPLE),
                               source="<sample>")
    pairs, stats = pl.preprocess(records, ALPHA)
    out = io.StringIO()
    pl.write_pairs(out, pairs)
    assert out.getvalue() == PAIRS_SAMPLE
    assert stats.kept == 2


# ---------------------------------------------------------------------------
# criterion 11: the error taxonomy is a partition and lands the
# canonical failure shapes in their buckets


def test_c11_error_buckets_partition_and_match_shapes():
    rng = np.random.default_rng(67)
    pool = list("abcdef")
    records = []
    for k in range(400):
        ref = "".join(rng.choice(pool, size=int(rng.integers(1, 15))))
        pred = (ref if rng.random() < 0.4 else
                "".join(rng.choice(pool, size=int(rng.integers(0, 15)))))
        records.append(ev.PredictionRecord(f"i{k}", ref, pred,
                                           bool(rng.random() < 0.1)))
    breakdown = ev.classify_errors(records)
    wrong = sum(1 for r in records if r.prediction != r.reference)
    assert breakdown.total == wrong
    assert (breakdown.t1 + breakdown.t2 + breakdown.t3 + breakdown.others
            == wrong)

    crafted = [
        # decoding hit the output cap while repeating itself
        ev.PredictionRecord(
            "Ruppert , Edward E. ; Fox , Richard , S. ; Barnes , "
            "Robert D. ( 2004 ) .",
            "Ruppert , Edward e ; Fox , Richard , s ; Barnes , "
            "Robert d ( two thousand four ) .",
            "Ruppert , Edward e ; Fox , Richard , s R s , , , , , , , , "
            ", , , , , , , , , , ,",
            True),
        # a single wrong character in an otherwise exact output
        ev.PredictionRecord(
            "The income was $11,091 .",
            "The income was eleven thousand ninety one dollars .",
            "The income was fleven thousand ninety one dollars .",
            False),
        # stopped long before the reference ends, prefix intact
        ev.PredictionRecord(
            "Parmentier , Bruno ( 2000-05-01 ) .",
            "Parmentier , Bruno ( the first of may two thousand ) .",
            "Parmentier , Bruno ( .",
            False),
        # skipped over a repeated pattern: wrong but fluent
        ev.PredictionRecord(
            "According to the 2011 census of India , Bhisenagar has 818 "
            "households .",
            "According to the twenty eleven census of India , Bhisenagar "
            "has eight hundred eighteen households .",
            "According to the twenty eleven census of India , Bhisenagar "
            "has eighteen households .",
            False),
    ]
    shapes = ev.classify_errors(crafted)
    assert (shapes.t1, shapes.t2, shapes.t3, shapes.others,
            shapes.total) == (1, 1, 1, 1, 4)
