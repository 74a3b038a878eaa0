import math
import random
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import attack
from attack import (CompatibilityError, DegenerateInputError, NoConvergenceError, TargetSpec, VoteModel,
                    derive_label, kvc_select, majority_vote_prob, mtd, plurality_vote, recover_full_key,
                    reconstruct_key, register_history, scores_from_words, solve_word)
from leakage_sim import LeakModel, Rng, simulate_campaign
from ml_utils import TrainConfig
from snowv_core import GF, KeyMaterial, SnowV, mul_x, mul_x_inv
from trace_store import SplitSpec, TraceSet, concat, split


def reference_words(key, iv, steps):
    """Registers after `steps` LFSR steps, transcribed from the recurrence definition."""
    def times_x(v, c):
        v <<= 1
        return (v ^ (0x10000 | c)) if v & 0x10000 else v

    def times_x_inv(v, c):
        # odd v came from a word with the top bit set: v = (w << 1) ^ c
        return ((v ^ c) >> 1) | 0x8000 if v & 1 else v >> 1

    words = lambda data: [int.from_bytes(data[i:i + 2], "little") for i in range(0, len(data), 2)]
    k = words(key)
    a = words(iv) + k[:8]
    b = [0] * 8 + k[8:]
    for _ in range(steps):
        u = times_x(a[0], GF.alpha_c) ^ a[1] ^ times_x_inv(a[8], GF.alpha_c) ^ b[0]
        v = times_x(b[0], GF.beta_c) ^ b[3] ^ times_x_inv(b[8], GF.beta_c) ^ a[0]
        a, b = a[1:] + [u], b[1:] + [v]
    return a, b


# Targets and labels

def test_zero_key_label():
    assert derive_label(KeyMaterial(bytes(32), bytes(16)), TargetSpec("A", 8, 0, 8)) == 0


def test_label_reads_key_word_at_load():
    km = KeyMaterial(bytes([1, 0]) + bytes(30), bytes(16))
    assert derive_label(km, TargetSpec("A", 8, 0, 1, "low")) == 1
    assert derive_label(km, TargetSpec("A", 8, 0, 8, "high")) == 0


def test_labels_match_reference_transcription():
    rng = random.Random(3)
    for _ in range(1000):
        key, iv = rng.randbytes(32), rng.randbytes(16)
        spec = TargetSpec(rng.choice("AB"), rng.randrange(16), rng.randrange(8), rng.choice((1, 2, 4, 8)),
                          rng.choice(("low", "high")), rng.random() < 0.5)
        a, b = reference_words(key, iv, spec.step + spec.after_update)
        word = (a if spec.lfsr == "A" else b)[spec.index]
        byte = word & 0xFF if spec.byte_half == "low" else word >> 8
        assert derive_label(KeyMaterial(key, iv), spec) == byte & ((1 << spec.bits) - 1)


def test_register_history_tracks_u_and_v():
    km = KeyMaterial(bytes(range(32)), bytes(range(16)))
    history = register_history(km)
    assert history.shape == (9, 2, 16)
    a, b = reference_words(km.key, km.iv, 3)
    assert list(history[3, 0]) == a and list(history[3, 1]) == b


@pytest.mark.parametrize("kwargs", [{"bits": 3}, {"step": 8}, {"lfsr": "C"}, {"index": 16}, {"byte_half": "mid"}])
def test_target_spec_validation(kwargs):
    with pytest.raises(ValueError):
        TargetSpec(**kwargs)


def test_target_spec_encoding():
    spec = TargetSpec("B", 15, 6, 4, "high", True)
    assert TargetSpec.decode(spec.encode()) == spec


def test_recovery_targets():
    targets = attack.recovery_targets()
    assert len(targets) == 32
    assert all(t.index == 15 and t.after_update and t.bits == 8 for t in targets)
    assert len({(t.lfsr, t.step, t.byte_half) for t in targets}) == 32


# Known Value Correlation

@pytest.fixture(scope="module")
def noiseless_word_traces():
    model = LeakModel(noise_sigma=0.0)
    ts = simulate_campaign(300, "fresh", "random", model, Rng(21))
    return model, ts, attack.trace_histories(ts)


def test_kvc_finds_exact_leak_offset(noiseless_word_traces):
    model, ts, histories = noiseless_word_traces
    u2 = histories[:, 3, 0, 15]
    selection = kvc_select(ts, u2, top_k=1)
    point = model.offset(2, "u")
    assert selection.correlations[point] == pytest.approx(1.0)
    assert list(selection.selected) == [point]


def test_kvc_constant_columns_have_zero_correlation(noiseless_word_traces):
    model, ts, histories = noiseless_word_traces
    corr = attack.kvc_correlations(ts.samples, histories[:, 1, 0, 15])
    assert np.all(corr[:model.background_len] == 0.0)


def test_kvc_noise_bound():
    rng = np.random.default_rng(8)
    n = 2000
    samples = rng.standard_normal((n, 200))
    values = rng.integers(0, 1 << 16, n)
    assert np.max(np.abs(attack.kvc_correlations(samples, values))) < 5 / math.sqrt(n)


def test_kvc_ties_prefer_lower_index():
    samples = np.tile(np.array([[0.0], [1.0], [2.0], [3.0]]), (1, 4))
    selection = kvc_select(samples, np.array([0, 1, 3, 7]), top_k=2)
    assert list(selection.selected) == [0, 1]


def test_kvc_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        kvc_select(np.ones((10, 3)), np.full(10, 0x00FF), top_k=1)
    with pytest.raises(DegenerateInputError):
        kvc_select(np.ones((2, 3)), np.array([0, 1]), top_k=1)


# Profiling

@pytest.fixture(scope="module")
def bit_level_splits():
    ts = simulate_campaign(600, "fresh", "random", LeakModel.bit_level(noise_sigma=0.0), Rng(33))
    return split(ts, SplitSpec(seed=1))


def test_noiseless_one_bit_lda_is_perfect(bit_level_splits):
    train, val, test = bit_level_splits
    spec = TargetSpec("A", 15, 0, 1, "low", after_update=True)
    result = attack.run_profiling_attack(train, val, test, spec, "lda")
    assert result.test_acc == 1.0
    assert result.train_acc == 1.0


def test_fits_depend_on_train_split_only(bit_level_splits):
    train, val, test = bit_level_splits
    spec = TargetSpec("B", 15, 1, 2, "high", after_update=True)
    with_test = attack.run_profiling_attack(train, val, test, spec, "lda", "pca")
    without = attack.run_profiling_attack(train, val, TraceSet.empty(train.samples_per_trace), spec, "lda", "pca")
    assert np.array_equal(with_test.classifier.points, without.classifier.points)
    assert np.array_equal(with_test.classifier.pca.components, without.classifier.pca.components)
    assert np.array_equal(with_test.classifier.model.coef, without.classifier.model.coef)
    assert math.isnan(without.test_acc)


def test_classifier_rejects_other_geometry(bit_level_splits):
    train, val, test = bit_level_splits
    clf, _ = attack.build_profiled_classifier(train, TargetSpec("A", 15, 0, 1, after_update=True))
    with pytest.raises(CompatibilityError):
        clf.predict(np.zeros((2, 10)))


def test_classifier_bundle_round_trip(bit_level_splits, tmp_path):
    train, val, test = bit_level_splits
    clf, _ = attack.build_profiled_classifier(train, TargetSpec("A", 15, 3, 2, after_update=True),
                                              preprocess="pca")
    attack.save_classifiers([clf], tmp_path / "models.svml")
    (loaded,) = attack.load_classifiers(tmp_path / "models.svml")
    assert loaded.target == clf.target
    assert np.array_equal(loaded.predict(test.samples), clf.predict(test.samples))


def test_learning_curve_rows(bit_level_splits):
    train, val, test = bit_level_splits
    frame = attack.learning_curve(train, val, test, TargetSpec("A", 15, 0, 1, after_update=True), [100, 300])
    assert list(frame["n_train"]) == [100, 300]
    assert {"train_acc", "val_acc", "test_acc"} <= set(frame.columns)


def test_reported_tables_shape():
    assert len(attack.reported_fcn_frame(with_pca=True)) == 7 * 4
    assert attack.reported_lda_frame().set_index(["bits", "n_train"]).loc[(8, 100_000), "reported_test_acc"] == 0.57455


# Voting and MTD

def exact_vote(p, n):
    p = Fraction(p)
    return float(sum(math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range((n + 1) // 2, n + 1)))


def test_vote_edge_cases():
    assert majority_vote_prob(VoteModel(1.0, 7)) == 1.0
    assert majority_vote_prob(VoteModel(0.5, 9)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        VoteModel(0.9, 4)


@pytest.mark.parametrize("p", [0.3, 0.51, 0.79, 0.95, 0.999])
def test_vote_matches_binomial_enumeration(p):
    for n in range(1, 102, 2):
        assert majority_vote_prob(VoteModel(p, n)) == pytest.approx(exact_vote(p, n), abs=1e-12)


def test_vote_is_monotone():
    ps = np.linspace(0.5, 1.0, 26)
    ns = range(1, 60, 2)
    grid = np.array([[majority_vote_prob(VoteModel(p, n)) for n in ns] for p in ps])
    assert np.all(np.diff(grid, axis=0) >= -1e-12)
    assert np.all(np.diff(grid[1:], axis=1) >= -1e-12)


def test_mtd():
    assert mtd(1.0)[0] == 1
    n, curve = mtd(0.999)
    assert exact_vote(0.999, n) >= 0.9999
    assert n == 1 or exact_vote(0.999, n - 2) < 0.9999
    assert curve[-1][0] == n
    with pytest.raises(NoConvergenceError):
        mtd(0.5)
    with pytest.raises(NoConvergenceError):
        mtd(0.51, max_n=11)


def test_plurality_vote():
    assert plurality_vote([3, 3, 1, 2], 4) == (3, 0.25)
    assert plurality_vote([2, 1], 4)[0] == 1
    with pytest.raises(attack.InsufficientDataError):
        plurality_vote([], 4)


@pytest.mark.parametrize("available, budget, expected", [(10, None, 9), (11, None, 11), (10, 4, 5), (5, 8, 5),
                                                         (4, 8, 3)])
def test_odd_budget(available, budget, expected):
    assert attack.odd_budget(available, budget) == expected


# Word solving and key recovery

def test_solve_word_examples():
    assert solve_word(0, (0, 0, 0), "A") == 0
    assert solve_word(0xCC87, (0, 0, 0), "A") == 0x0001
    assert solve_word(0xE4B1, (0, 0, 0), "B") == 0x0001


@pytest.mark.parametrize("which", ["A", "B"])
def test_solve_word_inverts_the_recurrence_exhaustively(which):
    x0, x1, cross = 0x1234, 0xBEEF, 0x0F0F
    targets = np.arange(1 << 16)
    if which == "A":
        observed = [mul_x(x0, GF.alpha_c) ^ x1 ^ mul_x_inv(t, GF.alpha_inv_c) ^ cross for t in range(1 << 16)]
    else:
        observed = [mul_x(x0, GF.beta_c) ^ x1 ^ mul_x_inv(t, GF.beta_inv_c) ^ cross for t in range(1 << 16)]
    assert np.array_equal(solve_word(np.array(observed), (x0, x1, cross), which), targets)


def true_predictions(key, ivs):
    u = np.zeros((len(ivs), 8), dtype=np.int64)
    v = np.zeros_like(u)
    for i, iv in enumerate(ivs):
        history = register_history(KeyMaterial(key, bytes(iv)))
        u[i], v[i] = history[1:, 0, 15], history[1:, 1, 15]
    return u, v


def oracle_recovery(count, seed):
    rng = random.Random(seed)
    for _ in range(count):
        key, iv = rng.randbytes(32), rng.randbytes(16)
        ivs = np.frombuffer(iv, dtype=np.uint8)[None, :]
        u, v = true_predictions(key, ivs)
        words = reconstruct_key(*scores_from_words(u, v), ivs)
        assert b"".join(w.value.to_bytes(2, "little") for w in words) == key


def test_oracle_predictions_recover_key():
    oracle_recovery(25, seed=5)


@pytest.mark.slow
def test_oracle_predictions_recover_key_for_many_pairs():
    oracle_recovery(1000, seed=6)


def test_recover_full_key_verifies_with_keystream():
    key = bytes(range(32))
    ts = simulate_campaign(5, "fixed", "random", LeakModel(), Rng(1), key=key)
    predictions = true_predictions(key, ts.ivs)
    sample = SnowV(key, ts.iv_bytes(0)).keystream(32)
    result = recover_full_key([], ts, predictions=predictions, keystream_sample=sample)
    assert result.success and result.verified
    assert result.recovered_key == key
    assert all(w.accuracy == 1.0 and w.mtd == 1 for w in result.words)
    report = attack.attack_report(result)
    assert report["recovered_key"] == key.hex()
    assert report["reported_mtd"] == {"CPA+LDA": 50, "LDA": 12, "FCN+PCA": 8}


def test_recover_full_key_flags_wrong_words():
    key = bytes(range(32))
    ts = simulate_campaign(3, "fixed", "random", LeakModel(), Rng(2), key=key)
    u, v = true_predictions(key, ts.ivs)
    u[:, 0] ^= 0x0100
    result = recover_full_key([], ts, predictions=(u, v))
    assert not result.success
    # k0 absorbs the flipped byte and carries it into k7 through a[1] at step 7
    assert result.key_mismatches == [1, 15]
    assert result.keystream_mismatches == []
    report = attack.attack_report(result)
    assert report["key_mismatches"] == [1, 15] and "mismatches" not in report
    assert result.words[0].accuracy == 0.0 and result.words[0].mtd is None


def test_predict_scores_needs_all_classifiers():
    with pytest.raises(ValueError):
        attack.predict_scores([], np.zeros((1, 4)))


def test_scores_from_words_marks_the_predicted_bytes():
    u_scores, v_scores = scores_from_words([[0x1234] * 8], [[0xABCD] * 8], accuracy=0.9)
    assert u_scores.shape == v_scores.shape == (1, 8, 2, 256)
    assert u_scores[0, 0, 0].argmax() == 0x34 and u_scores[0, 0, 1].argmax() == 0x12
    assert np.allclose(np.exp(u_scores).sum(axis=-1), 1.0)
    assert np.array_equal(attack.words_from_scores(v_scores), [[0xABCD] * 8])
    with pytest.raises(ValueError):
        scores_from_words([[0] * 8], [[0] * 8], accuracy=1.0)


def test_summed_scores_recover_what_per_trace_argmax_misses():
    key = bytes(range(50, 82))
    n = 5
    ivs = np.zeros((n, 16), dtype=np.uint8)
    u, v = true_predictions(key, ivs)
    u_scores, v_scores = scores_from_words(u, v, accuracy=0.3)
    # every trace favours its own decoy byte, so no single argmax is right
    for i in range(n):
        for table, words in ((u_scores, u), (v_scores, v)):
            for half, byte in enumerate((words[i] & 0xFF, words[i] >> 8)):
                table[i, np.arange(8), half, byte ^ (i + 1)] = np.log(0.4)
    assert not np.any(attack.words_from_scores(u_scores) == u)
    words = reconstruct_key(u_scores, v_scores, ivs)
    assert b"".join(w.value.to_bytes(2, "little") for w in words) == key
    assert all(w.margin > 0 for w in words)


def test_margin_is_the_lead_in_nats_per_trace():
    key = bytes(range(32))
    ivs = np.zeros((3, 16), dtype=np.uint8)
    u, v = true_predictions(key, ivs)
    words = reconstruct_key(*scores_from_words(u, v, accuracy=0.5), ivs)
    assert words[0].margin == pytest.approx(math.log(0.5) - math.log(0.5 / 255))
    flagged = reconstruct_key(*scores_from_words(u, v, accuracy=0.5), ivs, min_margin=10.0)
    assert all(w.low_confidence for w in flagged)


def test_reconstruct_key_checks_table_shape():
    with pytest.raises(ValueError):
        reconstruct_key(np.zeros((2, 8, 2, 255)), np.zeros((2, 8, 2, 255)), np.zeros((2, 16)))
    with pytest.raises(attack.InsufficientDataError):
        reconstruct_key(np.zeros((0, 8, 2, 256)), np.zeros((0, 8, 2, 256)), np.zeros((0, 16)))


def test_recover_full_key_accepts_precomputed_scores():
    key = bytes(range(7, 39))
    ts = simulate_campaign(3, "fixed", "random", LeakModel(), Rng(4), key=key)
    scores = scores_from_words(*true_predictions(key, ts.ivs))
    result = recover_full_key([], ts, scores=scores)
    assert result.success and result.recovered_key == key
    assert result.key_mismatches == [] and result.keystream_mismatches == []


def test_classifier_log_proba_is_normalised_and_floored(bit_level_splits):
    train, val, test = bit_level_splits
    clf, _ = attack.build_profiled_classifier(train, TargetSpec("A", 15, 2, 4, "high", after_update=True))
    scores = clf.log_proba(test.samples)
    assert scores.shape == (len(test), 16)
    assert np.all(scores >= attack.LOG_PROB_FLOOR)
    assert np.array_equal(scores.argmax(axis=1), clf.predict(test.samples))
    assert np.all(np.exp(scores).sum(axis=1) <= 1.0 + 1e-9)


def test_reported_mtd_rows_pair_counts_with_formula_values():
    rows = {r["method"]: r for r in attack.reported_mtd_rows()}
    assert rows["CPA+LDA"]["formula_mtd"] is None
    assert rows["LDA"]["reported_accuracy"] == 0.57455
    assert rows["LDA"]["formula_mtd"] == mtd(0.57455)[0]
    assert rows["FCN+PCA"]["formula_mtd"] == mtd(0.79)[0]
    assert rows["LDA"]["formula_mtd"] > rows["LDA"]["reported_mtd"]


@pytest.mark.slow
def test_noisy_votes_beat_the_independent_byte_bound():
    p, n, attacks = 0.95, 21, 1000
    rng = np.random.default_rng(12)
    key = bytes(range(32))
    ivs = rng.integers(0, 256, (n, 16), dtype=np.uint8)
    u, v = true_predictions(key, ivs)
    successes = 0
    for _ in range(attacks):
        noisy = []
        for words in (u, v):
            low, high = words & 0xFF, words >> 8
            for byte in (low, high):
                wrong = rng.random(byte.shape) >= p
                byte[wrong] = (byte[wrong] + rng.integers(1, 256, wrong.sum())) & 0xFF
            noisy.append(low | (high << 8))
        words = reconstruct_key(*scores_from_words(*noisy, accuracy=p), ivs)
        successes += b"".join(w.value.to_bytes(2, "little") for w in words) == key
    bound = majority_vote_prob(VoteModel(p, n)) ** 32
    assert successes / attacks >= bound - 3 * math.sqrt(bound * (1 - bound) / attacks)


@pytest.mark.slow
def test_end_to_end_noiseless_lda_recovery():
    model = LeakModel.bit_level(noise_sigma=0.0)
    profiling = simulate_campaign(12_000, "fresh", "random", model, Rng(70))
    train, val, test = split(profiling, SplitSpec(seed=70))
    results = attack.train_recovery_classifiers(train, val, test, "lda")
    key = bytes(range(100, 132))
    victim = simulate_campaign(21, "fixed", "random", model, Rng(71), key=key)
    result = recover_full_key([r.classifier for r in results], victim)
    assert result.success
    assert result.recovered_key == key


@pytest.mark.slow
def test_end_to_end_noisy_lda_recovery():
    model = LeakModel.bit_level(noise_sigma=1.0)
    profiling = simulate_campaign(12_000, "fresh", "random", model, Rng(72))
    train, val, test = split(profiling, SplitSpec(seed=72))
    classifiers = [r.classifier for r in attack.train_recovery_classifiers(train, val, test, "lda")]
    rng = random.Random(73)
    successes = 0
    for i in range(100):
        key = rng.randbytes(32)
        victim = simulate_campaign(101, "fixed", "random", model, Rng(1000 + i), key=key)
        result = recover_full_key(classifiers, victim)
        successes += result.success and result.recovered_key == key
    assert successes >= 95


def pulsed_step_zero(n, seed, chunk=5000):
    """Pulsed-geometry traces cropped to the first LFSR step."""
    model = LeakModel.pulsed(noise_sigma=1.0)
    start = model.background_len
    parts = []
    for c, lo in enumerate(range(0, n, chunk)):
        ts = simulate_campaign(min(chunk, n - lo), "fresh", "random", model, Rng(seed + c))
        parts.append(ts.crop(start, start + model.samples_per_step))
    return concat(parts, model.samples_per_step)


@pytest.mark.slow
def test_pca_on_a_wide_window_orders_the_methods():
    pytest.importorskip("torch")
    traces = pulsed_step_zero(30_000, seed=500)
    train, val, test = split(traces, SplitSpec(seed=5))
    spec = TargetSpec("A", 15, 0, 8, "low", after_update=True)
    cfg = attack.AttackConfig(top_k=8, pca_top_k=64, train=TrainConfig(epochs=20, seed=0))
    histories = tuple(attack.trace_histories(ts) for ts in (train, val, test))
    acc = {(method, pre): attack.run_profiling_attack(train, val, test, spec, method, pre, cfg, histories).test_acc
           for method, pre in (("lda", "none"), ("fcn", "none"), ("fcn", "pca"))}
    assert acc["fcn", "pca"] > acc["lda", "none"] > acc["fcn", "none"]
    assert acc["fcn", "pca"] - acc["fcn", "none"] >= 0.20


@pytest.mark.slow
def test_lda_learning_curve_tracks_committed_baseline():
    baseline = pd.read_csv(Path(__file__).resolve().parent.parent / "baselines" / "lda_pulsed_sigma1.csv")
    traces = pulsed_step_zero(130_000, seed=600)
    train, val, test = split(traces, SplitSpec(train_frac=100_000 / 130_000, val_frac=0.0,
                                               test_frac=30_000 / 130_000, seed=6))
    spec = TargetSpec("A", 15, 0, 8, "low", after_update=True)
    frame = attack.learning_curve(train, val, test, spec, list(baseline["n_train"]), "lda",
                                  cfg=attack.AttackConfig(top_k=int(baseline["top_k"].iloc[0])))
    measured = frame["test_acc"].to_numpy()
    assert np.all(np.diff(measured) > 0)
    assert np.all(np.abs(measured - baseline["expected_test_acc"].to_numpy()) <= 0.15)
