import numpy as np
import pytest
from scipy.stats import ttest_ind

import tvla
from leakage_sim import LeakModel, Rng, leak_points, simulate_campaign
from trace_store import TraceSet
from tvla import InsufficientDataError, WelchAccumulator, accumulate, t_statistic, welch_t


def two_groups(n_fixed=300, n_random=500, m=12, shift=0.0, seed=0):
    rng = np.random.default_rng(seed)
    fixed = rng.normal(shift, 1.0, (n_fixed, m))
    random = rng.normal(0.0, 2.0, (n_random, m))
    samples = np.vstack([fixed, random]).astype(np.float32)
    flags = np.r_[np.ones(n_fixed, bool), np.zeros(n_random, bool)]
    return TraceSet(samples=samples, ivs=np.zeros((len(flags), 16)), fixed=flags)


def test_matches_scipy_welch():
    ts = two_groups(shift=0.3)
    report = welch_t(ts, chunk_size=64)
    expected = ttest_ind(ts.samples[ts.fixed].astype(np.float64),
                         ts.samples[~ts.fixed].astype(np.float64), equal_var=False).statistic
    assert np.allclose(report.t_values, expected, rtol=1e-9, atol=1e-9)
    assert report.group_sizes == (300, 500)


def test_streaming_merge_is_associative():
    data = np.random.default_rng(1).standard_normal((1000, 5))
    whole = accumulate(data, chunk_size=1000)
    left, right = accumulate(data[:137], chunk_size=10), accumulate(data[137:], chunk_size=77)
    merged = left.merge(right)
    assert merged.n == 1000
    assert np.allclose(merged.mean, whole.mean)
    assert np.allclose(merged.variance, np.var(data, axis=0, ddof=1))
    assert np.allclose(right.merge(left).variance, merged.variance)


def test_merge_with_empty_accumulator():
    acc = accumulate(np.ones((4, 3)))
    merged = WelchAccumulator(3).merge(acc)
    assert merged.n == 4 and np.array_equal(merged.mean, acc.mean)


def test_too_few_traces_per_group():
    ts = two_groups(n_fixed=1, n_random=10)
    with pytest.raises(InsufficientDataError):
        welch_t(ts)


def test_zero_variance_conventions():
    fixed = accumulate(np.array([[1.0, 2.0], [1.0, 2.0]]))
    random = accumulate(np.array([[1.0, 3.0], [1.0, 3.0]]))
    t = t_statistic(fixed, random)
    assert t[0] == 0.0
    assert t[1] == -np.inf


def test_threshold_and_frame():
    report = welch_t(two_groups(shift=5.0), threshold=4.5)
    assert report.has_leak
    assert report.leak_points == tuple(range(12))
    frame = report.to_frame()
    assert list(frame.columns) == ["index", "t_value", "is_leak"]
    assert frame["is_leak"].all()
    assert not welch_t(two_groups(shift=5.0), threshold=1e9).has_leak


def test_identical_distributions_rarely_exceed_threshold():
    model = LeakModel()
    ts = simulate_campaign(2000, "fixed", "fixed", model, Rng(11))
    split = TraceSet(samples=ts.samples, ivs=ts.ivs, fixed=np.arange(len(ts)) % 2 == 0)
    report = welch_t(split)
    assert np.mean(np.abs(report.t_values) < tvla.DEFAULT_THRESHOLD) >= 0.999


@pytest.mark.slow
def test_flags_every_iv_dependent_leak():
    model = LeakModel(noise_sigma=1.0)
    ts = simulate_campaign(10_000, "fixed", "interleaved", model, Rng(2025), key=bytes(32), iv=bytes(16))
    report = welch_t(ts)
    expected = set(leak_points(model, intermediates=("mul_x_a", "u", "v")))
    flagged = set(report.leak_points)
    assert expected <= flagged
    assert len(flagged - expected) <= 0.001 * model.samples_per_trace
