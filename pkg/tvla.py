"""
TVLA (fixed-vs-random Welch t-test).

Per-sample means and variances are accumulated in a single streaming pass
(Welford, merged chunk-wise with the pairwise update of Chan et al.), so
partial statistics from shards combine associatively.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from trace_store import TraceSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 4.5


class InsufficientDataError(ValueError):
    """A TVLA group holds fewer than two traces."""


class WelchAccumulator:
    """Streaming count / mean / sum of squared deviations per sample index."""

    def __init__(self, n_samples: int):
        self.n = 0
        self.mean = np.zeros(n_samples, dtype=np.float64)
        self.m2 = np.zeros(n_samples, dtype=np.float64)

    def _combine(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray):
        if n_b == 0:
            return
        n_a = self.n
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta * delta * (n_a * n_b / n)
        self.n = n

    def update(self, batch: np.ndarray) -> "WelchAccumulator":
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.shape[0] == 0:
            return self
        mean_b = batch.mean(axis=0)
        m2_b = ((batch - mean_b) ** 2).sum(axis=0)
        self._combine(batch.shape[0], mean_b, m2_b)
        return self

    def merge(self, other: "WelchAccumulator") -> "WelchAccumulator":
        merged = WelchAccumulator(self.mean.shape[0])
        merged._combine(self.n, self.mean, self.m2)
        merged._combine(other.n, other.mean, other.m2)
        return merged

    @property
    def variance(self) -> np.ndarray:
        """Unbiased sample variance."""
        if self.n < 2:
            return np.full_like(self.mean, np.nan)
        return self.m2 / (self.n - 1)


@dataclass(frozen=True)
class TvlaReport:
    t_values: np.ndarray
    threshold: float
    leak_points: Tuple[int, ...]
    group_sizes: Tuple[int, int]

    @property
    def max_abs_t(self) -> float:
        if self.t_values.size == 0:
            return 0.0
        return float(np.max(np.abs(self.t_values)))

    @property
    def has_leak(self) -> bool:
        return len(self.leak_points) > 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "index": np.arange(self.t_values.size),
            "t_value": self.t_values,
            "is_leak": np.abs(self.t_values) > self.threshold,
        })

    def summary(self) -> str:
        n_fixed, n_random = self.group_sizes
        return (f"max |t| = {self.max_abs_t:.3f}, {len(self.leak_points)} leak points "
                f"above {self.threshold:g} (fixed={n_fixed}, random={n_random})")


def accumulate(samples: np.ndarray, chunk_size: int = 4096) -> WelchAccumulator:
    acc = WelchAccumulator(samples.shape[1])
    for start in range(0, samples.shape[0], chunk_size):
        acc.update(samples[start:start + chunk_size])
    return acc


def t_statistic(fixed: WelchAccumulator, random: WelchAccumulator) -> np.ndarray:
    """Welch t per sample; zero pooled variance gives 0 (equal means) or +-inf."""
    diff = fixed.mean - random.mean
    denom2 = fixed.variance / fixed.n + random.variance / random.n
    t = np.zeros_like(diff)
    ok = denom2 > 0
    t[ok] = diff[ok] / np.sqrt(denom2[ok])
    degenerate = ~ok & (diff != 0)
    t[degenerate] = np.sign(diff[degenerate]) * np.inf
    return t


def report_from_accumulators(fixed: WelchAccumulator, random: WelchAccumulator,
                             threshold: float = DEFAULT_THRESHOLD) -> TvlaReport:
    for name, acc in (("fixed", fixed), ("random", random)):
        if acc.n < 2:
            raise InsufficientDataError(f"TVLA needs at least 2 traces per group, {name} group has {acc.n}")
    t = t_statistic(fixed, random)
    leaks = tuple(int(i) for i in np.flatnonzero(np.abs(t) > threshold))
    return TvlaReport(t_values=t, threshold=float(threshold), leak_points=leaks,
                      group_sizes=(fixed.n, random.n))


def welch_t(ts: TraceSet, threshold: float = DEFAULT_THRESHOLD, chunk_size: int = 4096) -> TvlaReport:
    """Fixed-vs-random Welch t-test over every sample index of `ts`."""
    fixed = accumulate(ts.samples[ts.fixed], chunk_size)
    random = accumulate(ts.samples[~ts.fixed], chunk_size)
    report = report_from_accumulators(fixed, random, threshold)
    logger.info("TVLA: %s", report.summary())
    return report
