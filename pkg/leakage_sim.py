"""
Leakage Simulator

Stands in for the capture rig: runs the first eight LFSR steps on the
key-loaded SNOW-V state and emits one power trace per (key, IV) where six
per-step intermediates leak their Hamming weight (or their individual bits)
plus Gaussian noise.

Randomness is drawn from numpy's counter-based Philox generator keyed by
`SeedSequence(seed, spawn_key=(stream, index))`, so trace i is the same no
matter which worker produces it.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from snowv_core import IV_SIZE, KEY_SIZE, LFSR_STEPS_PER_UPDATE, KeyMaterial, StepTrace, init, lfsr_step_traced
from trace_store import TraceSet, concat

try:
    from joblib import Parallel, delayed
    JOBLIB_AVAILABLE = True
except ImportError:
    JOBLIB_AVAILABLE = False

logger = logging.getLogger(__name__)

# StepTrace field order
INTERMEDIATES = StepTrace._fields
WORD_BITS = 16

DEFAULT_LEAK_OFFSETS = (4, 9, 14, 19, 24, 29)
BIT_LEAK_OFFSETS = (0, 16, 32, 48, 64, 80)

# Peak sample then a decaying tail, per leaked bit.
DEFAULT_PULSE = (1.0,) + (0.6,) * 6

KEY_POLICIES = ("fixed", "fresh")
IV_POLICIES = ("fixed", "random", "interleaved")

CAMPAIGN_STREAM = 0
TRACE_STREAM = 1


class LeakModelError(ValueError):
    """Raised for an inconsistent leakage geometry."""


@dataclass(frozen=True)
class LeakModel:
    """Leakage geometry and signal/noise levels.

    granularity "word": one sample per intermediate, scale * HW(w)
    (or a weighted bit sum when bit_weights is given).
    granularity "bit": 16 consecutive samples per intermediate, scale * bit_j(w).

    Each leaked value is drawn as `pulse`, so it covers len(pulse)
    consecutive samples; bit j of a word occupies the j-th run of them.
    """
    scale: float = 1.0
    noise_sigma: float = 1.0
    samples_per_step: int = 32
    leak_offsets: Tuple[int, ...] = DEFAULT_LEAK_OFFSETS
    background_len: int = 64
    granularity: str = "word"
    bit_weights: Optional[Tuple[float, ...]] = None
    pulse: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "leak_offsets", tuple(int(o) for o in self.leak_offsets))
        object.__setattr__(self, "pulse", tuple(float(p) for p in self.pulse))
        if not self.pulse or not np.all(np.isfinite(self.pulse)):
            raise LeakModelError(f"pulse must be a non-empty sequence of finite weights, got {self.pulse}")
        if self.bit_weights is not None:
            object.__setattr__(self, "bit_weights", tuple(float(w) for w in self.bit_weights))
            if len(self.bit_weights) != WORD_BITS:
                raise LeakModelError(f"bit_weights needs {WORD_BITS} entries, got {len(self.bit_weights)}")
        if self.noise_sigma < 0:
            raise LeakModelError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.samples_per_step < 1:
            raise LeakModelError("samples_per_step must be positive")
        if self.background_len < 0:
            raise LeakModelError("background_len must be non-negative")
        if self.granularity not in ("word", "bit"):
            raise LeakModelError(f"unknown granularity {self.granularity!r}")
        if len(self.leak_offsets) != len(INTERMEDIATES):
            raise LeakModelError(f"need {len(INTERMEDIATES)} leak offsets, got {len(self.leak_offsets)}")
        if len(set(self.leak_offsets)) != len(self.leak_offsets):
            raise LeakModelError("leak offsets must be distinct")
        width = self.leak_width
        spans = sorted(self.leak_offsets)
        if spans[0] < 0 or spans[-1] + width > self.samples_per_step:
            raise LeakModelError(f"leak offsets {self.leak_offsets} do not fit in {self.samples_per_step} samples")
        if any(b - a < width for a, b in zip(spans, spans[1:])):
            raise LeakModelError(f"leak offsets must be at least {width} samples apart")

    @classmethod
    def bit_level(cls, noise_sigma: float = 1.0, scale: float = 1.0, background_len: int = 64) -> "LeakModel":
        return cls(scale=scale, noise_sigma=noise_sigma, samples_per_step=96,
                   leak_offsets=BIT_LEAK_OFFSETS, background_len=background_len, granularity="bit")

    @classmethod
    def pulsed(cls, noise_sigma: float = 1.0, scale: float = 2.0, background_len: int = 64,
               pulse: Sequence[float] = DEFAULT_PULSE) -> "LeakModel":
        """Bit-level leakage where every bit rings over several samples."""
        width = WORD_BITS * len(pulse)
        return cls(scale=scale, noise_sigma=noise_sigma, samples_per_step=len(INTERMEDIATES) * width,
                   leak_offsets=tuple(i * width for i in range(len(INTERMEDIATES))),
                   background_len=background_len, granularity="bit", pulse=tuple(pulse))

    @property
    def leak_width(self) -> int:
        return (WORD_BITS if self.granularity == "bit" else 1) * len(self.pulse)

    @property
    def samples_per_trace(self) -> int:
        return self.background_len + LFSR_STEPS_PER_UPDATE * self.samples_per_step

    def offset(self, step: int, name: str) -> int:
        """First sample index of intermediate `name` in LFSR step `step`."""
        return self.background_len + step * self.samples_per_step + self.leak_offsets[INTERMEDIATES.index(name)]

    def leakage(self, value: int) -> np.ndarray:
        bits = (value >> np.arange(WORD_BITS)) & 1
        if self.granularity == "bit":
            levels = self.scale * bits.astype(np.float64)
        elif self.bit_weights is None:
            levels = np.array([self.scale * hamming_weight(value)], dtype=np.float64)
        else:
            levels = np.array([self.scale * float(np.dot(bits, self.bit_weights))])
        return np.outer(levels, self.pulse).ravel()


@dataclass(frozen=True)
class Rng:
    """Seeded, splittable source of per-trace generators (Philox, counter-based)."""
    seed: int
    algorithm: str = "philox"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.algorithm != "philox":
            raise ValueError(f"unsupported generator {self.algorithm!r}")

    def stream(self, *key: int) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(seq))

    def campaign(self) -> np.random.Generator:
        return self.stream(CAMPAIGN_STREAM)

    def for_trace(self, index: int) -> np.random.Generator:
        return self.stream(TRACE_STREAM, index)


@dataclass(frozen=True)
class Trace:
    samples: np.ndarray
    key: bytes
    iv: bytes
    fixed_flag: bool = False


def hamming_weight(v: int) -> int:
    return bin(int(v)).count("1")


def hamming_weight_array(values) -> np.ndarray:
    """Population count of each 16-bit entry."""
    values = np.asarray(values, dtype=np.uint16)
    as_bytes = values.astype("<u2").view(np.uint8).reshape(values.shape + (2,))
    return np.unpackbits(as_bytes, axis=-1).sum(axis=-1).astype(np.int64)


def intermediates_window(km: KeyMaterial) -> List[StepTrace]:
    """Intermediates of the first eight LFSR steps on the key-loaded state."""
    state = init(km, stop_after_load=True)
    return [lfsr_step_traced(state) for _ in range(LFSR_STEPS_PER_UPDATE)]


def leak_points(model: LeakModel, intermediates: Iterable[str] = INTERMEDIATES,
                steps: Iterable[int] = range(LFSR_STEPS_PER_UPDATE)) -> List[int]:
    """Sample indices carrying the named intermediates."""
    points = []
    for step in steps:
        for name in intermediates:
            start = model.offset(step, name)
            points.extend(range(start, start + model.leak_width))
    return sorted(points)


def clean_trace(km: KeyMaterial, model: LeakModel) -> np.ndarray:
    """The noiseless signal of one trace."""
    signal = np.zeros(model.samples_per_trace, dtype=np.float64)
    for step, record in enumerate(intermediates_window(km)):
        for name, value in zip(INTERMEDIATES, record):
            start = model.offset(step, name)
            signal[start:start + model.leak_width] = model.leakage(value)
    return signal


def _emit(km: KeyMaterial, model: LeakModel, gen: np.random.Generator) -> np.ndarray:
    signal = clean_trace(km, model)
    if model.noise_sigma > 0:
        signal += model.noise_sigma * gen.standard_normal(model.samples_per_trace)
    return signal.astype(np.float32)


def _trace_draws(gen: np.random.Generator) -> Tuple[float, bytes, bytes]:
    """Group coin, fresh key and fresh IV, always drawn before the noise."""
    return gen.random(), gen.bytes(KEY_SIZE), gen.bytes(IV_SIZE)


def simulate_trace(km: KeyMaterial, model: LeakModel, rng: Rng, index: int = 0,
                   fixed_flag: bool = False) -> Trace:
    """Trace `index` of any campaign whose key and IV for that trace are `km`."""
    gen = rng.for_trace(index)
    _trace_draws(gen)
    samples = _emit(km, model, gen)
    return Trace(samples=samples, key=km.key, iv=km.iv, fixed_flag=fixed_flag)


def _simulate_range(start: int, stop: int, key_policy: str, iv_policy: str,
                    model: LeakModel, rng: Rng, fixed_key: bytes, fixed_iv: bytes) -> TraceSet:
    n = stop - start
    samples = np.zeros((n, model.samples_per_trace), dtype=np.float32)
    keys = np.zeros((n, KEY_SIZE), dtype=np.uint8)
    ivs = np.zeros((n, IV_SIZE), dtype=np.uint8)
    fixed = np.zeros(n, dtype=bool)
    for row, i in enumerate(range(start, stop)):
        gen = rng.for_trace(i)
        coin, fresh_key, fresh_iv = _trace_draws(gen)
        is_fixed = iv_policy == "fixed" or (iv_policy == "interleaved" and coin < 0.5)
        key = fresh_key if key_policy == "fresh" else fixed_key
        iv = fixed_iv if is_fixed else fresh_iv
        samples[row] = _emit(KeyMaterial(key, iv), model, gen)
        keys[row] = np.frombuffer(key, dtype=np.uint8)
        ivs[row] = np.frombuffer(iv, dtype=np.uint8)
        fixed[row] = is_fixed
    return TraceSet(samples=samples, ivs=ivs, fixed=fixed, keys=keys)


def simulate_campaign(n: int, key_policy: str, iv_policy: str, model: LeakModel, rng: Rng,
                      key: Optional[bytes] = None, iv: Optional[bytes] = None,
                      jobs: int = 1, chunk_size: int = 2048) -> TraceSet:
    """Simulate `n` traces.

    key_policy: "fixed" (one campaign key) or "fresh" (new key per trace).
    iv_policy: "fixed", "random", or "interleaved" (fixed-vs-random TVLA
    campaign, each trace flips a fair coin for the fixed group).
    Output is identical for any `jobs`.
    """
    if n < 0:
        raise ValueError(f"trace count must be >= 0, got {n}")
    if key_policy not in KEY_POLICIES:
        raise ValueError(f"key_policy must be one of {KEY_POLICIES}, got {key_policy!r}")
    if iv_policy not in IV_POLICIES:
        raise ValueError(f"iv_policy must be one of {IV_POLICIES}, got {iv_policy!r}")
    campaign = rng.campaign()
    default_key = campaign.bytes(KEY_SIZE)
    default_iv = campaign.bytes(IV_SIZE)
    fixed_key = KeyMaterial(key if key is not None else default_key, bytes(IV_SIZE)).key
    fixed_iv = KeyMaterial(bytes(KEY_SIZE), iv if iv is not None else default_iv).iv

    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    args = (key_policy, iv_policy, model, rng, fixed_key, fixed_iv)
    if jobs > 1 and JOBLIB_AVAILABLE and len(bounds) > 1:
        parts = Parallel(n_jobs=jobs)(delayed(_simulate_range)(s, e, *args) for s, e in bounds)
    else:
        parts = [_simulate_range(s, e, *args) for s, e in bounds]
    ts = concat(parts, model.samples_per_trace)
    logger.info("Simulated %d traces (%s key, %s IV, sigma=%.3g)", n, key_policy, iv_policy, model.noise_sigma)
    return ts
