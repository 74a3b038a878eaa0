"""
Profiling Attack

Label derivation from the first eight LFSR steps, Known Value Correlation
point selection, LDA / FCN pipelines, majority voting, minimum traces to
disclosure and full 256-bit key reconstruction by inverting the u/v
recurrences.
"""
import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import binom
from sklearn.preprocessing import StandardScaler

from leakage_sim import hamming_weight_array
from ml_utils import (ACTIVATIONS, KIND_BUNDLE, KIND_PCA, FcnModel, InsufficientDataError, LdaModel,
                      PcaModel, TrainConfig, decode_blobs, encode_blobs, fcn_log_proba, fcn_predict, fcn_train,
                      lda_fit, lda_log_proba, lda_predict, model_from_blobs, model_to_blobs, pca_fit,
                      pca_transform)
from snowv_core import GF, LFSR_STEPS_PER_UPDATE, WORD_MASK, KeyMaterial, SnowV, init, lfsr_step, words_to_bytes
from trace_store import TraceSet

try:
    from joblib import Parallel, delayed
    JOBLIB_AVAILABLE = True
except ImportError:
    JOBLIB_AVAILABLE = False

logger = logging.getLogger(__name__)

LFSRS = ("A", "B")
BYTE_HALVES = ("low", "high")
LABEL_BITS = (1, 2, 4, 8)
METHODS = ("lda", "fcn")
PREPROCESS = ("none", "pca")

DEFAULT_MTD_TARGET = 0.9999

# Floor for per-class log-probabilities accumulated during key recovery.
LOG_PROB_FLOOR = float(np.log(1e-12))

# Minimum traces to disclosure reported for the physical STM32 captures.
REPORTED_MTD = {"CPA+LDA": 50, "LDA": 12, "FCN+PCA": 8}

# LDA test accuracy on the last n bits, by number of profiling traces.
REPORTED_LDA_ACCURACY = {
    1: {10_000: 0.9995, 50_000: 1.0, 100_000: 1.0},
    2: {10_000: 0.815, 50_000: 0.8965, 100_000: 0.95095},
    4: {10_000: 0.451, 50_000: 0.6841, 100_000: 0.84815},
    8: {10_000: 0.102, 50_000: 0.3431, 100_000: 0.57455},
}

# FCN train/test accuracy (%) per activation for 1, 2, 4 and 8 label bits.
REPORTED_FCN_ACCURACY = {
    "relu": ((100, 100), (83, 83), (26, 26), (6, 5)),
    "leaky_relu": ((100, 100), (82, 82), (49, 49), (5, 5)),
    "prelu": ((100, 100), (69, 69), (49, 49), (6, 5)),
    "elu": ((100, 100), (87, 87), (6, 6), (0, 0)),
    "selu": ((100, 100), (88, 88), (57, 57), (0, 0)),
    "swish": ((100, 100), (81, 80), (44, 43), (0, 0)),
    "mish": ((100, 100), (83, 83), (45, 45), (0, 0)),
}
REPORTED_FCN_PCA_ACCURACY = {
    "relu": ((100, 100), (100, 97), (100, 93), (85, 79)),
    "leaky_relu": ((100, 100), (100, 97), (100, 93), (72, 66)),
    "prelu": ((100, 100), (100, 97), (100, 93), (75, 70)),
    "elu": ((100, 100), (100, 97), (100, 93), (86, 80)),
    "selu": ((100, 100), (100, 97), (100, 93), (86, 79)),
    "swish": ((100, 100), (100, 97), (99, 94), (74, 69)),
    "mish": ((100, 100), (100, 97), (99, 92), (70, 66)),
}

# 8-bit test accuracies behind the reported MTDs (LDA at 10^5 traces, FCN+PCA with ReLU).
REPORTED_8BIT_ACCURACY = {
    "LDA": REPORTED_LDA_ACCURACY[8][100_000],
    "FCN+PCA": REPORTED_FCN_PCA_ACCURACY["relu"][3][1] / 100,
}


class DegenerateInputError(ValueError):
    """Known values carry no information (all equal, or too few traces)."""


class NoConvergenceError(ValueError):
    """Majority voting never reaches the requested success probability."""


class CompatibilityError(ValueError):
    """Traces do not match the geometry a classifier was trained on."""


# ---------------------------------------------------------------------------
# Targets and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetSpec:
    """One internal state word byte used as a classification label.

    The word is read before LFSR step `step` executes, or after it when
    `after_update` is set (A[15]/B[15] after step s hold u_s/v_s).
    """
    lfsr: str = "A"
    index: int = 8
    step: int = 0
    bits: int = 8
    byte_half: str = "low"
    after_update: bool = False

    def __post_init__(self):
        if self.lfsr not in LFSRS:
            raise ValueError(f"lfsr must be 'A' or 'B', got {self.lfsr!r}")
        if not 0 <= self.index < 16:
            raise ValueError(f"word index must be in [0, 16), got {self.index}")
        if not 0 <= self.step < LFSR_STEPS_PER_UPDATE:
            raise ValueError(f"step must be in [0, {LFSR_STEPS_PER_UPDATE}), got {self.step}")
        if self.bits not in LABEL_BITS:
            raise ValueError(f"bits must be one of {LABEL_BITS}, got {self.bits}")
        if self.byte_half not in BYTE_HALVES:
            raise ValueError(f"byte_half must be 'low' or 'high', got {self.byte_half!r}")

    @property
    def n_classes(self) -> int:
        return 1 << self.bits

    @property
    def snapshot(self) -> int:
        return self.step + int(self.after_update)

    @property
    def name(self) -> str:
        when = "after" if self.after_update else "at"
        return f"{self.lfsr}[{self.index}] {when} step {self.step}, {self.byte_half} byte, {self.bits} bit"

    def encode(self) -> np.ndarray:
        return np.array([LFSRS.index(self.lfsr), self.index, self.step, self.bits,
                         BYTE_HALVES.index(self.byte_half), int(self.after_update)], dtype=np.int64)

    @classmethod
    def decode(cls, values) -> "TargetSpec":
        lfsr, index, step, bits, half, after = (int(v) for v in values)
        return cls(LFSRS[lfsr], index, step, bits, BYTE_HALVES[half], bool(after))


def register_history(km: KeyMaterial) -> np.ndarray:
    """Register snapshots (9 x 2 x 16 words) before each of the first eight
    LFSR steps on the key-loaded state and after the last one."""
    state = init(km, stop_after_load=True)
    history = np.zeros((LFSR_STEPS_PER_UPDATE + 1, 2, 16), dtype=np.uint16)
    history[0] = (state.a, state.b)
    for s in range(LFSR_STEPS_PER_UPDATE):
        lfsr_step(state)
        history[s + 1] = (state.a, state.b)
    return history


def trace_histories(ts: TraceSet, key: Optional[bytes] = None) -> np.ndarray:
    """register_history for every trace; `key` stands in for missing per-trace keys."""
    if not ts.has_keys and key is None:
        raise ValueError("labels need ground-truth keys (profiling traces)")
    out = np.zeros((len(ts), LFSR_STEPS_PER_UPDATE + 1, 2, 16), dtype=np.uint16)
    cache: Dict[Tuple[bytes, bytes], np.ndarray] = {}
    for i in range(len(ts)):
        pair = (key if key is not None else ts.key_bytes(i), ts.iv_bytes(i))
        if pair not in cache:
            cache[pair] = register_history(KeyMaterial(*pair))
        out[i] = cache[pair]
    return out


def target_bytes(histories: np.ndarray, spec: TargetSpec) -> np.ndarray:
    words = histories[..., spec.snapshot, LFSRS.index(spec.lfsr), spec.index].astype(np.int64)
    return words & 0xFF if spec.byte_half == "low" else words >> 8


def labels_from_history(histories: np.ndarray, spec: TargetSpec) -> np.ndarray:
    return target_bytes(histories, spec) & (spec.n_classes - 1)


def derive_label(km: KeyMaterial, spec: TargetSpec) -> int:
    return int(labels_from_history(register_history(km), spec))


def derive_labels(ts: TraceSet, spec: TargetSpec, histories: Optional[np.ndarray] = None) -> np.ndarray:
    if histories is None:
        histories = trace_histories(ts)
    return labels_from_history(histories, spec)


# ---------------------------------------------------------------------------
# Known Value Correlation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KvcSelection:
    correlations: np.ndarray
    selected: np.ndarray
    top_k: int


def kvc_correlations(samples, values, chunk_size: int = 1024) -> np.ndarray:
    """Pearson correlation of every sample column with HW(value)."""
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n < 3:
        raise DegenerateInputError(f"KVC needs at least 3 traces, got {n}")
    hw = hamming_weight_array(values).astype(np.float64)
    if np.all(hw == hw[0]):
        raise DegenerateInputError("known values have constant Hamming weight")
    hc = hw - hw.mean()
    h_norm = np.sqrt(hc @ hc)
    corr = np.zeros(samples.shape[1], dtype=np.float64)
    for start in range(0, samples.shape[1], chunk_size):
        block = samples[:, start:start + chunk_size].astype(np.float64)
        block -= block.mean(axis=0)
        denom = h_norm * np.sqrt((block * block).sum(axis=0))
        num = hc @ block
        # constant columns correlate as 0
        corr[start:start + block.shape[1]] = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return corr


def kvc_select(samples, values, top_k: int) -> KvcSelection:
    """Top-k sample indices by |correlation|; ties go to the lower index."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if isinstance(samples, TraceSet):
        samples = samples.samples
    corr = kvc_correlations(samples, values)
    k = min(top_k, corr.size)
    order = np.lexsort((np.arange(corr.size), -np.abs(corr)))
    return KvcSelection(correlations=corr, selected=np.sort(order[:k]).astype(np.intp), top_k=k)


# ---------------------------------------------------------------------------
# Profiled pipelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    top_k: int = 16
    pca_top_k: int = 64
    pca_variance: float = 0.99
    pca_max_components: int = 2000
    shrinkage: float = 1e-3
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.top_k < 1 or self.pca_top_k < 1:
            raise ValueError("top_k and pca_top_k must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(eq=False)
class ProfiledClassifier:
    """KVC window -> optional PCA -> optional scaler -> LDA or FCN.

    Without PCA the window is the `top_k` most correlated samples; with PCA
    it widens to `pca_top_k` samples and the projection does the reduction.
    """
    target: TargetSpec
    points: np.ndarray
    model: Union[LdaModel, FcnModel]
    samples_per_trace: int
    pca: Optional[PcaModel] = None
    scaler: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def method(self) -> str:
        return "lda" if isinstance(self.model, LdaModel) else "fcn"

    @property
    def preprocess(self) -> str:
        return "pca" if self.pca is not None else "none"

    def features(self, samples) -> np.ndarray:
        if isinstance(samples, TraceSet):
            samples = samples.samples
        samples = np.atleast_2d(np.asarray(samples))
        if samples.shape[1] != self.samples_per_trace:
            raise CompatibilityError(
                f"traces have {samples.shape[1]} samples, classifier expects {self.samples_per_trace}")
        X = samples[:, self.points].astype(np.float64)
        if self.pca is not None:
            X = pca_transform(self.pca, X)
        if self.scaler is not None:
            mean, scale = self.scaler
            X = (X - mean) / scale
        return X

    def predict(self, samples) -> np.ndarray:
        X = self.features(samples)
        if X.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        if self.method == "lda":
            return lda_predict(self.model, X)[0]
        return fcn_predict(self.model, X)

    def log_proba(self, samples) -> np.ndarray:
        """Per-class log-probabilities (n x n_classes), floored at LOG_PROB_FLOOR."""
        X = self.features(samples)
        if X.shape[0] == 0:
            return np.zeros((0, self.target.n_classes))
        scores = lda_log_proba(self.model, X) if self.method == "lda" else fcn_log_proba(self.model, X)
        return np.maximum(scores, LOG_PROB_FLOOR)

    def accuracy(self, samples, labels) -> float:
        labels = np.asarray(labels)
        if labels.size == 0:
            return float("nan")
        return float(np.mean(self.predict(samples) == labels))


def build_profiled_classifier(train: TraceSet, spec: TargetSpec, method: str = "lda",
                              preprocess: str = "none", cfg: AttackConfig = AttackConfig(),
                              labels: Optional[np.ndarray] = None, values: Optional[np.ndarray] = None,
                              val: Optional[Tuple[TraceSet, np.ndarray]] = None) -> Tuple[ProfiledClassifier, float]:
    """Fit every stage on `train` only. `val` feeds FCN epoch logs, never a fit."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if preprocess not in PREPROCESS:
        raise ValueError(f"preprocess must be one of {PREPROCESS}, got {preprocess!r}")
    if labels is None or values is None:
        histories = trace_histories(train)
        labels = labels_from_history(histories, spec)
        values = target_bytes(histories, spec)

    selection = kvc_select(train.samples, values, cfg.pca_top_k if preprocess == "pca" else cfg.top_k)
    clf = ProfiledClassifier(target=spec, points=selection.selected, model=None,
                             samples_per_trace=train.samples_per_trace)
    X = clf.features(train.samples)
    if preprocess == "pca":
        clf.pca = pca_fit(X, cfg.pca_variance, cfg.pca_max_components)
        X = pca_transform(clf.pca, X)

    if method == "lda":
        clf.model = lda_fit(X, labels, n_classes=spec.n_classes, shrinkage=cfg.shrinkage)
    else:
        scaler = StandardScaler().fit(X)
        clf.scaler = (scaler.mean_.copy(), scaler.scale_.copy())
        X = (X - clf.scaler[0]) / clf.scaler[1]
        X_val = y_val = None
        if val is not None and len(val[0]) > 0:
            X_val, y_val = clf.features(val[0]), val[1]
        clf.model = fcn_train(X, labels, cfg.train, activation=cfg.activation,
                              n_classes=spec.n_classes, X_val=X_val, y_val=y_val)
    train_acc = clf.accuracy(train.samples, labels)
    logger.debug("Fitted %s/%s on %s: %d points, train accuracy %.4f",
                 method, preprocess, spec.name, len(selection.selected), train_acc)
    return clf, train_acc


@dataclass
class ProfilingResult:
    target: TargetSpec
    method: str
    preprocess: str
    activation: Optional[str]
    n_train: int
    train_acc: float
    val_acc: float
    test_acc: float
    classifier: ProfiledClassifier = field(repr=False)

    def to_row(self) -> dict:
        t = self.target
        return {
            "lfsr": t.lfsr, "index": t.index, "step": t.step, "bits": t.bits,
            "byte_half": t.byte_half, "after_update": t.after_update,
            "method": self.method, "preprocess": self.preprocess, "activation": self.activation,
            "n_train": self.n_train, "train_acc": self.train_acc,
            "val_acc": self.val_acc, "test_acc": self.test_acc,
        }


def run_profiling_attack(train: TraceSet, val: TraceSet, test: TraceSet, spec: TargetSpec,
                         method: str = "lda", preprocess: str = "none",
                         cfg: AttackConfig = AttackConfig(),
                         histories: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> ProfilingResult:
    """Profile on `train`, then score validation and test with the fitted pipeline."""
    if histories is None:
        histories = tuple(trace_histories(ts) if len(ts) else None for ts in (train, val, test))
    h_train, h_val, h_test = histories
    y_train = labels_from_history(h_train, spec)
    y_val = labels_from_history(h_val, spec) if len(val) else np.zeros(0, dtype=np.int64)
    y_test = labels_from_history(h_test, spec) if len(test) else np.zeros(0, dtype=np.int64)

    clf, train_acc = build_profiled_classifier(
        train, spec, method, preprocess, cfg, labels=y_train,
        values=target_bytes(h_train, spec), val=(val, y_val))
    result = ProfilingResult(
        target=spec, method=method, preprocess=preprocess,
        activation=cfg.activation if method == "fcn" else None,
        n_train=len(train), train_acc=train_acc,
        val_acc=clf.accuracy(val.samples, y_val), test_acc=clf.accuracy(test.samples, y_test),
        classifier=clf)
    logger.info("%s %s/%s: train %.4f, val %.4f, test %.4f", spec.name, method, preprocess,
                result.train_acc, result.val_acc, result.test_acc)
    return result


def learning_curve(train: TraceSet, val: TraceSet, test: TraceSet, spec: TargetSpec,
                   sizes: Sequence[int], method: str = "lda", preprocess: str = "none",
                   cfg: AttackConfig = AttackConfig()) -> pd.DataFrame:
    """Accuracy against the number of profiling traces (prefixes of `train`)."""
    histories = (trace_histories(train), trace_histories(val) if len(val) else None,
                 trace_histories(test) if len(test) else None)
    rows = []
    for size in sizes:
        size = min(int(size), len(train))
        result = run_profiling_attack(train.subset(np.arange(size)), val, test, spec, method, preprocess,
                                      cfg, histories=(histories[0][:size], histories[1], histories[2]))
        rows.append(result.to_row())
    return pd.DataFrame(rows)


def activation_sweep(train: TraceSet, val: TraceSet, test: TraceSet, base: TargetSpec,
                     activations: Iterable[str] = ACTIVATIONS, bits: Iterable[int] = LABEL_BITS,
                     preprocess: str = "pca", cfg: AttackConfig = AttackConfig()) -> pd.DataFrame:
    """FCN accuracy for every activation and label width."""
    histories = (trace_histories(train), trace_histories(val) if len(val) else None,
                 trace_histories(test) if len(test) else None)
    rows = []
    for activation in activations:
        for n_bits in bits:
            result = run_profiling_attack(train, val, test, replace(base, bits=n_bits), "fcn", preprocess,
                                          replace(cfg, activation=activation), histories=histories)
            rows.append(result.to_row())
    return pd.DataFrame(rows)


def reported_fcn_frame(with_pca: bool) -> pd.DataFrame:
    table = REPORTED_FCN_PCA_ACCURACY if with_pca else REPORTED_FCN_ACCURACY
    rows = []
    for activation, cells in table.items():
        for n_bits, (train_pct, test_pct) in zip(LABEL_BITS, cells):
            rows.append({"activation": activation, "bits": n_bits,
                         "reported_train_acc": train_pct / 100, "reported_test_acc": test_pct / 100})
    return pd.DataFrame(rows)


def reported_lda_frame() -> pd.DataFrame:
    return pd.DataFrame([{"bits": b, "n_train": n, "reported_test_acc": acc}
                         for b, by_size in REPORTED_LDA_ACCURACY.items() for n, acc in by_size.items()])


# ---------------------------------------------------------------------------
# Voting and MTD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoteModel:
    p: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.n < 1 or self.n % 2 == 0:
            raise ValueError(f"n must be a positive odd count, got {self.n}")


def majority_vote_prob(vm: VoteModel) -> float:
    """P[more than half of n independent traces are correct], in log space."""
    if vm.p == 1.0:
        return 1.0
    if vm.p == 0.0:
        return 0.0
    k = np.arange((vm.n + 1) // 2, vm.n + 1)
    return float(min(1.0, np.exp(logsumexp(binom.logpmf(k, vm.n, vm.p)))))


def mtd(p: float, target: float = DEFAULT_MTD_TARGET, max_n: int = 100_001) -> Tuple[int, List[Tuple[int, float]]]:
    """Smallest odd n whose majority vote succeeds with probability >= target,
    with the (n, probability) curve up to it."""
    if p <= 0.5:
        raise NoConvergenceError(f"per-trace accuracy {p} <= 0.5 never converges under majority voting")
    curve = []
    for n in range(1, max_n + 1, 2):
        prob = majority_vote_prob(VoteModel(p, n))
        curve.append((n, prob))
        if prob >= target:
            return n, curve
    raise NoConvergenceError(f"p={p} does not reach {target} within {max_n} traces")


def voting_curve(p: float, n_max: int) -> pd.DataFrame:
    ns = list(range(1, n_max + 1, 2))
    return pd.DataFrame({"n": ns, "probability": [majority_vote_prob(VoteModel(p, n)) for n in ns]})



def reported_mtd_rows(target: float = DEFAULT_MTD_TARGET) -> List[dict]:
    """Reported MTDs beside the majority-vote MTD implied by the reported 8-bit accuracy."""
    rows = []
    for method, reported in REPORTED_MTD.items():
        accuracy = REPORTED_8BIT_ACCURACY.get(method)
        formula = None
        if accuracy is not None:
            try:
                formula = mtd(accuracy, target)[0]
            except NoConvergenceError:
                pass
        rows.append({"method": method, "reported_mtd": reported, "reported_accuracy": accuracy,
                     "formula_mtd": formula})
    return rows


def plurality_vote(labels, n_classes: int) -> Tuple[int, float]:
    """Most frequent label (lowest wins ties) and its lead over the runner-up as a fraction."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InsufficientDataError("cannot vote over zero predictions")
    counts = np.bincount(labels, minlength=n_classes)
    winner = int(np.argmax(counts))
    runner_up = np.partition(counts, -2)[-2] if counts.size > 1 else 0
    return winner, float(counts[winner] - runner_up) / labels.size


def odd_budget(n_available: int, budget: Optional[int] = None) -> int:
    if n_available < 1:
        raise InsufficientDataError("no attack traces")
    n = n_available if budget is None else min(int(budget), n_available)
    if n % 2 == 0:
        n = n + 1 if budget is not None and n + 1 <= n_available else n - 1
    return max(n, 1)


# ---------------------------------------------------------------------------
# Key recovery
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _mul_x_inv_inverse(d: int) -> np.ndarray:
    v = np.arange(1 << 16, dtype=np.int64)
    forward = np.where(v & 1, (v >> 1) ^ d, v >> 1)
    if __debug__:
        assert np.unique(forward).size == 1 << 16, f"mul_x_inv with 0x{d:04x} is not a bijection"
    table = np.zeros(1 << 16, dtype=np.int64)
    table[forward] = v
    table.setflags(write=False)
    return table


def solve_word(observed, known: Tuple, which: str = "A"):
    """Invert one LFSR feedback for the word entering mul_x_inv.

    which "A": known = (a0, a1, b0), observed = u, returns a8.
    which "B": known = (b0, b3, a0), observed = v, returns b8.
    Scalars or numpy arrays.
    """
    x0, x1, cross = known
    if which == "A":
        c, d = GF.alpha_c, GF.alpha_inv_c
    elif which == "B":
        c, d = GF.beta_c, GF.beta_inv_c
    else:
        raise ValueError(f"which must be 'A' or 'B', got {which!r}")
    observed = np.asarray(observed, dtype=np.int64)
    x0 = np.asarray(x0, dtype=np.int64)
    shifted = np.where(x0 & 0x8000, ((x0 << 1) & WORD_MASK) ^ c, (x0 << 1) & WORD_MASK)
    image = observed ^ shifted ^ np.asarray(x1, dtype=np.int64) ^ np.asarray(cross, dtype=np.int64)
    solved = _mul_x_inv_inverse(d)[image]
    return int(solved) if solved.ndim == 0 else solved


def recovery_targets(bits: int = 8) -> List[TargetSpec]:
    """(step, lfsr, byte half) targets for u_s = A[15] and v_s = B[15] after step s."""
    return [TargetSpec(lfsr, 15, step, bits, half, after_update=True)
            for step in range(LFSR_STEPS_PER_UPDATE) for lfsr in LFSRS for half in BYTE_HALVES]


def _recovery_slot(spec: TargetSpec) -> Tuple[str, int, str]:
    return spec.lfsr, spec.step, spec.byte_half


def _recovery_slots(classifiers: Sequence[ProfiledClassifier]) -> Dict[Tuple[str, int, str], ProfiledClassifier]:
    slots = {_recovery_slot(c.target): c for c in classifiers
             if c.target.index == 15 and c.target.after_update and c.target.bits == 8}
    missing = [t.name for t in recovery_targets() if _recovery_slot(t) not in slots]
    if missing:
        raise ValueError(f"missing recovery classifiers: {', '.join(missing)}")
    return slots


def predict_scores(classifiers: Sequence[ProfiledClassifier], samples) -> Tuple[np.ndarray, np.ndarray]:
    """Per-trace byte log-probabilities of u_s and v_s, each n x 8 x 2 x 256
    (step, low/high byte, byte value)."""
    slots = _recovery_slots(classifiers)
    n = np.atleast_2d(samples).shape[0]
    scores = {lfsr: np.zeros((n, LFSR_STEPS_PER_UPDATE, 2, 256)) for lfsr in LFSRS}
    for (lfsr, step, half), clf in slots.items():
        scores[lfsr][:, step, BYTE_HALVES.index(half)] = clf.log_proba(samples)
    return scores["A"], scores["B"]


def scores_from_words(u_words, v_words, accuracy: float = 0.99) -> Tuple[np.ndarray, np.ndarray]:
    """Score tables for hard word predictions: each byte is right with
    probability `accuracy` and otherwise uniform over the other 255 values."""
    if not 1 / 256 < accuracy < 1:
        raise ValueError(f"accuracy must be in (1/256, 1), got {accuracy}")
    hit, miss = np.log(accuracy), np.log((1 - accuracy) / 255)
    out = []
    for words in (u_words, v_words):
        words = np.atleast_2d(np.asarray(words, dtype=np.int64))
        table = np.full(words.shape + (2, 256), miss)
        for half, byte in enumerate((words & 0xFF, words >> 8)):
            np.put_along_axis(table[..., half, :], byte[..., None], hit, axis=-1)
        out.append(table)
    return out[0], out[1]


def words_from_scores(scores) -> np.ndarray:
    best = np.asarray(scores).argmax(axis=-1).astype(np.int64)
    return best[..., 0] | (best[..., 1] << 8)


@dataclass
class WordRecovery:
    name: str
    value: int
    margin: float
    low_confidence: bool
    accuracy: Optional[float] = None
    mtd: Optional[int] = None


@dataclass
class AttackResult:
    words: List[WordRecovery]
    recovered_key: Optional[bytes]
    success: bool
    verified: bool
    n_traces: int
    key_mismatches: List[int] = field(default_factory=list)
    keystream_mismatches: List[int] = field(default_factory=list)

    @property
    def low_confidence(self) -> List[str]:
        return [w.name for w in self.words if w.low_confidence]


def _byte_totals(scores: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Summed log-probability of every byte value of mul_x_inv(k), given
    that trace i observed known_i ^ mul_x_inv(k)."""
    rows = np.arange(scores.shape[0])[:, None]
    candidates = np.arange(256)[None, :]
    return scores[rows, known[:, None] ^ candidates].sum(axis=0)


def _solve_scored(scores: np.ndarray, known: np.ndarray, d: int) -> Tuple[int, float]:
    """Most likely key word and its log-likelihood lead per trace.

    The observed word is known ^ mul_x_inv(k), and the two bytes of
    mul_x_inv(k) are scored by separate classifiers, so the best candidate
    is the best low byte joined with the best high byte.
    """
    leads, best = [], []
    for half, part in enumerate((known & 0xFF, known >> 8)):
        totals = _byte_totals(scores[:, half], part)
        top2 = np.sort(totals)[-2:]
        best.append(int(np.argmax(totals)))
        leads.append(float(top2[1] - top2[0]))
    image = best[0] | (best[1] << 8)
    return int(_mul_x_inv_inverse(d)[image]), min(leads) / scores.shape[0]


def reconstruct_key(u_scores, v_scores, ivs, min_margin: float = 0.0) -> List[WordRecovery]:
    """Replay the key-loaded registers step by step, picking a[8] and b[8]
    by the summed byte log-probabilities of u_s and v_s over all traces.

    Every register word is known once the step's key words are chosen, so
    the appended u/v are recomputed exactly rather than taken from the
    (noisy) predictions. The margin of a word is its lead over the runner-up
    in nats per trace.
    """
    u_scores = np.asarray(u_scores, dtype=np.float64)
    v_scores = np.asarray(v_scores, dtype=np.float64)
    if u_scores.ndim == 3:
        u_scores, v_scores = u_scores[None], v_scores[None]
    ivs = np.atleast_2d(np.asarray(ivs, dtype=np.uint8))
    n = u_scores.shape[0]
    if n == 0:
        raise InsufficientDataError("no attack traces")
    if u_scores.shape != (n, LFSR_STEPS_PER_UPDATE, 2, 256) or v_scores.shape != u_scores.shape:
        raise ValueError(f"score tables must be n x {LFSR_STEPS_PER_UPDATE} x 2 x 256, "
                         f"got {u_scores.shape} and {v_scores.shape}")
    iv_words = ivs.reshape(n, 8, 2).astype(np.int64)
    a = [iv_words[:, j, 0] | (iv_words[:, j, 1] << 8) for j in range(8)] + [None] * 8
    b = [np.zeros(n, dtype=np.int64)] * 8 + [None] * 8

    recovered: Dict[int, WordRecovery] = {}
    for s in range(LFSR_STEPS_PER_UPDATE):
        known_u = _mul_x_vec(a[0], GF.alpha_c) ^ a[1] ^ b[0]
        known_v = _mul_x_vec(b[0], GF.beta_c) ^ b[3] ^ a[0]
        for slot, scores, known, d in ((s, u_scores[:, s], known_u, GF.alpha_inv_c),
                                       (8 + s, v_scores[:, s], known_v, GF.beta_inv_c)):
            value, margin = _solve_scored(scores, known, d)
            recovered[slot] = WordRecovery(name=f"k{slot}", value=value, margin=margin,
                                           low_confidence=margin < min_margin)
        a8 = np.full(n, recovered[s].value, dtype=np.int64)
        b8 = np.full(n, recovered[8 + s].value, dtype=np.int64)
        u = known_u ^ _mul_x_inv_vec(a8, GF.alpha_inv_c)
        v = known_v ^ _mul_x_inv_vec(b8, GF.beta_inv_c)
        a[8], b[8] = a8, b8
        a = a[1:] + [u]
        b = b[1:] + [v]
    return [recovered[i] for i in range(16)]


def _mul_x_vec(v: np.ndarray, c: int) -> np.ndarray:
    return np.where(v & 0x8000, ((v << 1) & WORD_MASK) ^ c, (v << 1) & WORD_MASK)


def _mul_x_inv_vec(v: np.ndarray, d: int) -> np.ndarray:
    return np.where(v & 1, (v >> 1) ^ d, v >> 1)


def recover_full_key(classifiers: Sequence[ProfiledClassifier], attack_traces: TraceSet,
                     iv: Optional[bytes] = None, budget: Optional[int] = None, min_margin: float = 0.0,
                     keystream_sample: Optional[bytes] = None, true_key: Optional[bytes] = None,
                     scores: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                     predictions: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> AttackResult:
    """Recover k0..k15 from attack traces of one fixed key.

    Byte scores come from the classifiers unless precomputed `scores` or
    hard word `predictions` are passed. Success is judged against
    `true_key` (or the traces' own keys) and/or a keystream sample
    generated with the first trace's IV; without either it means no word
    was flagged low confidence.
    """
    n = odd_budget(len(attack_traces), budget)
    traces = attack_traces.subset(np.arange(n))
    ivs = traces.ivs if iv is None else np.tile(np.frombuffer(iv, dtype=np.uint8), (n, 1))
    if scores is not None:
        u_scores, v_scores = (np.asarray(s)[:n] for s in scores)
    elif predictions is not None:
        u_scores, v_scores = scores_from_words(*(np.asarray(p)[:n] for p in predictions))
    else:
        u_scores, v_scores = predict_scores(classifiers, traces.samples)
    words = reconstruct_key(u_scores, v_scores, ivs, min_margin)
    key = words_to_bytes([w.value for w in words])

    if true_key is None and traces.has_keys and np.all(traces.keys == traces.keys[0]):
        true_key = traces.key_bytes(0)
    key_mismatches: List[int] = []
    keystream_mismatches: List[int] = []
    verified = False
    if true_key is not None:
        _score_words(words, words_from_scores(u_scores), words_from_scores(v_scores), ivs, true_key)
        key_mismatches = [i for i in range(len(key)) if key[i] != true_key[i]]
        verified = True
    if keystream_sample:
        regenerated = SnowV(key, ivs[0].tobytes()).keystream(len(keystream_sample))
        keystream_mismatches = [i for i in range(len(regenerated)) if regenerated[i] != keystream_sample[i]]
        verified = True
    if verified:
        success = not key_mismatches and not keystream_mismatches
    else:
        success = not any(w.low_confidence for w in words)
    result = AttackResult(words=words, recovered_key=key, success=success, verified=verified, n_traces=n,
                          key_mismatches=key_mismatches, keystream_mismatches=keystream_mismatches)
    logger.info("Key recovery over %d traces: %s%s", n, key.hex(),
                "" if success else f" (failed, {len(key_mismatches)} key bytes and "
                                   f"{len(keystream_mismatches)} keystream bytes differ)")
    return result


def _score_words(words: List[WordRecovery], u_pred, v_pred, ivs, true_key: bytes):
    """Per-trace accuracy of each key word's prediction and its MTD."""
    u_true = np.zeros_like(u_pred)
    v_true = np.zeros_like(v_pred)
    cache = {}
    for i, row in enumerate(ivs):
        iv = row.tobytes()
        if iv not in cache:
            history = register_history(KeyMaterial(true_key, iv))
            cache[iv] = (history[1:, 0, 15], history[1:, 1, 15])
        u_true[i], v_true[i] = cache[iv]
    for s in range(LFSR_STEPS_PER_UPDATE):
        for slot, pred, truth in ((s, u_pred[:, s], u_true[:, s]), (8 + s, v_pred[:, s], v_true[:, s])):
            word = words[slot]
            word.accuracy = float(np.mean(pred == truth))
            try:
                word.mtd = mtd(word.accuracy)[0]
            except NoConvergenceError:
                word.mtd = None


def train_recovery_classifiers(train: TraceSet, val: TraceSet, test: TraceSet, method: str = "lda",
                               preprocess: str = "none", cfg: AttackConfig = AttackConfig(),
                               jobs: int = 1) -> List[ProfilingResult]:
    """Profile all 32 byte targets; targets are independent so they run in parallel."""
    histories = (trace_histories(train), trace_histories(val) if len(val) else None,
                 trace_histories(test) if len(test) else None)
    targets = recovery_targets()
    args = (method, preprocess, cfg, histories)
    if jobs > 1 and JOBLIB_AVAILABLE:
        results = Parallel(n_jobs=jobs)(
            delayed(run_profiling_attack)(train, val, test, t, *args) for t in targets)
    else:
        results = [run_profiling_attack(train, val, test, t, *args) for t in targets]
    return list(results)


def attack_report(result: AttackResult) -> dict:
    return {
        "recovered_key": result.recovered_key.hex() if result.recovered_key else None,
        "success": result.success,
        "verified": result.verified,
        "n_traces": result.n_traces,
        "key_mismatches": result.key_mismatches,
        "keystream_mismatches": result.keystream_mismatches,
        "low_confidence": result.low_confidence,
        "words": [{"name": w.name, "value": f"{w.value:04x}", "margin": w.margin,
                   "accuracy": w.accuracy, "mtd": w.mtd} for w in result.words],
        "reported_mtd": REPORTED_MTD,
        "reported_mtd_formula": reported_mtd_rows(),
    }


# ---------------------------------------------------------------------------
# Classifier bundles
# ---------------------------------------------------------------------------

def save_classifiers(classifiers: Sequence[ProfiledClassifier], path) -> None:
    blobs: Dict[str, np.ndarray] = {}
    for i, clf in enumerate(classifiers):
        prefix = f"c{i}."
        blobs[prefix + "target"] = clf.target.encode()
        blobs[prefix + "points"] = clf.points.astype(np.int64)
        blobs[prefix + "samples_per_trace"] = np.array(clf.samples_per_trace, dtype=np.int64)
        if clf.pca is not None:
            for name, arr in model_to_blobs(clf.pca)[1].items():
                blobs[f"{prefix}pca.{name}"] = arr
        if clf.scaler is not None:
            blobs[prefix + "scaler.mean"], blobs[prefix + "scaler.scale"] = clf.scaler
        kind, model_blobs = model_to_blobs(clf.model)
        blobs[prefix + "model_kind"] = np.array(kind, dtype=np.int64)
        for name, arr in model_blobs.items():
            blobs[f"{prefix}model.{name}"] = arr
    with open(path, "wb") as f:
        f.write(encode_blobs(KIND_BUNDLE, blobs))


def load_classifiers(path) -> List[ProfiledClassifier]:
    with open(path, "rb") as f:
        kind, blobs = decode_blobs(f.read())
    if kind != KIND_BUNDLE:
        raise CompatibilityError(f"{path} holds a single model, not a classifier bundle")
    count = len({name.split(".", 1)[0] for name in blobs})
    classifiers = []
    for i in range(count):
        prefix = f"c{i}."
        part = {name[len(prefix):]: arr for name, arr in blobs.items() if name.startswith(prefix)}

        def group(tag):
            return {name[len(tag):]: arr for name, arr in part.items() if name.startswith(tag)}

        pca_blobs = group("pca.")
        classifiers.append(ProfiledClassifier(
            target=TargetSpec.decode(part["target"]),
            points=part["points"].astype(np.intp),
            model=model_from_blobs(int(part["model_kind"]), group("model.")),
            samples_per_trace=int(part["samples_per_trace"]),
            pca=model_from_blobs(KIND_PCA, pca_blobs) if pca_blobs else None,
            scaler=(part["scaler.mean"], part["scaler.scale"]) if "scaler.mean" in part else None,
        ))
    return classifiers
