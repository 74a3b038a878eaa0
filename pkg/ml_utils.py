"""Machine learning utilities: PCA, shrinkage LDA and the fully connected network."""
import copy
import importlib.util
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_softmax
from sklearn.covariance import empirical_covariance, shrunk_covariance
from sklearn.decomposition import PCA

logger = logging.getLogger(__name__)

TORCH_AVAILABLE = importlib.util.find_spec("torch") is not None

ACTIVATIONS = ("relu", "leaky_relu", "prelu", "elu", "selu", "swish", "mish")
DEFAULT_HIDDEN = (512, 256, 128)


class InsufficientDataError(ValueError):
    """Too few samples to fit a model."""


class MissingClassError(ValueError):
    """A class in [0, C) has fewer than two training samples."""

    def __init__(self, label: int, count: int):
        super().__init__(f"class {label} has {count} training samples, need at least 2")
        self.label = label
        self.count = count


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch + 1}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingProgress:
    """Epoch callback that reports training progress through logging."""

    def __init__(self, total_epochs, log_every=10, sink: Optional[Callable[[str], None]] = None):
        self.total_epochs = total_epochs
        self.log_every = max(1, log_every)
        self.sink = sink
        self._active = True

    def on_train_begin(self, logs=None):
        self._active = True

    def on_train_end(self, logs=None):
        self._active = False

    def on_epoch_end(self, epoch, logs=None):
        if not self._active:
            return
        logs = logs or {}
        last = epoch + 1 == self.total_epochs
        if (epoch + 1) % self.log_every and not last:
            return
        status = (
            f"Epoch {epoch + 1}/{self.total_epochs} - "
            f"Loss: {logs.get('loss', 0):.4f}, "
            f"Accuracy: {logs.get('accuracy', 0):.4f}, "
            f"Val Loss: {logs.get('val_loss', 0):.4f}"
        )
        logger.info(status)
        if self.sink is not None:
            self.sink(status)


def get_torch():
    """Lazy load torch so the PCA/LDA paths work without it."""
    try:
        import torch
        return torch
    except ImportError as e:
        raise ImportError("PyTorch is not installed. Please install it using: pip install torch") from e


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X, target_variance: float = 0.99, max_components: int = 2000) -> PcaModel:
    """Keep the fewest components reaching `target_variance`, capped by
    `max_components`, n - 1 and d."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 samples, got {n}")
    full = PCA(n_components=min(n, d), svd_solver="full").fit(X)
    ratios = np.asarray(full.explained_variance_ratio_, dtype=np.float64)
    if not np.all(np.isfinite(ratios)):
        ratios = np.zeros_like(ratios)
    if ratios.any():
        reach = int(np.searchsorted(np.cumsum(ratios), target_variance - 1e-12)) + 1
    else:
        reach = 1
    k = max(1, min(max_components, reach, n - 1, d))
    logger.debug("PCA keeps %d of %d components (%.4f variance)", k, d, ratios[:k].sum())
    return PcaModel(mean=full.mean_.copy(), components=full.components_[:k].copy(),
                    explained_ratio=ratios[:k].copy())


def pca_transform(m: PcaModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - m.mean) @ m.components.T


def pca_inverse(m: PcaModel, Z) -> np.ndarray:
    return np.asarray(Z, dtype=np.float64) @ m.components + m.mean


# ---------------------------------------------------------------------------
# LDA
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LdaModel:
    """Gaussian shared-covariance classifier.

    cov_factor is the lower Cholesky factor of the regularized pooled
    within-class covariance; coef and intercept are derived from it.
    """
    class_means: np.ndarray
    cov_factor: np.ndarray
    priors: np.ndarray
    shrinkage: float
    coef: np.ndarray = field(init=False, repr=False)
    intercept: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        coef = cho_solve((self.cov_factor, True), means.T).T
        with np.errstate(divide="ignore"):
            intercept = -0.5 * np.sum(means * coef, axis=1) + np.log(self.priors)
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "intercept", intercept)

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T


def lda_fit(X, y, n_classes: Optional[int] = None, shrinkage: float = 1e-3) -> LdaModel:
    """Pooled within-class covariance, shrunk as (1-s)S + s*tr(S)/k*I."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} and y {y.shape} do not match")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError(f"shrinkage must be in [0, 1], got {shrinkage}")
    C = int(n_classes) if n_classes is not None else int(y.max()) + 1
    if C < 2:
        raise ValueError(f"LDA needs at least 2 classes, got {C}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    counts = np.bincount(y, minlength=C)
    for label, count in enumerate(counts):
        if count < 2:
            raise MissingClassError(label, int(count))
    means = np.zeros((C, X.shape[1]))
    np.add.at(means, y, X)
    means /= counts[:, None]
    pooled = empirical_covariance(X - means[y], assume_centered=True)
    regularized = shrunk_covariance(pooled, shrinkage) if shrinkage > 0 else pooled
    try:
        factor, _ = cho_factor(regularized, lower=True)
    except np.linalg.LinAlgError as e:
        raise InsufficientDataError("pooled covariance is singular; increase shrinkage") from e
    factor = np.tril(factor)
    return LdaModel(class_means=means, cov_factor=factor, priors=counts / counts.sum(), shrinkage=float(shrinkage))


def lda_predict(m: LdaModel, X) -> Tuple[np.ndarray, np.ndarray]:
    """argmax of x'S^-1 mu_c - mu_c'S^-1 mu_c / 2 + log prior_c; ties go to the lowest class."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    scores = X @ m.coef.T + m.intercept
    return np.argmax(scores, axis=1), scores


def lda_log_proba(m: LdaModel, X) -> np.ndarray:
    """Posterior log-probabilities under the shared-covariance Gaussian model."""
    return log_softmax(lda_predict(m, X)[1], axis=1)


# ---------------------------------------------------------------------------
# Fully connected network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    zero_init_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class FcnModel:
    network: object
    activation: str
    n_features: int
    n_classes: int
    hidden: Tuple[int, ...]
    history: List[dict] = field(default_factory=list)

    @property
    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        nn = get_torch().nn
        return [(m.weight.detach().cpu().numpy(), m.bias.detach().cpu().numpy())
                for m in self.network if isinstance(m, nn.Linear)]

    @property
    def prelu_slopes(self) -> List[float]:
        nn = get_torch().nn
        return [float(m.weight.detach().reshape(-1)[0]) for m in self.network if isinstance(m, nn.PReLU)]

    @property
    def dtype(self):
        return next(self.network.parameters()).dtype


def make_activation(name: str):
    nn = get_torch().nn
    if name == "relu":
        return nn.ReLU()
    elif name == "leaky_relu":
        return nn.LeakyReLU(negative_slope=0.01)
    elif name == "prelu":
        # one learnable slope per hidden layer
        return nn.PReLU(num_parameters=1, init=0.25)
    elif name == "elu":
        return nn.ELU(alpha=1.0)
    elif name == "selu":
        return nn.SELU()
    elif name == "swish":
        return nn.SiLU()
    elif name == "mish":
        return nn.Mish()
    raise ValueError(f"unknown activation {name!r}; choose from {', '.join(ACTIVATIONS)}")


def fcn_build(n_features: int, n_classes: int, activation: str = "relu",
              hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0,
              zero_output: bool = False, dtype=None) -> FcnModel:
    """Dense d -> hidden... -> C network; weights use torch's fan-in scaled uniform init."""
    torch = get_torch()
    nn = torch.nn
    layers = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        width = n_features
        for h in hidden:
            layers += [nn.Linear(width, h), make_activation(activation)]
            width = h
        out = nn.Linear(width, n_classes)
        if zero_output:
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
        layers.append(out)
    network = nn.Sequential(*layers)
    if dtype is not None:
        network = network.to(dtype)
    return FcnModel(network=network, activation=activation, n_features=int(n_features),
                    n_classes=int(n_classes), hidden=tuple(int(h) for h in hidden))


def _softmax(logits):
    shifted = logits - logits.max(dim=1, keepdim=True).values
    exp = shifted.exp()
    return exp / exp.sum(dim=1, keepdim=True)


def fcn_logits(m: FcnModel, X, chunk_size: int = 8192):
    torch = get_torch()
    X = np.atleast_2d(np.asarray(X))
    m.network.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, X.shape[0], chunk_size):
            xt = torch.as_tensor(X[start:start + chunk_size], dtype=m.dtype)
            outs.append(m.network(xt))
    if not outs:
        return torch.zeros((0, m.n_classes), dtype=m.dtype)
    return torch.cat(outs)


def fcn_forward(m: FcnModel, X) -> np.ndarray:
    """Class probabilities (softmax with max subtraction)."""
    return _softmax(fcn_logits(m, X)).double().cpu().numpy()


def fcn_predict(m: FcnModel, X) -> np.ndarray:
    return fcn_logits(m, X).argmax(dim=1).cpu().numpy()


def fcn_log_proba(m: FcnModel, X) -> np.ndarray:
    torch = get_torch()
    return torch.log_softmax(fcn_logits(m, X), dim=1).double().cpu().numpy()


def fcn_loss(m: FcnModel, X, y) -> float:
    """Mean softmax cross-entropy."""
    torch = get_torch()
    logits = fcn_logits(m, X)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64))
    return float(torch.nn.functional.cross_entropy(logits, yt))


def fcn_train(X, y, cfg: TrainConfig = TrainConfig(), activation: str = "relu",
              n_classes: Optional[int] = None, X_val=None, y_val=None,
              progress: Optional[TrainingProgress] = None) -> FcnModel:
    """Mini-batch Adam on mean cross-entropy; deterministic for a fixed seed."""
    torch = get_torch()
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise InsufficientDataError(f"cannot train on X {X.shape} with y {y.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features contain non-finite values")
    C = int(n_classes) if n_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")

    model = fcn_build(X.shape[1], C, activation, cfg.hidden, cfg.seed, cfg.zero_init_output)
    net = model.network
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    loss_fn = torch.nn.CrossEntropyLoss()
    xt, yt = torch.from_numpy(X), torch.from_numpy(y)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    progress = progress or TrainingProgress(cfg.epochs)
    has_val = X_val is not None and len(X_val) > 0

    n = X.shape[0]
    progress.on_train_begin()
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(n, generator=shuffle)
        total_loss, correct = 0.0, 0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = net(xt[idx])
            loss = loss_fn(logits, yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, batch, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == yt[idx]).sum())
        logs = {"epoch": epoch + 1, "loss": total_loss / n, "accuracy": correct / n}
        if has_val:
            logs["val_loss"] = fcn_loss(model, X_val, y_val)
            logs["val_accuracy"] = float(np.mean(fcn_predict(model, X_val) == np.asarray(y_val)))
        model.history.append(logs)
        progress.on_epoch_end(epoch, logs)
    progress.on_train_end()
    net.eval()
    return model


def check_gradients(m: FcnModel, X, y, eps: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-6) -> bool:
    """Compare backprop gradients of the loss w.r.t. every parameter with
    central finite differences, in float64 on a copy of the network."""
    torch = get_torch()
    from torch.func import functional_call

    net = copy.deepcopy(m.network).double()
    names = [name for name, _ in net.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in net.named_parameters())
    xt = torch.as_tensor(np.asarray(X), dtype=torch.float64)
    yt = torch.as_tensor(np.asarray(y, dtype=np.int64))

    def loss_of(*ps):
        logits = functional_call(net, dict(zip(names, ps)), (xt,))
        return torch.nn.functional.cross_entropy(logits, yt)

    return bool(torch.autograd.gradcheck(loss_of, params, eps=eps, atol=atol, rtol=rtol,
                                         raise_exception=False))


# ---------------------------------------------------------------------------
# Serialization ("SVML" v1)
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"SVML"
MODEL_VERSION = 1
KIND_PCA, KIND_LDA, KIND_FCN, KIND_BUNDLE = 1, 2, 3, 4
MODEL_HEADER = struct.Struct("<4sIII")
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("u1")}

Model = Union[PcaModel, LdaModel, FcnModel]


def _dtype_code(dtype: np.dtype) -> int:
    if dtype == np.float64:
        return 1
    if dtype == np.float32:
        return 2
    if dtype == np.uint8 or dtype == np.bool_:
        return 4
    if np.issubdtype(dtype, np.integer):
        return 3
    raise TypeError(f"cannot serialize arrays of dtype {dtype}")


def encode_blobs(kind: int, blobs: Dict[str, np.ndarray]) -> bytes:
    """Header, then a dimension table, then the raw little-endian blobs."""
    table, body = bytearray(), bytearray()
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr.dtype)
        arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    return MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, kind, len(blobs)) + bytes(table) + bytes(body)


def decode_blobs(data: bytes) -> Tuple[int, Dict[str, np.ndarray]]:
    if len(data) < MODEL_HEADER.size:
        raise ModelFormatError("truncated header", len(data))
    magic, version, kind, count = MODEL_HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", 0)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}", 4)
    pos = MODEL_HEADER.size
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            if code not in _DTYPE_CODES:
                raise ModelFormatError(f"unknown dtype code {code} for {name!r}", pos)
            entries.append((name, _DTYPE_CODES[code], shape))
    except struct.error:
        raise ModelFormatError("truncated dimension table", pos)
    blobs = {}
    for name, dtype, shape in entries:
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + size > len(data):
            raise ModelFormatError(f"truncated blob {name!r}", pos)
        blobs[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(data):
        raise ModelFormatError("trailing bytes after last blob", pos)
    return kind, blobs


def model_to_blobs(model: Model) -> Tuple[int, Dict[str, np.ndarray]]:
    if isinstance(model, PcaModel):
        return KIND_PCA, {"mean": model.mean, "components": model.components,
                          "explained_ratio": model.explained_ratio}
    if isinstance(model, LdaModel):
        return KIND_LDA, {"class_means": model.class_means, "cov_factor": model.cov_factor,
                          "priors": model.priors, "shrinkage": np.array(model.shrinkage)}
    if isinstance(model, FcnModel):
        blobs = {
            "activation": np.frombuffer(model.activation.encode("ascii"), dtype=np.uint8),
            "shape": np.array([model.n_features, model.n_classes], dtype=np.int64),
            "hidden": np.array(model.hidden, dtype=np.int64),
        }
        for key, tensor in model.network.state_dict().items():
            blobs[f"param.{key}"] = tensor.detach().cpu().numpy()
        return KIND_FCN, blobs
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_blobs(kind: int, blobs: Dict[str, np.ndarray]) -> Model:
    if kind == KIND_PCA:
        return PcaModel(blobs["mean"], blobs["components"], blobs["explained_ratio"])
    if kind == KIND_LDA:
        return LdaModel(blobs["class_means"], blobs["cov_factor"], blobs["priors"], float(blobs["shrinkage"]))
    if kind == KIND_FCN:
        torch = get_torch()
        params = {k[len("param."):]: v for k, v in blobs.items() if k.startswith("param.")}
        dtype = torch.float64 if any(v.dtype == np.float64 for v in params.values()) else None
        n_features, n_classes = (int(v) for v in blobs["shape"])
        model = fcn_build(n_features, n_classes, bytes(blobs["activation"]).decode("ascii"),
                          tuple(int(h) for h in blobs["hidden"]), dtype=dtype)
        model.network.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
        model.network.eval()
        return model
    raise ModelFormatError(f"unknown model kind {kind}", 8)


def save_model(model: Model, path) -> Path:
    kind, blobs = model_to_blobs(model)
    path = Path(path)
    path.write_bytes(encode_blobs(kind, blobs))
    return path


def load_model(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    kind, blobs = decode_blobs(path.read_bytes())
    return model_from_blobs(kind, blobs)
