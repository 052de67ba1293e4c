"""
Compact aggregation-GNN classifier.

Layout for an input of shape (K+2, F, n_nodes):

    conv   c filters, kernel k along the aggregation axis, width 1 along the
           feature axis, n_nodes input channels, valid padding, stride 1
           -> (R, F, c) with R = K + 3 - k, ReLU
    fc1    position-wise dense F*c -> h1, shared over the R positions, ReLU
    fc2    flatten R*h1 -> h2, ReLU
    out    h2 -> 1, sigmoid

``fc_sizes`` is (h1, h2, 1). With c=2, k=2, (4, 5, 1), F=3 and one node the
model has 20K + 65 parameters: 125 at K=3.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from config.settings import TRAIN_CONFIG
from core.errors import (
    DegenerateDatasetError,
    ModelFormatError,
    ModelShapeError,
    ModelTruncatedError,
    ModelVersionError,
    SpecMismatchError,
)
from core.graph_features import AggFeatures

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SSAGNN-MODEL"
MODEL_VERSION = 1
BCE_EPS = 1e-12
PROB_EPS = 1e-15
TENSOR_ORDER = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b")


@dataclass(frozen=True)
class ModelSpec:
    conv_filters: int = 2
    conv_kernel: int = 2
    fc_sizes: Tuple[int, int, int] = (4, 5, 1)
    k_len: int = 3
    n_features: int = 3
    aggregation_nodes: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if len(self.fc_sizes) != 3 or self.fc_sizes[-1] != 1:
            raise ValueError(f"fc_sizes must be three widths ending in 1, got {self.fc_sizes}")
        if not 1 <= self.conv_kernel <= self.k_len + 2:
            raise ValueError(f"conv kernel {self.conv_kernel} does not fit {self.k_len + 2} rows")
        if min(self.conv_filters, self.fc_sizes[0], self.fc_sizes[1], self.k_len, self.n_features) < 1:
            raise ValueError("layer widths, K and F must be positive")
        if not self.aggregation_nodes:
            raise ValueError("at least one aggregation node is required")

    @property
    def n_nodes(self) -> int:
        return len(self.aggregation_nodes)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.k_len + 2, self.n_features, self.n_nodes)

    @property
    def conv_rows(self) -> int:
        return self.k_len + 3 - self.conv_kernel

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        c, k, f, n = self.conv_filters, self.conv_kernel, self.n_features, self.n_nodes
        h1, h2, _ = self.fc_sizes
        return {
            "conv_w": (c, n, k),
            "conv_b": (c,),
            "fc1_w": (f * c, h1),
            "fc1_b": (h1,),
            "fc2_w": (self.conv_rows * h1, h2),
            "fc2_b": (h2,),
            "out_w": (h2, 1),
            "out_b": (1,),
        }

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.tensor_shapes().values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_sizes"] = list(self.fc_sizes)
        d["aggregation_nodes"] = list(self.aggregation_nodes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            conv_filters=int(d["conv_filters"]),
            conv_kernel=int(d["conv_kernel"]),
            fc_sizes=tuple(int(s) for s in d["fc_sizes"]),
            k_len=int(d["k_len"]),
            n_features=int(d["n_features"]),
            aggregation_nodes=tuple(int(n) for n in d["aggregation_nodes"]),
        )


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: Dict[str, np.ndarray]
    adam: Optional[AdamState] = None

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        adam = None
        if self.adam is not None:
            adam = AdamState({k: v.copy() for k, v in self.adam.m.items()},
                             {k: v.copy() for k, v in self.adam.v.items()}, self.adam.t)
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()}, adam)


@dataclass
class TrainConfig:
    lr: float = TRAIN_CONFIG["lr"]
    batch_size: int = TRAIN_CONFIG["batch_size"]
    epochs: int = TRAIN_CONFIG["epochs"]
    seed: int = 0
    adam_beta1: float = TRAIN_CONFIG["adam_beta1"]
    adam_beta2: float = TRAIN_CONFIG["adam_beta2"]
    adam_eps: float = TRAIN_CONFIG["adam_eps"]
    split: Tuple[float, float, float] = TRAIN_CONFIG["split"]
    decision_threshold: float = TRAIN_CONFIG["decision_threshold"]
    log_every: int = TRAIN_CONFIG["log_every"]

    def __post_init__(self):
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature tensor (M, K+2, F, n_nodes) with binary labels."""

    features: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if self.features.ndim != 4 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match labels {self.labels.shape}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.provenance)

    def samples(self, k_len: int, nodes: Sequence[int]) -> Iterator[Tuple[AggFeatures, int]]:
        for z, y in zip(self.features, self.labels):
            yield AggFeatures(z=z, k_len=k_len, nodes=tuple(nodes)), int(y)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: Optional[float]
    val_acc: Optional[float]


# --- model ------------------------------------------------------------------------------

def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in TENSOR_ORDER:
        shape = spec.tensor_shapes()[name]
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = shape[1] * shape[2] if name == "conv_w" else shape[0]
        bound = np.sqrt(1.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(spec, tensors)


def _batch(params: ModelParams, features) -> np.ndarray:
    x = features.z if isinstance(features, AggFeatures) else np.asarray(features, dtype=float)
    shape = params.spec.input_shape
    if x.shape == shape:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != shape:
        raise ValueError(f"feature shape {x.shape} does not match model input {shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray):
    t = params.tensors
    spec = params.spec
    b, rows = x.shape[0], spec.conv_rows
    conv = np.zeros((b, rows, spec.n_features, spec.conv_filters))
    for tap in range(spec.conv_kernel):
        conv += np.einsum("brfm,jm->brfj", x[:, tap:tap + rows], t["conv_w"][:, :, tap])
    conv += t["conv_b"]
    a0 = np.maximum(conv, 0.0)
    flat0 = a0.reshape(b, rows, -1)
    pre1 = flat0 @ t["fc1_w"] + t["fc1_b"]
    a1 = np.maximum(pre1, 0.0)
    flat1 = a1.reshape(b, -1)
    pre2 = flat1 @ t["fc2_w"] + t["fc2_b"]
    a2 = np.maximum(pre2, 0.0)
    logit = (a2 @ t["out_w"])[:, 0] + t["out_b"][0]
    prob = np.clip(expit(logit), PROB_EPS, 1.0 - PROB_EPS)
    cache = dict(x=x, conv=conv, flat0=flat0, pre1=pre1, flat1=flat1, pre2=pre2, a2=a2)
    return prob, cache


def predict_batch(params: ModelParams, features) -> np.ndarray:
    prob, _ = _forward(params, _batch(params, features))
    return prob


def predict(params: ModelParams, features) -> float:
    """Probability that the operating point is secure."""
    return float(predict_batch(params, features)[0])


def bce_loss(probs, labels) -> float:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if probs.size == 0:
        raise ValueError("binary cross entropy of an empty batch")
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def loss_and_gradients(params: ModelParams, features, labels) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean BCE over the batch and its exact gradient for every tensor."""
    x = _batch(params, features)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if x.shape[0] == 0 or y.shape[0] != x.shape[0]:
        raise ValueError(f"batch of {x.shape[0]} samples with {y.shape[0]} labels")
    t = params.tensors
    spec = params.spec
    prob, c = _forward(params, x)
    b, rows = x.shape[0], spec.conv_rows

    d_logit = (prob - y) / b
    grads = {"out_w": (c["a2"].T @ d_logit)[:, None], "out_b": np.array([d_logit.sum()])}

    d_pre2 = np.outer(d_logit, t["out_w"][:, 0]) * (c["pre2"] > 0)
    grads["fc2_w"] = c["flat1"].T @ d_pre2
    grads["fc2_b"] = d_pre2.sum(axis=0)

    d_pre1 = (d_pre2 @ t["fc2_w"].T).reshape(c["pre1"].shape) * (c["pre1"] > 0)
    grads["fc1_w"] = np.einsum("brf,brh->fh", c["flat0"], d_pre1)
    grads["fc1_b"] = d_pre1.sum(axis=(0, 1))

    d_conv = (d_pre1 @ t["fc1_w"].T).reshape(c["conv"].shape) * (c["conv"] > 0)
    conv_w = np.zeros_like(t["conv_w"])
    for tap in range(spec.conv_kernel):
        conv_w[:, :, tap] = np.einsum("brfj,brfm->jm", d_conv, x[:, tap:tap + rows])
    grads["conv_w"] = conv_w
    grads["conv_b"] = d_conv.sum(axis=(0, 1, 2))
    return bce_loss(prob, y), grads


def gradients(params: ModelParams, batch) -> Dict[str, np.ndarray]:
    features, labels = batch
    return loss_and_gradients(params, features, labels)[1]


def accuracy(params: ModelParams, features, labels, threshold: float = 0.5) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    preds = (predict_batch(params, features) >= threshold).astype(int)
    return float(np.mean(preds == labels))


# --- optimisation -----------------------------------------------------------------------

class AdamOptimizer:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(v) for k, v in params.tensors.items()},
            v={k: np.zeros_like(v) for k, v in params.tensors.items()},
        )

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
        s = self.state
        s.t += 1
        for name in TENSOR_ORDER:
            g = grads[name]
            s.m[name] = self.beta1 * s.m[name] + (1 - self.beta1) * g
            s.v[name] = self.beta2 * s.v[name] + (1 - self.beta2) * g * g
            m_hat = s.m[name] / (1 - self.beta1 ** s.t)
            v_hat = s.v[name] / (1 - self.beta2 ** s.t)
            params.tensors[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def split_indices(m: int, fractions: Sequence[float], seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled index sets with floor(f * M) in val and test, the rest in train."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_val = int(np.floor(fractions[1] * m + 1e-9))
    n_test = int(np.floor(fractions[2] * m + 1e-9))
    n_train = m - n_val - n_test
    order = np.random.default_rng(seed).permutation(m)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split_dataset(dataset: Dataset, fractions: Sequence[float], seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    train_idx, val_idx, test_idx = split_indices(len(dataset), fractions, seed)
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)


def train(dataset: Dataset, spec: ModelSpec, config: TrainConfig) -> Tuple[ModelParams, List[EpochRecord]]:
    """
    Mini-batch Adam on the training split.

    Returns the snapshot with the best validation accuracy (first best wins),
    or the last epoch when the validation split is empty.

    Raises:
        DegenerateDatasetError: the training split holds a single class
    """
    if dataset.features.shape[1:] != spec.input_shape:
        raise SpecMismatchError(f"dataset features {dataset.features.shape[1:]} do not match model input {spec.input_shape}")
    train_set, val_set, _ = split_dataset(dataset, config.split, config.seed)
    if len(train_set) == 0 or len(np.unique(train_set.labels)) < 2:
        raise DegenerateDatasetError(
            f"training split of {len(train_set)} samples has a single class; refusing to train"
        )

    rng = np.random.default_rng(config.seed)
    params = init_model(spec, config.seed)
    optimizer = AdamOptimizer(params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    logger.info(f"training {spec.n_params()} parameters on {len(train_set)} samples "
                f"({len(val_set)} validation) for {config.epochs} epochs")

    history: List[EpochRecord] = []
    best: Optional[ModelParams] = None
    best_acc = -np.inf
    x_tr, y_tr = train_set.features, train_set.labels
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(params, x_tr[idx], y_tr[idx])
            total += loss * len(idx)
            optimizer.step(params, grads)

        train_acc = accuracy(params, x_tr, y_tr, config.decision_threshold)
        val_loss = val_acc = None
        if len(val_set):
            val_loss = bce_loss(predict_batch(params, val_set.features), val_set.labels)
            val_acc = accuracy(params, val_set.features, val_set.labels, config.decision_threshold)
            if val_acc > best_acc:
                best_acc = val_acc
                best = params.copy()
                best.adam = AdamState({k: v.copy() for k, v in optimizer.state.m.items()},
                                      {k: v.copy() for k, v in optimizer.state.v.items()}, optimizer.state.t)
        history.append(EpochRecord(epoch, total / len(train_set), train_acc, val_loss, val_acc))
        if config.log_every and epoch % config.log_every == 0:
            logger.info(f"epoch {epoch}: train loss {history[-1].train_loss:.5f} acc {train_acc:.4f}"
                        + (f", val loss {val_loss:.5f} acc {val_acc:.4f}" if val_acc is not None else ""))

    if best is None:
        best = params.copy()
        best.adam = optimizer.state
    return best, history


# --- persistence -------------------------------------------------------------------------

def persist_model(params: ModelParams, spec: Optional[ModelSpec] = None) -> bytes:
    """Magic line, JSON header line, then little-endian float64 tensors in header order."""
    spec = params.spec if spec is None else spec
    if spec != params.spec:
        raise SpecMismatchError("spec does not describe these parameters")
    header = {
        "spec": spec.to_dict(),
        "dtype": "<f8",
        "tensors": [{"name": name, "shape": list(params.tensors[name].shape)} for name in TENSOR_ORDER],
    }
    payload = b"".join(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes() for name in TENSOR_ORDER)
    head = MODEL_MAGIC + b" " + str(MODEL_VERSION).encode() + b"\n"
    return head + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def restore_model(data: bytes) -> Tuple[ModelParams, ModelSpec]:
    """
    Inverse of ``persist_model``.

    Raises:
        ModelVersionError: unsupported format version
        ModelShapeError: header shapes disagree with the declared spec
        ModelTruncatedError: payload shorter than declared
        ModelFormatError: anything else malformed
    """
    first, sep, rest = data.partition(b"\n")
    parts = first.split(b" ")
    if not sep or len(parts) != 2 or parts[0] != MODEL_MAGIC:
        raise ModelFormatError("not a model file")
    if parts[1] != str(MODEL_VERSION).encode():
        raise ModelVersionError(f"unsupported model format version {parts[1].decode(errors='replace')}")

    header_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ModelTruncatedError("model header is incomplete")
    try:
        header = json.loads(header_line.decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        declared = [(t["name"], tuple(int(s) for s in t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable model header: {exc}") from exc

    expected = spec.tensor_shapes()
    if [name for name, _ in declared] != list(TENSOR_ORDER):
        raise ModelShapeError(f"tensor list {[n for n, _ in declared]} does not match layout")
    for name, shape in declared:
        if shape != expected[name]:
            raise ModelShapeError(f"{name} has shape {shape}, spec implies {expected[name]}")

    need = 8 * sum(int(np.prod(shape)) for _, shape in declared)
    if len(payload) < need:
        raise ModelTruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ModelFormatError(f"{len(payload) - need} unexpected trailing bytes")

    flat = np.frombuffer(payload, dtype="<f8")
    tensors, offset = {}, 0
    for name, shape in declared:
        size = int(np.prod(shape))
        tensors[name] = flat[offset:offset + size].astype(np.float64).reshape(shape)
        offset += size
    if not all(np.all(np.isfinite(t)) for t in tensors.values()):
        raise ModelFormatError("model contains non-finite weights")
    return ModelParams(spec, tensors), spec


def save_model(path: Union[str, Path], params: ModelParams) -> None:
    Path(path).write_bytes(persist_model(params))
    logger.info(f"model saved to {path}")


def load_model(path: Union[str, Path]) -> Tuple[ModelParams, ModelSpec]:
    return restore_model(Path(path).read_bytes())
