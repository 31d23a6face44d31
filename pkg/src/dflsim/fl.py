"""Desk-scale federated learning primitives.

Models are multinomial logistic regressions, optionally with one tanh hidden
layer, stored as a flat float64 vector plus a shape descriptor:

* ``dims=(d, k)``: ``W (d*k) | b (k)``
* ``dims=(d, h, k)``: ``W1 (d*h) | b1 (h) | W2 (h*k) | b2 (k)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec import wire
from .identity import NodeId

SCORE_SCALE = 1000


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@wire(40)
@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if w.ndim != 1 or w.size != param_count(self.dims):
            raise ValueError(f"weights of size {w.size} do not fit dims {self.dims}")
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ModelParams)
            and self.dims == other.dims
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self) -> int:
        return hash((self.dims, self.weights.tobytes()))


def param_count(dims: Sequence[int]) -> int:
    if len(dims) == 2:
        d, k = dims
        return d * k + k
    if len(dims) == 3:
        d, h, k = dims
        return d * h + h + h * k + k
    raise ValueError(f"dims must have 2 or 3 entries, got {dims!r}")


def _unpack(w: np.ndarray, dims: tuple[int, ...]) -> list[np.ndarray]:
    if len(dims) == 2:
        d, k = dims
        shapes = [(d, k), (k,)]
    else:
        d, h, k = dims
        shapes = [(d, h), (h,), (h, k), (k,)]
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(w[pos:pos + n].reshape(shape))
        pos += n
    return out


def init_params(dims: Sequence[int], seed: int, scale: float = 0.01) -> ModelParams:
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    return ModelParams(rng.normal(0.0, scale, param_count(dims)), dims)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    role: str
    n_classes: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("features must be (n, d) and labels (n,) with equal n")
        if self.role not in ("train", "test"):
            raise ValueError(f"role must be train or test, got {self.role!r}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("labels outside class range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.features, self.labels, role, self.n_classes)

    def subset(self, idx: np.ndarray, role: Optional[str] = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], role or self.role, self.n_classes)


@dataclass
class SubModel:
    params: ModelParams
    owner: NodeId
    round: int
    score: Optional[int] = None

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round must be >= 1")


@dataclass(frozen=True)
class DpConfig:
    eps: float
    delta: float = 1e-5
    clip_norm: float = 1.0

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    @property
    def sigma(self) -> float:
        return dp_sigma(self)


# -- model evaluation --------------------------------------------------------------


def _forward(params: ModelParams, x: np.ndarray):
    parts = _unpack(params.weights, params.dims)
    if len(parts) == 2:
        w, b = parts
        return x @ w + b, None
    w1, b1, w2, b2 = parts
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params, np.asarray(x, dtype=np.float64))
    return np.argmax(logits, axis=1)


def score_from_counts(correct: int, total: int) -> int:
    """round(correct / total * 1000) with halves rounded up, in exact integers."""
    if total <= 0:
        raise ValueError("empty test set")
    return (2 * SCORE_SCALE * correct + total) // (2 * total)


def evaluate(params: ModelParams, test: Dataset) -> int:
    if test.role != "test":
        raise ValueError("evaluate expects a test dataset")
    if len(test) == 0:
        raise ValueError("empty test set")
    correct = int(np.sum(predict(params, test.features) == test.labels))
    return score_from_counts(correct, len(test))


# -- training ----------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray, k: int):
    logits, hidden = _forward(params, x)
    probs = _softmax(logits)
    n = x.shape[0]
    loss = -float(np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if hidden is None:
        gw = x.T @ delta
        gb = delta.sum(axis=0)
        return loss, np.concatenate([gw.ravel(), gb])
    _, _, w2, _ = _unpack(params.weights, params.dims)
    gw2 = hidden.T @ delta
    gb2 = delta.sum(axis=0)
    dh = (delta @ w2.T) * (1.0 - hidden ** 2)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def train_local(
    global_params: ModelParams,
    data: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> ModelParams:
    """Mini-batch SGD on softmax cross-entropy, starting from ``global_params``."""
    if data.role != "train":
        raise ValueError("train_local expects a training dataset")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(data) == 0:
        return global_params
    rng = np.random.default_rng(seed)
    dims = global_params.dims
    w = global_params.weights.copy()
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = _loss_and_grad(ModelParams(w, dims), data.features[idx], data.labels[idx],
                                        data.n_classes)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss {loss} during local training")
            with np.errstate(over="ignore", invalid="ignore"):
                w = w - lr * grad
            if not np.all(np.isfinite(w)):
                raise DivergenceError("weights diverged during local training")
    return ModelParams(w, dims)


def fed_avg(parts: Sequence[tuple[ModelParams, float]]) -> ModelParams:
    """Weighted element-wise mean of sub-models; weights are normalized."""
    if not parts:
        raise ValueError("fed_avg needs at least one model")
    dims = parts[0][0].dims
    total = 0.0
    acc = np.zeros_like(parts[0][0].weights)
    for params, weight in parts:
        if params.dims != dims:
            raise ValueError(f"dims mismatch: {params.dims} vs {dims}")
        if not weight > 0:
            raise ValueError("fed_avg weights must be positive")
        total += weight
    for params, weight in parts:
        acc += (weight / total) * params.weights
    if len({p.weights.tobytes() for p, _ in parts}) == 1:
        # averaging identical models must return that model bit-for-bit
        return parts[0][0]
    return ModelParams(acc, dims)


# -- differential privacy ------------------------------------------------------------


def dp_sigma(cfg: DpConfig) -> float:
    """Gaussian-mechanism noise scale for L2 sensitivity ``clip_norm``."""
    return cfg.clip_norm * math.sqrt(2.0 * math.log(1.25 / cfg.delta)) / cfg.eps


def clip_l2(vec: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm <= clip_norm or norm == 0.0:
        return vec.copy()
    return vec * (clip_norm / norm)


def add_dp_noise(params: ModelParams, cfg: DpConfig, seed: int) -> ModelParams:
    """Clip ``params`` to ``clip_norm`` in L2, then add N(0, sigma^2) per coordinate."""
    rng = np.random.default_rng(seed)
    clipped = clip_l2(params.weights, cfg.clip_norm)
    noise = rng.standard_normal(clipped.size) * dp_sigma(cfg)
    return ModelParams(clipped + noise, params.dims)


def privatize_update(local: ModelParams, base: ModelParams, cfg: DpConfig, seed: int) -> ModelParams:
    """Noise the training delta ``local - base`` and re-apply it to ``base``."""
    delta = ModelParams(local.weights - base.weights, local.dims)
    noised = add_dp_noise(delta, cfg, seed)
    return ModelParams(base.weights + noised.weights, local.dims)


# -- datasets ------------------------------------------------------------------------


def make_blobs(n: int, n_classes: int, dim: int, seed: int, spread: float = 1.0,
               separation: float = 3.0, role: str = "train") -> Dataset:
    """Isotropic Gaussian clusters with centres drawn once from ``seed``."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(n_classes, dim))
    labels = rng.integers(0, n_classes, size=n)
    features = centres[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(features, labels, role, n_classes)


def make_moons(n: int, seed: int, noise: float = 0.15, role: str = "train") -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    angle = rng.uniform(0.0, math.pi, size=n)
    x = np.where(labels == 0, np.cos(angle), 1.0 - np.cos(angle))
    y = np.where(labels == 0, np.sin(angle), 0.5 - np.sin(angle))
    features = np.column_stack([x, y]) + rng.normal(0.0, noise, size=(n, 2))
    return Dataset(features, labels, role, 2)


def partition(data: Dataset, n_parts: int, seed: int, skew: Optional[float] = None) -> list[Dataset]:
    """Split rows among ``n_parts`` owners.

    ``skew=None`` deals rows out uniformly at random. A positive ``skew`` is
    the concentration of a per-class Dirichlet draw; small values give each
    owner a lopsided label mix.
    """
    rng = np.random.default_rng(seed)
    if skew is None:
        order = rng.permutation(len(data))
        return [data.subset(np.sort(chunk)) for chunk in np.array_split(order, n_parts)]
    buckets: list[list[int]] = [[] for _ in range(n_parts)]
    for cls in range(data.n_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == cls))
        shares = rng.dirichlet(np.full(n_parts, skew))
        cuts = (np.cumsum(shares)[:-1] * idx.size).astype(int)
        for owner, chunk in enumerate(np.split(idx, cuts)):
            buckets[owner].extend(chunk.tolist())
    return [data.subset(np.sort(np.asarray(b, dtype=np.int64))) for b in buckets]


def load_delimited(path: str | Path, role: str, n_classes: Optional[int] = None,
                   delimiter: str = ",") -> Dataset:
    """Read one sample per row, label in the last column; ``#`` starts a comment."""
    rows = np.loadtxt(path, delimiter=delimiter, ndmin=2, comments="#")
    features = rows[:, :-1]
    labels = rows[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError("labels must be integers")
    labels = labels.astype(np.int64)
    classes = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, role, classes)


def save_delimited(data: Dataset, path: str | Path, delimiter: str = ",") -> None:
    rows = np.column_stack([data.features, data.labels.astype(np.float64)])
    fmt = ["%.17g"] * data.dim + ["%d"]
    np.savetxt(path, rows, delimiter=delimiter, fmt=fmt)
