"""Desk-scale objectives with stochastic gradient oracles.

Every problem exposes the same oracle surface used by the simulator:

``dim``
    parameter length.
``sample_batch(rng, batch_size, shard)``
    the batch a worker draws this round (indices, or a sample count for the
    noisy quadratic which has no dataset).
``loss_grad(x, batch, rng)``
    (loss estimate, stochastic gradient), unbiased for the full gradient.
``full_loss(x)`` / ``full_grad(x)``
    noise-free values used by the metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core_math import as_param_vector
from .errors import DatasetFormatError, InvalidInputError, InvalidParameterError

__all__ = [
    "Dataset",
    "Shard",
    "shard_data",
    "QuadraticProblem",
    "LogisticProblem",
    "MlpProblem",
    "quadratic_grad",
    "logistic_grad",
    "mlp_grad",
    "finite_diff_grad",
    "generate_two_class",
    "two_class_direction",
    "generate_blobs",
    "CsvSchema",
    "load_csv_dataset",
    "save_csv_dataset",
]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InvalidInputError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError("one label per sample required")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features must be finite")

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)


# -- sharding ----------------------------------------------------------------

@dataclass(frozen=True)
class Shard:
    """A worker's view of the data: i.i.d. draws with replacement from ``indices``."""

    indices: np.ndarray

    def draw(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return self.indices[rng.integers(0, self.indices.size, size=batch_size)]


def shard_data(dataset_size: int, n_workers: int, seed: int = 0, disjoint: bool = False) -> list:
    """Split ``dataset_size`` samples among workers.

    By default every worker samples the whole dataset (i.i.d. data; the streams
    differ because each worker has its own generator). ``disjoint=True`` gives
    a seeded random partition into near-equal shards instead.
    """
    if n_workers < 1:
        raise InvalidParameterError("need at least one worker")
    if dataset_size < 1:
        raise InvalidInputError("dataset is empty")
    everything = np.arange(dataset_size, dtype=np.int64)
    if not disjoint:
        return [Shard(everything) for _ in range(n_workers)]
    if dataset_size < n_workers:
        raise InvalidInputError("fewer samples than workers in disjoint mode")
    perm = np.random.default_rng(seed).permutation(dataset_size)
    return [Shard(np.sort(part)) for part in np.array_split(perm, n_workers)]


# -- noisy quadratic ---------------------------------------------------------

@dataclass(frozen=True)
class QuadraticProblem:
    """f(x) = 1/2 (x - x*)^T A (x - x*) with Gaussian gradient noise of std sigma/sqrt(batch)."""

    A: np.ndarray
    x_star: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        d = self.x_star.size
        if self.A.shape != (d, d):
            raise InvalidInputError("A must be d x d")
        if not np.array_equal(self.A, self.A.T):
            raise InvalidInputError("A must be symmetric")
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be nonnegative")

    @classmethod
    def diagonal(cls, curvatures, x_star, sigma: float = 0.0) -> "QuadraticProblem":
        return cls(np.diag(np.asarray(curvatures, dtype=np.float64)), as_param_vector(x_star).copy(), sigma)

    @classmethod
    def random(cls, seed: int, d: int, sigma: float = 0.0, cond: float = 10.0, scale: float = 1.0):
        """Random PSD matrix with eigenvalues in [1/cond, 1] (times ``scale``)."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eig = scale * np.geomspace(1.0 / cond, 1.0, d)
        a = (q * eig) @ q.T
        a = 0.5 * (a + a.T)
        return cls(a, rng.standard_normal(d), sigma)

    @property
    def dim(self) -> int:
        return self.x_star.size

    def sample_batch(self, rng, batch_size: int, shard=None) -> int:
        return batch_size

    def full_grad(self, x) -> np.ndarray:
        return self.A @ (x - self.x_star)

    def full_loss(self, x) -> float:
        r = x - self.x_star
        return 0.5 * float(r @ self.A @ r)

    def loss_grad(self, x, batch: int, rng) -> tuple[float, np.ndarray]:
        return quadratic_grad(self, x, batch, rng)

    def loss_grad_many(self, x, batches: Sequence[int], rngs: Sequence) -> tuple[np.ndarray, np.ndarray]:
        """Same values as calling :meth:`loss_grad` once per (batch, rng) pair.

        All callers share ``x``, so the noise-free part is computed once and
        only the per-stream noise is drawn row by row.
        """
        x = as_param_vector(x)
        if x.size != self.dim:
            raise InvalidInputError("parameter length does not match the problem")
        r = x - self.x_star
        g = self.A @ r
        loss = 0.5 * float(r @ g)
        out = np.empty((len(rngs), self.dim))
        for i, (b, rng) in enumerate(zip(batches, rngs)):
            out[i] = g + (self.sigma / math.sqrt(b)) * rng.standard_normal(self.dim) if self.sigma > 0 else g
        return np.full(len(rngs), loss), out


def quadratic_grad(p: QuadraticProblem, x, batch: int, rng) -> tuple[float, np.ndarray]:
    x = as_param_vector(x)
    if x.size != p.dim:
        raise InvalidInputError("parameter length does not match the problem")
    r = x - p.x_star
    g = p.A @ r
    loss = 0.5 * float(r @ g)
    if p.sigma > 0:
        g = g + (p.sigma / math.sqrt(batch)) * rng.standard_normal(p.dim)
    return loss, g


# -- logistic regression -----------------------------------------------------

@dataclass(frozen=True)
class LogisticProblem:
    """Binary logistic regression without intercept, mean cross-entropy plus (reg/2)||w||^2."""

    data: Dataset
    reg: float = 0.0

    def __post_init__(self):
        if not np.isin(self.data.labels, (0, 1)).all():
            raise InvalidInputError("logistic labels must be 0 or 1")
        if self.reg < 0:
            raise InvalidParameterError("regularization must be nonnegative")

    @property
    def dim(self) -> int:
        return self.data.features.shape[1]

    def sample_batch(self, rng, batch_size: int, shard: Shard) -> np.ndarray:
        return shard.draw(rng, batch_size)

    def loss_grad(self, x, batch, rng=None):
        return logistic_grad(self, x, batch)

    def full_loss(self, x) -> float:
        return logistic_grad(self, x, None)[0]

    def full_grad(self, x) -> np.ndarray:
        return logistic_grad(self, x, None)[1]

    def accuracy(self, x) -> float:
        pred = (self.data.features @ x > 0).astype(self.data.labels.dtype)
        return float(np.mean(pred == self.data.labels))


def _sigmoid(z):
    # tanh form: no overflow for any finite z
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_grad(p: LogisticProblem, x, batch: Optional[Sequence[int]]):
    """Loss and analytic gradient on ``batch`` (all samples when None)."""
    w = as_param_vector(x)
    if w.size != p.dim:
        raise InvalidInputError("parameter length does not match the problem")
    if batch is None:
        X, y = p.data.features, p.data.labels
    else:
        idx = np.asarray(batch, dtype=np.int64)
        if idx.size == 0:
            raise InvalidInputError("empty batch")
        X, y = p.data.features[idx], p.data.labels[idx]
    y = y.astype(np.float64)
    z = X @ w
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * p.reg * float(w @ w)
    grad = X.T @ (_sigmoid(z) - y) / y.size + p.reg * w
    return loss, grad


# -- one-hidden-layer MLP ----------------------------------------------------

@dataclass(frozen=True)
class MlpProblem:
    """tanh MLP with softmax cross-entropy.

    Flat parameter layout, in order: W1 (hidden x input, row-major), b1
    (hidden), W2 (classes x hidden, row-major), b2 (classes).
    """

    data: Dataset
    hidden: int
    classes: int

    def __post_init__(self):
        lab = self.data.labels
        if lab.size and (lab.min() < 0 or lab.max() >= self.classes):
            raise InvalidInputError("labels outside [0, classes)")

    @property
    def input_dim(self) -> int:
        return self.data.features.shape[1]

    @property
    def dim(self) -> int:
        h, i, c = self.hidden, self.input_dim, self.classes
        return h * i + h + c * h + c

    def unflatten(self, x):
        x = as_param_vector(x)
        if x.size != self.dim:
            raise InvalidInputError(f"expected {self.dim} parameters, got {x.size}")
        h, i, c = self.hidden, self.input_dim, self.classes
        o = 0
        w1 = x[o:o + h * i].reshape(h, i); o += h * i
        b1 = x[o:o + h]; o += h
        w2 = x[o:o + c * h].reshape(c, h); o += c * h
        b2 = x[o:o + c]
        return w1, b1, w2, b2

    @staticmethod
    def flatten(w1, b1, w2, b2) -> np.ndarray:
        return np.concatenate([np.ravel(w1), np.ravel(b1), np.ravel(w2), np.ravel(b2)]).astype(np.float64)

    def init_params(self, rng, scale: float = 0.5) -> np.ndarray:
        return scale * rng.standard_normal(self.dim) / math.sqrt(max(self.input_dim, self.hidden))

    def sample_batch(self, rng, batch_size: int, shard: Shard) -> np.ndarray:
        return shard.draw(rng, batch_size)

    def loss_grad(self, x, batch, rng=None):
        return mlp_grad(self, x, batch, rng)

    def full_loss(self, x) -> float:
        return mlp_grad(self, x, None)[0]

    def full_grad(self, x) -> np.ndarray:
        return mlp_grad(self, x, None)[1]

    def accuracy(self, x) -> float:
        w1, b1, w2, b2 = self.unflatten(x)
        logits = np.tanh(self.data.features @ w1.T + b1) @ w2.T + b2
        return float(np.mean(np.argmax(logits, axis=1) == self.data.labels))


def mlp_grad(p: MlpProblem, x, batch, rng=None):
    """Mean softmax cross-entropy over ``batch`` and its backpropagated gradient."""
    w1, b1, w2, b2 = p.unflatten(x)
    if batch is None:
        X, y = p.data.features, p.data.labels
    else:
        idx = np.asarray(batch, dtype=np.int64)
        if idx.size == 0:
            raise InvalidInputError("empty batch")
        X, y = p.data.features[idx], p.data.labels[idx]
    n = X.shape[0]
    hid = np.tanh(X @ w1.T + b1)
    logits = hid @ w2.T + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    loss = float(np.mean(logz - logits[np.arange(n), y]))

    dlogits = np.exp(logits - logz[:, None])
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    gw2 = dlogits.T @ hid
    gb2 = dlogits.sum(axis=0)
    dpre = (dlogits @ w2) * (1.0 - hid * hid)
    gw1 = dpre.T @ X
    gb1 = dpre.sum(axis=0)
    return loss, MlpProblem.flatten(gw1, gb1, gw2, gb2)


# -- finite differences ------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate."""
    if not h > 0:
        raise InvalidParameterError("step h must be positive")
    x = as_param_vector(x)
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


# -- synthetic data ----------------------------------------------------------

def generate_two_class(seed: int, n: int, d: int, separation: float) -> Dataset:
    """Two unit-variance Gaussian clouds centred at +-separation/2 along a random unit direction.

    Labels are balanced (n // 2 zeros) and shuffled. The direction is the first
    draw of the seeded stream; :func:`two_class_direction` recovers it.
    """
    if n < 1 or d < 1:
        raise InvalidParameterError("n and d must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    direction = v / np.linalg.norm(v)
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    labels = rng.permutation(labels)
    centres = np.where(labels[:, None] == 1, 0.5, -0.5) * separation * direction
    features = centres + rng.standard_normal((n, d))
    return Dataset(features, labels, tuple(f"x{k}" for k in range(d)))


def two_class_direction(seed: int, d: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(d)
    return v / np.linalg.norm(v)


def generate_blobs(seed: int, n: int, d: int, classes: int, spread: float = 3.0) -> Dataset:
    """Gaussian blobs with random centres, one per class; used for the MLP."""
    rng = np.random.default_rng(seed)
    centres = spread * rng.standard_normal((classes, d))
    labels = rng.integers(0, classes, size=n)
    return Dataset(centres[labels] + rng.standard_normal((n, d)), labels, tuple(f"x{k}" for k in range(d)))


# -- CSV ---------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Which columns to read. Defaults: every column but the last is a feature, the last is the label."""

    feature_columns: Optional[tuple] = None
    label_column: Optional[str] = None
    binary_labels: bool = True


def load_csv_dataset(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Read a header-plus-rows CSV file. Rows and columns in errors are 1-based file positions."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError("file is empty", row=1)
    header = [h.strip() for h in rows[0]]
    label_col = schema.label_column or header[-1]
    feature_cols = list(schema.feature_columns) if schema.feature_columns else [h for h in header if h != label_col]
    for name in feature_cols + [label_col]:
        if name not in header:
            raise DatasetFormatError(f"column {name!r} missing from header", row=1)
    feat_pos = [header.index(c) for c in feature_cols]
    label_pos = header.index(label_col)

    feats, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetFormatError(f"expected {len(header)} cells, found {len(row)}", row=r)
        values = []
        for c in feat_pos + [label_pos]:
            try:
                v = float(row[c])
            except ValueError:
                raise DatasetFormatError(f"non-numeric cell {row[c]!r}", row=r, column=c + 1) from None
            if not math.isfinite(v):
                raise DatasetFormatError(f"non-finite cell {row[c]!r}", row=r, column=c + 1)
            values.append(v)
        label = values.pop()
        if label != int(label) or (schema.binary_labels and label not in (0.0, 1.0)):
            raise DatasetFormatError(f"label {row[label_pos]!r} outside {{0, 1}}", row=r, column=label_pos + 1)
        feats.append(values)
        labels.append(int(label))
    if not feats:
        raise DatasetFormatError("no data rows", row=2)
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64), tuple(feature_cols))


def save_csv_dataset(path, data: Dataset) -> None:
    names = list(data.feature_names) or [f"x{k}" for k in range(data.features.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["label"])
        for xrow, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in xrow] + [int(y)])
