"""Linear/logistic models with closed-form per-sample gradients, synthetic
blob data, and CSV tabular ingestion with per-group client partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "LogisticModel",
    "Schema",
    "TabularSplit",
    "MalformedRowsError",
    "per_sample_grad",
    "make_synthetic",
    "split_iid",
    "train_test_split",
    "load_csv",
]


class MalformedRowsError(ValueError):
    """CSV rows that could not be parsed, with their line numbers."""

    def __init__(self, rows: list[tuple[int, str]]):
        self.rows = rows
        preview = "; ".join(f"line {n}: {msg}" for n, msg in rows[:10])
        more = f" (+{len(rows) - 10} more)" if len(rows) > 10 else ""
        super().__init__(f"{len(rows)} malformed rows: {preview}{more}")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels must have matching row counts")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LogisticModel:
    """Single-layer softmax classifier; parameters live in one flat vector.

    Layout: K*d weights row-major, then K biases. L2 regularization, when
    set, is folded into every per-sample gradient (before clipping).
    """

    num_classes: int
    num_features: int
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_features < 1:
            raise ValueError("need at least one feature")

    @property
    def dim(self) -> int:
        return self.num_classes * self.num_features + self.num_classes

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, d = self.num_classes, self.num_features
        return theta[:k * d].reshape(k, d), theta[k * d:]

    def logits(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
        w, b = self._unpack(theta)
        return features @ w.T + b

    def _probs(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
        z = self.logits(theta, features)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def per_sample_grads(self, theta: np.ndarray, features: np.ndarray,
                         labels: np.ndarray) -> np.ndarray:
        """Cross-entropy gradient of every sample, one flat row each."""
        features = np.atleast_2d(features)
        labels = np.atleast_1d(labels)
        p = self._probs(theta, features)
        p[np.arange(len(labels)), labels] -= 1.0
        grad_w = p[:, :, None] * features[:, None, :]
        flat = np.concatenate([grad_w.reshape(len(labels), -1), p], axis=1)
        if self.l2_reg:
            flat += self.l2_reg * theta
        return flat

    def loss(self, theta: np.ndarray, features: np.ndarray,
             labels: np.ndarray) -> float:
        z = self.logits(theta, features)
        z -= z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        nll = float(np.mean(log_norm - z[np.arange(len(labels)), labels]))
        return nll + 0.5 * self.l2_reg * float(theta @ theta)

    def accuracy(self, theta: np.ndarray, features: np.ndarray,
                 labels: np.ndarray) -> float:
        pred = self.logits(theta, features).argmax(axis=1)
        return float(np.mean(pred == labels))


def per_sample_grad(model: LogisticModel, theta: np.ndarray, sample: np.ndarray,
                    label: int) -> np.ndarray:
    """Gradient of the cross-entropy at a single sample, flattened."""
    return model.per_sample_grads(theta, sample[None, :], np.array([label]))[0]


def make_synthetic(n: int, dim: int, num_classes: int, separation: float,
                   seed: int, feature_scales=None) -> Dataset:
    """Balanced Gaussian class blobs with the given mean separation.

    `feature_scales` optionally stretches coordinates after generation
    (means and noise alike), producing an ill-conditioned but equally
    separable problem; the default is isotropic.
    """
    if n < 1 or dim < 1 or num_classes < 1:
        raise ValueError("n, dim, and num_classes must all be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (separation / 2.0)
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.standard_normal((n, dim))
    if feature_scales is not None:
        scales = np.asarray(feature_scales, dtype=float)
        if scales.shape != (dim,) or (scales <= 0).any():
            raise ValueError("feature_scales must be positive with one entry per feature")
        features = features * scales
    return Dataset(features=features, labels=labels,
                   normalization={"kind": "none"})


def split_iid(dataset: Dataset, n_clients: int, seed: int) -> list[Dataset]:
    """Random equal shares; index shards are pairwise disjoint by construction."""
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    shards = np.array_split(order, n_clients)
    return [Dataset(features=dataset.features[idx], labels=dataset.labels[idx],
                    normalization=dict(dataset.normalization))
            for idx in shards]


def train_test_split(dataset: Dataset, test_fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    n_test = int(round(dataset.n * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    mk = lambda idx: Dataset(features=dataset.features[idx],
                             labels=dataset.labels[idx],
                             normalization=dict(dataset.normalization))
    return mk(train_idx), mk(test_idx)


@dataclass(frozen=True)
class Schema:
    """Column roles for tabular ingestion."""

    label: str
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    group: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(self.numeric))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        if not self.numeric and not self.categorical:
            raise ValueError("schema needs at least one feature column")


@dataclass
class TabularSplit:
    """Per-client training datasets plus a pooled held-out test set."""

    clients: list[Dataset]
    test: Dataset
    group_keys: list[str]
    unknown_category_count: int = 0


def _fit_normalizer(kind: str, features: np.ndarray) -> dict:
    if kind == "none":
        return {"kind": "none"}
    if kind == "zscore":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0] = 1.0
        return {"kind": "zscore", "mean": mean, "std": std}
    if kind == "minmax":
        lo = features.min(axis=0)
        span = features.max(axis=0) - lo
        span[span == 0] = 1.0
        return {"kind": "minmax", "lo": lo, "span": span}
    raise ValueError(f"unknown normalization {kind!r}")


def _apply_normalizer(record: dict, features: np.ndarray) -> np.ndarray:
    if record["kind"] == "none":
        return features
    if record["kind"] == "zscore":
        return (features - record["mean"]) / record["std"]
    return (features - record["lo"]) / record["span"]


def load_csv(path, schema: Schema, normalization: str = "none",
             test_fraction: float = 0.2, seed: int = 0) -> TabularSplit:
    """Parse a headered CSV into per-client datasets.

    Numeric columns pass through, categorical columns are one-hot encoded
    with a vocabulary fitted on the training split, and normalization
    statistics are fitted on the pooled training rows only. A group column,
    when present, yields one client per distinct value; otherwise the file
    becomes a single client. Categories unseen at fit time map to all-zero
    blocks and are tallied, not rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        needed = set(schema.numeric) | set(schema.categorical) | {schema.label}
        if schema.group:
            needed.add(schema.group)
        missing = needed - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows, bad = [], []
        for line_no, row in enumerate(reader, start=2):
            if any(row.get(c) in (None, "") for c in needed):
                bad.append((line_no, "missing value"))
                continue
            try:
                numeric = [float(row[c]) for c in schema.numeric]
            except ValueError as exc:
                bad.append((line_no, str(exc)))
                continue
            rows.append((numeric, [row[c] for c in schema.categorical],
                         row[schema.label], row[schema.group] if schema.group else ""))
    if bad:
        raise MalformedRowsError(bad)
    if not rows:
        raise ValueError(f"{path}: no data rows")

    label_values = sorted({r[2] for r in rows})
    label_index = {v: i for i, v in enumerate(label_values)}
    group_keys = sorted({r[3] for r in rows})

    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for key in group_keys:
        members = [r for r in rows if r[3] == key]
        order = rng.permutation(len(members))
        n_test = int(round(len(members) * test_fraction))
        for j in order[:n_test]:
            test_rows.append(members[j])
        for j in order[n_test:]:
            train_rows.append((key, members[j]))

    # categorical vocabularies from training rows only
    vocab = {}
    for ci, col in enumerate(schema.categorical):
        values = sorted({r[1][ci] for _, r in train_rows})
        vocab[col] = {v: i for i, v in enumerate(values)}

    unknown = 0

    def featurize(row):
        nonlocal unknown
        numeric, cats, _, _ = row
        parts = [np.asarray(numeric, dtype=float)]
        for ci, col in enumerate(schema.categorical):
            block = np.zeros(len(vocab[col]))
            idx = vocab[col].get(cats[ci])
            if idx is None:
                unknown += 1
            else:
                block[idx] = 1.0
            parts.append(block)
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    train_feats = np.array([featurize(r) for _, r in train_rows])
    norm = _fit_normalizer(normalization, train_feats)

    clients = []
    for key in group_keys:
        feats = [featurize(r) for k, r in train_rows if k == key]
        labs = [label_index[r[2]] for k, r in train_rows if k == key]
        clients.append(Dataset(features=_apply_normalizer(norm, np.array(feats).reshape(len(feats), -1)),
                               labels=np.asarray(labs, dtype=int),
                               normalization={"kind": normalization}))
    if test_rows:
        test_feats = _apply_normalizer(norm, np.array([featurize(r) for r in test_rows]))
        test_labs = np.array([label_index[r[2]] for r in test_rows], dtype=int)
    else:
        width = clients[0].dim if clients else 0
        test_feats = np.zeros((0, width))
        test_labs = np.zeros(0, dtype=int)
    test = Dataset(features=test_feats, labels=test_labs,
                   normalization={"kind": normalization})
    return TabularSplit(clients=clients, test=test, group_keys=group_keys,
                        unknown_category_count=unknown)
