"""Local datasets and the pluggable learner.

Two model families are supported, both trained with plain mini-batch SGD on
softmax cross-entropy plus optional L2:

* ``logreg``: multinomial logistic regression, parameters ``W (d, c), b (c)``
* ``mlp1``: one tanh hidden layer, parameters ``W1 (d, h), b1 (h), W2 (h, c), b2 (c)``

Parameters travel as one flat float64 vector with shape metadata, which is
what the aggregation and compression code operate on.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyTestSet, EmptyTrainSet, InvalidSpec

BYTES_PER_SCALAR = 4
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class LocalDataset:
    device_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_test(self) -> int:
        return len(self.y_test)


@dataclass(frozen=True)
class PartitionSpec:
    n_devices: int = 100
    n_classes: int = 10
    feature_dim: int = 20
    samples_min: int = 20
    samples_max: int = 200
    samples_exponent: float = 1.5
    dirichlet_alpha: float = 0.5
    class_sep: float = 1.0
    class_radius_spread: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_devices", "n_classes", "feature_dim"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be at least 1")
        # the smallest device must keep one test sample after the 80/20 split
        if self.samples_min < 5:
            raise InvalidSpec("samples_min must be at least 5")
        if self.samples_max < self.samples_min:
            raise InvalidSpec("samples_max must be >= samples_min")
        if not self.dirichlet_alpha > 0:
            raise InvalidSpec("dirichlet_alpha must be positive")
        if self.samples_exponent < 0:
            raise InvalidSpec("samples_exponent must be non-negative")
        if self.class_sep < 0 or self.class_radius_spread < 0:
            raise InvalidSpec("class_sep and class_radius_spread must be non-negative")


@dataclass(frozen=True)
class LearnerSpec:
    family: str = "logreg"
    hidden_units: int = 16
    learning_rate: float = 0.05
    batch_size: int = 10
    l2: float = 0.0

    def __post_init__(self):
        if self.family not in ("logreg", "mlp1"):
            raise InvalidSpec(f"unknown learner family {self.family!r}")
        if not self.learning_rate >= 0:
            raise InvalidSpec("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise InvalidSpec("batch_size must be at least 1")
        if self.family == "mlp1" and self.hidden_units < 1:
            raise InvalidSpec("hidden_units must be at least 1")
        if self.l2 < 0:
            raise InvalidSpec("l2 must be non-negative")


@dataclass(frozen=True)
class ModelWeights:
    vector: np.ndarray
    shapes: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))
        if vec.ndim != 1 or vec.size != sum(math.prod(s) for s in self.shapes):
            raise ValueError("vector length does not match declared shapes")
        if not np.all(np.isfinite(vec)):
            raise ValueError("weights must be finite")

    @property
    def byte_size(self) -> int:
        return BYTES_PER_SCALAR * self.vector.size

    def unflatten(self) -> list[np.ndarray]:
        return unflatten(self.vector, self.shapes)

    def replace(self, vector: np.ndarray) -> ModelWeights:
        return ModelWeights(vector, self.shapes)


def unflatten(vector: np.ndarray, shapes) -> list[np.ndarray]:
    out, i = [], 0
    for s in shapes:
        n = math.prod(s)
        out.append(vector[i : i + n].reshape(s))
        i += n
    return out


def model_shapes(spec: LearnerSpec, feature_dim: int, n_classes: int) -> tuple[tuple[int, ...], ...]:
    if spec.family == "logreg":
        return ((feature_dim, n_classes), (n_classes,))
    h = spec.hidden_units
    return ((feature_dim, h), (h,), (h, n_classes), (n_classes,))


# -- data --------------------------------------------------------------------


def _split(device_id: str, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> LocalDataset:
    order = rng.permutation(len(y))
    n_train = math.ceil(TRAIN_FRACTION * len(y) - 1e-9)
    tr, te = order[:n_train], order[n_train:]
    return LocalDataset(device_id, x[tr], y[tr], x[te], y[te])


def _power_law_sizes(spec: PartitionSpec, rng: np.random.Generator) -> np.ndarray:
    # inverse CDF of density ~ x^-a on [min, max + 1), floored
    lo, hi, a = spec.samples_min, spec.samples_max + 1, spec.samples_exponent
    u = rng.random(spec.n_devices)
    if abs(a - 1.0) < 1e-12:
        x = lo * (hi / lo) ** u
    else:
        p = 1.0 - a
        x = (lo**p + u * (hi**p - lo**p)) ** (1.0 / p)
    return np.clip(np.floor(x).astype(int), spec.samples_min, spec.samples_max)


def _allocate(n: int, props: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``n * props`` to integer counts."""
    raw = n * props
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    if rest > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rest]] += 1
    return counts


def partition(spec: PartitionSpec) -> list[LocalDataset]:
    """Synthetic non-IID partition: power-law sizes, Dirichlet label skew.

    Features are unit-variance Gaussians around per-class embeddings.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.class_sep, size=(spec.n_classes, spec.feature_dim))
    # unequal class-mean norms make the bias terms matter, so SGD needs many steps
    centers *= 1.0 + spec.class_radius_spread * np.linspace(0.0, 1.0, spec.n_classes)[:, None]
    sizes = _power_law_sizes(spec, rng)
    width = len(str(spec.n_devices - 1))
    out = []
    for i, n in enumerate(sizes):
        props = rng.dirichlet(np.full(spec.n_classes, spec.dirichlet_alpha))
        counts = _allocate(int(n), props)
        y = np.repeat(np.arange(spec.n_classes), counts)
        x = centers[y] + rng.normal(size=(len(y), spec.feature_dim))
        out.append(_split(f"dev{i:0{width}d}", x, y, rng))
    return out


def load_csv_datasets(path: str | Path, seed: int = 0) -> list[LocalDataset]:
    """Import ``label,f0,...,fD,device`` rows, grouped by the device column."""
    rows: dict[str, list[tuple[int, list[float]]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        feats = [f for f in fields if f.startswith("f")]
        if "label" not in fields or "device" not in fields or not feats:
            raise InvalidSpec("CSV needs label, device and f0..fD columns")
        feats.sort(key=lambda f: int(f[1:]))
        for row in reader:
            rows[row["device"]].append((int(row["label"]), [float(row[f]) for f in feats]))
    rng = np.random.default_rng(seed)
    out = []
    for device_id in sorted(rows):
        y = np.array([r[0] for r in rows[device_id]], dtype=int)
        x = np.array([r[1] for r in rows[device_id]], dtype=np.float64)
        out.append(_split(device_id, x, y, rng))
    return out


# -- model -------------------------------------------------------------------


def init_weights(spec: LearnerSpec, feature_dim: int, n_classes: int, rng: np.random.Generator) -> ModelWeights:
    if feature_dim < 1 or n_classes < 1:
        raise ValueError("dimensions must be at least 1")
    shapes = model_shapes(spec, feature_dim, n_classes)
    if spec.family == "logreg":
        return ModelWeights(np.zeros(sum(math.prod(s) for s in shapes)), shapes)
    parts = []
    for s in shapes:
        if len(s) == 2:
            bound = math.sqrt(6.0 / (s[0] + s[1]))
            parts.append(rng.uniform(-bound, bound, size=s).ravel())
        else:
            parts.append(np.zeros(s))
    return ModelWeights(np.concatenate(parts), shapes)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(vector: np.ndarray, shapes, family: str, x: np.ndarray) -> np.ndarray:
    p = unflatten(vector, shapes)
    if family == "logreg":
        return x @ p[0] + p[1]
    hid = np.tanh(x @ p[0] + p[1])
    return hid @ p[2] + p[3]


def loss_and_grad(
    vector: np.ndarray, shapes, family: str, x: np.ndarray, y: np.ndarray, l2: float = 0.0
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy + (l2/2)||theta||^2 and its exact gradient."""
    n = len(y)
    p = unflatten(vector, shapes)
    if family == "logreg":
        logits = x @ p[0] + p[1]
    else:
        hid = np.tanh(x @ p[0] + p[1])
        logits = hid @ p[2] + p[3]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(vector @ vector)
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if family == "logreg":
        grads = [x.T @ dz, dz.sum(axis=0)]
    else:
        dh = (dz @ p[2].T) * (1.0 - hid**2)
        grads = [x.T @ dh, dh.sum(axis=0), hid.T @ dz, dz.sum(axis=0)]
    g = np.concatenate([gi.ravel() for gi in grads])
    if l2:
        g = g + l2 * vector
    return float(loss), g


def dataset_loss(weights: ModelWeights, x: np.ndarray, y: np.ndarray, spec: LearnerSpec) -> float:
    return loss_and_grad(weights.vector, weights.shapes, spec.family, x, y, spec.l2)[0]


def local_gradient(weights: ModelWeights, dataset: LocalDataset, spec: LearnerSpec) -> np.ndarray:
    if dataset.n_train == 0:
        raise EmptyTrainSet(dataset.device_id)
    return loss_and_grad(
        weights.vector, weights.shapes, spec.family, dataset.x_train, dataset.y_train, spec.l2
    )[1]


def local_train(
    weights: ModelWeights,
    dataset: LocalDataset,
    spec: LearnerSpec,
    epochs: int,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    prox_center: np.ndarray | None = None,
) -> tuple[ModelWeights, float]:
    """Run ``epochs`` shuffled passes of mini-batch SGD.

    With ``prox_mu > 0`` the objective gains ``(prox_mu/2)||w - prox_center||^2``
    (the center defaults to the starting weights).  The returned loss is the
    batch-size weighted mean of the pre-step batch losses of the last epoch,
    without the proximal term.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if dataset.n_train == 0:
        raise EmptyTrainSet(dataset.device_id)
    w = weights.vector.copy()
    center = w.copy() if prox_center is None else prox_center
    x, y, n, bs = dataset.x_train, dataset.y_train, dataset.n_train, spec.batch_size
    last = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, g = loss_and_grad(w, weights.shapes, spec.family, x[idx], y[idx], spec.l2)
            if prox_mu:
                g = g + prox_mu * (w - center)
            w = w - spec.learning_rate * g
            total += loss * len(idx)
        last = total / n
    return ModelWeights(w, weights.shapes), last


def evaluate(
    weights: ModelWeights, datasets: list[LocalDataset], spec: LearnerSpec
) -> tuple[list[float], float]:
    """Per-device test accuracy and the test-size weighted global accuracy."""
    per_device, hits, total = [], 0, 0
    for ds in datasets:
        if ds.n_test == 0:
            raise EmptyTestSet(ds.device_id)
        pred = forward(weights.vector, weights.shapes, spec.family, ds.x_test).argmax(axis=1)
        correct = int((pred == ds.y_test).sum())
        per_device.append(correct / ds.n_test)
        hits += correct
        total += ds.n_test
    return per_device, hits / total
