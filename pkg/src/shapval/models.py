"""Native desk-scale classifiers: k-NN, softmax regression, one-hidden-layer MLP.

Everything is plain numpy and fully deterministic for a fixed seed: weights,
posteriors and losses are bit-identical across runs. Gradient-descent models
train on either hard labels or soft label distributions (surrogate fitting),
and expose analytic parameter and input gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datastore import Dataset, _as_index_array
from .errors import (
    InvariantError,
    NonDifferentiableModelError,
    SplitError,
    TrainingDivergedError,
)

KINDS = ("knn", "softmax_regression", "mlp")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Model kind plus training hyperparameters; the seed fixes everything."""

    kind: str
    seed: int = 0
    epochs: int = 40
    learning_rate: float = 0.1
    l2: float = 0.0
    batch_size: int = 32
    k: int = 1  # knn neighbor count
    hidden_width: int = 64  # mlp only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvariantError(f"unknown model kind {self.kind!r}, expected one of {KINDS}")
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise InvariantError("epochs must be >= 0, learning_rate > 0, batch_size >= 1")
        if self.l2 < 0:
            raise InvariantError("l2 must be non-negative")
        if self.k < 1 or self.hidden_width < 1:
            raise InvariantError("k and hidden_width must be >= 1")


@dataclass(frozen=True)
class PredictionSet:
    """Row-stochastic posterior matrix aligned to sample ids."""

    posteriors: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        post = np.ascontiguousarray(self.posteriors, dtype=np.float64)
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if post.ndim != 2 or ids.shape != (post.shape[0],):
            raise InvariantError("posteriors must be (m, c) with one id per row")
        if post.size and (post.min() < 0 or np.abs(post.sum(axis=1) - 1.0).max() > 1e-6):
            raise InvariantError("posterior rows must be non-negative and sum to 1 within 1e-6")
        post.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "posteriors", post)
        object.__setattr__(self, "ids", ids)


@dataclass(frozen=True)
class KnnModel:
    kind = "knn"
    train_features: np.ndarray  # float32, stored as given
    train_labels: np.ndarray
    k: int
    class_count: int

    @property
    def dim(self) -> int:
        return self.train_features.shape[1]


@dataclass(frozen=True)
class SoftmaxModel:
    kind = "softmax_regression"
    w: np.ndarray  # (d, c)
    b: np.ndarray  # (c,)
    class_count: int
    spec: ModelSpec | None = None
    loss_history: tuple = ()

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class MlpModel:
    kind = "mlp"
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, c)
    b2: np.ndarray  # (c,)
    class_count: int
    spec: ModelSpec | None = None
    loss_history: tuple = ()

    @property
    def dim(self) -> int:
        return self.w1.shape[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((labels.size, c))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _resolve_targets(ds: Dataset, train_idx, labels_override):
    """Target distribution matrix for gradient training; hard labels for knn."""
    if labels_override is None:
        hard = ds.labels[train_idx]
        return hard, _one_hot(hard, ds.class_count)
    override = np.asarray(labels_override)
    if override.ndim == 1:
        if override.shape[0] != train_idx.size:
            raise InvariantError("labels_override must align with train_idx")
        hard = override.astype(np.int64)
        if hard.min() < 0 or hard.max() >= ds.class_count:
            raise InvariantError("override label outside [0, class_count)")
        return hard, _one_hot(hard, ds.class_count)
    if override.shape != (train_idx.size, ds.class_count):
        raise InvariantError(
            f"soft label matrix must be ({train_idx.size}, {ds.class_count}), got {override.shape}"
        )
    soft = override.astype(np.float64)
    if soft.min() < 0 or np.abs(soft.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvariantError("soft labels must be row-stochastic")
    return None, soft


def _forward(model, x: np.ndarray):
    """Posteriors plus whatever intermediates backprop needs."""
    if isinstance(model, SoftmaxModel):
        return _softmax(x @ model.w + model.b), None
    if isinstance(model, MlpModel):
        h = np.maximum(x @ model.w1 + model.b1, 0.0)
        return _softmax(h @ model.w2 + model.b2), h
    raise InvariantError(f"not a gradient model: {type(model).__name__}")


def mean_cross_entropy(model, x: np.ndarray, targets: np.ndarray, l2: float = 0.0) -> float:
    """Mean cross-entropy of soft targets, plus l2/2 penalty on weight matrices."""
    p, _ = _forward(model, x)
    ce = -(targets * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean()
    if l2 > 0.0:
        if isinstance(model, SoftmaxModel):
            ce += 0.5 * l2 * float((model.w**2).sum())
        else:
            ce += 0.5 * l2 * float((model.w1**2).sum() + (model.w2**2).sum())
    return float(ce)


def parameter_gradients(model, x: np.ndarray, targets: np.ndarray, l2: float = 0.0) -> dict:
    """Analytic gradients of mean_cross_entropy with respect to each parameter."""
    n = x.shape[0]
    if isinstance(model, SoftmaxModel):
        p, _ = _forward(model, x)
        dz = (p - targets) / n
        return {"w": x.T @ dz + l2 * model.w, "b": dz.sum(axis=0)}
    if isinstance(model, MlpModel):
        p, h = _forward(model, x)
        dz2 = (p - targets) / n
        dh = dz2 @ model.w2.T
        dh[h <= 0.0] = 0.0
        return {
            "w1": x.T @ dh + l2 * model.w1,
            "b1": dh.sum(axis=0),
            "w2": h.T @ dz2 + l2 * model.w2,
            "b2": dz2.sum(axis=0),
        }
    raise NonDifferentiableModelError("knn has no parameter gradients")


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row gradient of that row's own cross-entropy loss w.r.t. the input."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if isinstance(model, KnnModel):
        raise NonDifferentiableModelError("knn posteriors are piecewise constant in the input")
    targets = _one_hot(labels, model.class_count)
    if isinstance(model, SoftmaxModel):
        p, _ = _forward(model, x)
        return (p - targets) @ model.w.T
    p, h = _forward(model, x)
    dh = (p - targets) @ model.w2.T
    dh[h <= 0.0] = 0.0
    return dh @ model.w1.T


def train(spec: ModelSpec, ds: Dataset, train_idx, labels_override=None):
    """Fit a model on the given rows; deterministic for a fixed spec.seed.

    Gradient models minimize cross-entropy by mini-batch descent with a
    shuffling schedule derived from the seed; a soft-label override trains
    the model against supplied distributions instead of dataset labels.
    """
    train_idx = _as_index_array(train_idx, ds.n)
    if train_idx.size < 1:
        raise SplitError("train_idx must be non-empty")
    hard, targets = _resolve_targets(ds, train_idx, labels_override)

    if spec.kind == "knn":
        if hard is None:
            raise InvariantError("knn cannot train on soft labels")
        return KnnModel(
            train_features=ds.features[train_idx].copy(),
            train_labels=hard.copy(),
            k=spec.k,
            class_count=ds.class_count,
        )

    x = ds.features[train_idx].astype(np.float64)
    rng = np.random.default_rng(spec.seed)
    d, c = ds.dim, ds.class_count
    if spec.kind == "softmax_regression":
        bound = 1.0 / np.sqrt(d)
        model = SoftmaxModel(w=rng.uniform(-bound, bound, (d, c)), b=np.zeros(c), class_count=c, spec=spec)
    else:
        h = spec.hidden_width
        b1in = 1.0 / np.sqrt(d)
        b2in = 1.0 / np.sqrt(h)
        model = MlpModel(
            w1=rng.uniform(-b1in, b1in, (d, h)),
            b1=np.zeros(h),
            w2=rng.uniform(-b2in, b2in, (h, c)),
            b2=np.zeros(c),
            class_count=c,
            spec=spec,
        )

    n = train_idx.size
    history = []
    for epoch in range(spec.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, spec.batch_size):
            batch = perm[start : start + spec.batch_size]
            xb, tb = x[batch], targets[batch]
            loss = mean_cross_entropy(model, xb, tb, spec.l2)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            grads = parameter_gradients(model, xb, tb, spec.l2)
            updated = {name: getattr(model, name) - spec.learning_rate * g for name, g in grads.items()}
            model = replace(model, **updated)
            epoch_loss += loss * batch.size
        history.append(epoch_loss / n)
    return replace(model, loss_history=tuple(history))


def predict_proba(model, ds: Dataset, idx) -> PredictionSet:
    """Posterior matrix over the selected rows; a pure function of (model, inputs)."""
    idx = _as_index_array(idx, ds.n)
    if ds.dim != model.dim:
        raise InvariantError(f"feature dim {ds.dim} does not match model dim {model.dim}")
    x = ds.features[idx].astype(np.float64)
    if isinstance(model, KnnModel):
        post = _knn_posteriors(model, x)
    else:
        post, _ = _forward(model, x)
    return PredictionSet(posteriors=post, ids=ds.ids[idx])


def _knn_posteriors(model: KnnModel, x: np.ndarray) -> np.ndarray:
    """Neighbor-vote posteriors. A training point queried against its own
    model finds itself at distance zero (ties broken by stored row order)."""
    stored = model.train_features.astype(np.float64)
    k = min(model.k, stored.shape[0])
    rows = np.arange(stored.shape[0])
    out = np.zeros((x.shape[0], model.class_count))
    for i, q in enumerate(x):
        diff = stored - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        nearest = np.lexsort((rows, d2))[:k]
        votes = np.bincount(model.train_labels[nearest], minlength=model.class_count)
        out[i] = votes / k
    return out


def per_sample_loss(model, ds: Dataset, idx) -> np.ndarray:
    """Cross-entropy -log p_y per row, with p_y floored at 1e-12."""
    idx = _as_index_array(idx, ds.n)
    p = predict_proba(model, ds, idx).posteriors
    py = p[np.arange(idx.size), ds.labels[idx]]
    return -np.log(np.maximum(py, PROB_FLOOR))


def predict_labels(model, ds: Dataset, idx) -> np.ndarray:
    post = predict_proba(model, ds, idx).posteriors
    return np.argmax(post, axis=1)


def accuracy(model, ds: Dataset, idx) -> float:
    idx = _as_index_array(idx, ds.n)
    return float(np.mean(predict_labels(model, ds, idx) == ds.labels[idx]))


# -- checkpoint format: one float32 blob of concatenated arrays + JSON descriptor


def _model_arrays(model):
    if isinstance(model, KnnModel):
        return [("train_features", model.train_features), ("train_labels", model.train_labels.astype(np.float32))]
    if isinstance(model, SoftmaxModel):
        return [("w", model.w), ("b", model.b)]
    return [("w1", model.w1), ("b1", model.b1), ("w2", model.w2), ("b2", model.b2)]


def save_model(model, descriptor_path) -> None:
    """Serialize as a float32 blob plus a JSON descriptor of kind and shapes."""
    descriptor_path = Path(descriptor_path)
    descriptor_path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = descriptor_path.stem + ".weights.f32"
    arrays = _model_arrays(model)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    desc = {
        "kind": model.kind,
        "class_count": int(model.class_count),
        "blob": blob_name,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    if isinstance(model, KnnModel):
        desc["k"] = int(model.k)
    spec = getattr(model, "spec", None)
    if spec is not None:
        desc["spec"] = {
            "kind": spec.kind, "seed": spec.seed, "epochs": spec.epochs,
            "learning_rate": spec.learning_rate, "l2": spec.l2,
            "batch_size": spec.batch_size, "k": spec.k, "hidden_width": spec.hidden_width,
        }
    (descriptor_path.parent / blob_name).write_bytes(blob)
    descriptor_path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_model(descriptor_path):
    descriptor_path = Path(descriptor_path)
    desc = json.loads(descriptor_path.read_text())
    raw = np.frombuffer((descriptor_path.parent / desc["blob"]).read_bytes(), dtype="<f4")
    arrays = {}
    offset = 0
    for entry in desc["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = raw[offset : offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    spec = ModelSpec(**desc["spec"]) if "spec" in desc else None
    c = int(desc["class_count"])
    if desc["kind"] == "knn":
        return KnnModel(
            train_features=arrays["train_features"].astype(np.float32),
            train_labels=arrays["train_labels"].astype(np.int64),
            k=int(desc["k"]),
            class_count=c,
        )
    if desc["kind"] == "softmax_regression":
        return SoftmaxModel(w=arrays["w"], b=arrays["b"], class_count=c, spec=spec)
    return MlpModel(w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"], class_count=c, spec=spec)
