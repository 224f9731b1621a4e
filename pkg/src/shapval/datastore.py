"""Dataset container, bit-exact file formats, split management, synthetic data.

On-disk layout is deliberately primitive so goldens stay bit-exact and any
language can parse them: a JSON manifest describing shapes, a raw
little-endian float32 feature blob (row-major, no header), and a raw
little-endian uint32 label blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InvariantError, SplitError

# Rec. 601 luminance weights used by the grayscale transform.
_LUMA = (0.299, 0.587, 0.114)

TRANSFORMS = ("hflip", "vflip", "grayscale")


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with labels and stable per-sample ids.

    ``features`` is an (n, d) float32 array, ``labels`` an (n,) integer array
    with values in [0, class_count), ``ids`` an (n,) array of unique int64
    identifiers. Ids are assigned 0..n-1 at creation and preserved by every
    experiment edit (removal, duplication, augmentation) so importance
    vectors stay joinable.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_count: int
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise InvariantError(f"features must be a non-empty 2-d matrix, got shape {feats.shape}")
        n = feats.shape[0]
        if labels.shape != (n,) or ids.shape != (n,):
            raise InvariantError(
                f"row mismatch: {n} feature rows, {labels.shape[0]} labels, {ids.shape[0]} ids"
            )
        if self.class_count < 2:
            raise InvariantError(f"class_count must be >= 2, got {self.class_count}")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise InvariantError("label outside [0, class_count)")
        if np.unique(ids).size != n:
            raise InvariantError("sample ids are not unique")
        if not np.isfinite(feats).all():
            raise InvariantError("non-finite feature value")
        if self.image_shape is not None:
            h, w, ch = self.image_shape
            if ch not in (1, 3):
                raise InvariantError(f"image channels must be 1 or 3, got {ch}")
            if h * w * ch != feats.shape[1]:
                raise InvariantError(
                    f"image_shape {self.image_shape} incompatible with feature dim {feats.shape[1]}"
                )
        for arr in (feats, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        """New dataset holding the selected rows; ids are preserved."""
        idx = _as_index_array(idx, self.n)
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            ids=self.ids[idx].copy(),
            class_count=self.class_count,
            image_shape=self.image_shape,
        )

    def with_labels(self, idx, new_labels) -> "Dataset":
        """New dataset with labels replaced at the given rows."""
        idx = _as_index_array(idx, self.n)
        labels = self.labels.copy()
        labels[idx] = np.asarray(new_labels, dtype=np.int64)
        return Dataset(self.features.copy(), labels, self.ids.copy(), self.class_count, self.image_shape)

    def with_rows_appended(self, features, labels) -> "Dataset":
        """New dataset with extra rows appended; fresh ids continue past the maximum."""
        extra = np.ascontiguousarray(features, dtype=np.float32)
        extra_labels = np.asarray(labels, dtype=np.int64)
        if extra.ndim != 2 or extra.shape[1] != self.dim:
            raise InvariantError("appended rows must match feature dimension")
        start = int(self.ids.max()) + 1
        new_ids = np.arange(start, start + extra.shape[0], dtype=np.int64)
        return Dataset(
            np.concatenate([self.features, extra]),
            np.concatenate([self.labels, extra_labels]),
            np.concatenate([self.ids, new_ids]),
            self.class_count,
            self.image_shape,
        )


def _as_index_array(idx, n: int) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise SplitError(f"index out of range for dataset of {n} rows")
    return arr


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset described by a JSON manifest.

    Manifest keys: n, d, c, features (path to .f32 blob), labels (path to
    .u32 blob), optional image_shape [H, W, Ch]. Blob paths are resolved
    relative to the manifest's directory. Blob sizes must match exactly.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetFormatError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("n", "d", "c", "features", "labels"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing key {key!r}")
    n, d, c = int(manifest["n"]), int(manifest["d"]), int(manifest["c"])
    base = manifest_path.parent
    feat_path = base / manifest["features"]
    label_path = base / manifest["labels"]
    for p in (feat_path, label_path):
        if not p.is_file():
            raise DatasetFormatError(f"referenced blob not found: {p}")
    feat_bytes = feat_path.read_bytes()
    if len(feat_bytes) != n * d * 4:
        raise DatasetFormatError(
            f"feature blob is {len(feat_bytes)} bytes, expected {n * d * 4} for n={n}, d={d}"
        )
    label_bytes = label_path.read_bytes()
    if len(label_bytes) != n * 4:
        raise DatasetFormatError(f"label blob is {len(label_bytes)} bytes, expected {n * 4} for n={n}")
    features = np.frombuffer(feat_bytes, dtype="<f4").reshape(n, d)
    labels = np.frombuffer(label_bytes, dtype="<u4").astype(np.int64)
    if labels.size and labels.max() >= c:
        raise DatasetFormatError(f"label {labels.max()} out of range for c={c}")
    if not np.isfinite(features).all():
        raise DatasetFormatError("feature blob contains non-finite values")
    image_shape = manifest.get("image_shape")
    return Dataset(
        features=features.copy(),
        labels=labels,
        ids=np.arange(n, dtype=np.int64),
        class_count=c,
        image_shape=tuple(image_shape) if image_shape else None,
    )


def save_dataset(ds: Dataset, manifest_path) -> None:
    """Write manifest + blobs next to each other; load_dataset round-trips bit-exactly."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.stem
    feat_name = f"{stem}.features.f32"
    label_name = f"{stem}.labels.u32"
    manifest = {
        "n": int(ds.n),
        "d": int(ds.dim),
        "c": int(ds.class_count),
        "features": feat_name,
        "labels": label_name,
    }
    if ds.image_shape is not None:
        manifest["image_shape"] = list(ds.image_shape)
    (manifest_path.parent / feat_name).write_bytes(
        np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
    )
    (manifest_path.parent / label_name).write_bytes(
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes()
    )
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def make_gaussian_mixture(
    seed: int,
    classes: int,
    per_class: int,
    dim: int,
    sep: float,
    image_shape: tuple[int, int, int] | None = None,
) -> Dataset:
    """Deterministic isotropic Gaussian mixture.

    Class c is centered at sep * e_{c mod dim} with unit-variance noise.
    Identical (seed, params) produce bit-identical datasets.
    """
    if classes < 2 or per_class < 1 or dim < 1:
        raise InvariantError(f"invalid mixture dimensions: classes={classes}, per_class={per_class}, dim={dim}")
    if sep < 0:
        raise InvariantError(f"separation must be non-negative, got {sep}")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    features = np.empty((n, dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for c in range(classes):
        center = np.zeros(dim)
        center[c % dim] = sep
        rows = slice(c * per_class, (c + 1) * per_class)
        features[rows] = center + rng.standard_normal((per_class, dim))
        labels[rows] = c
    return Dataset(
        features=features.astype(np.float32),
        labels=labels,
        ids=np.arange(n, dtype=np.int64),
        class_count=classes,
        image_shape=image_shape,
    )


def augment(ds: Dataset, indices, transform: str, image_shape=None) -> Dataset:
    """Replace the selected rows with deterministically transformed pixels.

    hflip reverses column order per image row, vflip reverses row order,
    grayscale replaces each pixel's channels with their Rec. 601 luminance.
    Untouched rows, ids, labels and class count are preserved bit-exactly.
    """
    if transform not in TRANSFORMS:
        raise InvariantError(f"unknown transform {transform!r}, expected one of {TRANSFORMS}")
    shape = tuple(image_shape) if image_shape is not None else ds.image_shape
    if shape is None:
        raise InvariantError("augment requires an image-shaped dataset (image_shape unknown)")
    h, w, ch = shape
    if ch not in (1, 3):
        raise InvariantError(f"image channels must be 1 or 3, got {ch}")
    if h * w * ch != ds.dim:
        raise InvariantError(f"image_shape {shape} incompatible with feature dim {ds.dim}")
    idx = _as_index_array(indices, ds.n)
    features = ds.features.copy()
    images = features[idx].reshape(-1, h, w, ch)
    if transform == "hflip":
        images = images[:, :, ::-1, :]
    elif transform == "vflip":
        images = images[:, ::-1, :, :]
    else:  # grayscale
        if ch == 3:
            lum = (
                images[..., 0].astype(np.float64) * _LUMA[0]
                + images[..., 1].astype(np.float64) * _LUMA[1]
                + images[..., 2].astype(np.float64) * _LUMA[2]
            )
            # Convex channel combination; clamp to each image's own range to
            # keep raw-valued (non [0,255]) feature spaces closed under it.
            lo = images.reshape(len(idx), -1).min(axis=1)[:, None, None]
            hi = images.reshape(len(idx), -1).max(axis=1)[:, None, None]
            lum = np.clip(lum, lo, hi).astype(np.float32)
            images = np.repeat(lum[..., None], 3, axis=3)
        # single-channel luminance is the channel itself
    features[idx] = images.reshape(len(idx), -1)
    return Dataset(features, ds.labels.copy(), ds.ids.copy(), ds.class_count, ds.image_shape)


@dataclass(frozen=True)
class SplitSet:
    """Named disjoint index sets over one dataset.

    Conventional names: train, validation, test, shadow, member_pool,
    nonmember_pool. validation must be disjoint from train (a point is never
    scored against itself), and member_pool from nonmember_pool.
    """

    n: int
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, idx in self.splits.items():
            arr = np.asarray(idx, dtype=np.int64).ravel()
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise SplitError(f"split {name!r} has indices outside [0, {self.n})")
            if np.unique(arr).size != arr.size:
                raise SplitError(f"split {name!r} has duplicate indices")
            arr = np.sort(arr)
            arr.setflags(write=False)
            clean[name] = arr
        for a, b in (("train", "validation"), ("member_pool", "nonmember_pool")):
            if a in clean and b in clean:
                if np.intersect1d(clean[a], clean[b]).size:
                    raise SplitError(f"splits {a!r} and {b!r} must be disjoint")
        object.__setattr__(self, "splits", clean)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise SplitError(f"no split named {name!r} (have {sorted(self.splits)})")
        return self.splits[name]

    def __contains__(self, name: str) -> bool:
        return name in self.splits

    def names(self):
        return sorted(self.splits)


def make_splits(ds: Dataset, sizes: dict, seed: int) -> SplitSet:
    """Partition a dataset into named splits by a seeded shuffle.

    ``sizes`` maps split name to row count; counts must sum to at most n.
    The assignment is deterministic in (seed, insertion order of sizes).
    """
    total = sum(int(v) for v in sizes.values())
    if total > ds.n:
        raise SplitError(f"split sizes sum to {total} but dataset has {ds.n} rows")
    perm = np.random.default_rng(seed).permutation(ds.n)
    splits = {}
    start = 0
    for name, count in sizes.items():
        count = int(count)
        if count < 0:
            raise SplitError(f"split {name!r} has negative size")
        splits[name] = perm[start : start + count]
        start += count
    return SplitSet(n=ds.n, splits=splits)
