"""Per-sample importance: exact KNN-Shapley, oracles, binning, correlation.

The closed-form recursion scores every training point against a validation
split under a k-nearest-neighbor utility. Two independent oracles back it:
an exhaustive subset-enumeration Shapley (small n only) and retrain-based
leave-one-out. Utility of the empty set is fixed at 0 so the per-validation
efficiency identity sum_i s(alpha_i) = U(full train) holds exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .datastore import Dataset, _as_index_array
from .errors import InvariantError, SplitError, UndefinedCorrelationError

DEFAULT_K = 6
BRUTEFORCE_MAX_N = 16

# Validation points are processed in fixed-size chunks and reduced in chunk
# order, so results are bit-identical for any worker count.
_VAL_CHUNK = 64


@dataclass(frozen=True)
class ImportanceVector:
    """Per-sample importance values aligned to dataset ids.

    Values may be negative (detrimental samples). ``aggregation`` records how
    per-validation-point values were combined (mean or sum).
    """

    ids: np.ndarray
    values: np.ndarray
    k: int
    val_split_id: str = ""
    aggregation: str = "mean"

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if ids.shape != values.shape or ids.ndim != 1:
            raise InvariantError("ids and values must be 1-d arrays of equal length")
        if not np.isfinite(values).all():
            raise InvariantError("importance values must be finite")
        if self.aggregation not in ("mean", "sum"):
            raise InvariantError(f"unknown aggregation {self.aggregation!r}")
        ids.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.ids.size

    def value_of(self, sample_ids) -> np.ndarray:
        """Values for the given ids, in the given order."""
        lookup = {int(i): v for i, v in zip(self.ids, self.values)}
        try:
            return np.array([lookup[int(i)] for i in np.asarray(sample_ids).ravel()])
        except KeyError as exc:
            raise InvariantError(f"id {exc.args[0]} not present in importance vector") from exc

    def restricted_to(self, sample_ids) -> "ImportanceVector":
        return ImportanceVector(
            ids=np.asarray(sample_ids, dtype=np.int64),
            values=self.value_of(sample_ids),
            k=self.k,
            val_split_id=self.val_split_id,
            aggregation=self.aggregation,
        )

    def to_csv(self, path) -> None:
        lines = ["id,value"]
        lines += [f"{int(i)},{float(v)!r}" for i, v in zip(self.ids, self.values)]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path, k: int = DEFAULT_K, val_split_id: str = "", aggregation: str = "mean"):
        text = Path(path).read_text().strip().splitlines()
        if not text or text[0] != "id,value":
            raise InvariantError(f"{path}: expected 'id,value' header")
        ids, values = [], []
        for line in text[1:]:
            i, v = line.split(",")
            ids.append(int(i))
            values.append(float(v))
        return ImportanceVector(np.array(ids), np.array(values), k, val_split_id, aggregation)


def _check_valuation_inputs(ds: Dataset, train_idx, val_idx, k: int):
    train_idx = _as_index_array(train_idx, ds.n)
    val_idx = _as_index_array(val_idx, ds.n)
    if train_idx.size < 1 or val_idx.size < 1:
        raise SplitError("train and validation splits must be non-empty")
    if np.intersect1d(train_idx, val_idx).size:
        raise SplitError("train and validation splits overlap")
    if k < 1:
        raise InvariantError(f"neighbor count k must be >= 1, got {k}")
    return train_idx, val_idx


def _sorted_matches(features64, labels, ids, train_idx, v_row, v_label):
    """Train order and label-match indicator sorted by ascending distance, ties by id."""
    diff = features64[train_idx] - v_row
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((ids[train_idx], d2))
    matches = (labels[train_idx[order]] == v_label).astype(np.float64)
    return order, matches


def knn_shapley_matrix(ds: Dataset, train_idx, val_idx, k: int = DEFAULT_K) -> np.ndarray:
    """Per-validation-point value vectors s, one row per validation point.

    Row v satisfies sum(s) == U(full train; v) with U the top-min(k,n)
    label-match rate; column order follows train_idx.
    """
    train_idx, val_idx = _check_valuation_inputs(ds, train_idx, val_idx, k)
    feats = ds.features.astype(np.float64)
    n = train_idx.size
    out = np.empty((val_idx.size, n), dtype=np.float64)
    positions = np.arange(1, n, dtype=np.float64)  # 1-based rank of each non-final point
    weight = np.minimum(k, positions) / (k * positions)
    for row, v in enumerate(val_idx):
        order, m = _sorted_matches(feats, ds.labels, ds.ids, train_idx, feats[v], ds.labels[v])
        s_sorted = np.empty(n)
        s_sorted[n - 1] = m[n - 1] / n
        if n > 1:
            incr = (m[:-1] - m[1:]) * weight
            s_sorted[:-1] = s_sorted[n - 1] + np.cumsum(incr[::-1])[::-1]
        out[row, order] = s_sorted
    return out


def knn_utility(ds: Dataset, train_idx, val_idx, k: int = DEFAULT_K) -> np.ndarray:
    """U(train; v) per validation point: fraction of the min(k, n) nearest matching labels."""
    train_idx, val_idx = _check_valuation_inputs(ds, train_idx, val_idx, k)
    feats = ds.features.astype(np.float64)
    m = min(k, train_idx.size)
    util = np.empty(val_idx.size)
    for row, v in enumerate(val_idx):
        _, matches = _sorted_matches(feats, ds.labels, ds.ids, train_idx, feats[v], ds.labels[v])
        util[row] = matches[:m].sum() / k
    return util


def knn_shapley(
    ds: Dataset,
    train_idx,
    val_idx,
    k: int = DEFAULT_K,
    aggregation: str = "mean",
    val_split_id: str = "",
    threads: int = 1,
) -> ImportanceVector:
    """Exact KNN-Shapley importance of every training point.

    Per validation point, training points are ranked by ascending Euclidean
    distance (ties by ascending id) and scored by the closed-form recursion;
    per-point values are then aggregated over the validation split.
    """
    train_idx, val_idx = _check_valuation_inputs(ds, train_idx, val_idx, k)
    chunks = [val_idx[i : i + _VAL_CHUNK] for i in range(0, val_idx.size, _VAL_CHUNK)]

    def chunk_sum(chunk):
        return knn_shapley_matrix(ds, train_idx, chunk, k).sum(axis=0)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(chunk_sum, chunks))
    else:
        partials = [chunk_sum(c) for c in chunks]
    total = np.zeros(train_idx.size)
    for p in partials:  # fixed reduction order regardless of worker count
        total += p
    if aggregation == "mean":
        total /= val_idx.size
    return ImportanceVector(
        ids=ds.ids[train_idx], values=total, k=k, val_split_id=val_split_id, aggregation=aggregation
    )


def shapley_bruteforce(
    ds: Dataset,
    train_idx,
    val_idx,
    k: int = DEFAULT_K,
    aggregation: str = "mean",
    val_split_id: str = "",
) -> ImportanceVector:
    """Exact Shapley values by enumerating all 2^n training subsets.

    Independent oracle for knn_shapley: evaluates the defining marginal-
    contribution sum directly under the same KNN utility with U(empty) = 0.
    """
    train_idx, val_idx = _check_valuation_inputs(ds, train_idx, val_idx, k)
    n = train_idx.size
    if n > BRUTEFORCE_MAX_N:
        raise InvariantError(f"brute-force enumeration limited to n <= {BRUTEFORCE_MAX_N}, got {n}")
    feats = ds.features.astype(np.float64)
    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)  # bit j = j-th nearest present
    subset_sizes = bits.sum(axis=1)
    take = bits * (np.cumsum(bits, axis=1) <= k)  # which members fall in the top-k of their subset
    # Shapley weight 1/(n * C(n-1, |S|)) for each subset S not containing the target.
    inv_weight = np.array([1.0 / math.comb(n - 1, int(s)) for s in range(n)])
    total = np.zeros(n)
    for v in val_idx:
        order, m = _sorted_matches(feats, ds.labels, ds.ids, train_idx, feats[v], ds.labels[v])
        utility = (take @ m) / k
        values_sorted = np.empty(n)
        for j in range(n):
            without = bits[:, j] == 0
            base = masks[without]
            delta = utility[base | (1 << j)] - utility[base]
            w = inv_weight[subset_sizes[without].astype(np.int64)]
            values_sorted[j] = float(delta @ w) / n
        contrib = np.empty(n)
        contrib[order] = values_sorted
        total += contrib
    if aggregation == "mean":
        total /= val_idx.size
    return ImportanceVector(
        ids=ds.ids[train_idx], values=total, k=k, val_split_id=val_split_id, aggregation=aggregation
    )


def loo(ds: Dataset, train_idx, val_idx, model_spec, val_split_id: str = "") -> ImportanceVector:
    """Leave-one-out importance: validation-accuracy drop from removing each point.

    Retrains the given model kind n+1 times with identical seeds, so values
    reflect the sample's contribution rather than training noise.
    """
    from . import models  # local import: models depends on datastore only

    train_idx, val_idx = _check_valuation_inputs(ds, train_idx, val_idx, 1)
    if train_idx.size < 2:
        raise SplitError("leave-one-out needs at least 2 training points")
    full_model = models.train(model_spec, ds, train_idx)
    full_acc = models.accuracy(full_model, ds, val_idx)
    values = np.empty(train_idx.size)
    for pos in range(train_idx.size):
        reduced = np.delete(train_idx, pos)
        m = models.train(model_spec, ds, reduced)
        values[pos] = full_acc - models.accuracy(m, ds, val_idx)
    return ImportanceVector(
        ids=ds.ids[train_idx], values=values, k=1, val_split_id=val_split_id, aggregation="mean"
    )


def binned_statistic(values, y, bins: int):
    """Sum y per equal-count bin of samples sorted ascending by importance.

    Bin sizes are floor(n/bins) with the remainder folded into the last bin.
    Returns a list of (bin_index, aggregate) pairs.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if values.size != y.size:
        raise InvariantError(f"length mismatch: {values.size} importance values vs {y.size} samples")
    if bins < 1:
        raise InvariantError(f"bins must be >= 1, got {bins}")
    order = np.argsort(values, kind="stable")
    per_bin = values.size // bins
    out = []
    for b in range(bins):
        start = b * per_bin
        stop = (b + 1) * per_bin if b < bins - 1 else values.size
        out.append((b, float(y[order[start:stop]].sum())))
    return out


def pearson(x, y) -> float:
    """Pearson correlation; raises if either side has zero variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvariantError("correlation inputs must have equal length")
    if x.size < 3:
        raise UndefinedCorrelationError(f"need at least 3 points, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def spearman(x, y) -> float:
    """Spearman correlation: Pearson on average-tied ranks."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvariantError("correlation inputs must have equal length")
    if x.size < 3:
        raise UndefinedCorrelationError(f"need at least 3 points, got {x.size}")
    return pearson(rankdata(x), rankdata(y))


def rank_correlation(a: ImportanceVector, b: ImportanceVector) -> dict:
    """Pearson and Spearman correlation of two id-aligned importance vectors."""
    if len(a) != len(b):
        raise InvariantError("importance vectors differ in length")
    order_a = np.argsort(a.ids, kind="stable")
    order_b = np.argsort(b.ids, kind="stable")
    if not np.array_equal(a.ids[order_a], b.ids[order_b]):
        raise InvariantError("importance vectors cover different sample ids")
    va = a.values[order_a]
    vb = b.values[order_b]
    return {"pearson": pearson(va, vb), "spearman": spearman(va, vb)}


def rank_select(values: np.ndarray, ids: np.ndarray, candidates: np.ndarray, count: int, mode: str, seed: int = 0):
    """Pick ``count`` of ``candidates`` by importance: top, bottom, or seeded random.

    Ties are broken by ascending id, so the selection is invariant to row order.
    Returns positions into ``candidates``.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if count < 1:
        raise SplitError(f"selection count must be >= 1, got {count}")
    if count > candidates.size:
        raise SplitError(f"selection count {count} exceeds pool size {candidates.size}")
    if mode == "random":
        return np.sort(np.random.default_rng(seed).choice(candidates.size, size=count, replace=False))
    if mode not in ("top", "bottom"):
        raise InvariantError(f"unknown selection mode {mode!r}")
    sign = -1.0 if mode == "top" else 1.0
    order = np.lexsort((ids, sign * values))
    return np.sort(order[:count])
