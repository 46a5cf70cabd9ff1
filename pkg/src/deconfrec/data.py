"""Sparse user-item interaction storage, delimited-file ingestion and splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse

_logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed interaction data."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SparseInteractions:
    """Immutable triplet-backed user x item matrix.

    Entries are kept sorted by (user, item). ``user_ids``/``item_ids`` map the
    dense internal indices back to the external identifiers, when known.
    """

    n_users: int
    n_items: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    user_ids: tuple | None = None
    item_ids: tuple | None = None
    _csr: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.vals, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(vals)):
            raise DataError("rows, cols and vals must have equal length")
        if len(rows):
            if rows.min() < 0 or rows.max() >= self.n_users:
                raise DataError("user index out of range")
            if cols.min() < 0 or cols.max() >= self.n_items:
                raise DataError("item index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                j = int(np.flatnonzero(dup)[0])
                raise DataError(f"duplicate (user, item) pair ({rows[j]}, {cols[j]})")
        object.__setattr__(self, "rows", _frozen(rows))
        object.__setattr__(self, "cols", _frozen(cols))
        object.__setattr__(self, "vals", _frozen(vals))
        csr = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(self.n_users, self.n_items)
        )
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def empty(cls, n_users: int = 0, n_items: int = 0) -> SparseInteractions:
        z = np.zeros(0)
        return cls(n_users, n_items, z, z, z)

    @classmethod
    def from_dense(cls, mat: np.ndarray) -> SparseInteractions:
        """Build from a dense array; zeros are treated as absent."""
        mat = np.asarray(mat, dtype=np.float64)
        r, c = np.nonzero(mat)
        return cls(mat.shape[0], mat.shape[1], r, c, mat[r, c])

    @property
    def nnz(self) -> int:
        return len(self.vals)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    def to_csr(self) -> sparse.csr_matrix:
        return self._csr.copy()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def mask(self) -> np.ndarray:
        """Dense 0/1 exposure indicator."""
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = 1.0
        return out

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def iter_rows(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        """Yield (user, item_indices, values) for every user with entries."""
        indptr = self._csr.indptr
        for u in range(self.n_users):
            lo, hi = indptr[u], indptr[u + 1]
            if hi > lo:
                yield u, self.cols[lo:hi], self.vals[lo:hi]

    def iter_cols(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        """Yield (item, user_indices, values) for every item with entries."""
        order = np.lexsort((self.rows, self.cols))
        cols = self.cols[order]
        bounds = np.searchsorted(cols, np.arange(self.n_items + 1))
        for i in range(self.n_items):
            lo, hi = bounds[i], bounds[i + 1]
            if hi > lo:
                sel = order[lo:hi]
                yield i, self.rows[sel], self.vals[sel]

    def row(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        indptr = self._csr.indptr
        lo, hi = indptr[u], indptr[u + 1]
        return self.cols[lo:hi], self.vals[lo:hi]

    def subset(self, keep: np.ndarray) -> SparseInteractions:
        """Entries selected by a boolean or index array, same index space."""
        return SparseInteractions(
            self.n_users, self.n_items, self.rows[keep], self.cols[keep],
            self.vals[keep], self.user_ids, self.item_ids,
        )

    def select_users(self, users: Sequence[int] | np.ndarray) -> SparseInteractions:
        """Restrict to ``users`` and reindex them densely in the given order."""
        users = np.asarray(users, dtype=np.int64)
        remap = np.full(self.n_users, -1, dtype=np.int64)
        remap[users] = np.arange(len(users))
        keep = remap[self.rows] >= 0
        uids = None
        if self.user_ids is not None:
            uids = tuple(self.user_ids[u] for u in users)
        return SparseInteractions(
            len(users), self.n_items, remap[self.rows[keep]], self.cols[keep],
            self.vals[keep], uids, self.item_ids,
        )

    def with_shape(self, n_users: int, n_items: int) -> SparseInteractions:
        return SparseInteractions(n_users, n_items, self.rows, self.cols, self.vals,
                                  self.user_ids, self.item_ids)

    def __eq__(self, other):
        if not isinstance(other, SparseInteractions):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.vals, other.vals)
        )

    __hash__ = None


def binarize(ratings: SparseInteractions) -> SparseInteractions:
    """Same sparsity pattern with every stored value set to 1."""
    return SparseInteractions(
        ratings.n_users, ratings.n_items, ratings.rows, ratings.cols,
        np.ones(ratings.nnz), ratings.user_ids, ratings.item_ids,
    )


def load_delimited(
    path: str | Path,
    delimiter: str = "\t",
    columns: Mapping[str, int] | None = None,
    index_base: int = 1,
    skip_header: bool = False,
    rating_scale: tuple[float, float] | None = None,
    user_ids: Sequence | None = None,
    item_ids: Sequence | None = None,
) -> SparseInteractions:
    """Read a ratings file into a :class:`SparseInteractions`.

    External IDs are remapped to contiguous 0-based indices in order of first
    appearance. Passing ``user_ids``/``item_ids`` seeds the mapping so that a
    second file (e.g. a random test set) shares the index space of the first;
    unseen IDs are appended. ``index_base`` only documents the convention of
    the file; IDs are treated as opaque labels.
    """
    if index_base not in (0, 1):
        raise ValueError("index_base must be 0 or 1")
    columns = dict(columns or {"user": 0, "item": 1, "rating": 2})
    umap = {uid: n for n, uid in enumerate(user_ids or ())}
    imap = {iid: n for n, iid in enumerate(item_ids or ())}
    rows, cols, vals = [], [], []
    seen: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, rec in enumerate(reader, start=1):
            if skip_header and lineno == 1:
                continue
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                uid = int(rec[columns["user"]])
                iid = int(rec[columns["item"]])
                val = float(rec[columns["rating"]])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {rec!r}") from exc
            if not math.isfinite(val):
                raise DataError(f"{path}:{lineno}: non-finite rating")
            if rating_scale is not None and not (rating_scale[0] <= val <= rating_scale[1]):
                raise DataError(
                    f"{path}:{lineno}: rating {val} outside scale {rating_scale}"
                )
            u = umap.setdefault(uid, len(umap))
            i = imap.setdefault(iid, len(imap))
            if (u, i) in seen:
                raise DataError(
                    f"{path}:{lineno}: duplicate (user, item) pair ({uid}, {iid}),"
                    f" first seen on line {seen[(u, i)]}"
                )
            seen[(u, i)] = lineno
            rows.append(u)
            cols.append(i)
            vals.append(val)
    return SparseInteractions(
        len(umap), len(imap), np.array(rows, dtype=np.int64),
        np.array(cols, dtype=np.int64), np.array(vals),
        tuple(umap), tuple(imap),
    )


SPLIT_FRACTIONS = {
    "train_val_80_20": (0.8, 0.2, 0.0),
    "train_val_test_60_20_20": (0.6, 0.2, 0.2),
    "provided_random_test": (0.8, 0.2, 0.0),
}


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "train_val_80_20"
    seed: int = 0
    strong_generalization_holdout: float = 0.0
    # fraction of a held-out user's entries revealed for fold-in
    foldin_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in SPLIT_FRACTIONS:
            raise ValueError(f"unknown split mode {self.mode!r}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if not 0.0 <= self.strong_generalization_holdout < 1.0:
            raise ValueError("strong_generalization_holdout must be in [0, 1)")
        if not 0.0 <= self.foldin_fraction <= 1.0:
            raise ValueError("foldin_fraction must be in [0, 1]")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return SPLIT_FRACTIONS[self.mode]


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Train/validation/test folds sharing one user/item index space.

    For strong generalization, ``heldout_users`` lists users removed from
    ``train``/``validation``; ``foldin`` holds the part of their data revealed
    at prediction time and ``test`` only covers them.
    """

    train: SparseInteractions
    validation: SparseInteractions
    test: SparseInteractions
    test_kind: str = "regular"
    rating_scale: tuple[float, float] = (1.0, 5.0)
    foldin: SparseInteractions | None = None
    heldout_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_only_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.test_kind not in ("regular", "randomized"):
            raise ValueError("test_kind must be 'regular' or 'randomized'")
        folds = [self.train, self.validation, self.test]
        if self.foldin is not None:
            folds.append(self.foldin)
        shapes = {f.shape for f in folds}
        if len(shapes) != 1:
            raise DataError(f"folds disagree on shape: {shapes}")
        for a in range(len(folds)):
            for b in range(a + 1, len(folds)):
                if folds[a].pairs() & folds[b].pairs():
                    raise DataError("folds overlap on (user, item) pairs")

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def _assign(n: int, fractions: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    cuts = np.cumsum(fractions)[:-1]
    return np.searchsorted(cuts, rng.random(n), side="right")


def split(data: SparseInteractions, spec: SplitSpec,
          rating_scale: tuple[float, float] = (1.0, 5.0)) -> DatasetBundle:
    """Entry-level random split, with optional user-level holdout.

    Each entry lands in a fold independently with the mode's probabilities.
    With ``strong_generalization_holdout > 0`` that fraction of users is
    removed first; each held-out user's entries are split into a fold-in part
    (``foldin_fraction``) and a test part.
    """
    if data.nnz == 0:
        raise DataError("cannot split an empty matrix")
    rng = np.random.default_rng(spec.seed)
    heldout = np.zeros(0, dtype=np.int64)
    if spec.strong_generalization_holdout > 0:
        n_hold = int(round(spec.strong_generalization_holdout * data.n_users))
        heldout = np.sort(rng.choice(data.n_users, size=n_hold, replace=False))
    is_held = np.isin(data.rows, heldout)

    fold = np.full(data.nnz, -1)
    regular = np.flatnonzero(~is_held)
    fold[regular] = _assign(len(regular), spec.fractions, rng)
    foldin = None
    if len(heldout):
        held = np.flatnonzero(is_held)
        reveal = rng.random(len(held)) < spec.foldin_fraction
        fold[held[reveal]] = 3
        fold[held[~reveal]] = 2
        # test covers held-out users only
        fold[regular[fold[regular] == 2]] = 1
        foldin = data.subset(fold == 3)

    train, val, test = (data.subset(fold == k) for k in range(3))
    for name, f in (("train", train), ("validation", val)):
        if f.nnz == 0:
            _logger.warning("split produced an empty %s fold", name)
    if spec.fractions[2] > 0 and test.nnz == 0:
        _logger.warning("split produced an empty test fold")
    return DatasetBundle(train, val, test, "regular", rating_scale, foldin, heldout)


def attach_random_test(train: SparseInteractions, test: SparseInteractions,
                       spec: SplitSpec | None = None,
                       rating_scale: tuple[float, float] = (1.0, 5.0)) -> DatasetBundle:
    """Combine an observational train matrix with a randomized test matrix.

    Test matrices may introduce users that never appear in train; both
    matrices are widened to the union index space and such users are listed
    in ``test_only_users``. The train matrix is further split into
    train/validation by ``spec`` (80/20 by default). With a strong-generalization
    holdout, the held-out users' observational ratings become the fold-in set
    and the test set is restricted to them.
    """
    spec = spec or SplitSpec("provided_random_test")
    n_users = max(train.n_users, test.n_users)
    n_items = max(train.n_items, test.n_items)
    tr = train.with_shape(n_users, n_items)
    te = test.with_shape(n_users, n_items)
    if te.user_ids is not None and (tr.user_ids is None or len(te.user_ids) > len(tr.user_ids)):
        tr = SparseInteractions(n_users, n_items, tr.rows, tr.cols, tr.vals,
                                te.user_ids, te.item_ids)
    if tr.pairs() & te.pairs():
        overlap = sorted(tr.pairs() & te.pairs())[0]
        raise DataError(f"train and test overlap on (user, item) pair {overlap}")
    seen = np.zeros(n_users, dtype=bool)
    seen[tr.rows] = True
    test_only = np.setdiff1d(np.unique(te.rows), np.flatnonzero(seen))
    if len(test_only):
        _logger.warning("%d test users have no training entries", len(test_only))

    rng = np.random.default_rng(spec.seed)
    heldout = np.zeros(0, dtype=np.int64)
    if spec.strong_generalization_holdout > 0:
        candidates = np.intersect1d(np.unique(te.rows), np.flatnonzero(seen))
        n_hold = int(round(spec.strong_generalization_holdout * len(candidates)))
        heldout = np.sort(rng.choice(candidates, size=n_hold, replace=False))
    is_held = np.isin(tr.rows, heldout)
    fold = np.where(is_held, 3, 0)
    regular = np.flatnonzero(~is_held)
    fold[regular] = _assign(len(regular), (0.8, 0.2), rng)
    foldin = tr.subset(fold == 3) if len(heldout) else None
    if len(heldout):
        te = te.subset(np.isin(te.rows, heldout))
    return DatasetBundle(
        tr.subset(fold == 0), tr.subset(fold == 1), te, "randomized",
        rating_scale, foldin, heldout, test_only,
    )


def write_split_manifest(bundle: DatasetBundle, path: str | Path) -> None:
    """One line per fold entry: ``fold,user_id,item_id,value``."""
    folds = [("train", bundle.train), ("validation", bundle.validation),
             ("test", bundle.test)]
    if bundle.foldin is not None:
        folds.append(("foldin", bundle.foldin))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "user_id", "item_id", "value"])
        for name, f in folds:
            uids, iids = f.user_ids, f.item_ids
            for u, i, v in zip(f.rows.tolist(), f.cols.tolist(), f.vals.tolist()):
                w.writerow([
                    name,
                    uids[u] if uids is not None and u < len(uids) else u,
                    iids[i] if iids is not None and i < len(iids) else i,
                    repr(v),
                ])
