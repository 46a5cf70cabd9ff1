"""Ranking and accuracy metrics over held-out ratings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import SparseInteractions

_logger = logging.getLogger(__name__)

GAINS = ("exp_minus_one", "literal_paper")


@dataclass(frozen=True)
class RelevanceRule:
    threshold: float = 3.0

    def relevant(self, ratings: np.ndarray) -> np.ndarray:
        return np.asarray(ratings) >= self.threshold


@dataclass(frozen=True)
class RankedList:
    """One user's test items in predicted order."""

    items: np.ndarray
    scores: np.ndarray
    ratings: np.ndarray

    @classmethod
    def from_predictions(cls, items, scores, ratings) -> RankedList:
        items = np.asarray(items, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        ratings = np.asarray(ratings, dtype=np.float64)
        order = np.lexsort((items, -scores))
        return cls(items[order], scores[order], ratings[order])

    def __len__(self):
        return len(self.items)


def _gain(rel: np.ndarray, gain: str) -> np.ndarray:
    if gain == "exp_minus_one":
        return np.exp2(rel) - 1.0
    if gain == "literal_paper":
        return np.exp2(rel - 1.0)
    raise ValueError(f"gain must be one of {GAINS}")


def _dcg(rels: np.ndarray, gain: str) -> float:
    disc = np.log2(np.arange(2, len(rels) + 2))
    return float(np.sum(_gain(rels, gain) / disc))


def ndcg_user(ranked: RankedList, gain: str = "exp_minus_one") -> float:
    ideal = _dcg(np.sort(ranked.ratings)[::-1], gain)
    if ideal == 0:
        _logger.debug("user with all-zero gains; NDCG defined as 1")
        return 1.0
    return _dcg(ranked.ratings, gain) / ideal


def ndcg(ranked: Mapping[int, RankedList] | Iterable[RankedList],
         gain: str = "exp_minus_one") -> float:
    """Per-user NDCG averaged over users."""
    lists = list(ranked.values()) if isinstance(ranked, Mapping) else list(ranked)
    if not lists or any(len(r) == 0 for r in lists):
        raise ValueError("every user needs at least one test item")
    return float(np.mean([ndcg_user(r, gain) for r in lists]))


def recall_user(ranked: RankedList, k: int, rule: RelevanceRule) -> float | None:
    rel = rule.relevant(ranked.ratings)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return None
    hits = int(rel[:k].sum())
    return hits / min(k, n_rel)


def recall_at_k(ranked: Mapping[int, RankedList] | Iterable[RankedList], k: int = 5,
                rule: RelevanceRule | None = None) -> float:
    """Hits in the top k over min(k, #relevant), averaged over users that have
    at least one relevant item."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rule = rule or RelevanceRule()
    lists = list(ranked.values()) if isinstance(ranked, Mapping) else list(ranked)
    vals = [recall_user(r, k, rule) for r in lists]
    kept = [v for v in vals if v is not None]
    if len(kept) < len(vals):
        _logger.debug("recall: skipped %d users without relevant items", len(vals) - len(kept))
    if not kept:
        return float("nan")
    return float(np.mean(kept))


def _pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one (prediction, truth) pair")
    return arr[:, 0], arr[:, 1]


def mse(pairs: Sequence[tuple[float, float]] | np.ndarray) -> float:
    pred, truth = _pairs(pairs)
    return float(np.mean((pred - truth) ** 2))


def mae(pairs: Sequence[tuple[float, float]] | np.ndarray) -> float:
    pred, truth = _pairs(pairs)
    return float(np.mean(np.abs(pred - truth)))


def per_item_accuracy(test: SparseInteractions, predictions: np.ndarray) -> tuple[float, float]:
    """Unweighted mean over test items of each item's MSE and MAE.

    ``predictions`` is aligned with ``test``'s stored entries.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != (test.nnz,):
        raise ValueError("predictions must align with test entries")
    if test.nnz == 0:
        raise ValueError("empty test set")
    err = pred - test.vals
    counts = np.bincount(test.cols, minlength=test.n_items)
    present = counts > 0
    sq = np.bincount(test.cols, weights=err ** 2, minlength=test.n_items)[present]
    ab = np.bincount(test.cols, weights=np.abs(err), minlength=test.n_items)[present]
    return float(np.mean(sq / counts[present])), float(np.mean(ab / counts[present]))


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))


def ndcg_loss(pred: np.ndarray, truth: np.ndarray, gain: str = "exp_minus_one") -> float:
    """NDCG of one user's full prediction vector (item index = position)."""
    return ndcg_user(RankedList.from_predictions(np.arange(len(pred)), pred, truth), gain)


def ranked_lists(test: SparseInteractions, predictions: np.ndarray) -> dict[int, RankedList]:
    """Per-user ranked lists over each user's own test items."""
    pred = np.asarray(predictions, dtype=np.float64)
    out = {}
    indptr = test.to_csr().indptr
    for u in range(test.n_users):
        lo, hi = indptr[u], indptr[u + 1]
        if hi > lo:
            out[u] = RankedList.from_predictions(test.cols[lo:hi], pred[lo:hi], test.vals[lo:hi])
    return out


@dataclass
class MetricsReport:
    """Flat (metric, scope, value) records."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def get(self, metric: str, scope: str | None = None) -> float:
        for m, s, v in self.rows:
            if m == metric and (scope is None or s == scope):
                return v
        raise KeyError((metric, scope))

    def as_dict(self) -> dict[str, float]:
        return {f"{m}:{s}": v for m, s, v in self.rows}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "scope", "value"])
            for m, s, v in self.rows:
                w.writerow([m, s, repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> MetricsReport:
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            return cls([(m, s, float(v)) for m, s, v in r])


def evaluate(test: SparseInteractions, predictions: np.ndarray, k: int = 5,
             rule: RelevanceRule | None = None, gain: str = "exp_minus_one") -> MetricsReport:
    """All metrics for predictions aligned with ``test``'s stored entries."""
    pred = np.asarray(predictions, dtype=np.float64)
    lists = ranked_lists(test, pred)
    pairs = np.column_stack([pred, test.vals])
    err = pred - test.vals
    per_user_mse = [float(np.mean(((r.scores - r.ratings) ** 2))) for r in lists.values()]
    per_user_mae = [float(np.mean(np.abs(r.scores - r.ratings))) for r in lists.values()]
    item_mse, item_mae = per_item_accuracy(test, pred)
    rep = MetricsReport([
        ("ndcg", "user", ndcg(lists, gain)),
        (f"recall@{k}", "user", recall_at_k(lists, k, rule)),
        ("mse", "pooled", mse(pairs)),
        ("mae", "pooled", mae(pairs)),
        ("mse", "user", float(np.mean(per_user_mse))),
        ("mae", "user", float(np.mean(per_user_mae))),
        ("mse", "item", item_mse),
        ("mae", "item", item_mae),
    ])
    assert np.isfinite(err).all()
    return rep
