"""Rating-dependent propensities for inverse-propensity-weighted fits.

Observed cells get ``p = k`` for ratings >= 4 and ``p = k * alpha**(4 - y)``
below 4. ``k`` is chosen so the mean propensity over the whole user x item
grid hits ``target_mean``; ratings of unobserved cells are unknown, so every
cell is assigned the empirical distribution of observed ratings when solving
for ``k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SparseInteractions

_logger = logging.getLogger(__name__)

PROPENSITY_FLOOR = 1e-4
PIVOT = 4.0


@dataclass(frozen=True)
class PropensityModel:
    k: float
    alpha: float = 0.25
    target_mean: float = 0.05
    n_users: int = 0
    n_items: int = 0
    # mean of alpha**max(0, 4 - y) under the imputed rating distribution
    mean_factor: float = 1.0

    def propensity(self, ratings) -> np.ndarray:
        y = np.asarray(ratings, dtype=np.float64)
        p = self.k * self.alpha ** np.maximum(0.0, PIVOT - y)
        return np.clip(p, PROPENSITY_FLOOR, 1.0)

    def grid_mean(self) -> float:
        """Mean propensity over the full grid under the imputation rule."""
        return min(self.k, 1.0) * self.mean_factor

    def save(self, path: str | Path, entries: SparseInteractions) -> None:
        """Write ``u,i,p`` rows for ``entries`` under a header with k, alpha, target."""
        p = self.propensity(entries.vals)
        with open(path, "w") as fh:
            fh.write(f"# k={float(self.k)!r} alpha={float(self.alpha)!r} target_mean={float(self.target_mean)!r}\n")
            fh.write("u,i,p\n")
            for u, i, pi in zip(entries.rows.tolist(), entries.cols.tolist(), p.tolist()):
                fh.write(f"{u},{i},{pi!r}\n")


def fit_propensity(train_ratings: SparseInteractions, n_users: int | None = None,
                   n_items: int | None = None, alpha: float = 0.25,
                   target_mean: float = 0.05) -> PropensityModel:
    if train_ratings.nnz == 0:
        raise ValueError("cannot fit propensities without ratings")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if not 0 < target_mean <= 1:
        raise ValueError("target_mean must lie in (0, 1]")
    n_users = train_ratings.n_users if n_users is None else n_users
    n_items = train_ratings.n_items if n_items is None else n_items
    factor = float(np.mean(alpha ** np.maximum(0.0, PIVOT - train_ratings.vals)))
    k = target_mean / factor
    if k > 1:
        _logger.warning("propensity scale k=%.4g exceeds 1; clamping", k)
        k = 1.0
    return PropensityModel(k, alpha, target_mean, n_users, n_items, factor)


def ipw_weights(model: PropensityModel, ratings) -> np.ndarray:
    """Inverse propensities for the given observed ratings."""
    return 1.0 / model.propensity(ratings)
