"""Confounded recommendation worlds with known potential outcomes."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SparseInteractions, SplitSpec, split
from .metrics import mse_loss, ndcg_loss

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    U: int = 500
    I: int = 500
    K: int = 10
    gamma_theta: float = 0.5
    gamma_y: float = 3.0
    gamma_shape: float = 0.3
    gamma_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma_theta <= 1.0:
            raise ValueError("gamma_theta must lie in [0, 1]")
        if self.gamma_y < 0:
            raise ValueError("gamma_y must be nonnegative")
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValueError("Gamma shape and rate must be positive")
        if min(self.U, self.I, self.K) < 1:
            raise ValueError("U, I, K must be positive")


@dataclass(frozen=True, eq=False)
class SimWorld:
    cfg: SimConfig
    c: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    exposures: np.ndarray
    potential: np.ndarray
    observed: SparseInteractions

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in (
            self.c, self.beta, self.theta, self.exposures, self.potential,
            self.observed.rows, self.observed.cols, self.observed.vals))


def generate(cfg: SimConfig) -> SimWorld:
    """Draw one world.

    ``c_u`` and ``beta_i`` have i.i.d. Gamma(shape, rate) coordinates.
    ``theta_u`` is the convex combination ``gamma_theta * c_u +
    (1 - gamma_theta) * g_u`` with a fresh Gamma draw ``g_u``. Exposures are
    ``min(Poisson(c_u . beta_i), 1)`` and potential ratings
    ``min(1 + Poisson((theta_u + gamma_y c_u) . beta_i), 5)``.
    """
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / cfg.gamma_rate
    c = rng.gamma(cfg.gamma_shape, scale, size=(cfg.U, cfg.K))
    beta = rng.gamma(cfg.gamma_shape, scale, size=(cfg.I, cfg.K))
    fresh = rng.gamma(cfg.gamma_shape, scale, size=(cfg.U, cfg.K))
    theta = cfg.gamma_theta * c + (1.0 - cfg.gamma_theta) * fresh
    exposures = np.minimum(rng.poisson(c @ beta.T), 1).astype(np.int8)
    potential = np.minimum(1 + rng.poisson((theta + cfg.gamma_y * c) @ beta.T), 5)
    potential = potential.astype(np.int8)
    observed = SparseInteractions.from_dense(exposures * potential.astype(np.float64))
    return SimWorld(cfg, c, beta, theta, exposures, potential, observed)


def causal_error(world: SimWorld, predictions: np.ndarray, loss: str = "mse") -> float:
    """Per-user loss over every item, averaged over users."""
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != world.potential.shape:
        raise ValueError("predictions must cover every (user, item) pair")
    truth = world.potential.astype(np.float64)
    fn = _LOSSES[loss]
    return float(np.mean([fn(pred[u], truth[u]) for u in range(truth.shape[0])]))


def randomized_test_error(world: SimWorld, item_subsets: Sequence[np.ndarray],
                          predictions: np.ndarray, loss: str = "mse") -> float:
    """Average over users of the loss restricted to each user's item subset."""
    pred = np.asarray(predictions, dtype=np.float64)
    truth = world.potential.astype(np.float64)
    fn = _LOSSES[loss]
    vals = []
    for u, items in enumerate(item_subsets):
        items = np.asarray(items, dtype=np.int64)
        if len(items) == 0:
            _logger.warning("user %d has an empty test subset; skipped", u)
            continue
        vals.append(fn(pred[u, items], truth[u, items]))
    return float(np.mean(vals))


def random_subsets(n_users: int, n_items: int, size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform item subsets without replacement, one per user."""
    return [rng.choice(n_items, size=size, replace=False) for _ in range(n_users)]


_LOSSES: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "mse": mse_loss,
    "ndcg": ndcg_loss,
}


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRecord:
    gamma_theta: float
    gamma_y: float
    method: str
    metric: str
    run: int
    value: float


def run_seed(cfg: SimConfig, run: int) -> int:
    """Deterministic per-(config, run) seed independent of scheduling."""
    ss = np.random.SeedSequence([cfg.seed, run,
                                 int(round(cfg.gamma_theta * 1e6)),
                                 int(round(cfg.gamma_y * 1e6))])
    return int(ss.generate_state(1)[0])


def _one_run(cfg: SimConfig, run: int, methods: Sequence, split_seed: int):
    from .experiment import fit_method

    world = generate(replace(cfg, seed=run_seed(cfg, run)))
    bundle = split(world.observed, SplitSpec("train_val_80_20", seed=split_seed + run))
    out = []
    for method in methods:
        try:
            pred = fit_method(method, bundle.train, world=world)
            for metric in ("mse", "ndcg"):
                out.append(SweepRecord(cfg.gamma_theta, cfg.gamma_y, method.name,
                                       metric, run, causal_error(world, pred, metric)))
        except Exception as exc:  # keep the sweep going
            _logger.error("run %d, method %s failed: %s", run, method.name, exc)
            for metric in ("mse", "ndcg"):
                out.append(SweepRecord(cfg.gamma_theta, cfg.gamma_y, method.name,
                                       metric, run, math.nan))
    return out


def sweep(grid: Sequence[SimConfig], methods: Sequence, runs: int = 10,
          split_seed: int = 0, n_jobs: int = 1) -> list[SweepRecord]:
    """Generate, split, fit and score every (grid point, run, method).

    Each world uses the observed entries' 80% training fold. Failed fits are
    recorded as NaN and the sweep continues.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = [(cfg, r) for cfg in grid for r in range(runs)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            futs = [ex.submit(_one_run, cfg, r, methods, split_seed) for cfg, r in jobs]
            results = [f.result() for f in futs]
    else:
        results = [_one_run(cfg, r, methods, split_seed) for cfg, r in jobs]
    return [rec for chunk in results for rec in chunk]


def aggregate(records: Sequence[SweepRecord]) -> list[dict]:
    """Mean and standard error per (gamma_theta, gamma_y, method, metric)."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.gamma_theta, r.gamma_y, r.method, r.metric), []).append(r.value)
    rows = []
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        v = v[np.isfinite(v)]
        mean = float(v.mean()) if len(v) else math.nan
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append(dict(gamma_theta=key[0], gamma_y=key[1], method=key[2],
                         metric=key[3], n=len(v), mean=mean, stderr=se))
    return rows


def write_sweep(records: Sequence[SweepRecord], path: str | Path,
                agg_path: str | Path | None = None) -> None:
    fields = ["gamma_theta", "gamma_y", "method", "metric", "run", "value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in records:
            w.writerow([repr(r.gamma_theta), repr(r.gamma_y), r.method, r.metric,
                        r.run, repr(float(r.value))])
    if agg_path is not None:
        rows = aggregate(records)
        with open(agg_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else
                               ["gamma_theta", "gamma_y", "method", "metric", "n",
                                "mean", "stderr"])
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(float(v)) if isinstance(v, float) else v
                            for k, v in row.items()})


def config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)


@dataclass(frozen=True)
class PairedSummary:
    """Baseline-minus-treatment comparison at one grid point."""

    gamma_theta: float
    gamma_y: float
    wins: int
    n: int
    mean_gap: float


def paired_comparison(records: Sequence[SweepRecord], baseline: str, treatment: str,
                      metric: str = "mse") -> list[PairedSummary]:
    """Per grid point: runs where ``treatment`` has lower error, and the
    seed-averaged gap ``baseline - treatment``."""
    vals: dict[tuple, dict[str, float]] = {}
    for r in records:
        if r.metric == metric and r.method in (baseline, treatment):
            vals.setdefault((r.gamma_theta, r.gamma_y, r.run), {})[r.method] = r.value
    points: dict[tuple, list[float]] = {}
    for (gt, gy, _), d in sorted(vals.items()):
        if baseline in d and treatment in d:
            points.setdefault((gt, gy), []).append(d[baseline] - d[treatment])
    out = []
    for (gt, gy), gaps in points.items():
        g = np.asarray(gaps)
        g = g[np.isfinite(g)]
        out.append(PairedSummary(gt, gy, int((g > 0).sum()), len(g),
                                 float(g.mean()) if len(g) else math.nan))
    return out
