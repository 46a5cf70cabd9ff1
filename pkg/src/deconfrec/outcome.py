"""Matrix-factorization outcome models with optional confounder adjustment.

Three likelihood families share one parameterization:

* ``probabilistic``: Gaussian, mean ``a * theta_u . beta_i``
* ``weighted``: Gaussian, mean ``theta_u . beta_i``, confidence weights
  ``1 + alpha * y`` on observed cells and 1 on unobserved cells
* ``poisson``: Poisson with rate ``theta_u . beta_i``

The ``deconfounded`` correction adds ``gamma_u * a_hat_ui + intercept`` to
the mean and fits over every cell, treating unexposed cells as observed
zeros. The ``ipw`` correction drops unexposed cells and weights observed
ones by inverse propensity. Parameters are MAP estimates under zero-mean
Gaussian priors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from .data import SparseInteractions
from .exposure import PFConfig, PFPosterior, SubstituteConfounder, fold_in_user

_logger = logging.getLogger(__name__)

VARIANTS = ("probabilistic", "poisson", "weighted")
CORRECTIONS = ("none", "deconfounded", "ipw")
RATE_FLOOR = 1e-6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OutcomeConfig:
    variant: str = "probabilistic"
    correction: str = "none"
    K: int = 10
    prior_std_theta_beta: float = 1.0
    prior_std_gamma: float = 1.0
    prior_std_intercept: float = 1.0
    sigma2: float = 1.0
    alpha_weight: float = 40.0
    # initial step multiplier on the preconditioned gradient
    learning_rate: float = 1.0
    max_epochs: int = 500
    tol: float = 1e-6
    seed: int = 0
    use_intercept: bool = True
    # "clamp" (rate floored at RATE_FLOOR) or "softplus"; poisson only
    poisson_link: str = "clamp"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("prior_std_theta_beta", "prior_std_gamma", "prior_std_intercept",
                     "sigma2", "alpha_weight", "learning_rate", "tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.poisson_link not in ("clamp", "softplus"):
            raise ValueError("poisson_link must be 'clamp' or 'softplus'")

    @property
    def label(self) -> str:
        return f"{self.correction}-{self.variant}"

    @property
    def has_confounder(self) -> bool:
        return self.correction == "deconfounded"


def mean_fn(variant: str, score, a):
    """Per-variant mean m(theta . beta, a)."""
    if variant == "probabilistic":
        return a * score
    if variant in ("weighted", "poisson"):
        return score + 0.0 * a
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class OutcomeModel:
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    intercept: float
    cfg: OutcomeConfig
    objective_trace: list[float] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    def save(self, path: str | Path) -> None:
        """Lossless text dump (17 significant digits)."""
        c = self.cfg
        with open(path, "w") as fh:
            fh.write(
                f"# variant={c.variant} correction={c.correction} K={c.K}"
                f" prior_std_theta_beta={c.prior_std_theta_beta:.17g}"
                f" prior_std_gamma={c.prior_std_gamma:.17g}"
                f" prior_std_intercept={c.prior_std_intercept:.17g}"
                f" sigma2={c.sigma2:.17g} alpha_weight={c.alpha_weight:.17g}"
                f" use_intercept={int(c.use_intercept)} seed={c.seed}"
                f" n_users={self.n_users} n_items={self.n_items}\n"
            )
            for u, k in np.ndindex(*self.theta.shape):
                fh.write(f"theta {u} {k} {self.theta[u, k]:.17g}\n")
            for i, k in np.ndindex(*self.beta.shape):
                fh.write(f"beta {i} {k} {self.beta[i, k]:.17g}\n")
            for u in range(self.n_users):
                fh.write(f"gamma {u} {self.gamma[u]:.17g}\n")
            fh.write(f"intercept {self.intercept:.17g}\n")

    @classmethod
    def load(cls, path: str | Path) -> OutcomeModel:
        with open(path) as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            K, U, I = int(meta["K"]), int(meta["n_users"]), int(meta["n_items"])
            theta, beta, gamma = np.zeros((U, K)), np.zeros((I, K)), np.zeros(U)
            intercept = 0.0
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "theta":
                    theta[int(tok[1]), int(tok[2])] = float(tok[3])
                elif tok[0] == "beta":
                    beta[int(tok[1]), int(tok[2])] = float(tok[3])
                elif tok[0] == "gamma":
                    gamma[int(tok[1])] = float(tok[2])
                elif tok[0] == "intercept":
                    intercept = float(tok[1])
        cfg = OutcomeConfig(
            variant=meta["variant"], correction=meta["correction"], K=K,
            prior_std_theta_beta=float(meta["prior_std_theta_beta"]),
            prior_std_gamma=float(meta["prior_std_gamma"]),
            prior_std_intercept=float(meta["prior_std_intercept"]),
            sigma2=float(meta["sigma2"]), alpha_weight=float(meta["alpha_weight"]),
            use_intercept=bool(int(meta["use_intercept"])), seed=int(meta["seed"]),
        )
        return cls(theta, beta, gamma, intercept, cfg)


# ---------------------------------------------------------------------------
# objective


@dataclass
class OutcomeData:
    """Likelihood terms in either dense (every cell) or sparse (observed) form.

    Dense form: ``y``, ``a``, ``w`` (and ``ahat``) are U x I arrays.
    Sparse form: ``rows``, ``cols`` index the terms and ``y``, ``a``, ``w``
    are per-term vectors.
    """

    variant: str
    n_users: int
    n_items: int
    dense: bool
    y: np.ndarray
    a: np.ndarray
    w: np.ndarray
    ahat: np.ndarray | None = None
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None

    def __post_init__(self):
        if not self.dense:
            order = np.lexsort((self.cols, self.rows))
            if not np.array_equal(order, np.arange(len(order))):
                raise ValueError("sparse terms must be sorted by (row, col)")
            csr = sparse.csr_matrix((np.ones(len(self.rows)), (self.rows, self.cols)),
                                    shape=(self.n_users, self.n_items))
            self._indptr, self._indices = csr.indptr, csr.indices

    @property
    def n_terms(self) -> int:
        return self.y.size

    def matrix(self, x: np.ndarray) -> sparse.csr_matrix:
        """Per-term values as a CSR matrix (term order is CSR order)."""
        return sparse.csr_matrix((x, self._indices, self._indptr),
                                 shape=(self.n_users, self.n_items))


def build_outcome_data(train: SparseInteractions, cfg: OutcomeConfig,
                       ahat: np.ndarray | None = None,
                       ipw: np.ndarray | None = None) -> OutcomeData:
    """Assemble the likelihood terms for ``cfg``.

    ``ahat`` is the dense substitute confounder (deconfounded only); ``ipw`` is
    a per-entry weight vector aligned with ``train``'s stored entries.
    """
    U, I = train.shape
    if cfg.correction == "ipw":
        if ipw is None:
            raise ValueError("ipw correction requires per-entry weights")
        ipw = np.asarray(ipw, dtype=np.float64)
        if ipw.shape != (train.nnz,) or np.any(~np.isfinite(ipw)) or np.any(ipw <= 0):
            raise ValueError("ipw weights must be finite, positive, one per entry")
        w = ipw / ipw.mean()
        if cfg.variant == "weighted":
            w = w * (1.0 + cfg.alpha_weight * train.vals)
        return OutcomeData(cfg.variant, U, I, False, train.vals.copy(),
                           np.ones(train.nnz), w, None,
                           train.rows.copy(), train.cols.copy())
    if cfg.correction == "deconfounded":
        if ahat is None:
            raise ValueError("deconfounded correction requires a substitute confounder")
        if ahat.shape != (U, I):
            raise ValueError(f"substitute shape {ahat.shape} != data shape {(U, I)}")
    if cfg.variant == "probabilistic" and cfg.correction == "none":
        return OutcomeData(cfg.variant, U, I, False, train.vals.copy(),
                           np.ones(train.nnz), np.ones(train.nnz), None,
                           train.rows.copy(), train.cols.copy())
    y = train.to_dense()
    a = train.mask()
    w = np.ones((U, I))
    if cfg.variant == "weighted":
        w += cfg.alpha_weight * y * a
    return OutcomeData(cfg.variant, U, I, True, y, a, w,
                       ahat if cfg.has_confounder else None)


def _scores(theta, beta, data: OutcomeData):
    if data.dense:
        return theta @ beta.T
    if data.n_users * data.n_items <= 8 * data.n_terms:
        # dense product then gather beats per-term row gathers on dense-ish data
        return (theta @ beta.T)[data.rows, data.cols]
    return np.einsum("nk,nk->n", theta[data.rows], beta[data.cols])


def _offset(gamma, intercept, data: OutcomeData):
    if data.ahat is None:
        return 0.0
    return gamma[:, None] * data.ahat + intercept


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _terms(params, data: OutcomeData, cfg: OutcomeConfig):
    """Return (negative log-likelihood, dL/dmean, curvature) per term."""
    theta, beta, gamma, intercept = params
    s = _scores(theta, beta, data)
    mu = mean_fn(data.variant, s, data.a) + _offset(gamma, intercept, data)
    w, y = data.w, data.y
    if data.variant == "poisson":
        if cfg.poisson_link == "softplus":
            rate = _softplus(mu)
            drate = _sigmoid(mu)
        else:
            rate = np.maximum(mu, RATE_FLOOR)
            drate = (mu > RATE_FLOOR).astype(np.float64)
        nll = w * (rate - y * np.log(rate))
        dmu = w * (1.0 - y / rate) * drate
        # observed information; equals the Fisher information where rate == y
        curv = w * drate ** 2 * y / rate ** 2
    else:
        r = mu - y
        nll = w * r * r / (2.0 * cfg.sigma2)
        dmu = w * r / cfg.sigma2
        curv = w / cfg.sigma2
    return nll, dmu, curv


def _reduce(x, data: OutcomeData, side: str, factor=None):
    """Sum per-term values into users ('u') or items ('i'), optionally times
    the opposite factor matrix."""
    if data.dense:
        if factor is None:
            return x.sum(axis=1 if side == "u" else 0)
        return x @ factor if side == "u" else x.T @ factor
    n = data.n_users if side == "u" else data.n_items
    idx = data.rows if side == "u" else data.cols
    if factor is None:
        return np.bincount(idx, weights=x, minlength=n)
    m = data.matrix(x)
    return m @ factor if side == "u" else m.T @ factor


def objective(params, data: OutcomeData, cfg: OutcomeConfig,
              fit_gamma: bool | None = None):
    """Negative log-posterior and its gradient.

    ``params`` is ``(theta, beta, gamma, intercept)``. Returns
    ``(value, (g_theta, g_beta, g_gamma, g_intercept))``; the gamma and
    intercept gradients are zero when those parameters are not fitted.
    """
    theta, beta, gamma, intercept = params
    if fit_gamma is None:
        fit_gamma = data.ahat is not None
    nll, dmu, _ = _terms(params, data, cfg)
    dscore = dmu * data.a if data.variant == "probabilistic" else dmu
    st = cfg.prior_std_theta_beta ** 2
    value = float(np.sum(nll)) + (np.sum(theta ** 2) + np.sum(beta ** 2)) / (2 * st)
    g_theta = _reduce(dscore, data, "u", beta) + theta / st
    g_beta = _reduce(dscore, data, "i", theta) + beta / st
    g_gamma = np.zeros_like(gamma)
    g_int = 0.0
    if fit_gamma:
        sg = cfg.prior_std_gamma ** 2
        value += float(np.sum(gamma ** 2)) / (2 * sg)
        g_gamma = _reduce(dmu * data.ahat, data, "u") + gamma / sg
        if cfg.use_intercept:
            si = cfg.prior_std_intercept ** 2
            value += intercept ** 2 / (2 * si)
            g_int = float(np.sum(dmu)) + intercept / si
    return value, (g_theta, g_beta, g_gamma, g_int)


def _gram(x, data: OutcomeData, side: str, factor: np.ndarray) -> np.ndarray:
    """Per-row sum of ``x * f f^T`` over the opposite factor rows ``f``."""
    K = factor.shape[1]
    outer = (factor[:, :, None] * factor[:, None, :]).reshape(factor.shape[0], K * K)
    return np.asarray(_reduce(x, data, side, outer)).reshape(-1, K, K)


def _directions(params, grads, data: OutcomeData, cfg: OutcomeConfig, block: str,
                fit_gamma: bool) -> dict[int, np.ndarray]:
    """Curvature-scaled descent directions for one parameter block.

    The user block couples ``theta_u`` with ``gamma_u`` through a per-user
    (K+1)x(K+1) curvature matrix; the item block uses a KxK matrix per item
    and a scalar for the intercept. Curvatures are Gauss-Newton terms plus
    prior precisions, so every matrix is positive definite.
    """
    theta, beta, gamma, intercept = params
    _, _, c = _terms(params, data, cfg)
    ca = c * data.a if data.variant == "probabilistic" else c
    prec = 1.0 / cfg.prior_std_theta_beta ** 2
    K = theta.shape[1]
    eye = np.eye(K)
    out: dict[int, np.ndarray] = {}
    if block == "user":
        H = _gram(ca, data, "u", beta) + prec * eye
        g = np.asarray(grads[0])
        if fit_gamma:
            U = theta.shape[0]
            full = np.zeros((U, K + 1, K + 1))
            full[:, :K, :K] = H
            cross = np.asarray(_reduce(ca * data.ahat, data, "u", beta))
            full[:, :K, K] = cross
            full[:, K, :K] = cross
            full[:, K, K] = _reduce(c * data.ahat ** 2, data, "u") + 1.0 / cfg.prior_std_gamma ** 2
            rhs = np.concatenate([g, np.asarray(grads[2])[:, None]], axis=1)
            d = -np.linalg.solve(full, rhs[..., None])[..., 0]
            out[0], out[2] = d[:, :K], d[:, K]
        else:
            out[0] = -np.linalg.solve(H, g[..., None])[..., 0]
    else:
        H = _gram(ca, data, "i", theta) + prec * eye
        out[1] = -np.linalg.solve(H, np.asarray(grads[1])[..., None])[..., 0]
        if fit_gamma and cfg.use_intercept:
            h = float(np.sum(c)) + 1.0 / cfg.prior_std_intercept ** 2
            out[3] = np.asarray(-grads[3] / h)
    return out


def _block_step(params, value, data, cfg, block, fit_gamma, step):
    """One backtracking step on a parameter block; returns new state."""
    _, grads = objective(params, data, cfg, fit_gamma)
    dirs = _directions(params, grads, data, cfg, block, fit_gamma)
    slope = sum(float(np.sum(np.asarray(grads[n]) * d)) for n, d in dirs.items())
    if slope >= 0:
        return params, value, step, False
    t = step
    for _ in range(40):
        cand = list(params)
        for n, d in dirs.items():
            cand[n] = params[n] + t * d
        cand[3] = float(cand[3])
        new_value, _ = objective(tuple(cand), data, cfg, fit_gamma)
        if np.isfinite(new_value) and new_value <= value + 1e-4 * t * slope:
            return tuple(cand), new_value, t, True
        t *= 0.5
    return params, value, t, False


def _init_params(U, I, cfg: OutcomeConfig, data: OutcomeData | None = None):
    rng = np.random.default_rng(cfg.seed)
    if cfg.variant == "poisson":
        ymean = float(np.mean(data.y)) if data is not None and data.y.size else 1.0
        scale = math.sqrt(max(ymean, 1e-3) / cfg.K)
        theta = scale * rng.uniform(0.5, 1.5, size=(U, cfg.K))
        beta = scale * rng.uniform(0.5, 1.5, size=(I, cfg.K))
    else:
        theta = 0.1 * rng.standard_normal((U, cfg.K))
        beta = 0.1 * rng.standard_normal((I, cfg.K))
    return theta, beta, np.zeros(U), 0.0


def _optimize(params, data, cfg, fit_gamma, blocks=("user", "item"), label="fit"):
    value, _ = objective(params, data, cfg, fit_gamma)
    if not np.isfinite(value):
        raise DivergenceError(f"{label}: objective not finite at epoch 0")
    trace = [value]
    steps = {b: cfg.learning_rate for b in blocks}
    for epoch in range(1, cfg.max_epochs + 1):
        for b in blocks:
            params, value, t, ok = _block_step(params, value, data, cfg, b,
                                               fit_gamma, steps[b])
            steps[b] = min(cfg.learning_rate, 2.0 * t) if ok else t
        if not np.isfinite(value):
            raise DivergenceError(f"{label}: objective not finite at epoch {epoch}")
        trace.append(value)
        if abs(trace[-2] - value) <= cfg.tol * max(abs(trace[-2]), 1e-12):
            break
    return params, trace


def fit_outcome(train: SparseInteractions, cfg: OutcomeConfig,
                sub: SubstituteConfounder | None = None,
                ipw_weights: np.ndarray | None = None,
                init=None) -> OutcomeModel:
    """MAP fit of the outcome model to a training fold.

    ``train`` holds observed ratings; its sparsity pattern is the exposure
    matrix. ``ipw_weights`` holds one inverse-propensity weight per stored
    entry (required for the ``ipw`` correction); they are rescaled to mean 1 so
    that the prior keeps the same relative strength as in the unweighted fit.
    """
    if ipw_weights is not None and np.any(np.asarray(ipw_weights) <= 0):
        raise ValueError("propensity weights must be positive")
    ahat = None
    if cfg.has_confounder:
        if sub is None:
            raise ValueError("deconfounded correction requires a substitute confounder")
        ahat = sub.dense()
    data = build_outcome_data(train, cfg, ahat, ipw_weights)
    U, I = train.shape
    params = init if init is not None else _init_params(U, I, cfg, data)
    params, trace = _optimize(params, data, cfg, cfg.has_confounder, label=cfg.label)
    theta, beta, gamma, intercept = params
    return OutcomeModel(theta, beta, gamma, float(intercept), cfg, trace)


def predict_existing(model: OutcomeModel, sub: SubstituteConfounder | None,
                     u: int, i: int) -> float:
    """Potential rating under exposure for a training user."""
    if not (0 <= u < model.n_users and 0 <= i < model.n_items):
        raise IndexError(f"({u}, {i}) out of range")
    val = float(mean_fn(model.cfg.variant, model.theta[u] @ model.beta[i], 1.0))
    if model.cfg.has_confounder:
        if sub is None:
            raise ValueError("deconfounded model needs the substitute confounder")
        val += model.gamma[u] * float(sub.user_means[u] @ sub.item_means[i]) + model.intercept
    return val


def predict_matrix(model: OutcomeModel, sub: SubstituteConfounder | None = None,
                   users: np.ndarray | None = None) -> np.ndarray:
    """Dense potential-rating matrix for ``users`` (all users by default)."""
    users = np.arange(model.n_users) if users is None else np.asarray(users)
    out = mean_fn(model.cfg.variant, model.theta[users] @ model.beta.T, 1.0)
    if model.cfg.has_confounder:
        if sub is None:
            raise ValueError("deconfounded model needs the substitute confounder")
        ahat = sub.user_means[users] @ sub.item_means.T
        out = out + model.gamma[users, None] * ahat + model.intercept
    return out


def predict_pairs(model: OutcomeModel, sub: SubstituteConfounder | None,
                  users: np.ndarray, items: np.ndarray) -> np.ndarray:
    out = mean_fn(model.cfg.variant,
                  np.einsum("nk,nk->n", model.theta[users], model.beta[items]), 1.0)
    if model.cfg.has_confounder:
        ahat = np.einsum("nk,nk->n", sub.user_means[users], sub.item_means[items])
        out = out + model.gamma[users] * ahat + model.intercept
    return out


@dataclass
class NewUserPrediction:
    scores: np.ndarray
    theta: np.ndarray
    gamma: float
    user_means: np.ndarray | None
    objective_trace: list[float]
    prior_only: bool = False


def predict_new_user(model: OutcomeModel, pf: PFPosterior | None,
                     items: np.ndarray, ratings: np.ndarray,
                     targets: np.ndarray | None = None,
                     exposure_items: np.ndarray | None = None,
                     exposure_counts: np.ndarray | None = None,
                     pf_cfg: PFConfig | None = None,
                     ipw_weights: np.ndarray | None = None,
                     cfg: OutcomeConfig | None = None) -> NewUserPrediction:
    """Fold in a new user and score ``targets`` (all items by default).

    Item-side parameters stay frozen. ``items``/``ratings`` are the new
    user's revealed ratings; the exposure vector defaults to their support.
    With no ratings, the user factors stay at the prior mode and the result
    is flagged ``prior_only``.
    """
    cfg = cfg or model.cfg
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    targets = np.arange(model.n_items) if targets is None else np.asarray(targets)
    I = model.n_items
    pi_mean = None
    ahat_row = None
    if cfg.has_confounder:
        if pf is None:
            raise ValueError("deconfounded model needs the PF posterior for fold-in")
        ex_items = items if exposure_items is None else np.asarray(exposure_items)
        ex_counts = np.ones(len(ex_items)) if exposure_counts is None else exposure_counts
        pi_mean = fold_in_user(pf, ex_items, ex_counts, pf_cfg or pf.cfg)
        ahat_row = pi_mean @ pf.item_means.T

    theta = np.zeros((1, cfg.K))
    gamma = np.zeros(1)
    trace: list[float] = []
    prior_only = len(items) == 0
    if prior_only:
        _logger.warning("new user has no ratings; predicting from the prior mode")
    else:
        one = SparseInteractions(1, I, np.zeros(len(items), dtype=np.int64), items, ratings)
        data = build_outcome_data(one, cfg, None if ahat_row is None else ahat_row[None, :],
                                  ipw_weights)
        rng = np.random.default_rng(cfg.seed)
        if cfg.variant == "poisson":
            scale = math.sqrt(max(float(np.mean(ratings)), 1e-3) / cfg.K)
            theta = scale * rng.uniform(0.5, 1.5, size=(1, cfg.K))
        else:
            theta = 0.1 * rng.standard_normal((1, cfg.K))
        params = (theta, model.beta, gamma, model.intercept)
        params, trace = _optimize(params, data, cfg, cfg.has_confounder,
                                  blocks=("user",), label="fold-in")
        theta, gamma = params[0], params[2]
    scores = mean_fn(cfg.variant, theta[0] @ model.beta[targets].T, 1.0)
    if cfg.has_confounder:
        scores = scores + gamma[0] * ahat_row[targets] + model.intercept
    return NewUserPrediction(np.asarray(scores, dtype=np.float64), theta[0],
                             float(gamma[0]), pi_mean, trace, prior_only)


def rank_items(predictions, candidates=None) -> list:
    """Order candidates by descending score; ties by ascending item index.

    ``predictions`` maps item -> score (a dict, or an array indexed by item).
    """
    if isinstance(predictions, dict):
        items = list(predictions) if candidates is None else list(candidates)
        scores = [predictions[i] for i in items]
    else:
        arr = np.asarray(predictions)
        items = list(range(len(arr))) if candidates is None else list(candidates)
        scores = [arr[i] for i in items]
    return [i for _, i in sorted(zip(scores, items), key=lambda p: (-p[0], p[1]))]


def with_overrides(cfg: OutcomeConfig, **kw) -> OutcomeConfig:
    return replace(cfg, **kw)
