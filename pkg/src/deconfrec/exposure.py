"""Gamma-Poisson factorization of the exposure matrix by coordinate ascent VI.

Model::

    pi_u     ~ Gamma(c1, c2)         (K-vector, rate parameterization)
    lambda_i ~ Gamma(c3, c4)
    a_ui     ~ Poisson(pi_u . lambda_i)

The variational family is fully factorized Gamma on every pi_uk and
lambda_ik, with multinomial allocations for each nonzero count. The
allocations are never stored; each half-sweep recomputes them from the
current expectations, so one sweep costs O(nnz K + (U + I) K).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import digamma, gammaln, logsumexp

from .data import SparseInteractions

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PFConfig:
    K: int = 10
    c1: float = 0.3
    c2: float = 0.3
    c3: float = 0.3
    c4: float = 0.3
    max_iters: int = 300
    tol: float = 1e-5
    seed: int = 0
    # width of the uniform jitter added to the prior at initialization
    init_jitter: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.c1, self.c2, self.c3, self.c4) <= 0:
            raise ValueError("Gamma prior parameters must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class PFPosterior:
    user_shape: np.ndarray
    user_rate: np.ndarray
    item_shape: np.ndarray
    item_rate: np.ndarray
    cfg: PFConfig
    elbo_trace: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.user_shape.shape[1]

    @property
    def user_means(self) -> np.ndarray:
        return self.user_shape / self.user_rate

    @property
    def item_means(self) -> np.ndarray:
        return self.item_shape / self.item_rate

    def save(self, path: str | Path) -> None:
        """Text table ``side,index,k,shape,rate`` behind a ``#`` header."""
        c = self.cfg
        with open(path, "w") as fh:
            fh.write(f"# K={self.K} c1={c.c1!r} c2={c.c2!r} c3={c.c3!r} c4={c.c4!r}"
                     f" seed={c.seed}\n")
            fh.write("# elbo=" + ",".join(repr(float(e)) for e in self.elbo_trace) + "\n")
            fh.write("side,index,k,shape,rate\n")
            for side, shp, rte in (("user", self.user_shape, self.user_rate),
                                   ("item", self.item_shape, self.item_rate)):
                for n in range(shp.shape[0]):
                    for k in range(shp.shape[1]):
                        fh.write(f"{side},{n},{k},{float(shp[n, k])!r},{float(rte[n, k])!r}\n")

    @classmethod
    def load(cls, path: str | Path) -> PFPosterior:
        with open(path) as fh:
            head = fh.readline()[1:].split()
            meta = dict(kv.split("=") for kv in head)
            elbo_line = fh.readline().strip()[len("# elbo="):]
            elbo = [float(e) for e in elbo_line.split(",") if e]
            fh.readline()
            recs = [line.strip().split(",") for line in fh if line.strip()]
        K = int(meta["K"])
        n_u = 1 + max((int(r[1]) for r in recs if r[0] == "user"), default=-1)
        n_i = 1 + max((int(r[1]) for r in recs if r[0] == "item"), default=-1)
        arrs = {s: (np.zeros((n, K)), np.zeros((n, K)))
                for s, n in (("user", n_u), ("item", n_i))}
        for side, n, k, shp, rte in recs:
            arrs[side][0][int(n), int(k)] = float(shp)
            arrs[side][1][int(n), int(k)] = float(rte)
        cfg = PFConfig(K=K, c1=float(meta["c1"]), c2=float(meta["c2"]),
                       c3=float(meta["c3"]), c4=float(meta["c4"]),
                       seed=int(meta["seed"]))
        return cls(*arrs["user"], *arrs["item"], cfg, elbo)


def _check_counts(exposures: SparseInteractions) -> None:
    v = exposures.vals
    if len(v) and (np.any(v < 0) or np.any(v != np.round(v))):
        raise ValueError("exposures must be nonnegative integer counts")


def _gamma_kl_terms(shape, rate, prior_shape, prior_rate) -> float:
    """E_q[log p(x)] - E_q[log q(x)] summed over entries, q = Gamma(shape, rate)."""
    elog = digamma(shape) - np.log(rate)
    emean = shape / rate
    logp = (prior_shape * np.log(prior_rate) - gammaln(prior_shape)
            + (prior_shape - 1) * elog - prior_rate * emean)
    logq = shape * np.log(rate) - gammaln(shape) + (shape - 1) * elog - shape
    return float(np.sum(logp - logq))


class _Sweeper:
    """Holds the sparse data layout shared by the update and ELBO passes.

    For each stored count the allocation normalizer is
    ``sum_k exp(Elog pi_uk) exp(Elog lambda_ik)``; it is computed once per
    parameter state and reused by the ELBO and the next half-sweep.
    """

    def __init__(self, exposures: SparseInteractions, cfg: PFConfig):
        self.cfg = cfg
        self.rows = exposures.rows
        self.cols = exposures.cols
        self.y = exposures.vals
        self.shape = exposures.shape
        self.log_fact = float(np.sum(gammaln(self.y + 1)))
        # entries are sorted by (row, col), so CSR data order is entry order
        csr = exposures.to_csr()
        self._indptr, self._indices = csr.indptr, csr.indices

    def normalizer(self, xu, xi):
        return np.einsum("nk,nk->n", xu[self.rows], xi[self.cols])

    def _mat(self, w):
        return sparse.csr_matrix((w, self._indices, self._indptr), shape=self.shape)

    def update_users(self, state, norm):
        us, ur, ishp, irt, xu, xi = state
        alloc = xu * (self._mat(self.y / norm) @ xi)
        new_shape = self.cfg.c1 + alloc
        new_rate = np.broadcast_to(self.cfg.c2 + (ishp / irt).sum(axis=0), us.shape).copy()
        return new_shape, new_rate

    def update_items(self, state, norm):
        us, ur, ishp, irt, xu, xi = state
        alloc = xi * (self._mat(self.y / norm).T @ xu)
        new_shape = self.cfg.c3 + alloc
        new_rate = np.broadcast_to(self.cfg.c4 + (us / ur).sum(axis=0), ishp.shape).copy()
        return new_shape, new_rate

    def elbo(self, state, norm) -> float:
        cfg = self.cfg
        us, ur, ishp, irt, _, _ = state
        lik = float(np.dot(self.y, np.log(norm))) - self.log_fact
        lik -= float(np.dot((us / ur).sum(axis=0), (ishp / irt).sum(axis=0)))
        return (lik + _gamma_kl_terms(us, ur, cfg.c1, cfg.c2)
                + _gamma_kl_terms(ishp, irt, cfg.c3, cfg.c4))


def _state(us, ur, ishp, irt):
    # exp(E[log x]) for both sides, used in the allocation weights
    xu = np.exp(digamma(us) - np.log(ur))
    xi = np.exp(digamma(ishp) - np.log(irt))
    return us, ur, ishp, irt, xu, xi


def init_params(n_users: int, n_items: int, cfg: PFConfig):
    """Prior values plus seeded uniform jitter, as (us, ur, is, ir)."""
    rng = np.random.default_rng(cfg.seed)
    j = cfg.init_jitter
    us = cfg.c1 + j * rng.random((n_users, cfg.K))
    ur = cfg.c2 + j * rng.random((n_users, cfg.K))
    ishp = cfg.c3 + j * rng.random((n_items, cfg.K))
    irt = cfg.c4 + j * rng.random((n_items, cfg.K))
    return us, ur, ishp, irt


def fit_pf(exposures: SparseInteractions, cfg: PFConfig | None = None,
           init=None) -> PFPosterior:
    """Fit Poisson factorization to a (binary or count) exposure matrix.

    ``init`` optionally overrides the seeded initialization with a tuple
    ``(user_shape, user_rate, item_shape, item_rate)``.
    """
    cfg = cfg or PFConfig()
    _check_counts(exposures)
    U, I = exposures.shape
    if U < 1 or I < 1:
        raise ValueError("need at least one user and one item")
    if init is None:
        us, ur, ishp, irt = init_params(U, I, cfg)
    else:
        us, ur, ishp, irt = (np.array(a, dtype=np.float64) for a in init)

    sw = _Sweeper(exposures, cfg)
    state = _state(us, ur, ishp, irt)
    norm = sw.normalizer(state[4], state[5])
    trace = [sw.elbo(state, norm)]
    for it in range(cfg.max_iters):
        us, ur = sw.update_users(state, norm)
        state = _state(us, ur, ishp, irt)
        ishp, irt = sw.update_items(state, sw.normalizer(state[4], state[5]))
        state = _state(us, ur, ishp, irt)
        norm = sw.normalizer(state[4], state[5])
        trace.append(sw.elbo(state, norm))
        change = (trace[-1] - trace[-2]) / abs(trace[-2])
        if change < -1e-8:
            _logger.warning("ELBO decreased at iteration %d (%.3g)", it, change)
        if abs(change) < cfg.tol:
            break
    _logger.debug("PF fit: %d iterations, ELBO %.6g", len(trace) - 1, trace[-1])
    return PFPosterior(us, ur, ishp, irt, cfg, trace)


@dataclass(frozen=True)
class SubstituteConfounder:
    """Posterior means of the PF factors; a_hat[u, i] = user_means[u] . item_means[i]."""

    user_means: np.ndarray
    item_means: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.user_means.shape[0], self.item_means.shape[0])

    def dense(self) -> np.ndarray:
        return self.user_means @ self.item_means.T

    def values(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nk->n", self.user_means[users], self.item_means[items])


def compute_substitute(post: PFPosterior) -> SubstituteConfounder:
    """Under the mean-field posterior, E[pi_u . lambda_i] = E[pi_u] . E[lambda_i]."""
    return SubstituteConfounder(post.user_means, post.item_means)


def substitute_value(sub: SubstituteConfounder, u: int, i: int) -> float:
    U, I = sub.shape
    if not (0 <= u < U and 0 <= i < I):
        raise IndexError(f"({u}, {i}) outside substitute of shape {sub.shape}")
    return float(sub.user_means[u] @ sub.item_means[i])


def _user_elbo(shape, rate, items, counts, elog_i, item_sum, cfg) -> float:
    elog_u = digamma(shape) - np.log(rate)
    lik = 0.0
    if len(items):
        s = elog_u[None, :] + elog_i[items]
        lik = float(counts @ logsumexp(s, axis=1)) - float(np.sum(gammaln(counts + 1)))
    lik -= float((shape / rate) @ item_sum)
    return lik + _gamma_kl_terms(shape, rate, cfg.c1, cfg.c2)


def fold_in_user(post: PFPosterior, items: np.ndarray, counts: np.ndarray,
                 cfg: PFConfig | None = None, return_trace: bool = False):
    """CAVI for one new user's Gamma factors with the item side frozen.

    Returns ``E[pi_u']`` (and the per-user ELBO trace if requested).
    """
    cfg = cfg or post.cfg
    items = np.asarray(items, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.float64)
    if len(counts) and (np.any(counts < 0) or np.any(counts != np.round(counts))):
        raise ValueError("exposures must be nonnegative integer counts")
    elog_i = digamma(post.item_shape) - np.log(post.item_rate)
    item_sum = post.item_means.sum(axis=0)
    rate = cfg.c2 + item_sum
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.c1 + cfg.init_jitter * rng.random(post.K)
    trace = [_user_elbo(shape, rate, items, counts, elog_i, item_sum, cfg)]
    for _ in range(cfg.max_iters):
        if len(items):
            elog_u = digamma(shape) - np.log(rate)
            s = elog_u[None, :] + elog_i[items]
            phi = np.exp(s - logsumexp(s, axis=1, keepdims=True))
            shape = cfg.c1 + counts @ phi
        else:
            shape = np.full(post.K, cfg.c1)
        trace.append(_user_elbo(shape, rate, items, counts, elog_i, item_sum, cfg))
        if abs(trace[-1] - trace[-2]) <= cfg.tol * abs(trace[-2]):
            break
    means = shape / rate
    return (means, trace) if return_trace else means


def heldout_loglik(post: PFPosterior, users: np.ndarray, items: np.ndarray,
                   counts: np.ndarray) -> float:
    """Poisson log-likelihood of the given cells (zeros included) under the
    posterior-mean rates."""
    rate = np.einsum("nk,nk->n", post.user_means[users], post.item_means[items])
    y = np.asarray(counts, dtype=np.float64)
    return float(np.sum(y * np.log(rate) - rate - gammaln(y + 1)))
