"""Experiment orchestration: ingest, split, grid search, fit, evaluate, emit."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetBundle, SparseInteractions, SplitSpec, attach_random_test,
                   binarize, load_delimited, split)
from .exposure import PFConfig, compute_substitute, fit_pf
from .ipw import fit_propensity, ipw_weights
from .metrics import RelevanceRule, evaluate, ndcg, ranked_lists
from .outcome import (CORRECTIONS, VARIANTS, OutcomeConfig, fit_outcome, predict_new_user,
                      predict_matrix, predict_pairs)
from .simulation import SimConfig, SimWorld, causal_error, generate

_logger = logging.getLogger(__name__)

DEFAULT_K_GRID = (1, 2, 5, 10, 20, 50, 100)
METHOD_ORDER = [f"{v}:{c}" for v in VARIANTS for c in CORRECTIONS]


@dataclass(frozen=True)
class Method:
    """One outcome model plus the settings of its correction."""

    outcome: OutcomeConfig
    pf: PFConfig | None = None
    ipw_alpha: float = 0.25
    ipw_target: float = 0.05
    oracle: bool = False

    @property
    def name(self) -> str:
        if self.oracle:
            return "oracle"
        return f"{self.outcome.variant}:{self.outcome.correction}"


def oracle_method() -> Method:
    return Method(OutcomeConfig(), oracle=True)


@dataclass
class FittedMethod:
    method: Method
    model: object
    sub: object = None
    pf: object = None

    def predict_pairs(self, users, items) -> np.ndarray:
        return predict_pairs(self.model, self.sub, np.asarray(users), np.asarray(items))


def fit_fitted(method: Method, train: SparseInteractions) -> FittedMethod:
    """Algorithm steps: PF on binarized exposures, substitute, outcome fit."""
    cfg = method.outcome
    sub = post = weights = None
    if cfg.correction == "deconfounded":
        post = fit_pf(binarize(train), method.pf or PFConfig(K=cfg.K, seed=cfg.seed))
        sub = compute_substitute(post)
    elif cfg.correction == "ipw":
        prop = fit_propensity(train, alpha=method.ipw_alpha, target_mean=method.ipw_target)
        weights = ipw_weights(prop, train.vals)
    model = fit_outcome(train, cfg, sub=sub, ipw_weights=weights)
    return FittedMethod(method, model, sub, post)


def fit_method(method: Method, train: SparseInteractions,
               world: SimWorld | None = None) -> np.ndarray:
    """Fit and return the dense potential-rating matrix."""
    if method.oracle:
        if world is None:
            raise ValueError("the oracle method needs a simulated world")
        return world.potential.astype(np.float64)
    fm = fit_fitted(method, train)
    return predict_matrix(fm.model, fm.sub)


# ---------------------------------------------------------------------------
# configuration


def _parse_list(text: str, conv):
    return tuple(conv(x.strip()) for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; every field can be set from a key=value file."""

    # data source: "simulation", "delimited" (regular split) or "random_test"
    source: str = "simulation"
    train_path: str = ""
    test_path: str = ""
    delimiter: str = "\t"
    user_col: int = 0
    item_col: int = 1
    rating_col: int = 2
    skip_header: bool = False
    rating_min: float = 1.0
    rating_max: float = 5.0
    # simulation
    sim_users: int = 300
    sim_items: int = 300
    sim_K: int = 10
    gamma_theta: float = 1.0
    gamma_y: float = 3.0
    sim_seed: int = 0
    # split
    split_mode: str = "train_val_80_20"
    split_seed: int = 0
    generalization: str = "weak"
    strong_holdout: float = 0.1
    foldin_fraction: float = 0.5
    # methods as variant:correction
    methods: tuple[str, ...] = ("probabilistic:none", "probabilistic:deconfounded")
    # grid
    grid_K: tuple[int, ...] = DEFAULT_K_GRID
    grid_prior_std: tuple[float, ...] = (1.0, 0.1)
    grid_pf_K: tuple[int, ...] = (10, 50)
    # fitting
    seed: int = 0
    max_epochs: int = 200
    pf_max_iters: int = 300
    sigma2: float = 1.0
    alpha_weight: float = 40.0
    prior_std_gamma: float = 1.0
    prior_std_intercept: float = 1.0
    ipw_alpha: float = 0.25
    ipw_target: float = 0.05
    # evaluation
    recall_k: int = 5
    relevance_threshold: float = 3.0
    clip_predictions: bool = False
    out_dir: str = "results"

    def __post_init__(self):
        if self.source not in ("simulation", "delimited", "random_test"):
            raise ValueError(f"unknown source {self.source!r}")
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            if m == "oracle":
                continue
            v, _, c = m.partition(":")
            if v not in VARIANTS or c not in CORRECTIONS:
                raise ValueError(f"bad method {m!r}; expected variant:correction")
        if not self.grid_K or not self.grid_prior_std or not self.grid_pf_K:
            raise ValueError("hyperparameter grids must be nonempty")
        if self.generalization not in ("weak", "strong"):
            raise ValueError("generalization must be 'weak' or 'strong'")

    @classmethod
    def from_mapping(cls, kv: dict) -> ExperimentConfig:
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            if isinstance(raw, str):
                if isinstance(default, tuple):
                    conv = type(default[0]) if default else str
                    val = _parse_list(raw, conv)
                elif isinstance(default, bool):
                    val = raw.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float):
                    val = float(raw)
                else:
                    val = raw.encode().decode("unicode_escape") if key == "delimiter" else raw
            else:
                val = tuple(raw) if isinstance(default, tuple) else raw
            out[key] = val
        return cls(**out)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
        kv = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        kv.update(overrides or {})
        return cls.from_mapping(kv)

    def to_mapping(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def sim_config(self) -> SimConfig:
        return SimConfig(U=self.sim_users, I=self.sim_items, K=self.sim_K,
                         gamma_theta=self.gamma_theta, gamma_y=self.gamma_y,
                         seed=self.sim_seed)

    def split_spec(self) -> SplitSpec:
        hold = self.strong_holdout if self.generalization == "strong" else 0.0
        mode = "provided_random_test" if self.source == "random_test" else self.split_mode
        return SplitSpec(mode, self.split_seed, hold, self.foldin_fraction)

    def method(self, name: str, K: int, prior_std: float, pf_K: int) -> Method:
        if name == "oracle":
            return oracle_method()
        variant, _, correction = name.partition(":")
        ocfg = OutcomeConfig(
            variant=variant, correction=correction, K=K, prior_std_theta_beta=prior_std,
            prior_std_gamma=self.prior_std_gamma, prior_std_intercept=self.prior_std_intercept,
            sigma2=self.sigma2, alpha_weight=self.alpha_weight,
            max_epochs=self.max_epochs, seed=self.seed,
        )
        pf = PFConfig(K=pf_K, max_iters=self.pf_max_iters, seed=self.seed)
        return Method(ocfg, pf if correction == "deconfounded" else None,
                      self.ipw_alpha, self.ipw_target)


# ---------------------------------------------------------------------------
# data


def load_bundle(cfg: ExperimentConfig) -> tuple[DatasetBundle, SimWorld | None]:
    scale = (cfg.rating_min, cfg.rating_max)
    cols = {"user": cfg.user_col, "item": cfg.item_col, "rating": cfg.rating_col}
    spec = cfg.split_spec()
    if cfg.source == "simulation":
        world = generate(cfg.sim_config())
        bundle = split(world.observed, spec, scale)
        # every pair outside train/validation is a randomized test cell
        taken = np.zeros(world.potential.shape, dtype=bool)
        for f in (bundle.train, bundle.validation):
            taken[f.rows, f.cols] = True
        if bundle.foldin is not None:
            taken[bundle.foldin.rows, bundle.foldin.cols] = True
        if len(bundle.heldout_users):
            keep = np.zeros(world.potential.shape[0], dtype=bool)
            keep[bundle.heldout_users] = True
            taken |= ~keep[:, None]
        r, c = np.nonzero(~taken)
        test = SparseInteractions(world.cfg.U, world.cfg.I, r, c,
                                  world.potential[r, c].astype(np.float64))
        bundle = DatasetBundle(bundle.train, bundle.validation, test, "randomized", scale,
                               bundle.foldin, bundle.heldout_users)
        return bundle, world
    train = load_delimited(cfg.train_path, cfg.delimiter, cols,
                           skip_header=cfg.skip_header, rating_scale=scale)
    if cfg.source == "random_test":
        test = load_delimited(cfg.test_path, cfg.delimiter, cols,
                              skip_header=cfg.skip_header, rating_scale=scale,
                              user_ids=train.user_ids, item_ids=train.item_ids)
        return attach_random_test(train, test, spec, scale), None
    return split(train, spec, scale), None


# ---------------------------------------------------------------------------
# results


RESULT_FIELDS = ["method", "variant", "correction", "ndcg", "recall_at_k", "mse", "mae",
                 "per_item_mse", "per_item_mae", "causal_mse", "causal_ndcg",
                 "selected", "seed", "status"]


@dataclass
class ResultRow:
    method: str
    variant: str
    correction: str
    ndcg: float = math.nan
    recall_at_k: float = math.nan
    mse: float = math.nan
    mae: float = math.nan
    per_item_mse: float = math.nan
    per_item_mae: float = math.nan
    causal_mse: float = math.nan
    causal_ndcg: float = math.nan
    selected: dict = field(default_factory=dict)
    seed: int = 0
    status: str = "ok"
    wall_time: float = field(default=0.0, compare=False)

    def as_csv(self) -> list[str]:
        out = []
        for f in RESULT_FIELDS:
            v = getattr(self, f)
            if isinstance(v, float):
                out.append(repr(float(v)))
            elif isinstance(v, dict):
                out.append(json.dumps(v, sort_keys=True))
            else:
                out.append(str(v))
        return out


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return a == b


@dataclass
class ResultsTable:
    rows: list[ResultRow]
    grid_scores: list[dict] = field(default_factory=list)
    config: ExperimentConfig | None = None
    predictions: dict = field(default_factory=dict, repr=False)
    test: SparseInteractions | None = field(default=None, repr=False)

    def row(self, method: str) -> ResultRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    @property
    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def same_rows(self, other: ResultsTable) -> bool:
        if len(self.rows) != len(other.rows):
            return False
        return all(_same(getattr(a, f), getattr(b, f))
                   for a, b in zip(self.rows, other.rows) for f in RESULT_FIELDS)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_FIELDS)
            for r in self.rows:
                w.writerow(r.as_csv())

    @classmethod
    def read_csv(cls, path: str | Path) -> ResultsTable:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                kw = {}
                for f in RESULT_FIELDS:
                    v = rec[f]
                    if f in ("method", "variant", "correction", "status"):
                        kw[f] = v
                    elif f == "selected":
                        kw[f] = json.loads(v)
                    elif f == "seed":
                        kw[f] = int(v)
                    else:
                        kw[f] = float(v)
                rows.append(ResultRow(**kw))
        return cls(rows)


# ---------------------------------------------------------------------------
# pipeline


def _validation_predictions(fm: FittedMethod, val: SparseInteractions) -> np.ndarray:
    return fm.predict_pairs(val.rows, val.cols)


def _strong_predictions(fm: FittedMethod, bundle: DatasetBundle,
                        kept_users: np.ndarray) -> np.ndarray:
    """Fold in each held-out user and score their test entries."""
    test = bundle.test
    pred = np.full(test.nnz, np.nan)
    foldin = bundle.foldin
    indptr = test.to_csr().indptr
    prop = None
    if fm.method.outcome.correction == "ipw":
        prop = fit_propensity(bundle.train, alpha=fm.method.ipw_alpha,
                              target_mean=fm.method.ipw_target)
    for u in np.unique(test.rows):
        lo, hi = indptr[u], indptr[u + 1]
        items, ratings = foldin.row(u) if foldin is not None else (np.zeros(0, int), np.zeros(0))
        weights = ipw_weights(prop, ratings) if prop is not None and len(items) else None
        res = predict_new_user(fm.model, fm.pf, items, ratings,
                               targets=test.cols[lo:hi], ipw_weights=weights)
        pred[lo:hi] = res.scores
    return pred


def _train_view(bundle: DatasetBundle, strong: bool):
    """Training matrix with held-out users removed (strong mode)."""
    if not strong or not len(bundle.heldout_users):
        return bundle.train, bundle.validation, np.arange(bundle.n_users)
    kept = np.setdiff1d(np.arange(bundle.n_users), bundle.heldout_users)
    return bundle.train.select_users(kept), bundle.validation.select_users(kept), kept


def run_experiment(cfg: ExperimentConfig, bundle: DatasetBundle | None = None,
                   world: SimWorld | None = None) -> ResultsTable:
    """Grid-search every method on validation NDCG, then evaluate on test."""
    if bundle is None:
        bundle, world = load_bundle(cfg)
    strong = cfg.generalization == "strong"
    train, val, kept = _train_view(bundle, strong)
    if strong:
        assert not np.isin(bundle.heldout_users, kept).any()
    test = bundle.test
    rows: list[ResultRow] = []
    grid_scores: list[dict] = []
    preds: dict[str, np.ndarray] = {}
    for name in cfg.methods:
        t0 = time.perf_counter()
        variant, _, correction = name.partition(":")
        row = ResultRow(name, variant or "oracle", correction or "none", seed=cfg.seed)
        try:
            if name == "oracle":
                if world is None:
                    raise ValueError("the oracle method needs a simulated world")
                best_fm = None
                pred = world.potential[test.rows, test.cols].astype(np.float64)
                full = world.potential.astype(np.float64)
            else:
                pf_grid = cfg.grid_pf_K if correction == "deconfounded" else (None,)
                best = None
                for K in cfg.grid_K:
                    for ps in cfg.grid_prior_std:
                        for pk in pf_grid:
                            m = cfg.method(name, K, ps, pk or 1)
                            fm = fit_fitted(m, train)
                            score = math.nan
                            if val.nnz:
                                vp = _validation_predictions(fm, val)
                                score = ndcg(ranked_lists(val, vp))
                            sel = {"K": K, "prior_std": ps}
                            if pk is not None:
                                sel["pf_K"] = pk
                            grid_scores.append({"method": name, **sel, "val_ndcg": score})
                            if best is None or (score > best[0]) or (
                                    math.isnan(best[0]) and not math.isnan(score)):
                                best = (score, sel, fm)
                _, row.selected, best_fm = best
                if strong:
                    pred = _strong_predictions(best_fm, bundle, kept)
                    full = None
                else:
                    pred = best_fm.predict_pairs(test.rows, test.cols)
                    full = predict_matrix(best_fm.model, best_fm.sub) if world is not None else None
            if cfg.clip_predictions:
                pred = np.clip(pred, cfg.rating_min, cfg.rating_max)
                if full is not None:
                    full = np.clip(full, cfg.rating_min, cfg.rating_max)
            if not np.all(np.isfinite(pred)):
                raise FloatingPointError("non-finite predictions")
            rep = evaluate(test, pred, k=cfg.recall_k,
                           rule=RelevanceRule(cfg.relevance_threshold))
            row.ndcg = rep.get("ndcg")
            row.recall_at_k = rep.get(f"recall@{cfg.recall_k}")
            row.mse = rep.get("mse", "pooled")
            row.mae = rep.get("mae", "pooled")
            row.per_item_mse = rep.get("mse", "item")
            row.per_item_mae = rep.get("mae", "item")
            if world is not None and full is not None:
                row.causal_mse = causal_error(world, full, "mse")
                row.causal_ndcg = causal_error(world, full, "ndcg")
            preds[name] = pred
        except Exception as exc:
            _logger.error("method %s failed: %s", name, exc)
            row.status = f"failed: {type(exc).__name__}"
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    return ResultsTable(rows, grid_scores, cfg, preds, test)


def emit_outputs(table: ResultsTable, out_dir: str | Path) -> list[Path]:
    """Write results.csv, grid.csv, per-method predictions and a manifest.

    Files are staged in a temporary directory next to ``out_dir`` and moved
    into place only after every write succeeds.
    """
    if not table.rows:
        raise ValueError("results table has no methods")
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir.parent))
    try:
        table.write_csv(stage / "results.csv")
        with open(stage / "grid.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "K", "prior_std", "pf_K", "val_ndcg"])
            for g in table.grid_scores:
                w.writerow([g["method"], g["K"], repr(float(g["prior_std"])), g.get("pf_K", ""),
                            repr(float(g["val_ndcg"]))])
        with open(stage / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "wall_time"])
            for r in table.rows:
                w.writerow([r.method, f"{r.wall_time:.3f}"])
        pred_dir = stage / "predictions"
        pred_dir.mkdir()
        cfg = table.config
        test = table.test
        for name, pred in table.predictions.items():
            fname = name.replace(":", "_") + ".csv"
            with open(pred_dir / fname, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user", "item", "prediction", "rating"])
                if test is None:
                    continue
                for u, i, p, y in zip(test.rows.tolist(), test.cols.tolist(),
                                      pred.tolist(), test.vals.tolist()):
                    w.writerow([u, i, repr(float(p)), repr(float(y))])
        manifest = {
            "config": cfg.to_mapping() if cfg else None,
            "config_hash": cfg.config_hash() if cfg else None,
            "seeds": {"seed": cfg.seed, "split_seed": cfg.split_seed,
                      "sim_seed": cfg.sim_seed} if cfg else None,
            "versions": {"deconfrec": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
        }
        try:
            import scipy
            manifest["versions"]["scipy"] = scipy.__version__
        except ImportError:  # pragma: no cover
            pass
        with open(stage / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        stage.rename(out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return sorted(p for p in out_dir.rglob("*") if p.is_file())
