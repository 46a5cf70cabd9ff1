"""Command-line entry point: ``deconfrec {run,fit,evaluate,simulate,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import SparseInteractions, binarize, load_delimited
from .exposure import PFConfig, PFPosterior, compute_substitute, fit_pf
from .experiment import ExperimentConfig, Method, emit_outputs, run_experiment
from .ipw import fit_propensity, ipw_weights
from .metrics import evaluate
from .outcome import CORRECTIONS, VARIANTS, OutcomeConfig, OutcomeModel, fit_outcome, predict_pairs
from .simulation import SimConfig, generate, sweep, write_sweep

_logger = logging.getLogger("deconfrec")


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise SystemExit(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config_help() -> str:
    lines = ["config keys (key = value, lists comma-separated) and defaults:"]
    for f in fields(ExperimentConfig):
        d = f.default
        shown = ",".join(str(x) for x in d) if isinstance(d, tuple) else (
            repr(d) if isinstance(d, str) else str(d))
        lines.append(f"  {f.name} = {shown}")
    return "\n".join(lines)


def _read_ratings(args) -> SparseInteractions:
    cols = {"user": args.user_col, "item": args.item_col, "rating": args.rating_col}
    return load_delimited(args.ratings, args.delimiter, cols, skip_header=args.skip_header,
                          rating_scale=(args.rating_min, args.rating_max))


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratings", required=True, help="delimited user,item,rating file")
    p.add_argument("--delimiter", default="\t", help="field delimiter (default: tab)")
    p.add_argument("--user-col", type=int, default=0)
    p.add_argument("--item-col", type=int, default=1)
    p.add_argument("--rating-col", type=int, default=2)
    p.add_argument("--skip-header", action="store_true")
    p.add_argument("--rating-min", type=float, default=1.0)
    p.add_argument("--rating-max", type=float, default=5.0)


def cmd_run(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_mapping(overrides)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    table = run_experiment(cfg)
    emit_outputs(table, cfg.out_dir)
    for r in table.rows:
        print(f"{r.method:30s} ndcg={r.ndcg:.4f} recall@{cfg.recall_k}={r.recall_at_k:.4f}"
              f" mse={r.mse:.4f} per_item_mse={r.per_item_mse:.4f} [{r.status}]")
    return 0 if table.all_ok else 1


def cmd_fit(args) -> int:
    train = _read_ratings(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ocfg = OutcomeConfig(variant=args.variant, correction=args.correction, K=args.K,
                         prior_std_theta_beta=args.prior_std, max_epochs=args.max_epochs,
                         seed=args.seed)
    sub = weights = None
    if args.correction == "deconfounded":
        post = fit_pf(binarize(train), PFConfig(K=args.pf_K, seed=args.seed))
        post.save(out / "pf_posterior.csv")
        sub = compute_substitute(post)
    elif args.correction == "ipw":
        prop = fit_propensity(train)
        prop.save(out / "propensities.csv", train)
        weights = ipw_weights(prop, train.vals)
    model = fit_outcome(train, ocfg, sub=sub, ipw_weights=weights)
    model.save(out / "outcome_model.txt")
    with open(out / "index_map.tsv", "w") as fh:
        for side, ids in (("user", train.user_ids), ("item", train.item_ids)):
            for n, ext in enumerate(ids or ()):
                fh.write(f"{side}\t{n}\t{ext}\n")
    print(f"fitted {ocfg.label} on {train.nnz} ratings -> {out}")
    return 0


def _read_index_map(path: Path):
    users, items = {}, {}
    with open(path) as fh:
        for line in fh:
            side, n, ext = line.rstrip("\n").split("\t")
            (users if side == "user" else items)[int(ext)] = int(n)
    return users, items


def cmd_evaluate(args) -> int:
    model_dir = Path(args.model_dir)
    model = OutcomeModel.load(model_dir / "outcome_model.txt")
    users, items = _read_index_map(model_dir / "index_map.tsv")
    uids = sorted(users, key=users.get)
    iids = sorted(items, key=items.get)
    test = _read_ratings(args)
    # map test IDs into the training index space; drop unknown users/items
    rows, cols, vals = [], [], []
    for u, i, v in zip(test.rows, test.cols, test.vals):
        eu, ei = test.user_ids[u], test.item_ids[i]
        if eu in users and ei in items:
            rows.append(users[eu])
            cols.append(items[ei])
            vals.append(v)
    dropped = test.nnz - len(rows)
    if dropped:
        _logger.warning("dropped %d test ratings with unknown user or item", dropped)
    test = SparseInteractions(model.n_users, model.n_items, rows, cols, vals,
                              tuple(uids), tuple(iids))
    sub = None
    if model.cfg.has_confounder:
        sub = compute_substitute(PFPosterior.load(model_dir / "pf_posterior.csv"))
    pred = predict_pairs(model, sub, test.rows, test.cols)
    if args.clip:
        pred = np.clip(pred, args.rating_min, args.rating_max)
    rep = evaluate(test, pred, k=args.k)
    if args.out:
        rep.to_csv(args.out)
    for m, s, v in rep.rows:
        print(f"{m},{s},{v!r}")
    return 0


def cmd_simulate(args) -> int:
    cfg = SimConfig(U=args.users, I=args.items, K=args.K, gamma_theta=args.gamma_theta,
                    gamma_y=args.gamma_y, seed=args.seed)
    world = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obs = world.observed
    with open(out / "observed.tsv", "w") as fh:
        for u, i, v in zip(obs.rows.tolist(), obs.cols.tolist(), obs.vals.tolist()):
            fh.write(f"{u}\t{i}\t{int(v)}\n")
    np.savez_compressed(out / "world.npz", c=world.c, beta=world.beta, theta=world.theta,
                        exposures=world.exposures, potential=world.potential)
    print(f"simulated {cfg.U}x{cfg.I} world, {obs.nnz} observed ratings -> {out}")
    return 0


def cmd_sweep(args) -> int:
    values = [float(x) for x in args.values.split(",")]
    base = SimConfig(U=args.users, I=args.items, K=args.K, gamma_theta=args.gamma_theta,
                     gamma_y=args.gamma_y, seed=args.seed)
    grid = [replace(base, **{args.vary: v}) for v in values]
    methods = []
    for name in args.methods.split(","):
        variant, _, correction = name.partition(":")
        ocfg = OutcomeConfig(variant=variant, correction=correction, K=args.model_K,
                             prior_std_theta_beta=args.prior_std,
                             max_epochs=args.max_epochs, seed=args.seed)
        pf = PFConfig(K=args.pf_K, seed=args.seed) if correction == "deconfounded" else None
        methods.append(Method(ocfg, pf))
    records = sweep(grid, methods, runs=args.runs, split_seed=args.seed, n_jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(records, out / "sweep_runs.csv", out / "sweep_summary.csv")
    failed = sum(1 for r in records if r.value != r.value)
    print(f"{len(records)} records -> {out} ({failed} failed)")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deconfrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="full pipeline from a config file",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=_config_help())
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    r.add_argument("--out", help="output directory (overrides out_dir)")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit", help="fit one method on a ratings file")
    _add_data_args(f)
    f.add_argument("--variant", choices=VARIANTS, default="probabilistic")
    f.add_argument("--correction", choices=CORRECTIONS, default="deconfounded")
    f.add_argument("--K", type=int, default=10, help="outcome latent dimension")
    f.add_argument("--pf-K", type=int, default=10, help="PF latent dimension")
    f.add_argument("--prior-std", type=float, default=1.0)
    f.add_argument("--max-epochs", type=int, default=200)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="model directory")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="score a fitted model on a test file")
    _add_data_args(e)
    e.add_argument("--model-dir", required=True)
    e.add_argument("--k", type=int, default=5, help="recall cutoff")
    e.add_argument("--clip", action="store_true", help="clip predictions to the rating scale")
    e.add_argument("--out", help="metrics CSV (metric,scope,value)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="generate a confounded world")
    s.add_argument("--users", type=int, default=500)
    s.add_argument("--items", type=int, default=500)
    s.add_argument("--K", type=int, default=10)
    s.add_argument("--gamma-theta", type=float, default=0.5)
    s.add_argument("--gamma-y", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="confounding-strength sweep on simulated worlds")
    w.add_argument("--vary", choices=("gamma_theta", "gamma_y"), default="gamma_theta")
    w.add_argument("--values", default="0.0,0.25,0.5,0.75,1.0")
    w.add_argument("--gamma-theta", type=float, default=0.6)
    w.add_argument("--gamma-y", type=float, default=3.0)
    w.add_argument("--users", type=int, default=500)
    w.add_argument("--items", type=int, default=500)
    w.add_argument("--K", type=int, default=10, help="simulation latent dimension")
    w.add_argument("--model-K", type=int, default=10)
    w.add_argument("--pf-K", type=int, default=10)
    w.add_argument("--prior-std", type=float, default=0.1)
    w.add_argument("--max-epochs", type=int, default=200)
    w.add_argument("--methods", default="probabilistic:none,probabilistic:deconfounded")
    w.add_argument("--runs", type=int, default=10)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
