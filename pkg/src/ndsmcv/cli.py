"""Command-line entry point: ``ndsmcv {fit-gmm,train,sample,eval,compare}``.

All commands take ``--config`` (see :mod:`ndsmcv.config`) plus optional
``--seed`` and ``--out`` overrides and work inside ``<out>/<run-name>/``.
Exit status is 0 on success, 1 when fitting, training or sampling fails at
run time, and 2 for usage, config or input-file errors.
"""

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from ._validation import (
    CheckpointParseError,
    DegenerateFitError,
    InvalidInputError,
    SimulationDivergedError,
    TrainingDivergedError,
)
from .config import COMPARE_METHODS, load_run_config, validate_run_config
from .datasets import (
    eval_samples,
    load_squares_spec,
    make_squares_dataset,
    read_samples_csv,
    squares_asymmetric,
    write_report_csv,
    write_samples_csv,
)
from .dynamics import GMLangevin
from .gmm import fit_gmm_em, load_gmm, save_gmm
from .io import atomic_write_text, write_csv
from .nets import load_checkpoint
from .plots import write_balance_svg, write_scatter_svg
from .training import generate_samples, train_dsm, train_ndsm_cv, write_log_csv, write_variance_csv

RUNTIME_ERRORS = (DegenerateFitError, TrainingDivergedError, SimulationDivergedError)
INPUT_ERRORS = (InvalidInputError, CheckpointParseError, OSError)

SUMMARY_HEADER = [
    "method",
    "final_loss_step",
    "n_seeds",
    "median_std_fractions",
    "median_support_fraction",
    "mean_support_fraction",
    "se_support_fraction",
]


def run_dir(cfg):
    return os.path.join(cfg.out_dir, cfg.name)


def _path(cfg, name):
    return os.path.join(run_dir(cfg), name)


def _sub_seed(seed, tag):
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def load_spec(cfg):
    if cfg.spec == "default":
        return squares_asymmetric()
    if cfg.spec == "thin":
        return squares_asymmetric(thin=True)
    return load_squares_spec(cfg.spec)


def training_data(cfg):
    if cfg.samples:
        return read_samples_csv(cfg.samples)
    return make_squares_dataset(load_spec(cfg), cfg.n_train, _sub_seed(cfg.seed, 1))


def write_run_manifest(cfg, command):
    os.makedirs(run_dir(cfg), exist_ok=True)
    header = f"; ndsmcv {__version__} manifest, written by '{command}'\n; re-run with: ndsmcv {command} --config <this file>\n\n"
    atomic_write_text(_path(cfg, "manifest.txt"), header + cfg.to_text())


def _fit_gmm(cfg, data):
    return fit_gmm_em(
        data[: cfg.gmm_subset],
        cfg.n_components,
        cov_mode=cfg.cov_mode,
        tol=cfg.gmm_tol,
        max_iter=cfg.gmm_max_iter,
        n_init=cfg.gmm_n_init,
        rng_seed=_sub_seed(cfg.seed, 2),
    )


def cmd_fit_gmm(cfg, log=print):
    data = training_data(cfg)
    gmm = _fit_gmm(cfg, data)
    os.makedirs(run_dir(cfg), exist_ok=True)
    save_gmm(_path(cfg, "gmm.txt"), gmm)
    write_run_manifest(cfg, "fit-gmm")
    ll = float(np.mean(gmm.log_density(data[: cfg.gmm_subset])))
    log(f"fit-gmm: K={gmm.n_components} mean log-likelihood {ll:.6f} -> {_path(cfg, 'gmm.txt')}")
    return gmm


def _gmm_for(cfg, data):
    path = _path(cfg, "gmm.txt")
    if os.path.exists(path):
        return load_gmm(path)
    gmm = _fit_gmm(cfg, data)
    os.makedirs(run_dir(cfg), exist_ok=True)
    save_gmm(path, gmm)
    return gmm


def cmd_train(cfg, log=print):
    data = training_data(cfg)
    tcfg = cfg.train_config()
    out = run_dir(cfg)
    os.makedirs(out, exist_ok=True)
    for stale in ("eps.ckpt", "variance.csv"):
        if os.path.exists(_path(cfg, stale)):
            os.remove(_path(cfg, stale))
    if tcfg.method == "dsm":
        res = train_dsm(tcfg, data, out_dir=out)
    else:
        res = train_ndsm_cv(tcfg, data, _gmm_for(cfg, data), out_dir=out)
    write_log_csv(_path(cfg, "log.csv"), res.log)
    if tcfg.method != "dsm" and tcfg.diag_interval:
        write_variance_csv(_path(cfg, "variance.csv"), res.log, tcfg)
    write_run_manifest(cfg, "train")
    last = res.log[-1].loss if res.log else float("nan")
    log(f"train: {tcfg.method} {tcfg.n_iterations} iterations, final loss {last:.6g} -> {out}")
    return res


def cmd_sample(cfg, log=print):
    tcfg = cfg.train_config()
    score = load_checkpoint(_path(cfg, "score.ckpt"))
    if tcfg.method == "dsm":
        drift, T = tcfg.vp(), None
    else:
        drift, T = GMLangevin(load_gmm(_path(cfg, "gmm.txt"))), tcfg.grid().T
    X, diverged = generate_samples(
        score, drift, cfg.n_samples, cfg.n_steps, _sub_seed(cfg.seed, 3), T=T, on_diverge=cfg.on_diverge, return_diverged=True
    )
    write_samples_csv(_path(cfg, "samples.csv"), X)
    write_run_manifest(cfg, "sample")
    log(f"sample: {X.shape[0]} samples ({int(diverged.sum())} diverged), {cfg.n_steps} steps -> {_path(cfg, 'samples.csv')}")
    return X


def cmd_eval(cfg, log=print):
    spec = load_spec(cfg)
    X = read_samples_csv(_path(cfg, "samples.csv"))
    report = eval_samples(X, spec, cfg.tau)
    write_report_csv(_path(cfg, "report.csv"), report)
    write_scatter_svg(_path(cfg, "scatter.svg"), X, spec, cfg.tau, title=cfg.name)
    write_balance_svg(_path(cfg, "balance.svg"), report, spec, title=cfg.name)
    write_run_manifest(cfg, "eval")
    log(f"eval: support_fraction {report.support_fraction:.4f} std_fractions {report.std_fractions:.5f}")
    return report


# ---------------------------------------------------------------------------
# compare


def compare_seeds(cfg):
    return [_sub_seed(cfg.seed, 100 + r) for r in range(cfg.seeds)]


def compare_runs(cfg):
    """``[(label, final_loss_step or None, train overrides)]`` for one seed."""
    steps = cfg.final_loss_steps or [cfg.train.final_loss_step]
    runs = []
    for method in cfg.methods:
        over = dict(COMPARE_METHODS[method])
        if over["method"] == "dsm":
            runs.append((method, None, over))
            continue
        for dt in steps:
            label = method if not cfg.final_loss_steps else f"{method}_dtN{dt!r}"
            runs.append((label, dt, dict(over, final_loss_step=dt)))
    return runs


def _seed_job(cfg, r, seed):
    """Run every configured method for one seed; returns per-run report rows."""
    seed_dir = os.path.join(run_dir(cfg), f"seed_{r}")
    base = dataclasses.replace(cfg, seed=seed, out_dir=seed_dir)
    data = training_data(base)
    gmm = None
    rows = []
    for label, dt, over in compare_runs(cfg):
        sub = dataclasses.replace(base, name=label, train=dataclasses.replace(cfg.train, **over))
        os.makedirs(run_dir(sub), exist_ok=True)
        if over["method"] != "dsm":
            gmm = gmm if gmm is not None else _fit_gmm(base, data)
            save_gmm(_path(sub, "gmm.txt"), gmm)
        quiet = lambda *_: None  # noqa: E731
        cmd_train(sub, quiet)
        cmd_sample(sub, quiet)
        report = cmd_eval(sub, quiet)
        rows.append((r, seed, label, dt, report.std_fractions, report.support_fraction))
    return rows


def summarize(rows, cfg):
    """Median over seeds per ``(label, final_loss_step)``; keeps run order."""
    out = []
    for label, dt, _ in compare_runs(cfg):
        mine = [row for row in rows if row[2] == label]
        std = np.array([row[4] for row in mine])
        sf = np.array([row[5] for row in mine])
        se = float(np.std(sf, ddof=1) / np.sqrt(sf.size)) if sf.size > 1 else None
        out.append((label, dt, sf.size, float(np.median(std)), float(np.median(sf)), float(sf.mean()), se))
    return out


def cmd_compare(cfg, log=print, jobs=1):
    os.makedirs(run_dir(cfg), exist_ok=True)
    write_run_manifest(cfg, "compare")
    seeds = compare_seeds(cfg)
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_seed_job, [cfg] * len(seeds), range(len(seeds)), seeds):
                rows.extend(part)
    else:
        for r, seed in enumerate(seeds):
            part = _seed_job(cfg, r, seed)
            rows.extend(part)
            log(f"compare: seed {r} done ({len(part)} runs)")
    write_csv(
        _path(cfg, "runs.csv"),
        ["seed_index", "seed", "method", "final_loss_step", "std_fractions", "support_fraction"],
        rows,
    )
    summary = summarize(rows, cfg)
    write_csv(_path(cfg, "summary.csv"), SUMMARY_HEADER, summary)
    for label, _, n, med_std, med_sf, _, _ in summary:
        log(f"compare: {label:<24} seeds={n} median std_fractions {med_std:.5f} median support_fraction {med_sf:.4f}")
    return summary


# ---------------------------------------------------------------------------


COMMANDS = {
    "fit-gmm": cmd_fit_gmm,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ndsmcv", description="GM Langevin score models trained with NDSM-CV.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI run config (a saved manifest.txt works too)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override [run] out_dir")
        if name == "compare":
            p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel worker processes")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        validate_run_config(cfg)
        if args.command == "compare":
            if args.jobs < 1:
                raise InvalidInputError("--jobs must be >= 1")
            cmd_compare(cfg, jobs=args.jobs)
        else:
            COMMANDS[args.command](cfg)
    except RUNTIME_ERRORS as exc:
        print(f"ndsmcv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as exc:
        msg = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.filename else str(exc)
        print(f"ndsmcv {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
