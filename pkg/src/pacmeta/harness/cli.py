"""Command-line entry point: ``pacmeta {train,grid,crossval,bound-sweep,report}``."""

import argparse
import os
import sys

import numpy as np

from pacmeta import map_learners as ml
from pacmeta.harness import runner
from pacmeta.harness.config import ConfigError, load_config
from pacmeta.tasks import sample_meta_train


def cmd_train(args, config):
    raw = config.raw
    proto = raw["protocol"]
    point = dict(config.grid_points()[args.point])
    m_i = args.m_i if args.m_i is not None else proto["m_i"][0]
    data_set = args.set if args.set is not None else proto["meta_train_sets"][0]
    seed = args.seed if args.seed is not None else proto["init_seeds"][0]
    tc = runner.train_config(raw, config.algorithm, point, m_i)
    tc.data_seed = data_set
    env = config.environment(m_i)
    data = sample_meta_train(env, tc.n, data_set)
    params, trace = ml.meta_train(config.algorithm, env, tc, seed=seed, data=data)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    stem = f"{config.algorithm}_mi{m_i}_set{data_set}_seed{seed}"
    np.save(os.path.join(out, stem + ".npy"), params.p0)
    ml.write_trace_csv(os.path.join(out, stem + "_trace.csv"), trace)
    rmse = ml.target_rmse(config.algorithm, params.p0, runner.targets_for(raw), tc)
    runner.write_manifest(out, config, "train", [stem + ".npy", stem + "_trace.csv"],
                          {"run": dict(m_i=m_i, point=point, data_set=data_set, seed=seed),
                           "target_rmse_mean": float(rmse.mean())})
    print(f"{stem}: mean target RMSE {rmse.mean():.4f}")
    return 0


def cmd_grid(args, config):
    rows = runner.run_grid(config)
    out = config.output_dir
    runner.write_results(rows, out)
    failed = sum(r["status"] != "ok" for r in rows)
    runner.write_manifest(out, config, "grid", ["results.csv", "metrics.csv"],
                          {"failed_rows": failed})
    print(f"{len(rows)} rows written to {out} ({failed} failed)")
    return 0


def cmd_crossval(args, config):
    out = config.output_dir
    src = args.results or os.path.join(out, "results.csv")
    rows = [r for r in runner.read_csv(src)]
    proto = config.raw["protocol"]
    sel = runner.crossval_select(rows, proto["folds"], proto["target_tasks"])
    runner.write_csv(os.path.join(out, "selection.csv"), sel, runner.SELECTION_FIELDS)
    runner.write_manifest(out, config, "crossval", ["selection.csv"], {"source": src})
    for s in sel:
        print(f"{s['algorithm']} m_i={s['m_i']}: test {s['test_metric']:.4f} "
              f"+- {s['test_se']:.4f}")
    return 0


def cmd_bound_sweep(args, config):
    rows, thetas = runner.bound_sweep(config)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    runner.write_csv(os.path.join(out, "bounds.csv"), rows, runner.BOUND_FIELDS)
    np.savez(os.path.join(out, "bound_params.npz"), *thetas)
    summary = runner.summarize_bounds(rows)
    runner.write_csv(os.path.join(out, "bounds_summary.csv"), summary, runner.SUMMARY_FIELDS)
    runner.write_manifest(out, config, "bound-sweep",
                          ["bounds.csv", "bounds_summary.csv", "bound_params.npz"])
    for s in summary:
        print(f"{s['path']} m_i={s['m_i']} beta={s['beta']:g}: total {s['total']:.4f}")
    return 0


def cmd_report(args, _config=None):
    rows = runner.read_csv(args.input)
    if not rows:
        raise ConfigError(f"{args.input}: no rows")
    if "path" in rows[0]:
        tidy = [dict(path=s["path"], m_i=s["m_i"], total=s["total"], beta=s["beta"],
                     se=max(s["seed_se"], s["mc_se"]))
                for s in runner.summarize_bounds(rows)]
        fields = ("path", "m_i", "total", "beta", "se")
    elif "val_metric" in rows[0] and "fold" in rows[0]:
        tidy = runner.crossval_select(rows, args.folds, args.target_tasks)
        fields = ("algorithm", "m_i", "test_metric", "test_se") + runner.POINT_KEYS
    elif "test_metric" in rows[0]:
        tidy, fields = rows, ("algorithm", "m_i", "test_metric", "test_se")
    else:
        raise ConfigError(f"{args.input}: unrecognized table")
    runner.write_csv(args.output, tidy, fields)
    print(f"wrote {len(tidy)} rows to {args.output}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pacmeta", description="PAC-Bayesian meta-learning runs")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--paper-scale", action="store_true",
                        help="8 meta-train sets x 5 seeds instead of the desk-scale 2 x 3")
        sp.add_argument("--output-dir", help="override experiment.output_dir")
        return sp

    t = with_config(sub.add_parser("train", help="train one model"))
    t.add_argument("--m-i", type=int)
    t.add_argument("--set", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--point", type=int, default=0, help="index into the grid points")
    with_config(sub.add_parser("grid", help="grid search over all points, sets and seeds"))
    c = with_config(sub.add_parser("crossval", help="select hyperparameters per m_i"))
    c.add_argument("--results", help="results CSV (default: <output_dir>/results.csv)")
    with_config(sub.add_parser("bound-sweep", help="bound terms per path and m_i"))
    r = sub.add_parser("report", help="tidy plot-ready CSV from a results or bounds table")
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--folds", type=int, default=4)
    r.add_argument("--target-tasks", type=int, default=20)
    return p


COMMANDS = {"train": cmd_train, "grid": cmd_grid, "crossval": cmd_crossval,
            "bound-sweep": cmd_bound_sweep, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = None
        if getattr(args, "config", None):
            config = load_config(args.config, args.paper_scale)
            if args.output_dir:
                config.raw["experiment"]["output_dir"] = args.output_dir
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"pacmeta: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, runner.IncompleteGridError) as exc:
        print(f"pacmeta: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
