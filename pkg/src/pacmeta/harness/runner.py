"""Grid search, cross-validated selection and bound sweeps over ``m_i``.

Work units are ``(m_i, grid point, meta-train set, init seed)``.  They run in
a process pool whose size comes from ``PACMETA_WORKERS`` (default 1) and
their rows are collected in submission order, so result files do not depend
on the number of workers.
"""

import csv
import json
import math
import os
import platform
import sys
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

import pacmeta
from pacmeta import map_learners as ml
from pacmeta import objectives as obj
from pacmeta.harness.config import MATCHED, ExperimentConfig
from pacmeta.tasks import (TOY_CLASSIFICATION, rng_for, sample_meta_train,
                           sample_target_tasks, subsample)

RESULT_FIELDS = ("algorithm", "m_i", "beta_ratio", "alpha_ratio", "beta", "alpha",
                 "inner_lr", "inner_steps", "fold", "data_set", "seed", "val_metric",
                 "test_metric", "w_term", "kl_term", "conf_term", "delta_lambda",
                 "bound_total", "status", "wall_time")
METRIC_FIELDS = RESULT_FIELDS[:-1]
POINT_KEYS = ("beta_ratio", "alpha_ratio", "inner_lr", "inner_steps")

BOUND_FIELDS = obj.BoundReport.CSV_FIELDS + ("data_set", "delta_lambda_se", "beta_ratio")

WORKERS_ENV = "PACMETA_WORKERS"


class IncompleteGridError(ValueError):
    """Cross-validation input lacks folds or seeds for some grid point."""


def n_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, jobs):
    workers = n_workers()
    if workers == 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f)) for f in fields])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# one training run
# ---------------------------------------------------------------------------

def resolve_temperatures(point, m_i, m_prime):
    """Absolute ``(beta, alpha)`` for a grid point at observed size ``m_i``.

    ``alpha_ratio = "matched"`` sets ``alpha = beta * m_prime / m_i`` so that
    the inner set sees the same per-point temperature as the full set.
    """
    br = point.get("beta_ratio")
    beta = None if br is None else float(br) * m_i
    ar = point.get("alpha_ratio")
    if ar is None or beta is None:
        return beta, None
    ratio = m_prime / m_i if ar == MATCHED else float(ar)
    return beta, ratio * beta


def train_config(raw, algorithm, point, m_i):
    proto, opt, prior, inner = raw["protocol"], raw["optimizer"], raw["prior"], raw["inner"]
    beta, alpha = resolve_temperatures(point, m_i, proto["m_prime"])
    return ml.TrainConfig(
        n=proto["n"], iterations=opt["iterations"], batch_size=opt["batch_size"],
        lr=opt["lr"], beta=beta, alpha=alpha, lam=prior["lam"],
        sigma0_sq=prior["sigma0_sq"], sigma_sq=prior["sigma_sq"],
        m_prime=proto["m_prime"] if algorithm in ("maml", "fomaml", "pacmaml") else None,
        subsample_mode=proto["subsample_mode"], resample_inner=proto["resample_inner"],
        inner_steps=int(point.get("inner_steps", 1)), inner_lr=float(point.get("inner_lr", 0.01)),
        inner=ml.InnerOptConfig(method=inner["method"], steps=inner["steps"], lr=inner["lr"],
                                tol=inner["tol"], history=inner["history"]))


def fold_assignment(raw):
    proto = raw["protocol"]
    perm = rng_for(proto["target_seed"], 61).permutation(proto["target_tasks"])
    size = proto["target_tasks"] // proto["folds"]
    return [np.sort(perm[f * size:(f + 1) * size]) for f in range(proto["folds"])]


def targets_for(raw):
    cfg = ExperimentConfig(raw)
    proto = raw["protocol"]
    return sample_target_tasks(cfg.environment(), proto["target_tasks"],
                               proto["target_seed"], proto["n_test"])


def bound_for(raw, algorithm, theta0, data, tc, m_i, seed):
    proto, prior = raw["protocol"], raw["prior"]
    cfg = ExperimentConfig(raw)
    env_obs = cfg.environment(m_i)
    bc = obj.BoundConfig(n=proto["n"], beta=tc.beta, alpha=tc.alpha, lam=prior["lam"],
                         delta=prior["delta"], sigma0_sq=prior["sigma0_sq"],
                         sigma_sq=prior["sigma_sq"], kl_normalizer=prior["kl_normalizer"])
    if algorithm == obj.PACOH:
        sets = [ds for _, ds in data]
    else:
        sets = [subsample(ds, proto["m_prime"], proto["subsample_mode"], seed, task, env_obs, i)
                for i, (task, ds) in enumerate(data)]
    return obj.assemble_bound(algorithm, theta0, sets, bc, env_target=cfg.environment(),
                              env_obs=env_obs, n_mc=raw["bound"]["n_mc"], seed=seed)


def run_point(raw, m_i, point, data_set, seed):
    """Train and evaluate one model; returns one row per cross-validation fold."""
    algorithm = raw["experiment"]["algorithm"]
    base = dict(algorithm=algorithm, m_i=m_i, data_set=data_set, seed=seed,
                beta_ratio=point.get("beta_ratio"), alpha_ratio=point.get("alpha_ratio"),
                inner_lr=point.get("inner_lr"), inner_steps=point.get("inner_steps"))
    folds = fold_assignment(raw)
    t0 = time.perf_counter()
    try:
        if raw["environment"]["family"] == TOY_CLASSIFICATION:
            raise ValueError("grid runs support the sinusoid family only")
        tc = train_config(raw, algorithm, point, m_i)
        tc.data_seed = data_set
        base.update(beta=tc.beta, alpha=tc.alpha)
        env = ExperimentConfig(raw).environment(m_i)
        data = sample_meta_train(env, tc.n, data_set)
        params, _ = ml.meta_train(algorithm, env, tc, seed=seed, data=data)
        per_task = ml.target_rmse(algorithm, params.p0, targets_for(raw), tc)
        if not np.all(np.isfinite(per_task)):
            raise FloatingPointError("non-finite target metric")
        extra = {}
        if raw["bound"]["enabled"] and algorithm in (obj.PACOH, obj.PACMAML):
            rep = bound_for(raw, algorithm, params.p0, data, tc, m_i, seed)
            extra = dict(w_term=rep.w_term, kl_term=rep.kl_term, conf_term=rep.conf_term,
                         delta_lambda=rep.delta_lambda, bound_total=rep.total)
        status = "ok"
    except Exception as exc:  # recorded per row; the grid continues
        per_task, extra = None, {}
        status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    wall = time.perf_counter() - t0
    rows = []
    for f, idx in enumerate(folds):
        row = dict(base, fold=f, status=status, wall_time=wall, **extra)
        if per_task is not None:
            rest = np.setdiff1d(np.arange(len(per_task)), idx)
            row["val_metric"] = float(per_task[idx].mean())
            row["test_metric"] = float(per_task[rest].mean())
        else:
            row["val_metric"] = row["test_metric"] = math.nan
        rows.append(row)
    return rows


def grid_jobs(config):
    raw = config.raw
    proto = raw["protocol"]
    jobs = []
    for m_i in proto["m_i"]:
        for point in config.grid_points():
            for s in proto["meta_train_sets"]:
                for seed in proto["init_seeds"]:
                    jobs.append((raw, m_i, point, s, seed))
    return jobs


def run_grid(config):
    """Train and evaluate every (m_i, grid point, set, seed); rows in grid order."""
    if not isinstance(config, ExperimentConfig):
        raise TypeError("run_grid expects an ExperimentConfig")
    out = []
    for rows in _map(run_point, grid_jobs(config)):
        out.extend(rows)
    return out


def write_results(rows, out_dir):
    """``results.csv`` (with wall time) and ``metrics.csv`` (deterministic columns)."""
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "results.csv"), rows, RESULT_FIELDS)
    write_csv(os.path.join(out_dir, "metrics.csv"), rows, METRIC_FIELDS)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def _num(v):
    if v is None or v == "":
        return None
    if isinstance(v, str):
        if v == MATCHED:
            return v
        try:
            f = float(v)
        except ValueError:
            return v
        return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f
    return v


def _sort_key(v):
    # ties: numeric values ascending, the matched rule after all numbers
    if v is None:
        return (0, 0.0)
    if v == MATCHED:
        return (2, 0.0)
    return (1, float(v))


def _point_order(scored_point, sign):
    val, point = scored_point
    return (sign * val, _sort_key(point[1]), _sort_key(point[0]), _sort_key(point[2]),
            _sort_key(point[3]))


def crossval_select(results, folds=4, target_tasks=20, maximize=False):
    """Cross-validated grid selection per ``(algorithm, m_i)``.

    For each fold the grid point with the best validation metric on that
    fold (averaged over meta-train sets and seeds) is selected and scored on
    the remaining target tasks.  Ties go to the smaller ``alpha_ratio``, then
    the smaller ``beta_ratio``.  The reported test metric averages these
    held-out scores over folds; its standard error is taken over models
    (set, seed) after fold averaging.  The point columns show the point
    chosen by most folds and ``selections`` lists the choice per fold.
    Missing folds raise :class:`IncompleteGridError`.
    """
    if target_tasks % folds:
        raise ValueError("folds must divide target_tasks")
    groups = OrderedDict()
    for r in results:
        key = (r["algorithm"], int(_num(r["m_i"])))
        point = tuple(_num(r.get(k)) for k in POINT_KEYS)
        model = (int(_num(r["data_set"])), int(_num(r["seed"])))
        groups.setdefault(key, OrderedDict()).setdefault(point, {}).setdefault(model, {})[
            int(_num(r["fold"]))] = (float(r["val_metric"]), float(r["test_metric"]))
    if not groups:
        raise IncompleteGridError("no results to select from")
    sign = -1.0 if maximize else 1.0
    out = []
    for (alg, m_i), points in groups.items():
        models = None
        tables = {}
        for point, per_model in points.items():
            for model, fd in per_model.items():
                missing = sorted(set(range(folds)) - set(fd))
                if missing:
                    raise IncompleteGridError(
                        f"{alg} m_i={m_i} point={point} model={model}: missing folds {missing}")
            if models is None:
                models = sorted(per_model)
            elif sorted(per_model) != models:
                raise IncompleteGridError(f"{alg} m_i={m_i} point={point}: model set differs")
            # (model, fold, [val, test])
            table = np.array([[per_model[m][f] for f in range(folds)] for m in models])
            if np.all(np.isfinite(table)):
                tables[point] = table
        if not tables:
            raise IncompleteGridError(f"{alg} m_i={m_i}: every grid point failed")
        chosen = [min(((float(t[:, f, 0].mean()), p) for p, t in tables.items()),
                      key=lambda sp: _point_order(sp, sign))[1] for f in range(folds)]
        val = np.mean([tables[p][:, f, 0].mean() for f, p in enumerate(chosen)])
        per_model = np.mean([tables[p][:, f, 1] for f, p in enumerate(chosen)], axis=0)
        n = len(per_model)
        se = per_model.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        counts = OrderedDict()
        for p in chosen:
            counts[p] = counts.get(p, 0) + 1
        modal = max(counts, key=counts.get)
        entry = dict(algorithm=alg, m_i=m_i, val_metric=float(val),
                     test_metric=float(per_model.mean()), test_se=float(se), n_models=n,
                     selections=";".join("/".join(_fmt(v) for v in p) for p in chosen))
        entry.update(dict(zip(POINT_KEYS, modal)))
        out.append(entry)
    return out


SELECTION_FIELDS = ("algorithm", "m_i") + POINT_KEYS + ("val_metric", "test_metric", "test_se",
                                                        "n_models", "selections")


# ---------------------------------------------------------------------------
# bound sweep
# ---------------------------------------------------------------------------

def _bound_job(raw, path, m_i, beta_ratio, data_set, seed):
    alpha_ratio = raw["grid"]["alpha_ratio"][0] if path == obj.PACMAML else None
    point = dict(beta_ratio=beta_ratio, alpha_ratio=alpha_ratio)
    tc = train_config(raw, path, point, m_i)
    tc.m_prime = raw["protocol"]["m_prime"] if path == obj.PACMAML else None
    tc.data_seed = data_set
    env = ExperimentConfig(raw).environment(m_i)
    data = sample_meta_train(env, tc.n, data_set)
    params, _ = ml.meta_train(path, env, tc, seed=seed, data=data)
    rep = bound_for(raw, path, params.p0, data, tc, m_i, seed)
    row = rep.row()
    row.update(data_set=data_set, delta_lambda_se=rep.delta_lambda_se, beta_ratio=beta_ratio)
    return row, params.p0


def bound_sweep(config, m_i=None, paths=None, beta_ratios=None):
    """Train one model per (path, m_i, beta/m_i, set, seed) and assemble its bound.

    PACMAML uses the first ``grid.alpha_ratio`` entry.  Returns
    ``(rows, thetas)`` where ``thetas`` maps each row index to its trained
    meta-parameters.
    """
    raw = config.raw
    proto = raw["protocol"]
    m_i = proto["m_i"] if m_i is None else m_i
    paths = raw["bound"]["paths"] if paths is None else paths
    beta_ratios = raw["grid"]["beta_ratio"] if beta_ratios is None else beta_ratios
    for p in paths:
        if p not in (obj.PACOH, obj.PACMAML):
            raise ValueError(f"unknown bound path {p!r}")
    if obj.PACMAML in paths and proto["m_prime"] is None:
        raise ValueError("the pacmaml path needs protocol.m_prime")
    jobs = [(raw, p, mi, br, s, seed) for p in paths for br in beta_ratios for mi in m_i
            for s in proto["meta_train_sets"] for seed in proto["init_seeds"]]
    results = _map(_bound_job, jobs)
    return [r for r, _ in results], [t for _, t in results]


def summarize_bounds(rows):
    """Mean total per (path, m_i, beta) with seed and Monte-Carlo standard errors."""
    groups = OrderedDict()
    for r in rows:
        key = (r["path"], int(_num(r["m_i"])), float(r["beta"]))
        groups.setdefault(key, []).append(r)
    out = []
    for (path, m_i, beta), rs in groups.items():
        tot = np.array([float(r["total"]) for r in rs])
        dl_se = np.array([float(r.get("delta_lambda_se") or 0.0) for r in rs])
        n = len(tot)
        out.append(dict(path=path, m_i=m_i, beta=beta, total=float(tot.mean()),
                        seed_se=float(tot.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                        mc_se=float(math.sqrt(np.sum(dl_se ** 2)) / n), n=n))
    return out


SUMMARY_FIELDS = ("path", "m_i", "beta", "total", "seed_se", "mc_se", "n")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def versions():
    import numba
    import scipy
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__,
            "pacmeta": pacmeta.__version__}


def write_manifest(out_dir, config, command, outputs, extra=None):
    """JSON manifest: config hash, full resolved config, seeds, versions, outputs."""
    proto = config.raw["protocol"]
    man = {
        "command": command,
        "argv": sys.argv,
        "config_hash": config.digest(),
        "config": config.to_json(),
        "seeds": {"meta_train_sets": proto["meta_train_sets"],
                  "init_seeds": proto["init_seeds"], "target_seed": proto["target_seed"]},
        "grid_points": config.grid_points(),
        "versions": versions(),
        "outputs": outputs,
    }
    if extra:
        man.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=repr)
    return path
