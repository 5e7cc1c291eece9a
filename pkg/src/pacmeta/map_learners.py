"""Dirac-MAP meta-learners: PacB objective, proximal inner solver, meta-gradients.

Every function works against a generic loss object ``loss(v, x, y)`` (see
:mod:`pacmeta.models`) that maps parameters ``(..., k)`` and data
``(..., m, d)``, ``(..., m)`` to per-task mean losses.  Task collections may
be given as a list of :class:`~pacmeta.tasks.Dataset` (grouped by size
internally) or as already-stacked ``(x, y)`` arrays with a leading task axis.
"""

import csv
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from pacmeta import gp
from pacmeta import objectives as obj
from pacmeta.autodiff import tensor as T
from pacmeta.models import RegressionMlp, SoftmaxClassifier
from pacmeta.tasks import (TOY_CLASSIFICATION, Dataset, SubsamplePair, rng_for,
                           sample_meta_train, subsample)

OPTIMAL = "optimal"
K_STEP_GD = "k-step-gd"
TIED = "tied-to-p0"

MAX_UNROLL = 10

ALGORITHMS = ("pretrain", "reptile", "maml", "fomaml", "pacoh", "pacmaml")


class InnerNotConverged(RuntimeWarning):
    """The proximal inner solve stopped above its stationarity tolerance."""


class TrainingDiverged(FloatingPointError):
    """Meta-training produced a non-finite objective; ``trace`` holds the log so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class MetaParams:
    p0: np.ndarray
    algorithm: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.p0)):
            raise ValueError("meta-parameters must be finite")


@dataclass(frozen=True)
class InnerOptConfig:
    """Inner solver settings.

    ``quasi-newton`` runs L-BFGS with ``history`` correction pairs for at most
    ``steps`` iterations; ``gradient-descent`` takes ``steps`` fixed-size
    steps of size ``lr``.  Both stop early once the proximal residual norm
    drops to ``tol``.
    """

    method: str = "quasi-newton"
    steps: int = 500
    lr: float = 5e-3
    tol: float = 1e-6
    history: int = 10

    def __post_init__(self):
        if self.method not in ("gradient-descent", "quasi-newton"):
            raise ValueError(f"unknown inner method {self.method!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.method == "gradient-descent" and not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class InnerSolution:
    """Inner parameters ``q`` (one row per task) with solver provenance."""

    q: np.ndarray
    provenance: str
    steps: int = 0
    lr: float = 0.0
    residual: np.ndarray = None
    converged: bool = True


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _xy(d):
    return (d.x, d.y) if isinstance(d, Dataset) else d


def _groups(datasets):
    """``[(x, y, index array)]`` with equal-size tasks stacked together."""
    if isinstance(datasets, Dataset):
        return [(datasets.x[None], datasets.y[None], np.array([0]))]
    if isinstance(datasets, tuple):
        x, y = datasets
        return [(np.asarray(x), np.asarray(y), np.arange(np.shape(y)[0]))]
    by_size = {}
    for i, d in enumerate(datasets):
        by_size.setdefault(len(d), []).append(i)
    out = []
    for idx in by_size.values():
        out.append((np.stack([datasets[i].x for i in idx]),
                    np.stack([datasets[i].y for i in idx]), np.array(idx)))
    return out


def _n_tasks(groups):
    return sum(len(g[2]) for g in groups)


def _pair_groups(pairs):
    """``[(full_xy, inner_xy, index array)]`` for subsample pairs."""
    if isinstance(pairs, tuple):
        (xf, yf), (xs, ys) = (_xy(pairs[0]), _xy(pairs[1]))
        if np.ndim(yf) == 1:
            xf, yf, xs, ys = xf[None], yf[None], xs[None], ys[None]
        return [((xf, yf), (xs, ys), np.arange(np.shape(yf)[0]))]
    by_size = {}
    for i, p in enumerate(pairs):
        full, inner = (p.full, p.inner) if isinstance(p, SubsamplePair) else p
        by_size.setdefault((len(full), len(inner)), []).append(i)
    out = []
    for idx in by_size.values():
        fulls = [pairs[i].full if isinstance(pairs[i], SubsamplePair) else pairs[i][0] for i in idx]
        inners = [pairs[i].inner if isinstance(pairs[i], SubsamplePair) else pairs[i][1] for i in idx]
        out.append(((np.stack([d.x for d in fulls]), np.stack([d.y for d in fulls])),
                    (np.stack([d.x for d in inners]), np.stack([d.y for d in inners])),
                    np.array(idx)))
    return out


def _ridge(p0, xi, sigma0_sq):
    p0 = T.as_tensor(p0)
    return T.mul(T.tsum(T.mul(p0, p0)), xi / (2.0 * sigma0_sq))


def _check_var(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# PacB objective and the proximal inner problem
# ---------------------------------------------------------------------------

def pacb_objective(p0, inner, datasets, beta, sigma_sq, xi, sigma0_sq, loss):
    """PacB value for Dirac base learners ``q_i`` around the meta-parameters ``p0``.

    ``mean_i L(q_i, S_i) + xi ||p0||^2/(2 sigma0_sq)
    + (1/(n beta)) sum_i ||p0 - q_i||^2 / (2 sigma_sq)``.

    ``inner`` is an :class:`InnerSolution`, a list of them (one per task) or
    an array/tensor of shape ``(n, k)``.  Returns a taped scalar, so ``q``
    may itself depend on ``p0``.
    """
    _check_var(sigma_sq=sigma_sq, sigma0_sq=sigma0_sq, beta=beta)
    if isinstance(inner, InnerSolution):
        q = inner.q
    elif isinstance(inner, list) and inner and isinstance(inner[0], InnerSolution):
        q = np.concatenate([np.atleast_2d(s.q) for s in inner])
    else:
        q = inner
    q = T.as_tensor(q)
    if q.ndim == 1:
        q = T.reshape(q, (1,) + q.shape)
    groups = _groups(datasets)
    n = _n_tasks(groups)
    if q.shape[0] != n:
        raise ValueError(f"{q.shape[0]} inner solutions for {n} tasks")
    total = T.Tensor(0.0)
    for x, y, idx in groups:
        qg = q[idx]
        total = T.add(total, T.tsum(loss(qg, x, y)))
    diff = T.sub(p0, q)
    prox = T.mul(T.tsum(T.mul(diff, diff)), 1.0 / (n * beta * 2.0 * sigma_sq))
    return T.add(T.add(T.div(total, float(n)), _ridge(p0, xi, sigma0_sq)), prox)


def _prox_value_grad(q_flat, shape, p0, x, y, beta, sigma_sq, loss):
    q = T.variable(q_flat.reshape(shape))
    emp = T.tsum(loss(q, x, y))
    diff = T.sub(q, p0)
    val = T.add(emp, T.mul(T.tsum(T.mul(diff, diff)), 1.0 / (2 * beta * sigma_sq)))
    if not np.isfinite(val.value):
        raise T.NumericFailure("non-finite inner objective")
    g = T.gradients(val, q).value
    return float(val.value), g


def prox_residual(q, p0, data, beta, sigma_sq, loss):
    """Per-task norm of ``grad L(q, S) - (p0 - q)/(beta sigma_sq)``."""
    x, y = _xy(data)
    q = np.asarray(q)
    single = q.ndim == 1
    if single:
        q, x, y = q[None], np.asarray(x)[None], np.asarray(y)[None]
    _, g = _prox_value_grad(q.ravel(), q.shape, np.asarray(p0), x, y, beta, sigma_sq, loss)
    r = np.linalg.norm(g, axis=-1)
    return r[0] if single else r


def inner_optimal(p0, data, beta, sigma_sq, cfg=InnerOptConfig(), loss=None, init=None):
    """Minimize ``L(q, S) + ||p0 - q||^2 / (2 beta sigma_sq)`` over ``q``.

    ``data`` is one dataset or stacked ``(x, y)`` with a leading task axis;
    the per-task problems are independent and are solved jointly.  A flat
    loss (zero gradient at ``p0``) returns ``q = p0`` tied to the
    meta-parameters.  If the residual stays above ``cfg.tol`` the solution
    is still returned with ``converged=False`` and an
    :class:`InnerNotConverged` warning.
    """
    _check_var(beta=beta, sigma_sq=sigma_sq)
    if loss is None:
        raise ValueError("a loss is required")
    p0 = np.asarray(T.as_tensor(p0).value, dtype=float)
    x, y = _xy(data)
    x, y = np.asarray(x), np.asarray(y)
    single = y.ndim == 1
    if single:
        x, y = x[None], y[None]
    shape = (y.shape[0], p0.shape[-1])
    start = np.broadcast_to(p0, shape).copy()

    def fun(qf):
        return _prox_value_grad(qf, shape, p0, x, y, beta, sigma_sq, loss)

    _, g0 = fun(start.ravel())
    if not np.any(g0):
        sol = InnerSolution(start, TIED, 0, 0.0, np.zeros(shape[0]), True)
        return _unbatch(sol, single)

    q = start if init is None else np.broadcast_to(init, shape).copy()
    steps = 0
    if cfg.method == "quasi-newton":
        if cfg.steps > 0:
            res = scipy.optimize.minimize(
                fun, q.ravel(), jac=True, method="L-BFGS-B",
                options=dict(maxiter=cfg.steps, maxcor=cfg.history,
                             gtol=cfg.tol / (10.0 * math.sqrt(q.size)), ftol=0.0,
                             maxls=50))
            q, steps = res.x.reshape(shape), int(res.nit)
    else:
        for steps in range(1, cfg.steps + 1):
            _, g = fun(q.ravel())
            g = g.reshape(shape)
            if np.linalg.norm(g, axis=-1).max() <= cfg.tol:
                steps -= 1
                break
            q = q - cfg.lr * g
    _, g = fun(q.ravel())
    resid = np.linalg.norm(g.reshape(shape), axis=-1)
    ok = bool(np.all(resid <= cfg.tol))
    if not ok:
        warnings.warn(f"inner solve stopped at residual {resid.max():.3g} > tol {cfg.tol:g}",
                      InnerNotConverged, stacklevel=2)
    sol = InnerSolution(q, OPTIMAL, steps, cfg.lr, resid, ok)
    return _unbatch(sol, single)


def _unbatch(sol, single):
    if single:
        sol.q = sol.q[0]
        sol.residual = sol.residual[0]
    return sol


# ---------------------------------------------------------------------------
# meta-gradients
# ---------------------------------------------------------------------------

def reptile_meta_gradient(p0, datasets, beta, sigma_sq, xi, sigma0_sq, cfg=InnerOptConfig(),
                          loss=None, return_solutions=False, init=None):
    """Implicit meta-gradient ``xi p0/sigma0_sq + mean_i (p0 - q_i*)/(beta sigma_sq)``.

    ``q_i*`` come from :func:`inner_optimal`; non-convergence propagates as
    an :class:`InnerNotConverged` warning and, with ``return_solutions``, via
    the returned solutions.
    """
    _check_var(sigma0_sq=sigma0_sq)
    p0 = np.asarray(T.as_tensor(p0).value, dtype=float)
    groups = _groups(datasets)
    n = _n_tasks(groups)
    acc = np.zeros_like(p0)
    sols = [None] * len(groups)
    for gi, (x, y, idx) in enumerate(groups):
        start = None if init is None else np.asarray(init)[idx]
        sol = inner_optimal(p0, (x, y), beta, sigma_sq, cfg, loss, init=start)
        acc += np.sum(p0 - sol.q, axis=0)
        sols[gi] = (idx, sol)
    g = xi * p0 / sigma0_sq + acc / (n * beta * sigma_sq)
    if return_solutions:
        q = np.empty((n, p0.size))
        resid = np.empty(n)
        for idx, sol in sols:
            q[idx], resid[idx] = sol.q, sol.residual
        prov = {s.provenance for _, s in sols}
        merged = InnerSolution(q, prov.pop() if len(prov) == 1 else OPTIMAL,
                               max(s.steps for _, s in sols), cfg.lr, resid,
                               all(s.converged for _, s in sols))
        return g, merged
    return g


def unrolled_inner(p0, x_s, y_s, k, eta, loss, first_order=False):
    """``k`` gradient steps on ``L(., S')`` from ``p0``; differentiable in ``p0``.

    With ``first_order`` the inner gradients are treated as constants, so the
    returned ``q`` depends on ``p0`` only through the identity path.
    """
    p0 = T.as_tensor(p0)
    batch = np.shape(y_s)[:-1]
    q = T.broadcast_to(p0, batch + p0.shape[-1:])
    second_order = not first_order and T.grad_enabled()
    for _ in range(k):
        if not second_order:
            # inner gradients are needed even when the outer pass is untaped
            qd = T.variable(q.value)
            with T.recording(True):
                g = T.gradients(T.tsum(loss(qd, x_s, y_s)), qd).detach()
        else:
            qd = q if q.requires_grad else T.variable(q.value)
            g = T.gradients(T.tsum(loss(qd, x_s, y_s)), qd, create_graph=True)
        if not np.all(np.isfinite(g.value)):
            raise T.NumericFailure("non-finite inner gradient")
        q = T.sub(q, T.mul(g, eta))
    return q


def maml_objective(p0, pairs, k, eta, xi, sigma0_sq, loss, first_order=False):
    """``mean_i L(q_i(p0), S_i) + xi ||p0||^2/(2 sigma0_sq)`` with unrolled ``q_i``."""
    _check_var(sigma0_sq=sigma0_sq)
    if k < 0:
        raise ValueError("k must be >= 0")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    groups = _pair_groups(pairs)
    n = _n_tasks(groups)
    total = T.Tensor(0.0)
    for (xf, yf), (xs, ys), _ in groups:
        q = unrolled_inner(p0, xs, ys, k, eta, loss, first_order)
        total = T.add(total, T.tsum(loss(q, xf, yf)))
    return T.add(T.div(total, float(n)), _ridge(p0, xi, sigma0_sq))


def maml_meta_gradient(p0, pairs, k, eta, xi, sigma0_sq, loss, first_order=False):
    """Exact derivative of :func:`maml_objective` through ``k`` inner GD steps."""
    if k < 1 and eta > 0:
        raise ValueError("k must be >= 1")
    if not first_order and k > MAX_UNROLL:
        raise ValueError(f"second-order unrolling is capped at {MAX_UNROLL} steps")
    p = T.variable(np.asarray(T.as_tensor(p0).value, dtype=float))
    val = maml_objective(p, pairs, k, eta, xi, sigma0_sq, loss, first_order)
    if not np.isfinite(val.value):
        raise T.NumericFailure("non-finite meta-objective")
    return T.gradients(val, p).value.copy()


def fomaml_meta_gradient(p0, pairs, k, eta, xi, sigma0_sq, loss):
    """MAML meta-gradient with ``dq/dp0`` replaced by the identity."""
    return maml_meta_gradient(p0, pairs, k, eta, xi, sigma0_sq, loss, first_order=True)


def pacb_inner_gd_gradient(p0, pairs, k, eta, beta, sigma_sq, xi, sigma0_sq, loss):
    """Gradient of PacB when ``q_i`` is the unrolled inner-GD map on ``S_i'``.

    Differs from :func:`maml_meta_gradient` only by the proximal term, whose
    weight vanishes as ``sigma_sq`` grows.
    """
    p = T.variable(np.asarray(T.as_tensor(p0).value, dtype=float))
    groups = _pair_groups(pairs)
    n = _n_tasks(groups)
    qs, fulls = [], []
    for (xf, yf), (xs, ys), idx in groups:
        qs.append(unrolled_inner(p, xs, ys, k, eta, loss))
        fulls.append((xf, yf, idx))
    emp = T.Tensor(0.0)
    prox = T.Tensor(0.0)
    for q, (xf, yf, _) in zip(qs, fulls):
        emp = T.add(emp, T.tsum(loss(q, xf, yf)))
        d = T.sub(p, q)
        prox = T.add(prox, T.tsum(T.mul(d, d)))
    val = T.add(T.add(T.div(emp, float(n)), _ridge(p, xi, sigma0_sq)),
                T.mul(prox, 1.0 / (n * beta * 2.0 * sigma_sq)))
    return T.gradients(val, p).value.copy()


def pretrain_objective(p0, datasets, xi, sigma0_sq, loss):
    groups = _groups(datasets)
    n = _n_tasks(groups)
    total = T.Tensor(0.0)
    for x, y, _ in groups:
        total = T.add(total, T.tsum(loss(p0, x, y)))
    return T.add(T.div(total, float(n)), _ridge(p0, xi, sigma0_sq))


def pretrain_meta_gradient(p0, datasets, xi, sigma0_sq, loss):
    """``xi p0/sigma0_sq + mean_i grad L(p0, S_i)`` (the ``q = p0`` limit)."""
    _check_var(sigma0_sq=sigma0_sq)
    return T.grad(lambda p: pretrain_objective(p, datasets, xi, sigma0_sq, loss),
                  np.asarray(T.as_tensor(p0).value, dtype=float))


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment first-order optimizer on flat numpy vectors."""

    def __init__(self, lr=3e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainConfig:
    """Meta-training settings shared by all algorithms.

    ``beta`` and ``alpha`` are absolute temperatures.  ``xi`` defaults to
    ``1/lam + 1/(n beta)`` when ``beta`` is set and to 0 otherwise.
    ``m_prime`` is the inner-set size for ``maml``, ``fomaml`` and ``pacmaml``.
    """

    n: int = 20
    iterations: int = 8000
    batch_size: int = 5
    lr: float = 3e-3
    beta: float = None
    alpha: float = None
    lam: float = math.inf
    xi: float = None
    sigma0_sq: float = 3.0
    sigma_sq: float = 1.0
    m_prime: int = None
    subsample_mode: str = "subset"
    resample_inner: bool = True
    inner_steps: int = 1
    inner_lr: float = 0.01
    inner: InnerOptConfig = field(default_factory=lambda: InnerOptConfig(steps=10, lr=5e-3))
    data_seed: int = 0
    log_every: int = 1

    def resolved_xi(self):
        if self.xi is not None:
            return self.xi
        base = 0.0 if math.isinf(self.lam) else 1.0 / self.lam
        if self.beta is None:
            return base
        return base + 1.0 / (self.n * self.beta)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    objective: float
    grad_norm: float
    wall_time: float


TRACE_FIELDS = ("iteration", "objective", "grad_norm", "wall_time")


def write_trace_csv(path, trace, wall_time=True):
    fields = TRACE_FIELDS if wall_time else TRACE_FIELDS[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in trace:
            row = [r.iteration, repr(r.objective), repr(r.grad_norm), repr(r.wall_time)]
            w.writerow(row[:len(fields)])


def default_model(algorithm, env):
    if algorithm in (obj.PACOH, obj.PACMAML):
        return None
    if env.family == TOY_CLASSIFICATION:
        return SoftmaxClassifier(n_way=env.n_way)
    return RegressionMlp()


def init_params(algorithm, env, seed, model=None):
    rng = rng_for(seed, 41)
    if algorithm in (obj.PACOH, obj.PACMAML):
        return gp.init_theta(rng)
    return (model or default_model(algorithm, env)).init(rng)


def _validate(algorithm, cfg):
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm in ("pacoh", "pacmaml", "reptile") and cfg.beta is None:
        raise ValueError(f"{algorithm} requires beta")
    if algorithm == "pacmaml" and cfg.alpha is None:
        raise ValueError("pacmaml requires alpha")
    if algorithm in ("maml", "fomaml", "pacmaml") and cfg.m_prime is None:
        raise ValueError(f"{algorithm} requires m_prime")
    if cfg.batch_size < 1 or cfg.batch_size > cfg.n:
        raise ValueError("batch_size must lie in [1, n]")


def batch_step(algorithm, p0, batch, pairs, cfg, model, xi):
    """Objective value and meta-gradient on one batch of tasks."""
    if algorithm == "pacoh":
        def f(th):
            vals = [obj.w1(th, (x, y), cfg.beta) for x, y, _ in _groups(batch)]
            return T.add(T.div(sum_all(vals), float(len(batch))), _ridge(th, xi, cfg.sigma0_sq))
        return T.value_and_grad(f, p0)
    if algorithm == "pacmaml":
        def f(th):
            vals = [obj.w2(th, (full, inner), cfg.alpha, cfg.beta)
                    for full, inner, _ in _pair_groups(pairs)]
            return T.add(T.div(sum_all(vals), float(len(pairs))), _ridge(th, xi, cfg.sigma0_sq))
        return T.value_and_grad(f, p0)
    if algorithm == "pretrain":
        return T.value_and_grad(
            lambda p: pretrain_objective(p, batch, xi, cfg.sigma0_sq, model), p0)
    if algorithm in ("maml", "fomaml"):
        first = algorithm == "fomaml"
        p = T.variable(p0)
        val = maml_objective(p, pairs, cfg.inner_steps, cfg.inner_lr, xi, cfg.sigma0_sq,
                             model, first_order=first)
        if not np.isfinite(val.value):
            return float(val.value), np.full_like(p0, np.nan)
        return float(val.value), T.gradients(val, p).value.copy()
    # reptile
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InnerNotConverged)
        g, sol = reptile_meta_gradient(p0, batch, cfg.beta, cfg.sigma_sq, xi, cfg.sigma0_sq,
                                       cfg.inner, model, return_solutions=True)
    with T.no_grad():
        val = pacb_objective(p0, sol.q, batch, cfg.beta, cfg.sigma_sq, xi, cfg.sigma0_sq,
                             model)
    return float(val.value), g


def sum_all(vals):
    out = T.Tensor(0.0)
    for v in vals:
        out = T.add(out, T.tsum(v))
    return out


def meta_train(algorithm, env, cfg, iterations=None, seed=0, data=None, model=None,
               init=None, callback=None):
    """Stochastic meta-training with Adam on batches of observed tasks.

    ``data`` is a list of ``(task, dataset)`` pairs; by default ``cfg.n``
    tasks are sampled from ``env`` with ``cfg.data_seed``.  ``seed`` keys the
    initialization, the task batches and the inner subsamples.  Returns
    ``(MetaParams, trace)``; raises :class:`TrainingDiverged` on a
    non-finite objective.  ``callback(iteration, p0)`` runs after each step.
    """
    _validate(algorithm, cfg)
    iterations = cfg.iterations if iterations is None else iterations
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if data is None:
        data = sample_meta_train(env, cfg.n, cfg.data_seed)
    if len(data) != cfg.n:
        raise ValueError(f"expected {cfg.n} tasks, got {len(data)}")
    model = model if model is not None else default_model(algorithm, env)
    p0 = init_params(algorithm, env, seed, model) if init is None else np.array(init, float)
    xi = cfg.resolved_xi()
    opt = Adam(cfg.lr)
    trace = []
    t0 = time.perf_counter()
    for it in range(iterations):
        idx = np.sort(rng_for(seed, 29, it).choice(cfg.n, cfg.batch_size, replace=False))
        batch = [data[i][1] for i in idx]
        pairs = None
        if cfg.m_prime is not None:
            pairs = []
            for i in idx:
                task, ds = data[i]
                key = it * cfg.n + int(i) if cfg.resample_inner else int(i)
                pairs.append(subsample(ds, cfg.m_prime, cfg.subsample_mode, seed, task, env, key))
        try:
            val, g = batch_step(algorithm, p0, batch, pairs, cfg, model, xi)
        except T.NumericFailure:
            val, g = math.nan, np.full_like(p0, math.nan)
        gnorm = float(np.linalg.norm(g))
        if it % cfg.log_every == 0 or it == iterations - 1:
            trace.append(TraceRow(it, val, gnorm, time.perf_counter() - t0))
        if not (np.isfinite(val) and np.isfinite(gnorm)):
            raise TrainingDiverged(f"non-finite objective at iteration {it}", trace)
        p0 = opt.step(p0, g)
        if callback is not None:
            callback(it + 1, p0)
    return MetaParams(p0, algorithm), trace


# ---------------------------------------------------------------------------
# adaptation and evaluation on target tasks
# ---------------------------------------------------------------------------

def adapt(algorithm, p0, train, cfg, model):
    """Per-task parameters after adapting the meta-parameters on ``train``.

    MAML-family methods take their inner GD steps; Reptile and pretraining
    use the proximal optimum that defines their base learner.
    """
    x, y = _xy(train)
    if algorithm in ("maml", "fomaml"):
        q = unrolled_inner(np.asarray(p0), x, y, cfg.inner_steps, cfg.inner_lr, model,
                           first_order=True)
        return q.value
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InnerNotConverged)
        return inner_optimal(p0, (x, y), cfg.beta if cfg.beta else 1.0, cfg.sigma_sq,
                             cfg.inner, model).q


def target_rmse(algorithm, p0, targets, cfg, model=None):
    """Per-target-task test RMSE after adaptation on each task's train split.

    GP methods predict with the mean of their base learner: the Gibbs
    posterior at temperature ``beta`` (PACOH) or ``alpha`` (PACMAML) on the
    task's train split.  ``targets`` is a list of ``(task, train, test)``.
    """
    out = np.empty(len(targets))
    if algorithm in (obj.PACOH, obj.PACMAML):
        temp = cfg.beta if algorithm == obj.PACOH else cfg.alpha
        for i, (_, train, test) in enumerate(targets):
            out[i] = gp.target_rmse(p0, train, test, temp)
        return out
    model = model or RegressionMlp()
    for i, (_, train, test) in enumerate(targets):
        q = adapt(algorithm, p0, train, cfg, model)
        with T.no_grad():
            pred = model.predict(np.reshape(q, (-1,)), test.x).value
        out[i] = float(np.sqrt(np.mean((pred - test.y) ** 2)))
    return out
