"""Sampling-based meta-gradients for losses without a conjugate posterior.

Inner posteriors are reparameterized as ``v = p + w`` with
``w ~ N(0, sigma_sq I) exp(-gamma L(p + w, S)) / Z`` and sampled by SGLD.
Because ``w`` is held fixed once drawn, the estimators only contain partial
derivatives with respect to ``p``.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from pacmeta.autodiff import tensor as T
from pacmeta.map_learners import (Adam, MetaParams, TrainingDiverged, _pair_groups, _ridge,
                                  unrolled_inner)
from pacmeta.models import SoftmaxClassifier
from pacmeta.tasks import (TOY_CLASSIFICATION, Dataset, SubsamplePair, TaskEnvironment,
                           rng_for, sample_meta_train, sample_target_tasks, subsample)

ALPHA_ON_INNER = "alpha-on-Sprime"
BETA_ON_FULL = "beta-on-S"


@dataclass(frozen=True)
class SamplerConfig:
    """SGLD settings.

    ``step_size`` defaults to ``1e-3 * sigma_sq``.  Iterates after
    ``burn_in`` steps are kept every ``thin`` steps; ``thin = n_steps`` with
    no burn-in keeps only the final iterate (one-sample mode).
    """

    step_size: float = None
    n_steps: int = 50
    thin: int = 1
    burn_in: int = 0
    seed: int = 0
    sigma_sq: float = 1.0
    n_chains: int = 1
    warm_start: bool = True

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.thin < 1 or self.burn_in < 0 or self.n_chains < 1:
            raise ValueError("need thin >= 1, burn_in >= 0, n_chains >= 1")
        if self.burn_in >= self.n_steps:
            raise ValueError("burn_in must be smaller than n_steps")
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")

    @property
    def epsilon(self):
        return 1e-3 * self.sigma_sq if self.step_size is None else self.step_size


@dataclass
class PosteriorSamples:
    """Kept offsets ``w`` with shape ``(N, *task_batch, k)``.

    ``final`` is the last chain state, usable as a warm start.
    """

    samples: np.ndarray
    which: str
    final: np.ndarray = None

    def __post_init__(self):
        if self.samples.shape[0] == 0:
            raise ValueError("posterior sample set is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("posterior samples must be finite")

    def __len__(self):
        return self.samples.shape[0]


def _xy(d):
    return (d.x, d.y) if isinstance(d, Dataset) else d


def _mask(loss, k):
    fn = getattr(loss, "adapt_mask", None)
    return np.ones(k) if fn is None else fn()


def sgld_sample(p, dataset, temperature, sigma_sq=None, cfg=SamplerConfig(), loss=None,
                which=BETA_ON_FULL, w0=None, rng=None):
    """SGLD chains targeting ``N(w | 0, sigma_sq) exp(-temperature L(p + w, S))``.

    ``dataset`` is one dataset or stacked ``(x, y)`` with leading task axes;
    each task gets ``cfg.n_chains`` independent chains.  Coordinates outside
    the loss's ``adapt_mask`` stay at zero.  ``w0`` warm-starts the chains.
    """
    sigma_sq = cfg.sigma_sq if sigma_sq is None else sigma_sq
    if not sigma_sq > 0 or temperature < 0:
        raise ValueError("need sigma_sq > 0 and temperature >= 0")
    p = np.asarray(T.as_tensor(p).value, dtype=float)
    x, y = _xy(dataset)
    batch = np.shape(y)[:-1]
    k = p.shape[-1]
    shape = (cfg.n_chains,) + batch + (k,)
    mask = _mask(loss, k)
    rng = rng_for(cfg.seed, 47) if rng is None else rng
    w = np.zeros(shape) if w0 is None else np.broadcast_to(w0, shape).copy()
    w *= mask
    eps = cfg.epsilon
    noise_scale = math.sqrt(eps)
    kept = []
    for step in range(1, cfg.n_steps + 1):
        if temperature > 0:
            wv = T.variable(w)
            val = T.tsum(loss(T.add(p, wv), x, y))
            if not np.isfinite(val.value):
                raise T.NumericFailure(f"non-finite loss at SGLD step {step}")
            g = T.gradients(val, wv).value * temperature
        else:
            g = 0.0
        drift = w / sigma_sq + g
        w = w - 0.5 * eps * drift + noise_scale * rng.standard_normal(shape)
        w *= mask
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            kept.append(w)
    samples = np.concatenate(kept, axis=0)
    return PosteriorSamples(samples, which, w)


def _mean_partial(p, w, x, y, loss):
    """``mean over samples and tasks of dL(p + w, S)/dp`` with ``w`` fixed."""
    pv = T.variable(np.asarray(T.as_tensor(p).value, dtype=float))
    vals = loss(T.add(pv, w), x, y)
    return T.gradients(T.mean(vals), pv).value.copy()


def _samples(s):
    return s.samples if isinstance(s, PosteriorSamples) else np.asarray(s)


def grad_w1_estimator(p, dataset, beta, samples, loss):
    """Sample average of ``dL(p + w, S)/dp`` over draws ``w`` from ``Q_beta(S)``.

    With a task batch the result is averaged over tasks as well.
    """
    x, y = _xy(dataset)
    return _mean_partial(p, _samples(samples), x, y, loss)


def grad_w2_estimator(p, pair, alpha, beta, samples_alpha, samples_beta, loss):
    """``E_a[dL(p+w, S)] + (alpha/beta) (E_b - E_a)[dL(p+w, S')]`` from samples.

    ``E_a`` averages over draws from ``Q_alpha(S')`` and ``E_b`` over draws
    from ``Q_beta(S)``.
    """
    (xf, yf), (xs, ys) = _full_inner(pair)
    wa, wb = _samples(samples_alpha), _samples(samples_beta)
    first = _mean_partial(p, wa, xf, yf, loss)
    on_inner_b = _mean_partial(p, wb, xs, ys, loss)
    on_inner_a = _mean_partial(p, wa, xs, ys, loss)
    return first + (alpha / beta) * (on_inner_b - on_inner_a)


def _full_inner(pair):
    if isinstance(pair, SubsamplePair):
        return _xy(pair.full), _xy(pair.inner)
    return _xy(pair[0]), _xy(pair[1])


def surrogate_gap(p, pair, alpha, beta, samples_alpha, loss):
    """``(exact, surrogate)`` for the held-out correction under ``Q_alpha``.

    With ``D(w) = L(p+w, S) - (alpha/beta) L(p+w, S')`` the exact term is
    ``-(1/beta) E[-beta D]`` and the surrogate is
    ``-(1/beta) log E[exp(-beta D)]``, evaluated with log-sum-exp.  Both are
    computed around the sample mean of ``-beta D`` so that constant ``D``
    gives equal terms.  Task batches return per-task arrays.
    """
    (xf, yf), (xs, ys) = _full_inner(pair)
    wa = _samples(samples_alpha)
    p = np.asarray(T.as_tensor(p).value, dtype=float)
    with T.no_grad():
        d = (loss(p + wa, xf, yf).value - (alpha / beta) * loss(p + wa, xs, ys).value)
    z = -beta * d
    n = z.shape[0]
    centre = np.mean(z, axis=0)
    exact = -centre / beta
    surrogate = -(centre + logsumexp(z - centre, axis=0) - math.log(n)) / beta
    return exact, surrogate


# ---------------------------------------------------------------------------
# toy-classification meta-training
# ---------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    """Toy few-shot classification protocol.

    Observed tasks carry ``m_obs`` labelled points; ``m_prime`` of them train
    the inner learner.  Inner adaptation runs ``inner_steps`` steps: plain
    gradient steps of size ``inner_lr`` for FOMAML, and SGLD for PACMAML with
    step sizes ``2 inner_lr / alpha`` and ``2 inner_lr / beta`` so the drift
    matches the gradient step.  ``beta = alpha * m_obs / m_prime``.
    """

    n: int = 100
    m_obs: int = 20
    m_prime: int = 5
    m_target: int = 5
    iterations: int = 1500
    batch_size: int = 5
    lr: float = 3e-3
    alpha: float = 1000.0
    inner_lr: float = 0.5
    inner_steps: int = 6
    sigma_sq: float = 1.0
    sigma0_sq: float = 3.0
    xi: float = 0.0
    n_way: int = 5
    data_seed: int = 0
    log_every: int = 50
    env: TaskEnvironment = field(default=None)

    @property
    def beta(self):
        return self.alpha * self.m_obs / self.m_prime

    def environment(self):
        if self.env is not None:
            return self.env
        return TaskEnvironment(family=TOY_CLASSIFICATION, m=self.m_target, m_obs=self.m_obs,
                               n_way=self.n_way)

    def sampler(self, temperature, seed):
        return SamplerConfig(step_size=2.0 * self.inner_lr / temperature,
                             n_steps=self.inner_steps, thin=self.inner_steps,
                             seed=seed, sigma_sq=self.sigma_sq)


def adapted_sample(p, train, temperature, cfg, model, rng):
    """One-sample posterior draw: the final SGLD iterate from ``w = 0``."""
    s = sgld_sample(p, train, temperature, cfg.sigma_sq, cfg.sampler(temperature, 0),
                    model, rng=rng)
    return s.samples[-1]


def adaptation_accuracy(method, p0, targets, cfg, model=None, seed=0):
    """Per-task test accuracy after adapting on each target's train split.

    ``method`` is ``pacmaml`` (one SGLD draw at temperature ``alpha``),
    ``fomaml``/``maml`` (``inner_steps`` gradient steps) or ``none``.
    """
    model = model or SoftmaxClassifier(n_way=cfg.n_way)
    xs = np.stack([t[1].x for t in targets])
    ys = np.stack([t[1].y for t in targets])
    xt = np.stack([t[2].x for t in targets])
    yt = np.stack([t[2].y for t in targets])
    p0 = np.asarray(p0, dtype=float)
    if method == "pacmaml":
        w = adapted_sample(p0, (xs, ys), cfg.alpha, cfg, model, rng_for(seed, 53))
        v = p0 + w
    elif method in ("fomaml", "maml"):
        mask = model.adapt_mask()
        v = p0
        for _ in range(cfg.inner_steps):
            vv = T.variable(np.broadcast_to(v, (len(targets), p0.size)))
            g = T.gradients(T.tsum(model(vv, xs, ys)), vv).value
            v = vv.value - cfg.inner_lr * g * mask
    elif method == "none":
        v = np.broadcast_to(p0, (len(targets), p0.size))
    else:
        raise ValueError(f"unknown adaptation method {method!r}")
    return model.accuracy(v, xt, yt)


@dataclass(frozen=True)
class ClassifierTraceRow:
    iteration: int
    objective: float
    grad_norm: float
    wall_time: float


def _masked_inner_loss(model):
    """Wrap ``model`` so unrolled inner steps only move the adapted coordinates."""
    mask = model.adapt_mask()

    class _Masked:
        n_params = model.n_params

        def __call__(self, v, x, y):
            v = T.as_tensor(v)
            fixed = v.value * (1.0 - mask)
            moved = T.add(T.mul(v, mask), fixed)
            return model(moved, x, y)

        def adapt_mask(self):
            return mask

    return _Masked()


def _train_classifier(method, cfg, seed):
    env = cfg.environment()
    model = SoftmaxClassifier(n_way=cfg.n_way)
    data = sample_meta_train(env, cfg.n, cfg.data_seed)
    p0 = model.init(rng_for(seed, 41))
    opt = Adam(cfg.lr)
    trace = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        idx = np.sort(rng_for(seed, 29, it).choice(cfg.n, cfg.batch_size, replace=False))
        pairs = [subsample(data[i][1], cfg.m_prime, "subset", seed, key=it * cfg.n + int(i))
                 for i in idx]
        (grp,) = _pair_groups(pairs)
        (xf, yf), (xs, ys), _ = grp
        if method == "pacmaml":
            rng_a, rng_b = rng_for(seed, 59, it, 0), rng_for(seed, 59, it, 1)
            wa = adapted_sample(p0, (xs, ys), cfg.alpha, cfg, model, rng_a)[None]
            wb = adapted_sample(p0, (xf, yf), cfg.beta, cfg, model, rng_b)[None]
            g = grad_w2_estimator(p0, ((xf, yf), (xs, ys)), cfg.alpha, cfg.beta, wa, wb, model)
            g = g + cfg.xi * p0 / cfg.sigma0_sq
            with T.no_grad():
                val = float(np.mean(model(p0 + wa[0], xf, yf).value))
        else:
            inner = _masked_inner_loss(model)
            # the outer loss sees the full parameter vector
            pv = T.variable(p0)
            q = unrolled_inner(pv, xs, ys, cfg.inner_steps, cfg.inner_lr, inner,
                               first_order=True)
            obj = T.add(T.mean(model(q, xf, yf)), _ridge(pv, cfg.xi, cfg.sigma0_sq))
            val = float(obj.value)
            g = T.gradients(obj, pv).value.copy()
        gnorm = float(np.linalg.norm(g))
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append(ClassifierTraceRow(it, val, gnorm, time.perf_counter() - t0))
        if not (np.isfinite(val) and np.isfinite(gnorm)):
            raise TrainingDiverged(f"non-finite objective at iteration {it}", trace)
        p0 = opt.step(p0, g)
    return MetaParams(p0, method), trace


def pacmaml_train_classifier(cfg=ClassifierConfig(), seed=0):
    """Meta-train with the one-sample PACMAML gradient estimator."""
    return _train_classifier("pacmaml", cfg, seed)


def fomaml_train_classifier(cfg=ClassifierConfig(), seed=0):
    """First-order MAML baseline on the same tasks, batches and subsamples."""
    return _train_classifier("fomaml", cfg, seed)


def classifier_targets(cfg, count=200, seed=1000, n_test=100):
    return sample_target_tasks(cfg.environment(), count, seed, n_test)
