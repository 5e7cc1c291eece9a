"""Per-task bound objectives and term-by-term bound assembly.

``w1`` is the PACOH objective ``-(1/beta) log Z_beta(S)``; ``w2`` is the
PACMAML objective, which trains the base learner on the subsample ``S'``
at temperature ``alpha`` and scores it on the full set ``S``.  Moment terms
(Psi_1, Psi_2) and the constant C are identical across the compared
configurations and are never evaluated; every :class:`BoundReport` says so.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from pacmeta import gp
from pacmeta.autodiff import tensor as T
from pacmeta.tasks import Dataset, SubsamplePair, rng_for, stack

NEGLECTED = "Psi1, Psi2 and C omitted (identical across compared configurations)"

PACOH = "pacoh"
PACMAML = "pacmaml"


def _xy(data):
    return (data.x, data.y) if isinstance(data, Dataset) else data


def _pair_xy(pair):
    if isinstance(pair, SubsamplePair):
        return _xy(pair.full), _xy(pair.inner)
    full, inner = pair
    return _xy(full), _xy(inner)


def w1(theta, data, beta):
    """PACOH per-task objective ``-(1/beta) log Z_beta(S, theta)``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return T.mul(gp.log_partition(theta, data, beta), -1.0 / beta)


def w2(theta, pair, alpha, beta):
    """PACMAML per-task objective.

    ``-(1/beta) log Z_alpha(S') + L(Q_alpha, S) - (alpha/beta) L(Q_alpha, S')``
    where ``Q_alpha`` is the Gibbs posterior trained on ``S'`` only.
    ``pair`` is a :class:`SubsamplePair` or ``(full, inner)`` with each
    side a :class:`Dataset` or batched ``(x, y)`` arrays.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    (x_f, y_f), (x_s, y_s) = _pair_xy(pair)
    m = np.shape(y_s)[-1]
    if m == 0:
        return gp.posterior_error(theta, (x_s, y_s), alpha, (x_f, y_f))

    # one network pass over [S'; S]
    xa = np.concatenate([x_s, x_f], axis=-2)
    mean_all = gp.prior_mean(theta, xa)
    f_all = gp.features(theta, xa)
    mean_s = mean_all[..., :m]
    f_s = f_all[..., :m, :]

    noise = gp.noise_variance(m, alpha)
    k_ss = gp.kernel_from_features(f_s, f_s)
    l, logdet = gp.cholesky_logdet(T.add(k_ss, np.eye(m) * noise))
    y_s_t = T.as_tensor(y_s)
    a = T.solve_lower(l, T.reshape(T.sub(y_s_t, mean_s), y_s_t.shape + (1,)))
    log_z = T.add(
        T.mul(T.add(T.tsum(T.mul(a, a), axis=(-2, -1)), logdet), -0.5),
        0.5 * m * (math.log(math.pi * m / alpha) - math.log(2 * math.pi)))

    v = T.solve_lower(l, T.transpose(gp.kernel_from_features(f_all, f_s)))
    mu = T.add(mean_all, T.reshape(T.matmul(T.transpose(v), a), mean_all.shape))
    var = T.sub(0.5, T.tsum(T.mul(v, v), axis=-2))
    err_full = gp.gibbs_error_moments(mu[..., m:], T.tsum(var[..., m:], axis=-1), y_f)
    err_inner = gp.gibbs_error_moments(mu[..., :m], T.tsum(var[..., :m], axis=-1), y_s)
    return T.add(T.sub(err_full, T.mul(err_inner, alpha / beta)),
                 T.mul(log_z, -1.0 / beta))


def hyper_kl(theta0, sigma0_sq, include_normalizer=True):
    """Dirac hyper-posterior KL to ``N(0, sigma0_sq I)``, up to the dropped constant.

    ``||theta0||^2 / (2 sigma0_sq)`` plus, by default, ``(k/2) log(2 pi sigma0_sq)``.
    """
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    theta0 = np.asarray(T.as_tensor(theta0).value)
    out = float(theta0 @ theta0) / (2.0 * sigma0_sq)
    if include_normalizer:
        out += 0.5 * theta0.size * math.log(2 * math.pi * sigma0_sq)
    return out


@dataclass(frozen=True)
class BoundConfig:
    """Bound hyperparameters.  ``lam = inf`` gives ``xi = 1/(n beta)``."""

    n: int
    beta: float
    alpha: float = None
    lam: float = math.inf
    delta: float = 0.1
    sigma0_sq: float = 3.0
    sigma_sq: float = 1.0
    kl_normalizer: bool = False

    def __post_init__(self):
        if self.n < 1 or self.beta <= 0:
            raise ValueError("need n >= 1 and beta > 0")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def xi(self):
        return 1.0 / self.lam + 1.0 / (self.n * self.beta)


@dataclass(frozen=True)
class Estimate:
    """Monte-Carlo mean with its standard error."""

    value: float
    stderr: float
    n: int

    def __float__(self):
        return self.value


@dataclass
class BoundReport:
    path: str
    m_i: int
    beta: float
    alpha: float
    w_term: float
    kl_term: float
    conf_term: float
    delta_lambda: float
    total: float
    seed: int = 0
    delta_lambda_se: float = 0.0
    neglected: str = NEGLECTED

    CSV_FIELDS = ("path", "m_i", "beta", "alpha", "w_term", "kl_term", "conf_term",
                  "delta_lambda", "total", "seed")

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}


def _gibbs_risk(theta, train_x, train_y, fresh_x, fresh_y, temperature):
    with T.no_grad():
        return gp.posterior_error(theta, (train_x, train_y), temperature,
                                  (fresh_x, fresh_y)).value


def delta_lambda_estimate(theta0, env_target, env_obs, lam, beta, n_mc, seed,
                          n_fresh=100, chunk=250):
    """Monte-Carlo estimate of ``R(theta0, T) - R(theta0, T~)``.

    For each of ``n_mc`` tasks, independent training sets of size ``env_target.m``
    and ``env_obs.m_obs`` are drawn, a Gibbs posterior at temperature ``beta``
    is fit to each, and both are scored by their expected squared loss on the
    same ``n_fresh`` fresh points.  Only the risk-difference branch of the
    environment-mismatch term is estimated, so ``lam`` is unused.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    m, m_obs = env_target.m, env_obs.m_obs
    diffs = np.empty(n_mc)
    for start in range(0, n_mc, chunk):
        idx = range(start, min(n_mc, start + chunk))
        xt, yt, xo, yo, xf, yf = [], [], [], [], [], []
        for i in idx:
            rng = rng_for(seed, 23, i)
            task = env_target.sample_task(rng, m)
            for (xs, ys), size in (((xt, yt), m), ((xo, yo), m_obs), ((xf, yf), n_fresh)):
                d = env_target.sample_points(task, size, rng)
                xs.append(d.x)
                ys.append(d.y)
        xf, yf = np.stack(xf), np.stack(yf)
        r_t = _gibbs_risk(theta0, np.stack(xt), np.stack(yt), xf, yf, beta)
        r_o = _gibbs_risk(theta0, np.stack(xo), np.stack(yo), xf, yf, beta)
        diffs[start:start + len(idx)] = r_t - r_o
    se = float(diffs.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.inf
    return Estimate(float(diffs.mean()), se, n_mc)


def _mean_w(path, theta0, data, cfg):
    with T.no_grad():
        if path == PACOH:
            groups = {}
            for d in data:
                d = d.full if isinstance(d, SubsamplePair) else d
                groups.setdefault(len(d), []).append(d)
            vals = [w1(theta0, stack(g), cfg.beta).value for g in groups.values()]
        else:
            groups = {}
            for p in data:
                if not isinstance(p, SubsamplePair):
                    raise TypeError("the pacmaml path needs SubsamplePair inputs")
                groups.setdefault((len(p.full), len(p.inner)), []).append(p)
            vals = [w2(theta0, (stack([p.full for p in g]), stack([p.inner for p in g])),
                       cfg.alpha, cfg.beta).value for g in groups.values()]
    return float(np.concatenate([np.ravel(v) for v in vals]).mean())


def assemble_bound(path, theta0, data, cfg, env_target=None, env_obs=None,
                   n_mc=200, seed=0):
    """Term-by-term bound value for a trained ``theta0``.

    ``data`` holds the observed datasets (``pacoh``) or their
    :class:`SubsamplePair` splits (``pacmaml``).  The ``pacoh`` path adds the
    Monte-Carlo environment-mismatch estimate, which needs ``env_target``
    and ``env_obs``; the ``pacmaml`` path has no such term.
    """
    if path not in (PACOH, PACMAML):
        raise ValueError(f"unknown path {path!r}")
    if path == PACMAML and cfg.alpha is None:
        raise ValueError("the pacmaml path needs alpha")
    theta0 = np.asarray(T.as_tensor(theta0).value)
    w = _mean_w(path, theta0, data, cfg)
    kl = cfg.xi * hyper_kl(theta0, cfg.sigma0_sq, cfg.kl_normalizer)
    conf = cfg.xi * math.log(1.0 / cfg.delta)
    dl, dl_se = 0.0, 0.0
    if path == PACOH:
        if env_target is None or env_obs is None:
            raise ValueError("the pacoh path needs target and observed environments")
        est = delta_lambda_estimate(theta0, env_target, env_obs, cfg.lam, cfg.beta,
                                    n_mc, seed)
        dl, dl_se = est.value, est.stderr
    first = data[0]
    m_i = len(first.full) if isinstance(first, SubsamplePair) else len(first)
    return BoundReport(path, m_i, cfg.beta, cfg.alpha if path == PACMAML else cfg.beta,
                       w, kl, conf, dl, w + kl + conf + dl, seed, dl_se)
