"""GP base learner with neural mean and kernel, under squared loss.

The prior is ``GP(m_theta(x), k_theta(x, x'))`` with
``k_theta(x, x') = 0.5 * exp(-||phi_theta(x) - phi_theta(x')||^2)``, where
``m_theta`` and ``phi_theta`` are tanh MLPs sharing one flat parameter
vector ``theta = [mean-net weights, feature-net weights]``.

For the empirical squared loss averaged over ``m`` points, the Gibbs
posterior ``P(h) exp(-alpha * L(h, S)) / Z`` is exactly GP regression with
noise variance ``m / (2 alpha)``.  All functions accept batched inputs
``x: (..., m, 1)``, ``y: (..., m)`` and return taped tensors.
"""

import math
from dataclasses import dataclass

import numpy as np

from pacmeta.autodiff import tensor as T
from pacmeta.autodiff.linalg import cholesky_logdet, mvn_logpdf
from pacmeta.autodiff.nn import FEATURE_NET, MEAN_NET, init_mlp, mlp_forward
from pacmeta.tasks import Dataset

N_MEAN = MEAN_NET.n_params
N_THETA = MEAN_NET.n_params + FEATURE_NET.n_params


def init_theta(rng):
    return np.concatenate([init_mlp(MEAN_NET, rng), init_mlp(FEATURE_NET, rng)])


def split_theta(theta):
    theta = T.as_tensor(theta)
    if theta.shape[-1] != N_THETA:
        raise ValueError(f"theta must have {N_THETA} entries, got {theta.shape[-1]}")
    return theta[..., :N_MEAN], theta[..., N_MEAN:]


def _xy(data):
    if isinstance(data, Dataset):
        return data.x, data.y
    return data


def prior_mean(theta, x):
    mean_w, _ = split_theta(theta)
    out = mlp_forward(MEAN_NET, mean_w, x)
    return T.reshape(out, out.shape[:-1])


def features(theta, x):
    _, feat_w = split_theta(theta)
    return mlp_forward(FEATURE_NET, feat_w, x)


def kernel_from_features(fa, fb):
    return T.mul(T.exp(T.neg(T.sqdist(fa, fb))), 0.5)


def kernel_matrix(theta, x, x2=None):
    """Prior covariance between inputs ``x`` and ``x2`` (default ``x``)."""
    fa = features(theta, x)
    fb = fa if x2 is None else features(theta, x2)
    return kernel_from_features(fa, fb)


@dataclass
class GpPosterior:
    """Posterior mean ``mu`` and joint covariance ``cov`` at query points."""

    mu: T.Tensor
    cov: T.Tensor

    def numpy(self):
        return self.mu.value, self.cov.value


def noise_variance(m, alpha):
    return m / (2.0 * alpha)


def log_partition_moments(mean, cov, y, alpha):
    """``(m/2) log(pi m / alpha) + log N(y | mean, cov + m/(2 alpha) I)``."""
    y = T.as_tensor(y)
    m = y.shape[-1]
    if m == 0:
        return T.Tensor(np.zeros(y.shape[:-1]))
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    noisy = T.add(cov, np.eye(m) * noise_variance(m, alpha))
    return T.add(mvn_logpdf(y, mean, noisy), 0.5 * m * math.log(math.pi * m / alpha))


def log_partition(theta, data, alpha):
    """Log partition function ``log Z_alpha(S, P_theta)``; zero for empty ``S``."""
    x, y = _xy(data)
    if np.shape(y)[-1] == 0:
        return T.Tensor(np.zeros(np.shape(y)[:-1]))
    return log_partition_moments(prior_mean(theta, x), kernel_matrix(theta, x), y, alpha)


def _condition(mean_q, k_qq, k_qs, mean_s, k_ss, y_s, noise, diag_only=False):
    # diag_only: k_qq holds prior marginal variances, returns marginal variances
    m = k_ss.shape[-1]
    l, _ = cholesky_logdet(T.add(k_ss, np.eye(m) * noise))
    resid = T.reshape(T.sub(y_s, mean_s), y_s.shape + (1,))
    a = T.solve_lower(l, resid)                      # (..., m, 1)
    v = T.solve_lower(l, T.transpose(k_qs))          # (..., m, q)
    mu = T.add(mean_q, T.reshape(T.matmul(T.transpose(v), a), mean_q.shape))
    if diag_only:
        return mu, T.sub(k_qq, T.tsum(T.mul(v, v), axis=-2))
    cov = T.sub(k_qq, T.matmul(T.transpose(v), v))
    return mu, cov


def gibbs_posterior(theta, inner, alpha, xq):
    """Gibbs posterior on ``inner`` at temperature ``alpha``, evaluated at ``xq``.

    Returns the prior at ``xq`` when ``inner`` is empty.
    """
    x_s, y_s = _xy(inner)
    mean_q = prior_mean(theta, xq)
    f_q = features(theta, xq)
    k_qq = kernel_from_features(f_q, f_q)
    m = np.shape(y_s)[-1]
    if m == 0:
        return GpPosterior(mean_q, k_qq)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    f_s = features(theta, x_s)
    mu, cov = _condition(mean_q, k_qq, kernel_from_features(f_q, f_s),
                         prior_mean(theta, x_s), kernel_from_features(f_s, f_s),
                         T.as_tensor(y_s), noise_variance(m, alpha))
    return GpPosterior(mu, cov)


def gibbs_error_moments(mu, var_sum, y):
    """``(1/m)(y'y - 2 mu'y + mu'mu + tr K)`` with ``var_sum = tr K``."""
    mu, y = T.as_tensor(mu), T.as_tensor(y)
    m = y.shape[-1]
    resid = T.sub(mu, y)
    return T.div(T.add(T.tsum(T.mul(resid, resid), axis=-1), var_sum), float(m))


def gibbs_empirical_error(post, y):
    """Expected empirical squared loss of ``h ~ post`` on targets ``y``."""
    y = T.as_tensor(y)
    if post.mu.shape != y.shape:
        raise ValueError(f"dimension mismatch: mu {post.mu.shape} vs y {y.shape}")
    if y.shape[-1] == 0:
        return T.Tensor(np.zeros(y.shape[:-1]))
    return gibbs_error_moments(post.mu, T.trace(post.cov), y)


def posterior_error(theta, inner, alpha, data):
    """``L(Q_alpha(inner), data)`` using only posterior marginals at ``data``."""
    x_s, y_s = _xy(inner)
    x_q, y_q = _xy(data)
    m = np.shape(y_s)[-1]
    mean_q = prior_mean(theta, x_q)
    f_q = features(theta, x_q)
    prior_var = T.Tensor(np.full(np.shape(y_q), 0.5))
    if m == 0:
        return gibbs_error_moments(mean_q, T.tsum(prior_var, axis=-1), y_q)
    f_s = features(theta, x_s)
    mu, var = _condition(mean_q, prior_var, kernel_from_features(f_q, f_s),
                         prior_mean(theta, x_s), kernel_from_features(f_s, f_s),
                         T.as_tensor(y_s), noise_variance(m, alpha), diag_only=True)
    return gibbs_error_moments(mu, T.tsum(var, axis=-1), y_q)


def predict_mean(theta, train, alpha, xq):
    with T.no_grad():
        return gibbs_posterior(theta, train, alpha, xq).mu.value


def target_rmse(theta, train, test, alpha):
    """RMSE of the Gibbs-posterior mean (fit on ``train``) on ``test``."""
    x_t, y_t = _xy(test)
    mu = predict_mean(theta, train, alpha, x_t)
    return np.sqrt(np.mean((mu - y_t) ** 2, axis=-1))
