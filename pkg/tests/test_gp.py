import math

import numpy as np
import pytest

from oracles import central_difference, np_kernel, np_prior, np_regression, rel_err, theta_like
from pacmeta import gp
from pacmeta.autodiff import grad, no_grad
from pacmeta.autodiff import tensor as T
from pacmeta.tasks import EMPTY, Dataset, TaskEnvironment, sample_meta_train, sample_target_tasks


def _data(seed, m):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, size=(m, 1))
    return Dataset(x, np.sin(x[:, 0]) + 0.3 * rng.normal(size=m))


def test_parameter_count():
    assert gp.N_THETA == 1153 + 1186


# ---------------------------------------------------------------- kernel


def test_kernel_single_point():
    k = gp.kernel_matrix(theta_like(0), np.array([[0.3]])).value
    np.testing.assert_array_equal(k, [[0.5]])


def test_kernel_duplicated_point():
    k = gp.kernel_matrix(theta_like(0), np.full((4, 1), -1.2)).value
    np.testing.assert_array_equal(k, np.full((4, 4), 0.5))


@pytest.mark.parametrize("seed", range(5))
def test_kernel_is_psd_symmetric_and_bounded(seed):
    x = np.random.default_rng(seed).uniform(-5, 5, size=(6, 1))
    k = gp.kernel_matrix(theta_like(seed, scale=5.0), x).value
    assert np.linalg.eigvalsh(k).min() >= -1e-8
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(np.diag(k), 0.5)
    assert np.all(k > 0) and np.all(k <= 0.5)


# ---------------------------------------------------------------- log Z


def test_log_partition_single_point_zero_residual():
    theta = np.zeros(gp.N_THETA)        # zero mean function
    alpha = 3.0
    val = gp.log_partition(theta, Dataset(np.array([[0.7]]), np.array([0.0])), alpha).item()
    var = 0.5 + 1 / (2 * alpha)
    expected = 0.5 * math.log(math.pi / alpha) - 0.5 * math.log(2 * math.pi * var)
    assert val == pytest.approx(expected, rel=1e-13)


def test_log_partition_empty_is_zero():
    assert gp.log_partition(theta_like(0), EMPTY, 2.0).item() == 0.0


def test_log_partition_matches_gibbs_integral_by_monte_carlo():
    theta, data, alpha = theta_like(1), _data(1, 2), 4.0
    mean, phi = np_prior(theta, data.x)
    rng = np.random.default_rng(0)
    h = rng.multivariate_normal(mean, np_kernel(phi, phi), size=1_000_000)
    # Z = E_prior exp(-alpha * empirical squared loss)
    z = np.mean(np.exp(-alpha * np.mean((h - data.y) ** 2, axis=1)))
    val = gp.log_partition(theta, data, alpha).item()
    assert abs(math.exp(val) - z) / z < 1e-3


@pytest.mark.parametrize("seed", range(50))
def test_log_partition_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    theta = theta_like(seed)
    data = _data(seed, int(rng.integers(1, 8)))
    alpha = float(rng.uniform(0.5, 50))
    direction = rng.normal(size=gp.N_THETA)

    def along(t):
        with no_grad():
            return gp.log_partition(theta + t[0] * direction, data, alpha).item()

    fd = central_difference(along, np.zeros(1), step=1e-5)[0]
    g = grad(lambda th: gp.log_partition(th, data, alpha), theta) @ direction
    assert abs(g - fd) / max(abs(fd), 1e-8) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_log_partition_non_increasing_in_alpha(seed):
    theta, data = theta_like(seed), _data(seed, 5)
    alphas = np.geomspace(0.1, 1000, 25)
    vals = [gp.log_partition(theta, data, a).item() for a in alphas]
    assert np.all(np.diff(vals) <= 1e-12)


def test_log_partition_rejects_non_positive_alpha():
    with pytest.raises(ValueError):
        gp.log_partition(theta_like(0), _data(0, 3), 0.0)


def test_batched_log_partition_matches_loop():
    theta = theta_like(2)
    data = [_data(s, 4) for s in range(3)]
    x = np.stack([d.x for d in data])
    y = np.stack([d.y for d in data])
    batched = gp.log_partition(theta, (x, y), 2.5).value
    loop = [gp.log_partition(theta, d, 2.5).item() for d in data]
    np.testing.assert_allclose(batched, loop, rtol=1e-12)


# ---------------------------------------------------------------- posterior


def test_empty_inner_returns_prior():
    theta = theta_like(3)
    xq = np.linspace(-2, 2, 4)[:, None]
    post = gp.gibbs_posterior(theta, EMPTY, 5.0, xq)
    mean, phi = np_prior(theta, xq)
    np.testing.assert_allclose(post.mu.value, mean, rtol=1e-12)
    np.testing.assert_allclose(post.cov.value, np_kernel(phi, phi), rtol=1e-12)


def test_large_alpha_interpolates_training_points():
    theta, data = theta_like(4), _data(4, 4)
    post = gp.gibbs_posterior(theta, data, 1e9, data.x)
    np.testing.assert_allclose(post.mu.value, data.y, atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_posterior_is_conjugate_gp_regression(seed):
    theta, data = theta_like(seed), _data(seed, 6)
    xq = np.random.default_rng(seed).uniform(-4, 4, size=(5, 1))
    post = gp.gibbs_posterior(theta, data, 3.0, xq)
    mu, cov = np_regression(theta, data.x, data.y, 3.0, xq)
    assert rel_err(post.mu.value, mu) < 1e-8
    assert rel_err(post.cov.value, cov) < 1e-8


def test_posterior_matches_gibbs_reweighting_oracle():
    theta, data, alpha = theta_like(5), _data(5, 3), 2.0
    xq = np.array([[-1.0], [0.5]])
    xall = np.concatenate([data.x, xq])
    mean, phi = np_prior(theta, xall)
    rng = np.random.default_rng(1)
    h = rng.multivariate_normal(mean, np_kernel(phi, phi), size=1_000_000)
    logw = -alpha * np.mean((h[:, :3] - data.y) ** 2, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    hq = h[:, 3:]
    mu_mc = w @ hq
    cov_mc = (hq - mu_mc).T @ ((hq - mu_mc) * w[:, None])
    post = gp.gibbs_posterior(theta, data, alpha, xq)
    assert rel_err(mu_mc, post.mu.value) < 0.02
    assert rel_err(cov_mc, post.cov.value) < 0.02


# ---------------------------------------------------------------- Gibbs error


def test_gibbs_error_exact_fit_is_zero():
    y = np.array([0.1, -0.4, 2.0])
    post = gp.GpPosterior(T.Tensor(y), T.Tensor(np.zeros((3, 3))))
    assert gp.gibbs_empirical_error(post, y).item() == 0.0


def test_gibbs_error_identity_covariance_is_one():
    post = gp.GpPosterior(T.Tensor(np.zeros(4)), T.Tensor(np.eye(4)))
    assert gp.gibbs_empirical_error(post, np.zeros(4)).item() == 1.0


def test_gibbs_error_matches_monte_carlo():
    theta, data = theta_like(6), _data(6, 5)
    post = gp.gibbs_posterior(theta, data.take(np.arange(3)), 4.0, data.x)
    mu, cov = post.numpy()
    h = np.random.default_rng(0).multivariate_normal(mu, cov, size=100_000)
    mc = np.mean(np.mean((h - data.y) ** 2, axis=1))
    assert abs(gp.gibbs_empirical_error(post, data.y).item() - mc) / mc < 0.01


def test_gibbs_error_permutation_invariant():
    theta, data = theta_like(7), _data(7, 6)
    perm = np.random.default_rng(0).permutation(6)
    a = gp.gibbs_empirical_error(gp.gibbs_posterior(theta, data, 2.0, data.x), data.y).item()
    b = gp.gibbs_empirical_error(
        gp.gibbs_posterior(theta, data, 2.0, data.x[perm]), data.y[perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_gibbs_error_dimension_mismatch():
    post = gp.GpPosterior(T.Tensor(np.zeros(3)), T.Tensor(np.eye(3)))
    with pytest.raises(ValueError):
        gp.gibbs_empirical_error(post, np.zeros(2))


def test_marginal_error_equals_joint_error():
    theta, data = theta_like(8), _data(8, 7)
    inner = data.take(np.arange(4))
    joint = gp.gibbs_empirical_error(gp.gibbs_posterior(theta, inner, 3.0, data.x), data.y)
    marginal = gp.posterior_error(theta, inner, 3.0, data)
    assert marginal.item() == pytest.approx(joint.item(), rel=1e-12)


# ---------------------------------------------------------------- RMSE


def test_rmse_interpolates_noise_free_train_set():
    env = TaskEnvironment(noise=0.0)
    [(_, train, _)] = sample_target_tasks(env, 1, seed=0)
    assert gp.target_rmse(theta_like(0), train, train, 1e9) < 1e-3


def test_rmse_prior_only_zero_mean():
    test = Dataset(np.linspace(-1, 1, 5)[:, None], np.zeros(5))
    assert gp.target_rmse(np.zeros(gp.N_THETA), EMPTY, test, 1.0) == 0.0


def test_rmse_matches_independent_regression_oracle():
    env = TaskEnvironment()
    theta = theta_like(9)
    for _, train, test in sample_target_tasks(env, 3, seed=1000):
        mu, _ = np_regression(theta, train.x, train.y, 10.0, test.x)
        oracle = np.sqrt(np.mean((mu - test.y) ** 2))
        assert gp.target_rmse(theta, train, test, 10.0) == pytest.approx(oracle, rel=1e-10)


def test_gibbs_posterior_noise_uses_inner_size():
    env = TaskEnvironment(m_obs=9)
    [(_, data)] = sample_meta_train(env, 1, seed=0)
    theta = theta_like(10)
    post = gp.gibbs_posterior(theta, data.take(np.arange(3)), 2.0, data.x)
    mu, _ = np_regression(theta, data.x[:3], data.y[:3], 2.0, data.x)
    assert rel_err(post.mu.value, mu) < 1e-10
