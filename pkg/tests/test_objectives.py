import math

import numpy as np
import pytest

from oracles import central_difference, np_kernel, np_prior, theta_like
from pacmeta import gp
from pacmeta import map_learners as ml
from pacmeta import objectives as obj
from pacmeta.autodiff import grad, no_grad
from pacmeta.tasks import EMPTY, Dataset, TaskEnvironment, sample_meta_train, subsample


def _data(seed, m):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4, 4, size=(m, 1))
    return Dataset(x, 1.5 * np.sin(x[:, 0] - 0.3) + 0.1 * rng.normal(size=m))


def test_w1_single_point_zero_residual():
    beta = 4.0
    val = obj.w1(np.zeros(gp.N_THETA), Dataset(np.array([[1.0]]), np.array([0.0])), beta).item()
    log_z = 0.5 * math.log(math.pi / beta) - 0.5 * math.log(2 * math.pi * (0.5 + 1 / (2 * beta)))
    assert val == pytest.approx(-log_z / beta, rel=1e-13)


def test_w1_times_beta_is_negative_log_partition():
    theta, data = theta_like(0), _data(0, 6)
    for beta in (0.5, 3.0, 100.0):
        lhs = obj.w1(theta, data, beta).item() * beta
        assert lhs == pytest.approx(-gp.log_partition(theta, data, beta).item(), rel=1e-14)


def test_w1_matches_monte_carlo_partition():
    theta, data, beta = theta_like(1), _data(1, 2), 3.0
    mean, phi = np_prior(theta, data.x)
    h = np.random.default_rng(2).multivariate_normal(mean, np_kernel(phi, phi), 1_000_000)
    z = np.mean(np.exp(-beta * np.mean((h - data.y) ** 2, axis=1)))
    assert obj.w1(theta, data, beta).item() == pytest.approx(-math.log(z) / beta, rel=1e-3)


@pytest.mark.parametrize("seed", range(8))
def test_w2_reduces_to_w1(seed):
    theta, data = theta_like(seed), _data(seed, 3 + seed)
    beta = 2.0 + 10 * seed
    diff = obj.w2(theta, (data, data), beta, beta).item() - obj.w1(theta, data, beta).item()
    assert abs(diff) < 1e-10


def test_w2_empty_inner_is_prior_gibbs_error():
    theta, data = theta_like(2), _data(2, 5)
    val = obj.w2(theta, (data, EMPTY), 7.0, 3.0).item()
    prior = gp.gibbs_posterior(theta, EMPTY, 1.0, data.x)
    assert val == pytest.approx(gp.gibbs_empirical_error(prior, data.y).item(), rel=1e-13)


def test_w2_matches_monte_carlo_composition():
    env = TaskEnvironment(m_obs=30)
    [(_, full)] = sample_meta_train(env, 1, seed=4)
    pair = subsample(full, 5, seed=0)
    theta, alpha, beta = theta_like(3), 4.0, 10.0
    mean, phi = np_prior(theta, full.x)
    h = np.random.default_rng(5).multivariate_normal(mean, np_kernel(phi, phi), 1_000_000)
    loss_inner = np.mean((h[:, pair.index] - pair.inner.y) ** 2, axis=1)
    loss_full = np.mean((h - full.y) ** 2, axis=1)
    weights = np.exp(-alpha * loss_inner)
    log_z = math.log(weights.mean())
    err_full = weights @ loss_full / weights.sum()
    err_inner = weights @ loss_inner / weights.sum()
    oracle = -log_z / beta + err_full - alpha / beta * err_inner
    assert obj.w2(theta, pair, alpha, beta).item() == pytest.approx(oracle, rel=1e-2)


@pytest.mark.parametrize("seed", range(4))
def test_objective_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    theta, full = theta_like(seed), _data(seed, 12)
    pair = (full, full.take(np.arange(4)))
    direction = rng.normal(size=gp.N_THETA)

    def check(f):
        def along(t):
            with no_grad():
                return f(theta + t[0] * direction).item()
        fd = central_difference(along, np.zeros(1))[0]
        g = grad(f, theta) @ direction
        assert abs(g - fd) / abs(fd) < 1e-4

    check(lambda th: obj.w1(th, full, 20.0))
    check(lambda th: obj.w2(th, pair, 5.0, 20.0))


def test_batched_w2_matches_loop():
    theta = theta_like(4)
    full = [_data(s, 8) for s in range(3)]
    inner = [d.take(np.arange(3)) for d in full]
    xf, yf = np.stack([d.x for d in full]), np.stack([d.y for d in full])
    xs, ys = np.stack([d.x for d in inner]), np.stack([d.y for d in inner])
    batched = obj.w2(theta, ((xf, yf), (xs, ys)), 2.0, 6.0).value
    loop = [obj.w2(theta, (f, i), 2.0, 6.0).item() for f, i in zip(full, inner)]
    np.testing.assert_allclose(batched, loop, rtol=1e-12)


def test_objectives_reject_bad_temperatures():
    theta, data = theta_like(0), _data(0, 3)
    with pytest.raises(ValueError):
        obj.w1(theta, data, 0.0)
    with pytest.raises(ValueError):
        obj.w2(theta, (data, data), -1.0, 1.0)


# ---------------------------------------------------------------- hyper KL


def test_hyper_kl_at_origin():
    assert obj.hyper_kl(np.zeros(2), 3.0) == pytest.approx(math.log(2 * math.pi * 3.0), rel=1e-15)


def test_hyper_kl_norm_term_scales_quadratically(rng):
    theta = rng.normal(size=7)
    base = obj.hyper_kl(theta, 3.0, include_normalizer=False)
    assert obj.hyper_kl(2 * theta, 3.0, include_normalizer=False) == pytest.approx(4 * base)
    assert base == pytest.approx(theta @ theta / 6.0)


def test_default_hyper_prior_variance():
    assert obj.BoundConfig(n=20, beta=1.0).sigma0_sq == 3.0


def test_xi_with_infinite_lambda():
    cfg = obj.BoundConfig(n=20, beta=150.0)
    assert cfg.xi == 1.0 / (20 * 150.0)
    assert obj.BoundConfig(n=20, beta=150.0, lam=40.0).xi == pytest.approx(1 / 40 + 1 / 3000)


def test_bound_config_validation():
    with pytest.raises(ValueError):
        obj.BoundConfig(n=20, beta=1.0, delta=0.0)
    with pytest.raises(ValueError):
        obj.BoundConfig(n=0, beta=1.0)
    with pytest.raises(ValueError):
        obj.BoundConfig(n=5, beta=1.0, alpha=-2.0)


# ---------------------------------------------------------------- delta lambda


def test_delta_lambda_zero_when_sizes_match():
    env = TaskEnvironment(m=5, m_obs=5)
    est = obj.delta_lambda_estimate(theta_like(0), env, env, math.inf, 150.0, 400, seed=0)
    assert abs(est.value) < 3 * est.stderr


def test_delta_lambda_requires_samples():
    env = TaskEnvironment()
    with pytest.raises(ValueError):
        obj.delta_lambda_estimate(theta_like(0), env, env, math.inf, 1.0, 0, seed=0)


def test_delta_lambda_mean_zero_over_repetitions():
    env = TaskEnvironment(m=5, m_obs=5)
    vals = [obj.delta_lambda_estimate(theta_like(1), env, env, math.inf, 150.0, 40, seed=s).value
            for s in range(30)]
    assert abs(np.mean(vals)) < 3 * np.std(vals, ddof=1) / math.sqrt(30)


@pytest.fixture(scope="module")
def trained_theta():
    env = TaskEnvironment(m=5, m_obs=100)
    cfg = ml.TrainConfig(n=20, iterations=300, beta=3000.0, lr=3e-3)
    params, _ = ml.meta_train("pacoh", env, cfg, seed=0)
    return params.p0


def test_delta_lambda_positive_for_larger_observed_sets(trained_theta):
    target = TaskEnvironment(m=5, m_obs=5)
    observed = TaskEnvironment(m=5, m_obs=100)
    est = obj.delta_lambda_estimate(trained_theta, target, observed, math.inf, 3000.0,
                                    2000, seed=7)
    assert est.value > 3 * est.stderr


# ---------------------------------------------------------------- assembly


def _pairs(env, n, m_prime, seed=0):
    data = sample_meta_train(env, n, seed)
    return [subsample(d, m_prime, seed=seed, key=i) for i, (_, d) in enumerate(data)]


def test_pacmaml_reduction_matches_pacoh_without_mismatch_term():
    env = TaskEnvironment(m=5, m_obs=5)
    pairs = _pairs(env, 20, 5)
    theta = theta_like(2)
    cfg = obj.BoundConfig(n=20, beta=150.0, alpha=150.0)
    pacoh = obj.assemble_bound("pacoh", theta, [p.full for p in pairs], cfg, env, env, n_mc=50)
    pacmaml = obj.assemble_bound("pacmaml", theta, pairs, cfg)
    assert pacmaml.delta_lambda == 0.0
    assert pacmaml.total == pytest.approx(pacoh.total - pacoh.delta_lambda, abs=1e-10)


def test_report_total_is_sum_of_terms():
    env_obs = TaskEnvironment(m=5, m_obs=10)
    pairs = _pairs(env_obs, 20, 5)
    theta = theta_like(3)
    cfg = obj.BoundConfig(n=20, beta=300.0, alpha=15.0, kl_normalizer=True)
    for path, data in (("pacoh", [p.full for p in pairs]), ("pacmaml", pairs)):
        r = obj.assemble_bound(path, theta, data, cfg, env_obs.with_sizes(m_obs=5), env_obs,
                               n_mc=50)
        parts = r.w_term + r.kl_term + r.conf_term + r.delta_lambda
        assert abs(r.total - parts) < 1e-12
        assert r.conf_term == pytest.approx(cfg.xi * math.log(10.0))
        assert r.m_i == 10
        assert "Psi1" in r.neglected
        assert list(r.row()) == list(obj.BoundReport.CSV_FIELDS)


def test_pacmaml_path_requires_pairs_and_alpha():
    env = TaskEnvironment()
    pairs = _pairs(env, 3, 5)
    with pytest.raises(TypeError):
        obj.assemble_bound("pacmaml", theta_like(0), [p.full for p in pairs],
                           obj.BoundConfig(n=3, beta=1.0, alpha=1.0))
    with pytest.raises(ValueError):
        obj.assemble_bound("pacmaml", theta_like(0), pairs, obj.BoundConfig(n=3, beta=1.0))
    with pytest.raises(ValueError):
        obj.assemble_bound("pacoh", theta_like(0), [p.full for p in pairs],
                           obj.BoundConfig(n=3, beta=1.0))
