import numpy as np
import pytest

from oracles import hermite_nodes_2d, line_data, linear_gibbs_posterior, linear_w1_gradient
from pacmeta import gp, mc
from pacmeta.autodiff import MlpSpec
from pacmeta.autodiff import tensor as T
from pacmeta.models import LinearGaussian, RegressionMlp, SoftmaxClassifier, ZeroLoss
from pacmeta.tasks import Dataset, rng_for

LIN = LinearGaussian(dim=2)


# ---------------------------------------------------------------- SGLD


def test_zero_loss_samples_follow_the_prior():
    s2 = 0.7
    cfg = mc.SamplerConfig(step_size=0.05 * s2, n_steps=600, burn_in=100, thin=50,
                           n_chains=1000, sigma_sq=s2, seed=1)
    out = mc.sgld_sample(np.zeros(2), Dataset(np.zeros((1, 1)), np.zeros(1)), 1.0,
                         cfg=cfg, loss=ZeroLoss(2))
    w = out.samples.reshape(-1, 2)
    assert w.shape[0] == 10_000 and out.which == mc.BETA_ON_FULL
    assert np.all(np.abs(w.mean(0)) < 4 * np.sqrt(s2 / len(w)))
    assert np.all(np.abs(w.var(0) - s2) / s2 < 0.1)


def test_single_step_smoke():
    cfg = mc.SamplerConfig(n_steps=1, seed=0)
    out = mc.sgld_sample(np.zeros(3), Dataset(np.zeros((1, 1)), np.zeros(1)), 1.0,
                         cfg=cfg, loss=ZeroLoss(3))
    assert out.samples.shape == (1, 3)
    assert np.all(np.abs(out.samples) < 0.2)


def test_conjugate_posterior_mean():
    data, beta, s2 = line_data(0, 10), 5.0, 0.5
    p = np.array([-1.0, 0.5])
    mean, cov = linear_gibbs_posterior(LIN.design(data.x), data.y, beta, s2, p)
    cfg = mc.SamplerConfig(step_size=0.02, n_steps=400, thin=400, n_chains=2000,
                           sigma_sq=s2, seed=3)
    w = mc.sgld_sample(p, data, beta, cfg=cfg, loss=LIN).samples[:, :]
    se = np.sqrt(np.diag(cov) / len(w))
    assert np.all(np.abs(w.mean(0) - mean) < 3 * se)


def test_sampler_is_reproducible():
    data = line_data(1, 6)
    cfg = mc.SamplerConfig(n_steps=30, seed=9, n_chains=3)
    a = mc.sgld_sample(np.zeros(2), data, 4.0, cfg=cfg, loss=LIN).samples
    b = mc.sgld_sample(np.zeros(2), data, 4.0, cfg=cfg, loss=LIN).samples
    np.testing.assert_array_equal(a, b)


def test_sampler_respects_adaptation_mask():
    model = SoftmaxClassifier(n_way=3, hidden=(4,))
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(6, 2)), np.arange(6) % 3)
    out = mc.sgld_sample(model.init(rng), data, 10.0, cfg=mc.SamplerConfig(n_steps=5), loss=model)
    frozen = model.adapt_mask() == 0
    assert np.all(out.samples[..., frozen] == 0.0)
    assert np.any(out.samples[..., ~frozen] != 0.0)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        mc.SamplerConfig(step_size=-1.0)
    with pytest.raises(ValueError):
        mc.SamplerConfig(n_steps=0)
    with pytest.raises(ValueError):
        mc.SamplerConfig(n_steps=5, burn_in=5)
    assert mc.SamplerConfig(sigma_sq=2.0).epsilon == 2e-3


def test_non_finite_loss_aborts_sampling():
    class Bad(LinearGaussian):
        def __call__(self, v, x, y):
            return T.div(super().__call__(v, x, y), 0.0)

    with np.errstate(all="ignore"), pytest.raises(T.NumericFailure):
        mc.sgld_sample(np.ones(2), line_data(0, 3), 1.0, loss=Bad())


# ---------------------------------------------------------------- W1 estimator


def test_w1_estimator_zero_loss():
    g = mc.grad_w1_estimator(np.ones(2), line_data(0, 3), 2.0, np.ones((5, 2)), ZeroLoss(2))
    np.testing.assert_array_equal(g, np.zeros(2))


def test_w1_estimator_single_sample_is_that_partial():
    data, p, w = line_data(2, 5), np.array([0.3, -0.2]), np.array([[0.1, 0.4]])
    direct = T.grad(lambda q: LIN(T.add(q, w[0]), data.x, data.y), p)
    np.testing.assert_array_equal(mc.grad_w1_estimator(p, data, 3.0, w, LIN), direct)


def test_w1_integrand_is_unbiased_under_exact_posterior():
    data, beta, s2 = line_data(3, 8), 4.0, 0.8
    p = np.array([0.5, -1.0])
    mean, cov = linear_gibbs_posterior(LIN.design(data.x), data.y, beta, s2, p)
    nodes, weights = hermite_nodes_2d(mean, cov)
    integrand = np.array([mc.grad_w1_estimator(p, data, beta, w[None], LIN) for w in nodes])
    quad = weights @ integrand
    analytic = linear_w1_gradient(p, data, beta, s2)
    assert np.linalg.norm(quad - analytic) / np.linalg.norm(analytic) < 1e-6


def test_w1_estimator_with_sgld_samples():
    data, beta, s2 = line_data(4, 10), 5.0, 0.5
    p = np.array([-1.0, 0.5])
    cfg = mc.SamplerConfig(step_size=0.02, n_steps=300, thin=300, n_chains=10_000,
                           sigma_sq=s2, seed=4)
    samples = mc.sgld_sample(p, data, beta, cfg=cfg, loss=LIN)
    assert len(samples) == 10_000
    g = mc.grad_w1_estimator(p, data, beta, samples, LIN)
    analytic = linear_w1_gradient(p, data, beta, s2)
    assert np.linalg.norm(g - analytic) / np.linalg.norm(analytic) < 0.05


# ---------------------------------------------------------------- W2 estimator


def _analytic_w2_grad(p, full, inner, alpha, beta, s2):
    psi, psis = LIN.design(full.x), LIN.design(inner.x)
    ms = len(inner.y)
    cov = np.linalg.inv(np.eye(2) / s2 + (2 * alpha / ms) * psis.T @ psis)
    gain = cov @ ((2 * alpha / ms) * psis.T)

    def w2(q):
        v = T.add(q, T.matmul(gain, T.sub(inner.y, T.matmul(psis, q))))

        def err(ps, yy):
            r = T.sub(T.matmul(ps, v), yy)
            return T.div(T.add(T.tsum(T.mul(r, r)), float(np.trace(ps @ cov @ ps.T))),
                         float(len(yy)))

        log_z = gp.log_partition_moments(T.matmul(psis, q), s2 * psis @ psis.T, inner.y, alpha)
        return T.add(T.sub(err(psi, full.y), T.mul(err(psis, inner.y), alpha / beta)),
                     T.mul(log_z, -1.0 / beta))

    return T.grad(w2, p)


def test_w2_estimator_cancels_when_posteriors_coincide():
    model = RegressionMlp(MlpSpec((1, 5, 1)))
    rng = np.random.default_rng(0)
    p = model.init(rng)
    data = Dataset(rng.uniform(-2, 2, size=(6, 1)), rng.normal(size=6))
    w = 0.1 * rng.normal(size=(4, p.size))
    g = mc.grad_w2_estimator(p, (data, data), 3.0, 3.0, w, w, model)
    np.testing.assert_array_equal(g, mc.grad_w1_estimator(p, data, 3.0, w, model))


def test_w2_estimator_close_to_analytic_gradient_for_tight_posteriors():
    full = line_data(5, 20)
    inner = full.take(np.arange(5))
    alpha, beta, s2 = 1.0, 4.0, 0.02
    p = np.array([-1.0, 0.5])
    psi, psis = LIN.design(full.x), LIN.design(inner.x)
    # exact posterior expectations by quadrature (integrands are linear in w)
    ma, ca = linear_gibbs_posterior(psis, inner.y, alpha, s2, p)
    mb, cb = linear_gibbs_posterior(psi, full.y, beta, s2, p)
    na, wa = hermite_nodes_2d(ma, ca)
    nb, wb = hermite_nodes_2d(mb, cb)
    first = sum(w * mc.grad_w1_estimator(p, full, beta, n[None], LIN) for n, w in zip(na, wa))
    on_inner_a = sum(w * mc.grad_w1_estimator(p, inner, beta, n[None], LIN) for n, w in zip(na, wa))
    on_inner_b = sum(w * mc.grad_w1_estimator(p, inner, beta, n[None], LIN) for n, w in zip(nb, wb))
    est = first + alpha / beta * (on_inner_b - on_inner_a)
    analytic = _analytic_w2_grad(p, full, inner, alpha, beta, s2)
    assert np.linalg.norm(est - analytic) / np.linalg.norm(analytic) < 0.05
    # the same combination through the estimator with point masses at the means
    point = mc.grad_w2_estimator(p, (full, inner), alpha, beta, ma[None], mb[None], LIN)
    np.testing.assert_allclose(point, est, rtol=1e-10)


def test_one_sample_mode_is_finite():
    model = SoftmaxClassifier(n_way=3, hidden=(8,))
    cfg = mc.ClassifierConfig(n_way=3, alpha=50.0, inner_steps=4)
    rng = np.random.default_rng(1)
    p = model.init(rng)
    full = Dataset(rng.normal(size=(12, 2)), np.arange(12) % 3)
    inner = full.take(np.arange(6))
    wa = mc.adapted_sample(p, inner, cfg.alpha, cfg, model, rng_for(0, 1))
    wb = mc.adapted_sample(p, full, cfg.beta, cfg, model, rng_for(0, 2))
    g = mc.grad_w2_estimator(p, (full, inner), cfg.alpha, cfg.beta, wa[None], wb[None], model)
    assert g.shape == p.shape and np.all(np.isfinite(g))


# ---------------------------------------------------------------- surrogate


def test_surrogate_equals_exact_for_constant_difference():
    data = line_data(6, 5)
    w = np.random.default_rng(0).normal(size=(7, 2))
    exact, surrogate = mc.surrogate_gap(np.zeros(2), (data, data), 2.0, 5.0, w, ZeroLoss(2))
    assert exact == surrogate


def test_surrogate_single_sample_equality():
    data = line_data(7, 6)
    exact, surrogate = mc.surrogate_gap(np.ones(2), (data, data.take([0, 1])), 2.0, 5.0,
                                        np.array([[0.3, 0.1]]), LIN)
    assert exact == pytest.approx(surrogate, abs=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_jensen_direction(seed):
    rng = np.random.default_rng(seed)
    full = line_data(seed, int(rng.integers(3, 12)))
    inner = full.take(np.arange(min(3, len(full.y))))
    alpha = float(rng.uniform(0.1, 20))
    beta = float(rng.uniform(alpha, 60))
    w = rng.normal(scale=rng.uniform(0.1, 2), size=(int(rng.integers(2, 30)), 2))
    exact, surrogate = mc.surrogate_gap(rng.normal(size=2), (full, inner), alpha, beta, w, LIN)
    assert exact >= surrogate


def test_surrogate_survives_extreme_scales():
    full = line_data(8, 5)
    w = np.array([[0.0, 0.0], [50.0, -50.0]])
    exact, surrogate = mc.surrogate_gap(np.zeros(2), (full, full.take([0])), 1.0, 1e4, w, LIN)
    assert np.isfinite(exact) and np.isfinite(surrogate) and exact >= surrogate


# ---------------------------------------------------------------- classification


def _tiny_classifier_cfg(**kw):
    base = dict(n=10, iterations=6, batch_size=3, log_every=1, alpha=200.0)
    base.update(kw)
    return mc.ClassifierConfig(**base)


def test_untrained_accuracy_is_chance_level():
    cfg = mc.ClassifierConfig()
    params, trace = mc.pacmaml_train_classifier(_tiny_classifier_cfg(iterations=0), seed=0)
    assert trace == []
    acc = mc.adaptation_accuracy("none", params.p0, mc.classifier_targets(cfg), cfg)
    assert abs(acc.mean() - 1 / cfg.n_way) < 0.05


@pytest.mark.parametrize("train", [mc.pacmaml_train_classifier, mc.fomaml_train_classifier])
def test_classifier_training_is_deterministic(train):
    cfg = _tiny_classifier_cfg()
    (pa, ta), (pb, tb) = train(cfg, seed=2), train(cfg, seed=2)
    np.testing.assert_array_equal(pa.p0, pb.p0)
    assert [(r.objective, r.grad_norm) for r in ta] == [(r.objective, r.grad_norm) for r in tb]
    assert len(ta) == cfg.iterations


def test_temperatures_and_step_sizes():
    cfg = mc.ClassifierConfig(alpha=1000.0, m_obs=20, m_prime=5, inner_lr=0.5, inner_steps=6)
    assert cfg.beta == 4000.0
    s = cfg.sampler(cfg.alpha, seed=0)
    assert s.epsilon == pytest.approx(1e-3) and s.thin == s.n_steps == 6


def test_unknown_adaptation_method():
    cfg = mc.ClassifierConfig()
    model = SoftmaxClassifier()
    with pytest.raises(ValueError):
        mc.adaptation_accuracy("bmaml", model.init(np.random.default_rng(0)),
                               mc.classifier_targets(cfg, count=2), cfg, model)
