import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar
from scipy.stats import multivariate_normal

from marglik import partition as part
from marglik.curvature import Linearization, jacobian_batch, ntk_block
from marglik.errors import MemoryCapExceeded, NotDifferentiable
from marglik.estimators import (EstimatorSpec, Model, doubly_bound, estimate, exact_la, hyper_gradient,
                                ntk_subset_bound, parametric_bound, parametric_subset_bound,
                                stochastic_estimate)
from marglik.nn import Network
from marglik.probmodel import Hyperparameters, PriorPrecision, prior_logdet

seeds = st.integers(0, 2 ** 32 - 1)
TOL = 1e-9


def instance(seed, lik=None, n=None, widths=None, prior_mode="layerwise"):
    rng = np.random.default_rng(seed)
    lik = lik or str(rng.choice(["gaussian", "categorical"]))
    widths = widths or (int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4)))
    net = Network(widths, str(rng.choice(["tanh", "relu"])))
    n = n or int(rng.integers(2, 9))
    X = rng.normal(size=(n, widths[0]))
    C = widths[-1]
    Y = rng.normal(size=(n, C)) if lik == "gaussian" else rng.integers(0, C, size=n)
    w = 0.7 * rng.normal(size=net.param_count)
    n_vals = {"scalar": 1, "layerwise": len(net.layers), "per_parameter": net.param_count}[prior_mode]
    prior = PriorPrecision(prior_mode, rng.uniform(-1, 1.5, n_vals), net.layer_param_counts)
    h = Hyperparameters(prior, float(rng.uniform(-1, 0.5)) if lik == "gaussian" else 0.0)
    return Model(net, w, X, Y, lik), h


def evidence_oracle(X, y, tau, sigma2):
    phi = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    cov = sigma2 * np.eye(len(X)) + (phi / tau) @ phi.T
    return float(multivariate_normal(np.zeros(len(X)), cov).logpdf(y))


def mode_oracle(X, y, tau, sigma2):
    phi = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    return np.linalg.solve(phi.T @ phi / sigma2 + np.diag(tau), phi.T @ y / sigma2)


def test_no_data_at_zero_weights_gives_zero():
    net = Network((2, 3, 1))
    h = Hyperparameters(PriorPrecision.create("layerwise", net.layer_param_counts, 2.5), 0.0)
    model = Model(net, np.zeros(net.param_count), np.zeros((0, 2)), np.zeros((0, 1)), "gaussian")
    assert exact_la(model, h).total == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30)
@given(seeds)
def test_linear_gaussian_evidence(seed):
    rng = np.random.default_rng(seed)
    d, N = int(rng.integers(1, 6)), int(rng.integers(1, 20))
    X = rng.normal(size=(N, d))
    y = rng.normal(size=N)
    tau = np.exp(rng.uniform(-1, 1, d + 1))
    s2 = float(np.exp(rng.uniform(-1, 1)))
    net = Network((d, 1), "identity")
    h = Hyperparameters(PriorPrecision("per_parameter", np.log(tau), (d + 1,)), np.log(s2))
    model = Model(net, mode_oracle(X, y, tau, s2), X, y, "gaussian")
    want = evidence_oracle(X, y, tau, s2)
    for route in ("parametric", "kernel"):
        assert exact_la(model, h, route).total == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=40)
@given(seeds)
def test_exact_routes_agree(seed):
    model, h = instance(seed)
    a, b = exact_la(model, h, "parametric"), exact_la(model, h, "kernel")
    assert a.total == pytest.approx(b.total, abs=1e-8)
    assert a.log_lik == b.log_lik and a.log_prior == b.log_prior


@settings(max_examples=30)
@given(seeds)
def test_trivial_partitions_recover_exact(seed):
    model, h = instance(seed)
    ex = exact_la(model, h).total
    single = part.single_batch_partition(model.N, model.C)
    assert parametric_bound(model, h, "full").total == pytest.approx(ex, abs=1e-8)
    assert ntk_subset_bound(model, h, single).total == pytest.approx(ex, abs=1e-8)
    assert parametric_subset_bound(model, h, single).total == pytest.approx(ex, abs=1e-8)
    assert doubly_bound(model, h, single, "full").total == pytest.approx(ex, abs=1e-8)
    assert stochastic_estimate(model, h, single, 0).total == pytest.approx(ex, abs=1e-8)
    assert stochastic_estimate(model, h, single, 0, "ggn").total == pytest.approx(ex, abs=1e-8)


def test_zero_hessian_leaves_prior_term():
    net = Network((2, 3, 1))
    rng = np.random.default_rng(0)
    prior = PriorPrecision("layerwise", [0.4, -0.3], net.layer_param_counts)
    h = Hyperparameters(prior, 0.0)
    model = Model(net, rng.normal(size=net.param_count), rng.normal(size=(6, 2)), np.zeros(6, int), "categorical")
    for route in ("parametric", "kernel"):
        assert exact_la(model, h, route).logdet_term == pytest.approx(-0.5 * prior_logdet(prior), abs=1e-10)


@settings(max_examples=40)
@given(seeds)
def test_parametric_ordering(seed):
    model, h = instance(seed)
    ex = exact_la(model, h).total
    layer = parametric_bound(model, h, "layerwise").total
    diag = parametric_bound(model, h, "diagonal").total
    assert ex >= layer - TOL and layer >= diag - TOL


@settings(max_examples=40)
@given(seeds)
def test_data_ordering_and_identity(seed):
    model, h = instance(seed)
    N, C = model.N, model.C
    coarse = part.random_data_partition(N, C, max(1, (N * C + 1) // 2), seed)
    fine = part.refine_partition(coarse, 2, seed + 1)
    ex = exact_la(model, h).total
    c = ntk_subset_bound(model, h, coarse).total
    f = ntk_subset_bound(model, h, fine).total
    assert ex >= c - TOL and c >= f - TOL
    # the kernel and parametric subset forms are the same quantity
    for dp in (coarse, fine):
        assert parametric_subset_bound(model, h, dp).total == pytest.approx(ntk_subset_bound(model, h, dp).total, abs=1e-8)


@settings(max_examples=30)
@given(seeds)
def test_singleton_partition_closed_form(seed):
    model, h = instance(seed)
    lik = h.likelihood(model.likelihood)
    K = ntk_block(jacobian_batch(Linearization(model.net, model.w, model.X), lik), h.prior)
    singles = part.singleton_partition(model.N, model.C)
    got = ntk_subset_bound(model, h, singles).logdet_term
    want = -0.5 * prior_logdet(h.prior) - 0.5 * np.sum(np.log1p(np.diag(K)))
    assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=30)
@given(seeds)
def test_doubly_special_cases_and_ordering(seed):
    model, h = instance(seed)
    N, C = model.N, model.C
    dp = part.random_data_partition(N, C, max(1, (N * C + 1) // 2), seed)
    single = part.single_batch_partition(N, C)
    assert doubly_bound(model, h, dp, "full").total == pytest.approx(parametric_subset_bound(model, h, dp).total, abs=1e-8)
    assert doubly_bound(model, h, single, "layerwise").total == pytest.approx(
        parametric_bound(model, h, "layerwise").total, abs=1e-8)
    d_layer = doubly_bound(model, h, dp, "layerwise").total
    assert parametric_bound(model, h, "layerwise").total >= d_layer - TOL
    assert parametric_subset_bound(model, h, dp).total >= d_layer - TOL
    assert d_layer >= doubly_bound(model, h, dp, "diagonal").total - TOL


@settings(max_examples=30)
@given(seeds, st.sampled_from([2, 3, 4]), st.sampled_from(["ntk", "ggn"]))
def test_stochastic_mean_equals_subset_bound(seed, M, structure):
    model, h = instance(seed, n=M * 3)
    # whole-input batches of equal size give an exactly unbiased log-likelihood
    dp = part.input_batch_partition(model.N, model.C, 3, seed)
    assert len(dp) == M
    ests = [stochastic_estimate(model, h, dp, m, structure) for m in range(M)]
    ref = ntk_subset_bound(model, h, dp)
    assert np.mean([e.total for e in ests]) == pytest.approx(ref.total, abs=1e-8)
    assert np.mean([e.log_lik for e in ests]) == pytest.approx(ref.log_lik, abs=1e-9)


def fd_check(kind, model, h, step=1e-5, **kw):
    _, g = hyper_gradient(kind, model, h, **kw)
    lv = h.prior.log_values
    for i in range(len(lv)):
        e = np.zeros_like(lv)
        e[i] = step
        up = estimate(kind, model, h.replace(prior=h.prior.with_log_values(lv + e)), **kw).total
        dn = estimate(kind, model, h.replace(prior=h.prior.with_log_values(lv - e)), **kw).total
        fd = (up - dn) / (2 * step)
        assert g.d_log_prior_precision[i] == pytest.approx(fd, rel=1e-5, abs=1e-5)
    if model.likelihood == "gaussian":
        up = estimate(kind, model, h.replace(log_sigma2=h.log_sigma2 + step), **kw).total
        dn = estimate(kind, model, h.replace(log_sigma2=h.log_sigma2 - step), **kw).total
        assert g.d_log_sigma2 == pytest.approx((up - dn) / (2 * step), rel=1e-5, abs=1e-5)
    else:
        assert g.d_log_sigma2 is None


@settings(max_examples=15, deadline=None)
@given(seeds, st.sampled_from(["scalar", "layerwise", "per_parameter"]))
def test_gradients_match_finite_differences(seed, mode):
    model, h = instance(seed, prior_mode=mode)
    N, C = model.N, model.C
    dp = part.random_data_partition(N, C, max(1, (N * C + 1) // 2), seed)
    fd_check("exact", model, h, route="parametric")
    fd_check("exact", model, h, route="kernel")
    fd_check("parametric", model, h, pp="layerwise")
    fd_check("parametric", model, h, pp="diagonal")
    fd_check("ntk_subset", model, h, dp=dp)
    fd_check("parametric_subset", model, h, dp=dp)
    fd_check("doubly", model, h, dp=dp, pp="layerwise")
    fd_check("stochastic", model, h, dp=dp, m=0)
    fd_check("stochastic", model, h, dp=dp, m=0, structure="ggn", pp="diagonal")
    if mode != "per_parameter":
        fd_check("parametric", model, h, pp="kfac")
        fd_check("doubly", model, h, dp=dp, pp="kfac")


def test_gradient_vanishes_at_evidence_optimum():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 1))
    y = 1.5 * X[:, 0] + 0.3 * rng.normal(size=30)
    s2 = 0.09
    res = minimize_scalar(lambda r: -evidence_oracle(X, y, np.full(2, np.exp(r)), s2), bounds=(-8, 8),
                          method="bounded", options={"xatol": 1e-10})
    tau = np.exp(res.x)
    net = Network((1, 1), "identity")
    h = Hyperparameters(PriorPrecision("scalar", [res.x], (2,)), np.log(s2))
    model = Model(net, mode_oracle(X, y, np.full(2, tau), s2), X, y, "gaussian")
    _, g = hyper_gradient("exact", model, h)
    assert abs(g.d_log_prior_precision[0]) < 1e-5


def test_eta_gradient_zero_when_inputs_fixed_by_transform():
    net = Network((2, 4, 3))
    rng = np.random.default_rng(0)
    model = Model(net, rng.normal(size=net.param_count), np.zeros((5, 2)), rng.integers(0, 3, 5),
                  "categorical", "rotation2d", 4, 1)
    h = Hyperparameters(PriorPrecision.create("scalar", net.layer_param_counts), 0.0, (0.3,))
    _, g = hyper_gradient("exact", model, h)
    assert g.method_tag == "analytic+finite_difference"
    assert np.array_equal(g.d_eta, [0.0])
    plain = Model(net, model.w, model.X, model.Y, "categorical")
    _, g0 = hyper_gradient("exact", plain, h.replace(eta=()))
    assert g0.d_eta is None and g0.method_tag == "analytic"


def test_eta_gradient_at_boundary_uses_forward_difference():
    net = Network((2, 3, 2))
    rng = np.random.default_rng(1)
    model = Model(net, rng.normal(size=net.param_count), rng.normal(size=(4, 2)), rng.integers(0, 2, 4),
                  "categorical", "rotation2d", 3, 2)
    h = Hyperparameters(PriorPrecision.create("scalar", net.layer_param_counts), 0.0, (0.0,))
    _, g = hyper_gradient("exact", model, h, fd_step=1e-3)
    up = exact_la(model, h.replace(eta=(1e-3,))).total
    assert g.d_eta[0] == pytest.approx((up - exact_la(model, h).total) / 1e-3, rel=1e-12)


def test_caps_and_not_differentiable():
    model, h = instance(0, "gaussian", n=6, widths=(2, 3, 1))
    small = Model(model.net, model.w, model.X, model.Y, "gaussian", max_full_ggn_dim=2, max_ntk_dim=2)
    with pytest.raises(MemoryCapExceeded):
        exact_la(small, h)
    with pytest.raises(MemoryCapExceeded):
        exact_la(small, h, "kernel")
    ok = Model(model.net, model.w, model.X, model.Y, "gaussian", max_full_ggn_dim=2, max_ntk_dim=None)
    assert exact_la(ok, h).estimator_tag == "exact[kernel]"
    per_param = h.replace(prior=PriorPrecision.create("per_parameter", model.net.layer_param_counts))
    with pytest.raises(NotDifferentiable):
        parametric_bound(model, per_param, "kfac")


def test_model_weights_read_only():
    model, _ = instance(1)
    with pytest.raises(ValueError):
        model.w[0] = 1.0


def test_estimator_spec_tags():
    assert EstimatorSpec().tag(100, 4) == "exact"
    assert EstimatorSpec("parametric", "ggn_block").tag(100, 4) == "parametric-block"
    assert EstimatorSpec("stochastic", "ntk", "random", 50).tag(100, 1) == "ntk-50-1"
    assert EstimatorSpec("stochastic", "kfac", "inputs", 50).tag(100, 4) == "kfac-50-4"
    assert EstimatorSpec("stochastic", "ntk", "output_wise", 50).tag(100, 4) == "ntk-50-1"
    assert EstimatorSpec("ntk_subset", "ntk", "full").tag(100, 1) == "ntk_subset:ntk-100-1"
    with pytest.raises(ValueError):
        EstimatorSpec("bogus")


def test_drop_last_sampling():
    spec = EstimatorSpec("stochastic", "ntk", "random", 4, drop_last=True)
    dp = spec.data_partition(5, 2, seed=0)
    assert dp.batch_sizes == [4, 4, 2]
    rng = np.random.default_rng(0)
    assert all(spec.sample_batch(dp, rng) < 2 for _ in range(50))
