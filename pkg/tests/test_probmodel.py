import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from marglik.errors import BadTarget, DimMismatch
from marglik.linalg import cholesky_logdet
from marglik.probmodel import (LOG_2PI, Hyperparameters, Likelihood, PriorPrecision, lik_hessian,
                               log_lik, log_lik_batch, log_prior, precision_diagonal, prior_logdet)

seeds = st.integers(0, 2 ** 32 - 1)


def test_loglik_examples():
    assert log_lik(Likelihood("gaussian", 1.0), np.array([0.4]), np.array([0.4])) == pytest.approx(-0.5 * LOG_2PI)
    assert log_lik(Likelihood("categorical"), np.zeros(2), 0) == pytest.approx(-np.log(2.0))


@given(seeds)
def test_gaussian_loglik_density_oracle(seed):
    rng = np.random.default_rng(seed)
    f, y = rng.normal(size=3), rng.normal(size=3)
    s2 = float(np.exp(rng.uniform(-2, 2)))
    expected = norm(f, np.sqrt(s2)).logpdf(y).sum()
    assert log_lik(Likelihood("gaussian", s2), f, y) == pytest.approx(expected, abs=1e-12)


@given(seeds)
def test_categorical_loglik_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=4)
    y = int(rng.integers(0, 4))
    expected = f[y] - np.log(np.sum(np.exp(f)))
    assert log_lik(Likelihood("categorical"), f, y) == pytest.approx(expected, abs=1e-12)


def test_bad_targets():
    lik = Likelihood("categorical")
    with pytest.raises(BadTarget):
        log_lik(lik, np.zeros(3), 3)
    with pytest.raises(BadTarget):
        log_lik(lik, np.zeros(3), -1)
    with pytest.raises(BadTarget):
        log_lik_batch(lik, np.zeros((2, 3)), np.array([0.5, 1.0]))
    with pytest.raises(DimMismatch):
        log_lik(Likelihood("gaussian"), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        Likelihood("gaussian", 0.0)


def test_hessian_examples():
    assert np.allclose(lik_hessian(Likelihood("gaussian", 4.0), np.zeros(1)), [[0.25]])
    assert np.allclose(lik_hessian(Likelihood("categorical"), np.zeros(2)), [[0.25, -0.25], [-0.25, 0.25]])


@given(seeds)
def test_categorical_hessian_matches_fd(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=3)
    y = int(rng.integers(0, 3))
    lik = Likelihood("categorical")
    step = 1e-5

    def grad(v):
        return np.array([(-log_lik(lik, v + step * e, y) + log_lik(lik, v - step * e, y)) / (2 * step)
                         for e in np.eye(3)])

    fd = np.stack([(grad(f + step * e) - grad(f - step * e)) / (2 * step) for e in np.eye(3)])
    assert np.allclose(lik_hessian(lik, f), fd, rtol=1e-6, atol=1e-5)


def test_categorical_hessian_psd_and_zero_row_sums():
    rng = np.random.default_rng(0)
    lik = Likelihood("categorical")
    for _ in range(100):
        lam = lik_hessian(lik, 3 * rng.normal(size=5))
        assert np.linalg.eigvalsh(lam).min() >= -1e-12
        assert np.abs(lam.sum(axis=1)).max() < 1e-12


def test_prior_examples():
    prior = PriorPrecision.create("scalar", (2,), 1.0)
    assert log_prior(prior, np.zeros(2)) == pytest.approx(-LOG_2PI)
    tau = 3.0
    p = PriorPrecision.create("scalar", (4, 3), tau)
    assert log_prior(p, np.zeros(7)) == pytest.approx(3.5 * (np.log(tau) - LOG_2PI))


@given(seeds)
def test_log_prior_factorized_oracle(seed):
    rng = np.random.default_rng(seed)
    sizes = (3, 4, 2)
    prior = PriorPrecision("per_parameter", rng.uniform(-2, 2, 9), sizes)
    w = rng.normal(size=9)
    tau = np.exp(prior.log_values)
    expected = norm(0, 1 / np.sqrt(tau)).logpdf(w).sum()
    assert log_prior(prior, w) == pytest.approx(expected, abs=1e-12)
    bookkeeping = log_prior(prior, w) + 0.5 * np.sum(tau * w * w) - 0.5 * prior_logdet(prior) + 4.5 * LOG_2PI
    assert abs(bookkeeping) < 1e-12


def test_prior_logdet_examples():
    assert prior_logdet(PriorPrecision.create("scalar", (3, 5), 1.0)) == 0.0
    p = PriorPrecision("layerwise", np.log([2.0, 5.0]), (3, 5))
    assert prior_logdet(p) == pytest.approx(3 * np.log(2.0) + 5 * np.log(5.0))
    assert np.allclose(precision_diagonal(p), [2, 2, 2, 5, 5, 5, 5, 5])
    q = PriorPrecision("per_parameter", np.random.default_rng(1).normal(size=8), (3, 5))
    assert prior_logdet(q) == pytest.approx(cholesky_logdet(np.diag(precision_diagonal(q))), abs=1e-12)


def test_expand_reduce_adjoint():
    rng = np.random.default_rng(2)
    for mode, n in (("scalar", 1), ("layerwise", 3), ("per_parameter", 9)):
        p = PriorPrecision.create(mode, (2, 3, 4))
        v, u = rng.normal(size=n), rng.normal(size=9)
        assert np.dot(p.expand(v), u) == pytest.approx(np.dot(v, p.reduce(u)))


def test_prior_validation():
    with pytest.raises(DimMismatch):
        PriorPrecision("layerwise", [0.0], (2, 3))
    with pytest.raises(ValueError):
        PriorPrecision("scalar", [np.inf], (2,))
    with pytest.raises(ValueError):
        Hyperparameters(PriorPrecision.create("scalar", (2,)), np.nan)


def test_hyperparameters_likelihood():
    h = Hyperparameters(PriorPrecision.create("scalar", (2,)), np.log(0.5), (0.3,))
    assert h.likelihood("gaussian").sigma2 == pytest.approx(0.5)
    assert h.likelihood("categorical").kind == "categorical"
    assert h.replace(eta=(0.4,)).eta == (0.4,)
