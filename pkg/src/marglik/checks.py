"""Property suite over random instances, shared by ``marglik check`` and the tests.

Every check returns a :class:`CheckResult` counting instances that satisfied
the property. Instances are small enough that every estimator can be
evaluated densely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import multivariate_normal

from . import partition as part
from .curvature import ggn, jacobian_batch, kfac, kfac_dense_block
from .estimators import (Model, doubly_bound, exact_la, hyper_gradient, ntk_subset_bound,
                         parametric_bound, parametric_subset_bound, stochastic_estimate)
from .nn import Network
from .probmodel import Hyperparameters, PriorPrecision


@dataclass
class CheckResult:
    name: str
    passed: int = 0
    total: int = 0
    worst: float = 0.0
    measured_only: bool = False

    @property
    def ok(self) -> bool:
        return self.measured_only or self.passed == self.total

    def record(self, ok: bool, err: float = 0.0):
        self.total += 1
        self.passed += int(bool(ok))
        self.worst = max(self.worst, float(err))

    def line(self) -> str:
        status = "INFO" if self.measured_only else ("PASS" if self.ok else "FAIL")
        return f"{status} {self.name}: {self.passed}/{self.total} (worst {self.worst:.3g})"


@dataclass
class Instance:
    model: Model
    h: Hyperparameters


def random_instance(seed: int, max_params: int = 60, max_nc: int = 40, likelihood: str | None = None,
                    nc_multiple: int = 1, prior_mode: str = "layerwise") -> Instance:
    """A small random network, dataset and hyperparameters.

    ``nc_multiple`` forces ``N * C`` to be a multiple of it (for equal-size partitions).
    """
    rng = np.random.default_rng(seed)
    while True:
        d_in = int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        hidden = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(0, 3)))]
        net = Network([d_in] + hidden + [c], str(rng.choice(["tanh", "relu"])))
        if net.param_count <= max_params and c * nc_multiple <= max_nc:
            break
    n_max = max_nc // c
    n = int(rng.integers(2, n_max + 1))
    # smallest input count step that keeps N * C a multiple of nc_multiple
    step = nc_multiple // math.gcd(c, nc_multiple)
    n = max(step, n - n % step)
    lik = likelihood or str(rng.choice(["gaussian", "categorical"]))
    X = rng.normal(size=(n, d_in))
    Y = rng.normal(size=(n, c)) if lik == "gaussian" else rng.integers(0, c, size=n)
    w = 0.7 * rng.normal(size=net.param_count)
    n_vals = {"scalar": 1, "layerwise": len(net.layers), "per_parameter": net.param_count}[prior_mode]
    prior = PriorPrecision(prior_mode, rng.uniform(-1.0, 2.0, size=n_vals), net.layer_param_counts)
    h = Hyperparameters(prior, float(rng.uniform(-1.5, 1.0)) if lik == "gaussian" else 0.0)
    return Instance(Model(net, w, X, Y, lik), h)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / (1.0 + abs(b))


def linear_gaussian_evidence(X, y, tau, sigma2) -> float:
    """Closed-form log evidence of ``y = [X, 1] w + noise`` with ``w ~ N(0, diag(1/tau))``."""
    phi = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    cov = sigma2 * np.eye(X.shape[0]) + (phi / tau) @ phi.T
    return float(multivariate_normal(np.zeros(X.shape[0]), cov).logpdf(y))


def linear_gaussian_mode(X, y, tau, sigma2) -> np.ndarray:
    phi = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    return np.linalg.solve(phi.T @ phi / sigma2 + np.diag(tau), phi.T @ y / sigma2)


def check_evidence(n: int = 50, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    res = CheckResult("evidence exactness (linear-Gaussian)")
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        d = int(rng.integers(1, 20))
        N = int(rng.integers(1, 51))
        X = rng.normal(size=(N, d))
        y = X @ rng.normal(size=d) + 0.3 * rng.normal(size=N)
        tau = np.exp(rng.uniform(-2, 2, size=d + 1))
        sigma2 = float(np.exp(rng.uniform(-2, 1)))
        net = Network((d, 1), "identity")
        prior = PriorPrecision("per_parameter", np.log(tau), net.layer_param_counts)
        w = linear_gaussian_mode(X, y, tau, sigma2)
        model = Model(net, w, X, y, "gaussian")
        got = exact_la(model, Hyperparameters(prior, np.log(sigma2))).total
        err = abs(got - linear_gaussian_evidence(X, y, tau, sigma2))
        res.record(err <= tol, err)
    return res


def check_duality(n: int = 100, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    res = CheckResult("parametric/kernel duality")
    for i in range(n):
        inst = random_instance(seed * 100003 + i)
        a = exact_la(inst.model, inst.h, route="parametric").total
        b = exact_la(inst.model, inst.h, route="kernel").total
        res.record(abs(a - b) <= tol * (1 + abs(a)), _rel(a, b))
    return res


def check_param_ordering(n: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    res = CheckResult("parameter-partition ordering")
    for i in range(n):
        inst = random_instance(seed * 100003 + i)
        ex = exact_la(inst.model, inst.h).total
        lw = parametric_bound(inst.model, inst.h, "layerwise").total
        dg = parametric_bound(inst.model, inst.h, "diagonal").total
        viol = max(lw - ex, dg - lw)
        res.record(viol <= tol, max(viol, 0.0))
    return res


def nested_partitions(N: int, C: int, seed: int) -> tuple:
    """A random 2-batch partition and a nested 4-batch refinement."""
    dp2 = part.random_data_partition(N, C, int(np.ceil(N * C / 2)), seed)
    dp4 = part.refine_partition(dp2, 2, seed + 1)
    return dp2, dp4


def check_data_ordering(n: int = 100, seed: int = 0, tol: float = 1e-10,
                        identity_tol: float = 1e-8) -> tuple:
    """Data-partition ordering with refinement, plus the kernel/parametric subset identity
    evaluated on the same instances. Returns two results."""
    order = CheckResult("data-partition ordering and refinement")
    ident = CheckResult("kernel/parametric subset identity")
    for i in range(n):
        inst = random_instance(seed * 100003 + i, nc_multiple=4)
        m, h = inst.model, inst.h
        dp2, dp4 = nested_partitions(m.N, m.C, seed * 7 + i)
        single = part.singleton_partition(m.N, m.C)
        ex = exact_la(m, h).total
        b2, b4, b1 = (ntk_subset_bound(m, h, dp).total for dp in (dp2, dp4, single))
        viol = max(b2 - ex, b4 - b2, b1 - b4)
        order.record(viol <= tol and part.is_refinement(dp4, dp2), max(viol, 0.0))
        for dp, val in ((dp2, b2), (dp4, b4)):
            p = parametric_subset_bound(m, h, dp).total
            err = abs(val - p) / (1.0 + abs(val))
            ident.record(err <= identity_tol, err)
    return order, ident


def check_doubly(n: int = 100, seed: int = 0, tol: float = 1e-10) -> tuple:
    """Doubly-partitioned bound below both single-partition bounds (block-diagonal
    parameter partitions); KFAC violations are counted separately, not asserted."""
    res = CheckResult("doubly-partitioned ordering")
    kf = CheckResult("kfac below layerwise (measured only)", measured_only=True)
    for i in range(n):
        inst = random_instance(seed * 100003 + i, nc_multiple=2)
        m, h = inst.model, inst.h
        dp = part.random_data_partition(m.N, m.C, max(1, m.N * m.C // 2), seed + i)
        ps = parametric_subset_bound(m, h, dp).total
        worst = -np.inf
        for pp in ("layerwise", "diagonal"):
            d = doubly_bound(m, h, dp, pp).total
            pb = parametric_bound(m, h, pp).total
            worst = max(worst, d - min(ps, pb))
        res.record(worst <= tol, max(worst, 0.0))
        k = doubly_bound(m, h, dp, "kfac").total
        lw = parametric_bound(m, h, "layerwise").total
        kf.record(k <= lw + tol, max(k - lw, 0.0))
    return res, kf


def check_unbiased(n: int = 20, seed: int = 0, tol: float = 1e-10, Ms=(2, 4, 8)) -> CheckResult:
    res = CheckResult("stochastic logdet unbiasedness")
    for i in range(n):
        for M in Ms:
            inst = random_instance(seed * 100003 + i, nc_multiple=M, max_nc=48)
            m, h = inst.model, inst.h
            if m.N * m.C < M:
                continue
            dp = part.random_data_partition(m.N, m.C, m.N * m.C // M, seed + i)
            for structure, det in (("ntk", ntk_subset_bound(m, h, dp)),
                                   ("ggn", parametric_subset_bound(m, h, dp))):
                mean = np.mean([stochastic_estimate(m, h, dp, j, structure).logdet_term for j in range(M)])
                err = abs(mean - det.logdet_term)
                res.record(err <= tol * max(1.0, abs(det.logdet_term)), err)
    return res


_GRAD_CASES = (
    ("exact", {}),
    ("parametric", {"pp": "layerwise"}),
    ("parametric", {"pp": "diagonal"}),
    ("parametric", {"pp": "kfac"}),
    ("ntk_subset", {}),
    ("parametric_subset", {}),
    ("doubly", {"pp": "layerwise"}),
    ("stochastic", {"structure": "ntk"}),
    ("stochastic", {"structure": "ggn", "pp": "layerwise"}),
)


def check_gradients(n: int = 50, seed: int = 0, tol: float = 1e-4, step: float = 1e-4) -> CheckResult:
    """Analytic log-precision and log-noise gradients against central differences.

    The error is measured relative to ``max(1, |fd|)``.
    """
    from .estimators import estimate
    res = CheckResult("hyperparameter gradient fidelity")
    for i in range(n):
        inst = random_instance(seed * 100003 + i, nc_multiple=2)
        m, h = inst.model, inst.h
        kind, kw = _GRAD_CASES[i % len(_GRAD_CASES)]
        kw = dict(kw)
        if kind in ("ntk_subset", "parametric_subset", "doubly", "stochastic"):
            kw["dp"] = part.random_data_partition(m.N, m.C, max(1, m.N * m.C // 2), i)
        if kind == "stochastic":
            kw["m"] = i % len(kw["dp"])
        _, g = hyper_gradient(kind, m, h, **kw)
        worst = 0.0
        lv = h.prior.log_values
        for j in range(len(lv)):
            up, down = lv.copy(), lv.copy()
            up[j] += step
            down[j] -= step
            fd = (estimate(kind, m, h.replace(prior=h.prior.with_log_values(up)), **kw).total
                  - estimate(kind, m, h.replace(prior=h.prior.with_log_values(down)), **kw).total) / (2 * step)
            worst = max(worst, abs(g.d_log_prior_precision[j] - fd) / max(1.0, abs(fd)))
        if m.likelihood == "gaussian":
            fd = (estimate(kind, m, h.replace(log_sigma2=h.log_sigma2 + step), **kw).total
                  - estimate(kind, m, h.replace(log_sigma2=h.log_sigma2 - step), **kw).total) / (2 * step)
            worst = max(worst, abs(g.d_log_sigma2 - fd) / max(1.0, abs(fd)))
        res.record(worst <= tol, worst)
    return res


def check_eta_reproducible(n: int = 5, seed: int = 0) -> CheckResult:
    """Finite-difference invariance gradients are bitwise identical on recomputation."""
    res = CheckResult("invariance gradient reproducibility")
    for i in range(n):
        rng = np.random.default_rng((seed, i, 17))
        net = Network((2, 6, 3))
        X = rng.normal(size=(12, 2))
        Y = rng.integers(0, 3, size=12)
        w = 0.5 * rng.normal(size=net.param_count)
        h = Hyperparameters(PriorPrecision.create("layerwise", net.layer_param_counts, 1.0), 0.0,
                            (float(rng.uniform(0.1, 0.9)),))
        grads = []
        for _ in range(2):
            model = Model(net, w, X, Y, "categorical", "rotation2d", 4, seed + i)
            grads.append(hyper_gradient("exact", model, h)[1].d_eta)
        res.record(np.array_equal(grads[0], grads[1]) and np.all(np.isfinite(grads[0])))
    return res


def check_kfac_single(n: int = 20, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """With one datum and one output, each layer's KFAC block equals its GGN block."""
    res = CheckResult("kfac single-datum exactness")
    for i in range(n):
        rng = np.random.default_rng((seed, i, 29))
        widths = [int(rng.integers(1, 5))] + [int(rng.integers(1, 6)) for _ in range(int(rng.integers(0, 3)))] + [1]
        net = Network(widths, str(rng.choice(["tanh", "relu"])))
        lik = str(rng.choice(["gaussian", "categorical"]))
        X = rng.normal(size=(1, widths[0]))
        Y = rng.normal(size=(1, 1)) if lik == "gaussian" else np.zeros(1, dtype=int)
        w = rng.normal(size=net.param_count)
        h = Hyperparameters(PriorPrecision.create("scalar", net.layer_param_counts), float(rng.uniform(-1, 1)))
        model = Model(net, w, X, Y, lik)
        likelihood = h.likelihood(lik)
        lin = model.linearize()
        full = ggn(jacobian_batch(lin, likelihood), None)
        worst = 0.0
        for sl, (A, G) in zip(net.layer_slices, kfac(lin, likelihood)):
            worst = max(worst, float(np.max(np.abs(kfac_dense_block(A, G) - full[sl, sl]))))
        res.record(worst <= tol, worst)
    return res


def check_bookkeeping(n: int = 20, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    res = CheckResult("component bookkeeping")
    for i in range(n):
        inst = random_instance(seed * 100003 + i, nc_multiple=2)
        m, h = inst.model, inst.h
        dp = part.random_data_partition(m.N, m.C, max(1, m.N * m.C // 2), i)
        for c in (exact_la(m, h), parametric_bound(m, h, "kfac"), ntk_subset_bound(m, h, dp),
                  doubly_bound(m, h, dp, "diagonal"), stochastic_estimate(m, h, dp, 0)):
            err = abs(c.total - (c.log_lik + c.log_prior + c.logdet_term + c.constant))
            res.record(err <= tol * max(1.0, abs(c.total)), err)
    return res


def run_all(instances: int = 20, seed: int = 0) -> list:
    """Every property at ``instances`` random instances each."""
    results = [
        check_evidence(instances, seed),
        check_duality(instances, seed),
        check_param_ordering(instances, seed),
        *check_data_ordering(instances, seed),
        *check_doubly(instances, seed),
        check_unbiased(max(1, instances // 4), seed),
        check_gradients(instances, seed),
        check_eta_reproducible(max(1, instances // 10), seed),
        check_kfac_single(instances, seed),
        check_bookkeeping(instances, seed),
    ]
    return results

