"""Linearized-Laplace log marginal likelihood and its lower bounds.

Every estimator has the form

    log_lik + log_prior + coef * log|P0| - 1/2 * sum_b weight_b * log|A_b| + P/2 log 2pi

where the blocks ``A_b`` are either parametric (``H + P0`` restricted to a
parameter cell, built from a subset of input-output pairs) or kernel blocks
(``K + I`` on a subset of pairs). Gradients w.r.t. log prior precisions and
log observation noise are analytic; invariance parameters use central
finite differences with shared noise draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import partition as part
from .curvature import (DEFAULT_MAX_FULL_GGN_DIM, DEFAULT_MAX_NTK_DIM, Linearization,
                        _check_cap, jacobian_batch, kfac)
from .errors import NotDifferentiable, NotPositiveDefinite
from .linalg import cho_solve, cholesky, inverse_diagonal, logdet_from_cholesky
from .nn import Network, Transformation
from .partition import DataPartition, ParamPartition
from .probmodel import LOG_2PI, Hyperparameters, log_lik_batch, log_prior, precision_diagonal, prior_logdet

ESTIMATOR_KINDS = ("exact", "parametric", "ntk_subset", "parametric_subset", "doubly", "stochastic")

# rows x params per Jacobian chunk when accumulating parametric curvature
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class Model:
    """A network at fixed weights together with its training data."""

    net: Network
    w: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    likelihood: str
    transformation: str = "none"
    n_samples: int = 1
    seed: int = 0
    max_full_ggn_dim: int | None = DEFAULT_MAX_FULL_GGN_DIM
    max_ntk_dim: int | None = DEFAULT_MAX_NTK_DIM
    cache_bytes: int = 1 << 27
    _lin: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        self.w.setflags(write=False)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.net.input_dim)
        if self.likelihood == "gaussian":
            self.Y = np.asarray(self.Y, dtype=np.float64).reshape(self.X.shape[0], self.net.output_dim)
        else:
            self.Y = np.asarray(self.Y).reshape(-1).astype(np.int64)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def C(self) -> int:
        return self.net.output_dim

    @property
    def P(self) -> int:
        return self.net.param_count

    def with_weights(self, w) -> "Model":
        return replace(self, w=w, _lin={})

    def linearize(self, eta=()) -> Linearization:
        key = tuple(float(e) for e in np.atleast_1d(eta)) if self.transformation != "none" else ()
        if key not in self._lin:
            t = Transformation(self.transformation, key)
            self._lin.clear()
            self._lin[key] = Linearization(self.net, self.w, self.X, t, self.n_samples,
                                           self.seed, self.cache_bytes)
        return self._lin[key]


@dataclass
class MargLikComponents:
    log_lik: float
    log_prior: float
    logdet_term: float
    constant: float
    estimator_tag: str
    partition_meta: str = ""
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.log_lik + self.log_prior + self.logdet_term + self.constant


@dataclass
class HyperGradient:
    d_log_prior_precision: np.ndarray
    d_log_sigma2: float | None = None
    d_eta: np.ndarray | None = None
    method_tag: str = "analytic"


# -- block log-determinants ---------------------------------------------------


@dataclass
class _Det:
    """Weighted sum of block log-dets with derivatives w.r.t. per-parameter
    log precision (``g_rho``) and w.r.t. log sigma^2 (``g_s2``)."""

    P: int
    value: float = 0.0
    g_rho: np.ndarray = None
    g_s2: float = 0.0

    def __post_init__(self):
        self.g_rho = np.zeros(self.P)

    def add(self, weight, value, g_rho=None, sl=slice(None), g_s2=0.0):
        self.value += weight * value
        if g_rho is not None:
            self.g_rho[sl] += weight * g_rho
        self.g_s2 += weight * g_s2


def _pair_chunks(model: Model, pairs: np.ndarray):
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // max(model.P, 1))
    for i in range(0, len(pairs), rows_per_chunk):
        yield pairs[i:i + rows_per_chunk]


def _scaled_rows(lin, lik, pairs) -> np.ndarray:
    return jacobian_batch(lin, lik, pairs).scaled_rows()


def _parametric_det(det: _Det, model, lin, lik, pairs, tau, pp: ParamPartition, weight, grad):
    """Add ``weight * sum_s log|H_s + P0_s|`` with H built from ``pairs``."""
    if pp.is_diagonal:
        diag = np.zeros(model.P)
        for chunk in _pair_chunks(model, pairs):
            u = _scaled_rows(lin, lik, chunk)
            diag += np.einsum("ip,ip->p", u, u)
        d = diag + tau
        det.add(weight, float(np.sum(np.log(d))), tau / d, g_s2=-float(np.sum(diag / d)))
        return
    for a, b in pp.ranges:
        _check_cap(b - a, model.max_full_ggn_dim, "GGN block")
    grams = [np.zeros((b - a, b - a)) for a, b in pp.ranges]
    for chunk in _pair_chunks(model, pairs):
        u = _scaled_rows(lin, lik, chunk)
        for g, (a, b) in zip(grams, pp.ranges):
            g += u[:, a:b].T @ u[:, a:b]
    for s, (g, (a, b)) in enumerate(zip(grams, pp.ranges)):
        g[np.diag_indices(b - a)] += tau[a:b]
        try:
            chol = cholesky(g)
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(err.pivot, block=s) from None
        value = logdet_from_cholesky(chol)
        if grad:
            gr = tau[a:b] * inverse_diagonal(chol)
            det.add(weight, value, gr, slice(a, b), g_s2=-float((b - a) - gr.sum()))
        else:
            det.add(weight, value)


def _kernel_det(det: _Det, model, lin, lik, pairs, tau, weight, grad):
    """Add ``weight * log|K_B + I|`` for the kernel on ``pairs``."""
    _check_cap(len(pairs), model.max_ntk_dim, "NTK block")
    if len(pairs) == 0:
        return
    u = _scaled_rows(lin, lik, pairs)
    k = (u / tau) @ u.T
    k[np.diag_indices(len(pairs))] += 1.0
    chol = cholesky(k)
    value = logdet_from_cholesky(chol)
    if grad:
        v = cho_solve(chol, u)
        gr = -np.einsum("ip,ip->p", u, v) / tau
        det.add(weight, value, gr, g_s2=-float(len(pairs) - inverse_diagonal(chol).sum()))
    else:
        det.add(weight, value)


def _kfac_det(det: _Det, model, lin, lik, pairs, h: Hyperparameters, weight, grad):
    if h.prior.mode == "per_parameter":
        raise NotDifferentiable("KFAC log-determinants need a scalar or layerwise prior")
    tau_layer = precision_diagonal(h.prior)[[s.start for s in model.net.layer_slices]]
    for sl, tau, (A, G) in zip(model.net.layer_slices, tau_layer, kfac(lin, lik, pairs)):
        alpha = np.linalg.eigvalsh(A)
        gamma = np.linalg.eigvalsh(G)
        ag = np.outer(alpha, gamma)
        d = ag + tau
        value = float(np.sum(np.log(d)))
        n = sl.stop - sl.start
        det.add(weight, value, np.full(n, float(np.sum(tau / d)) / n), sl,
                g_s2=-float(np.sum(ag / d)))


# -- estimator core -----------------------------------------------------------


def _resolve_param_partition(model: Model, pp):
    if pp is None or pp == "full":
        return part.full_param_partition(model.P)
    if pp == "layerwise":
        return part.layerwise_param_partition(model.net)
    if pp in ("diagonal", "diag"):
        return part.diagonal_param_partition(model.P)
    return pp


def _exact_route(model: Model, route):
    nc = model.N * model.C
    if route is not None:
        return route
    fits_param = model.max_full_ggn_dim is None or model.P <= model.max_full_ggn_dim
    fits_kernel = model.max_ntk_dim is None or nc <= model.max_ntk_dim
    if fits_param and (nc >= model.P or not fits_kernel):
        return "parametric"
    if fits_kernel:
        return "kernel"
    _check_cap(model.P, model.max_full_ggn_dim, "full GGN")
    _check_cap(nc, model.max_ntk_dim, "full NTK")


def _describe(dp: DataPartition | None, pp) -> str:
    bits = []
    if dp is not None:
        sizes = dp.batch_sizes
        bits.append(f"M={len(sizes)} sizes={min(sizes)}..{max(sizes)}" if sizes else "M=0")
    if pp is not None:
        bits.append("kfac" if isinstance(pp, str) else f"S={len(pp.ranges)}")
    return " ".join(bits)


def _estimate(model: Model, h: Hyperparameters, kind: str, *, dp: DataPartition | None = None,
              pp=None, m: int | None = None, structure: str = "ntk", route: str | None = None,
              grad: bool = False):
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator {kind!r}")
    lin = model.linearize(h.eta)
    lik = h.likelihood(model.likelihood)
    tau = precision_diagonal(h.prior)
    P = model.P
    det = _Det(P)
    all_pairs = part.all_pairs(model.N, model.C)
    if pp != "kfac":
        pp = _resolve_param_partition(model, pp) if kind in ("parametric", "doubly") or \
            (kind == "stochastic" and structure != "ntk") else None

    def param_or_kfac(pairs, weight):
        if pp == "kfac":
            _kfac_det(det, model, lin, lik, pairs, h, weight, grad)
        else:
            _parametric_det(det, model, lin, lik, pairs, tau, pp, weight, grad)

    loglik_inputs = None
    if kind == "exact":
        route = _exact_route(model, route)
        tag = f"exact[{route}]"
        if route == "parametric":
            coef = 0.0
            _parametric_det(det, model, lin, lik, all_pairs, tau, part.full_param_partition(P), 1.0, grad)
        else:
            coef = -0.5
            _kernel_det(det, model, lin, lik, all_pairs, tau, 1.0, grad)
    elif kind == "parametric":
        coef = 0.0
        tag = "parametric[kfac]" if pp == "kfac" else f"parametric[S={len(pp.ranges)}]"
        param_or_kfac(all_pairs, 1.0)
    elif kind == "ntk_subset":
        coef = -0.5
        tag = f"ntk_subset[M={len(dp)}]"
        for batch in dp.batches:
            _kernel_det(det, model, lin, lik, batch, tau, 1.0, grad)
    elif kind == "parametric_subset":
        coef = 0.5 * (len(dp) - 1)
        tag = f"parametric_subset[M={len(dp)}]"
        full = part.full_param_partition(P)
        for batch in dp.batches:
            _parametric_det(det, model, lin, lik, batch, tau, full, 1.0, grad)
    elif kind == "doubly":
        coef = 0.5 * (len(dp) - 1)
        tag = f"doubly[M={len(dp)},{'kfac' if pp == 'kfac' else f'S={len(pp.ranges)}'}]"
        for batch in dp.batches:
            param_or_kfac(batch, 1.0)
    else:
        M = len(dp)
        batch = dp.batches[m]
        loglik_inputs = part.inputs_of(batch)
        tag = f"stochastic[{structure},M={M},m={m}]"
        if structure == "ntk":
            coef = -0.5
            _kernel_det(det, model, lin, lik, batch, tau, float(M), grad)
        else:
            coef = 0.5 * (M - 1)
            param_or_kfac(batch, float(M))

    # data and prior terms
    F = lin.outputs if loglik_inputs is None else lin.outputs[loglik_inputs]
    Y = model.Y if loglik_inputs is None else model.Y[loglik_inputs]
    scale = 1.0 if loglik_inputs is None else model.N / max(len(loglik_inputs), 1)
    ll = scale * float(np.sum(log_lik_batch(lik, F, Y))) if len(F) else 0.0
    lp = log_prior(h.prior, model.w)
    p0 = prior_logdet(h.prior)
    comps = MargLikComponents(
        log_lik=ll,
        log_prior=lp,
        logdet_term=coef * p0 - 0.5 * det.value,
        constant=0.5 * P * LOG_2PI,
        estimator_tag=tag,
        partition_meta=_describe(dp, pp),
    )
    if not grad:
        return comps, None
    g_rho = 0.5 - 0.5 * tau * model.w ** 2 + coef - 0.5 * det.g_rho
    g_s2 = None
    if model.likelihood == "gaussian":
        r2 = np.sum((F - Y) ** 2) / lik.sigma2 if len(F) else 0.0
        g_s2 = scale * 0.5 * float(r2 - F.size) - 0.5 * det.g_s2
    return comps, HyperGradient(h.prior.reduce(g_rho), g_s2)


# -- public estimators ----------------------------------------------------------


def exact_la(model: Model, h: Hyperparameters, route: str | None = None) -> MargLikComponents:
    """Linearized Laplace log marginal likelihood with the full GGN/NTK.

    ``route`` forces ``"parametric"`` (P x P) or ``"kernel"`` (NC x NC); by
    default the smaller one is used.
    """
    return _estimate(model, h, "exact", route=route)[0]


def parametric_bound(model: Model, h: Hyperparameters, pp) -> MargLikComponents:
    """Block-diagonal GGN bound. ``pp`` is a ParamPartition, a named partition
    (``full``, ``layerwise``, ``diagonal``) or ``"kfac"``."""
    return _estimate(model, h, "parametric", pp=pp)[0]


def ntk_subset_bound(model: Model, h: Hyperparameters, dp: DataPartition) -> MargLikComponents:
    return _estimate(model, h, "ntk_subset", dp=dp)[0]


def parametric_subset_bound(model: Model, h: Hyperparameters, dp: DataPartition) -> MargLikComponents:
    return _estimate(model, h, "parametric_subset", dp=dp)[0]


def doubly_bound(model: Model, h: Hyperparameters, dp: DataPartition, pp) -> MargLikComponents:
    return _estimate(model, h, "doubly", dp=dp, pp=pp)[0]


def stochastic_estimate(model: Model, h: Hyperparameters, dp: DataPartition, m: int,
                        structure: str = "ntk", pp=None) -> MargLikComponents:
    """Single-batch estimate scaled by the number of batches.

    ``structure="ntk"`` uses the kernel block of batch ``m``; otherwise the
    parametric form with parameter partition ``pp`` (default full, or ``"kfac"``).
    """
    return _estimate(model, h, "stochastic", dp=dp, m=m, structure=structure, pp=pp)[0]


def hyper_gradient(kind: str, model: Model, h: Hyperparameters, *, fd_step: float = 1e-3,
                   **kwargs) -> tuple:
    """Estimate and gradient for one estimator.

    Returns ``(MargLikComponents, HyperGradient)``. Precision and noise
    gradients are analytic; invariance gradients are central differences of
    the estimator total at ``eta +/- fd_step`` with the same noise draws
    (forward differences where ``eta - fd_step`` would be negative).
    """
    comps, g = _estimate(model, h, kind, grad=True, **kwargs)
    if len(h.eta):
        d_eta = np.zeros(len(h.eta))
        for i in range(len(h.eta)):
            hi = np.array(h.eta)
            lo = np.array(h.eta)
            hi[i] += fd_step
            # amplitudes are non-negative; fall back to a forward difference at the boundary
            lo[i] = max(lo[i] - fd_step, 0.0)
            up = _estimate(model, h.replace(eta=tuple(hi)), kind, **kwargs)[0].total
            down = _estimate(model, h.replace(eta=tuple(lo)), kind, **kwargs)[0].total
            d_eta[i] = (up - down) / (hi[i] - lo[i])
        g.d_eta = d_eta
        g.method_tag = "analytic+finite_difference"
    return comps, g


def estimate(kind: str, model: Model, h: Hyperparameters, **kwargs) -> MargLikComponents:
    return _estimate(model, h, kind, **kwargs)[0]


# -- estimator selection from config -------------------------------------------

CURVATURE_KINDS = ("ntk", "ggn_full", "ggn_block", "ggn_diag", "kfac")
PARTITION_KINDS = ("random", "output_wise", "class_grouped", "inputs", "full")
_CURVATURE_PP = {"ggn_full": "full", "ggn_block": "layerwise", "ggn_diag": "diagonal", "kfac": "kfac"}
_CURVATURE_NAME = {"ntk": "ntk", "ggn_full": "ggn", "ggn_block": "block", "ggn_diag": "diag", "kfac": "kfac"}


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator with its curvature structure and data partition strategy.

    ``batch_size`` counts input-output pairs, except for the ``inputs``
    partition where it counts whole inputs.
    """

    kind: str = "exact"
    curvature: str = "ntk"
    partition: str = "random"
    batch_size: int | None = None
    drop_last: bool = True

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator {self.kind!r}")
        if self.curvature not in CURVATURE_KINDS:
            raise ValueError(f"unknown curvature {self.curvature!r}")
        if self.partition not in PARTITION_KINDS:
            raise ValueError(f"unknown partition {self.partition!r}")

    @property
    def uses_data_partition(self) -> bool:
        return self.kind in ("ntk_subset", "parametric_subset", "doubly", "stochastic")

    def param_partition(self):
        if self.kind in ("parametric", "doubly") or (self.kind == "stochastic" and self.curvature != "ntk"):
            return _CURVATURE_PP.get(self.curvature, "full")
        return None

    def data_partition(self, N: int, C: int, labels=None, seed: int = 0) -> DataPartition:
        bs = self.batch_size
        if self.partition == "full" or bs is None:
            return part.single_batch_partition(N, C)
        if self.partition == "random":
            return part.random_data_partition(N, C, min(bs, N * C), seed)
        if self.partition == "output_wise":
            return part.output_wise_partition(N, C, min(bs, N), seed)
        if self.partition == "inputs":
            return part.input_batch_partition(N, C, min(bs, N), seed)
        if labels is None:
            raise ValueError("class_grouped partition needs labels")
        return part.class_grouped_partition(N, C, labels, min(bs, N * C), seed)

    def outputs_per_batch(self, C: int):
        if self.partition == "output_wise" or C == 1:
            return 1
        if self.partition in ("inputs", "full") or not self.uses_data_partition:
            return C
        return "mix"

    def tag(self, N: int, C: int) -> str:
        if self.kind == "exact":
            return "exact"
        if self.kind == "parametric":
            return f"parametric-{_CURVATURE_NAME[self.curvature]}"
        name = _CURVATURE_NAME[self.curvature] if self.kind in ("stochastic", "doubly") else \
            ("ntk" if self.kind == "ntk_subset" else "ggn")
        bs = N if self.partition == "full" or self.batch_size is None else self.batch_size
        prefix = "" if self.kind == "stochastic" else f"{self.kind}:"
        return f"{prefix}{name}-{bs}-{self.outputs_per_batch(C)}"

    def sample_batch(self, dp: DataPartition, rng) -> int:
        sizes = np.array(dp.batch_sizes)
        candidates = np.arange(len(sizes))
        if self.drop_last and len(sizes) > 1:
            candidates = candidates[sizes == sizes.max()]
        return int(rng.choice(candidates))

    def kwargs(self, dp: DataPartition | None, m: int | None = None) -> dict:
        kw = {}
        pp = self.param_partition()
        if pp is not None:
            kw["pp"] = pp
        if self.uses_data_partition:
            kw["dp"] = dp
        if self.kind == "stochastic":
            kw["m"] = m
            kw["structure"] = "ntk" if self.curvature == "ntk" else "ggn"
        return kw
