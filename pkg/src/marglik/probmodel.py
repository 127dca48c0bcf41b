"""Likelihoods, the diagonal Gaussian prior, and hyperparameter containers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import BadTarget, DimMismatch

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Likelihood:
    kind: str
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


def _class_indices(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind == "f":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise BadTarget("categorical targets must be class indices")
    y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise BadTarget(f"class index outside [0, {n_classes})")
    return y


def log_lik_batch(lik: Likelihood, F, Y) -> np.ndarray:
    """Per-sample log-likelihoods for outputs ``F`` of shape (N, C)."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if lik.kind == "gaussian":
        Y = np.asarray(Y, dtype=np.float64).reshape(F.shape[0], -1)
        if Y.shape != F.shape:
            raise DimMismatch(f"targets {Y.shape} vs outputs {F.shape}")
        r = F - Y
        return -0.5 * np.sum(r * r / lik.sigma2 + np.log(2.0 * np.pi * lik.sigma2), axis=1)
    y = _class_indices(np.asarray(Y).reshape(-1), F.shape[1])
    if y.shape[0] != F.shape[0]:
        raise DimMismatch("number of targets and outputs differ")
    return log_softmax(F, axis=1)[np.arange(F.shape[0]), y]


def log_lik(lik: Likelihood, f, y) -> float:
    f = np.asarray(f, dtype=np.float64)
    if lik.kind == "gaussian":
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if y.shape != f.shape:
            raise DimMismatch(f"target shape {y.shape} vs output shape {f.shape}")
        return float(log_lik_batch(lik, f[None], y[None])[0])
    if np.ndim(y) != 0:
        raise BadTarget("categorical target must be a scalar class index")
    return float(log_lik_batch(lik, f[None], np.array([y]))[0])


def log_lik_grad_batch(lik: Likelihood, F, Y) -> np.ndarray:
    """Gradient of each sample's log-likelihood w.r.t. its outputs."""
    F = np.asarray(F, dtype=np.float64)
    if lik.kind == "gaussian":
        return (np.asarray(Y, dtype=np.float64).reshape(F.shape) - F) / lik.sigma2
    y = _class_indices(np.asarray(Y).reshape(-1), F.shape[1])
    g = -softmax(F, axis=1)
    g[np.arange(F.shape[0]), y] += 1.0
    return g


def lik_hessian_batch(lik: Likelihood, F) -> np.ndarray:
    """Stack of C x C negative log-likelihood Hessians, one per row of ``F``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    n, c = F.shape
    if lik.kind == "gaussian":
        return np.broadcast_to(np.eye(c) / lik.sigma2, (n, c, c)).copy()
    p = softmax(F, axis=1)
    lam = -p[:, :, None] * p[:, None, :]
    lam[:, np.arange(c), np.arange(c)] += p
    return lam


def lik_hessian(lik: Likelihood, f) -> np.ndarray:
    return lik_hessian_batch(lik, np.asarray(f, dtype=np.float64)[None])[0]


@dataclass(frozen=True)
class PriorPrecision:
    """Diagonal prior precision, stored as log-precisions.

    ``mode`` is ``scalar`` (one value), ``layerwise`` (one per layer) or
    ``per_parameter``. ``layer_sizes`` gives the parameter count of each
    layer in flat-layout order.
    """

    mode: str
    log_values: np.ndarray
    layer_sizes: tuple

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.log_values, dtype=np.float64)).copy()
        sizes = tuple(int(s) for s in self.layer_sizes)
        expected = {"scalar": 1, "layerwise": len(sizes), "per_parameter": sum(sizes)}
        if self.mode not in expected:
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if vals.shape != (expected[self.mode],):
            raise DimMismatch(f"{self.mode} prior needs {expected[self.mode]} values, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("log precisions must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "log_values", vals)
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def create(cls, mode: str, layer_sizes: Sequence[int], precision=1.0) -> "PriorPrecision":
        sizes = tuple(int(s) for s in layer_sizes)
        n = {"scalar": 1, "layerwise": len(sizes), "per_parameter": sum(sizes)}[mode]
        vals = np.log(np.broadcast_to(np.asarray(precision, dtype=np.float64), (n,)))
        return cls(mode, vals, sizes)

    @property
    def n_params(self) -> int:
        return sum(self.layer_sizes)

    def with_log_values(self, log_values) -> "PriorPrecision":
        return replace(self, log_values=np.asarray(log_values, dtype=np.float64))

    def expand(self, values) -> np.ndarray:
        """Expand per-mode values to one value per parameter."""
        values = np.asarray(values, dtype=np.float64)
        if self.mode == "scalar":
            return np.full(self.n_params, values[0])
        if self.mode == "layerwise":
            return np.repeat(values, self.layer_sizes)
        return values.copy()

    def reduce(self, per_param) -> np.ndarray:
        """Sum a per-parameter quantity back to the mode's shape (adjoint of expand)."""
        per_param = np.asarray(per_param, dtype=np.float64)
        if self.mode == "scalar":
            return np.array([per_param.sum()])
        if self.mode == "layerwise":
            bounds = np.cumsum((0,) + self.layer_sizes)
            return np.array([per_param[a:b].sum() for a, b in zip(bounds[:-1], bounds[1:])])
        return per_param.copy()


def precision_diagonal(prior: PriorPrecision) -> np.ndarray:
    return np.exp(prior.expand(prior.log_values))


def prior_logdet(prior: PriorPrecision) -> float:
    return float(np.sum(prior.expand(prior.log_values)))


def log_prior(prior: PriorPrecision, w) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (prior.n_params,):
        raise DimMismatch(f"expected {prior.n_params} weights, got shape {w.shape}")
    tau = precision_diagonal(prior)
    return float(0.5 * prior_logdet(prior) - 0.5 * prior.n_params * LOG_2PI - 0.5 * np.sum(tau * w * w))


@dataclass(frozen=True)
class Hyperparameters:
    prior: PriorPrecision
    log_sigma2: float = 0.0
    eta: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "log_sigma2", float(self.log_sigma2))
        object.__setattr__(self, "eta", tuple(float(e) for e in np.atleast_1d(self.eta)))
        if not np.isfinite(self.log_sigma2) or not np.all(np.isfinite(self.eta)):
            raise ValueError("hyperparameters must be finite")

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2))

    def likelihood(self, kind: str) -> Likelihood:
        return Likelihood(kind, self.sigma2 if kind == "gaussian" else 1.0)

    def replace(self, **kw) -> "Hyperparameters":
        return replace(self, **kw)
