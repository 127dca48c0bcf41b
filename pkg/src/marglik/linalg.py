"""Dense symmetric linear algebra: Cholesky log-determinants and solves.

Everything works in float64 and accumulates log-determinants in the log
domain. Symmetric inputs are checked against a relative tolerance of 1e-10
and symmetrized before factorization.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import BadShape, EigenFailure, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10


def _as_symmetric(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise BadShape(f"expected a square matrix, got shape {m.shape}")
    if m.size == 0:
        return m
    scale = np.max(np.abs(m))
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise BadShape("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


def _potrf(m: np.ndarray):
    c, info = lapack.dpotrf(m, lower=1, clean=1)
    return c, info


def cholesky(m, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``m + jitter * I``.

    On failure the jitter is escalated once to ``max(jitter, 1e-10 * trace/dim)``;
    a second failure raises :class:`NotPositiveDefinite` with the pivot index.
    """
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    m = _as_symmetric(m)
    n = m.shape[0]
    if n == 0:
        return m.copy()
    idx = np.diag_indices(n)
    a = m.copy()
    a[idx] += jitter
    c, info = _potrf(a)
    if info == 0:
        return c
    escalated = max(jitter, 1e-10 * np.trace(m) / n)
    if escalated > jitter:
        a = m.copy()
        a[idx] += escalated
        c, info = _potrf(a)
        if info == 0:
            return c
    raise NotPositiveDefinite(int(info) - 1)


def logdet_from_cholesky(chol: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def cholesky_logdet(m, jitter: float = 0.0) -> float:
    """``log det(m + jitter*I)`` via the Cholesky diagonal."""
    return logdet_from_cholesky(cholesky(m, jitter))


@dataclass
class BlockDiag:
    blocks: list

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        for b in self.blocks:
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise BadShape(f"block of shape {b.shape} is not square")

    @property
    def dim(self) -> int:
        return sum(b.shape[0] for b in self.blocks)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        i = 0
        for b in self.blocks:
            k = b.shape[0]
            out[i:i + k, i:i + k] = b
            i += k
        return out


def blockdiag_logdet(b: BlockDiag | Sequence, jitter: float = 0.0) -> float:
    blocks = b.blocks if isinstance(b, BlockDiag) else list(b)
    total = 0.0
    for i, block in enumerate(blocks):
        try:
            total += cholesky_logdet(block, jitter)
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(err.pivot, block=i) from None
    return total


def kron_factor_logdet(a, g, tau: float) -> float:
    """``log|A kron G + tau*I|`` from the eigenvalues of the two factors."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = _as_symmetric(a)
    g = _as_symmetric(g)
    try:
        alpha = np.linalg.eigvalsh(a)
        gamma = np.linalg.eigvalsh(g)
    except np.linalg.LinAlgError as err:
        raise EigenFailure(str(err)) from None
    return float(np.sum(np.log(np.outer(alpha, gamma) + tau)))


def cho_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = solve_triangular(chol, rhs, lower=True, check_finite=False)
    return solve_triangular(chol.T, y, lower=False, check_finite=False)


def solve_psd(m, rhs, jitter: float = 0.0) -> np.ndarray:
    """Solve ``m X = rhs`` for symmetric positive definite ``m``."""
    rhs = np.asarray(rhs, dtype=np.float64)
    chol = cholesky(m, jitter)
    if rhs.shape[0] != chol.shape[0]:
        raise BadShape(f"rhs has {rhs.shape[0]} rows, matrix has {chol.shape[0]}")
    return cho_solve(chol, rhs)


def inverse_diagonal(chol: np.ndarray) -> np.ndarray:
    """Diagonal of ``(L L^T)^{-1}`` given the lower factor ``L``."""
    linv = solve_triangular(chol, np.eye(chol.shape[0]), lower=True, check_finite=False)
    return np.sum(linv * linv, axis=0)


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (negative round-off eigenvalues clipped)."""
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]) @ np.swapaxes(vecs, -1, -2)
