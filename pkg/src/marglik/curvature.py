"""GGN, NTK and KFAC curvature built from per-sample Jacobians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MemoryCapExceeded, UnsupportedLayer
from .linalg import BlockDiag, psd_sqrt
from .nn import InvariantPredictor, Network, Transformation
from .partition import ParamPartition, all_pairs
from .probmodel import Likelihood, PriorPrecision, lik_hessian_batch, precision_diagonal

DEFAULT_MAX_FULL_GGN_DIM = 4000
DEFAULT_MAX_NTK_DIM = 4000


class Linearization:
    """A network linearized at fixed weights on a fixed input set.

    Outputs of the (possibly invariant) predictor are computed up front;
    Jacobians are computed per request, or sliced from a cached full tensor
    when it fits in ``cache_bytes``.
    """

    def __init__(self, net: Network, w, X, transformation: Transformation | None = None,
                 n_samples: int = 1, seed: int = 0, cache_bytes: int = 1 << 27):
        self.net = net
        self.w = np.asarray(w, dtype=np.float64)
        self.X = np.asarray(X, dtype=np.float64).reshape(-1, net.input_dim)
        self.predictor = InvariantPredictor(net, transformation, n_samples, seed)
        self.n_inputs = self.X.shape[0]
        self.n_outputs = net.output_dim
        self.outputs = self.predictor.forward(self.w, self.X, np.arange(self.n_inputs))
        self.cache_bytes = cache_bytes
        self._full_jac = None
        self._hessians = {}

    @property
    def n_params(self) -> int:
        return self.net.param_count

    def jacobians(self, inputs, outputs=None) -> np.ndarray:
        """Jacobians of shape (len(inputs), k, P) for the requested outputs."""
        inputs = np.asarray(inputs, dtype=np.int64)
        full_size = self.n_inputs * self.n_outputs * self.n_params * 8
        if self._full_jac is None and 0 < full_size <= self.cache_bytes:
            self._full_jac = self.predictor.jacobian(self.w, self.X, np.arange(self.n_inputs))
        if self._full_jac is not None:
            jac = self._full_jac[inputs]
            return jac if outputs is None else jac[:, np.asarray(outputs, dtype=np.int64)]
        return self.predictor.jacobian(self.w, self.X[inputs], inputs, outputs)

    def hessians(self, lik: Likelihood) -> np.ndarray:
        """Per-input output-space Hessians (N, C, C) at the predictor outputs."""
        key = (lik.kind, lik.sigma2)
        if key not in self._hessians:
            self._hessians = {key: lik_hessian_batch(lik, self.outputs)}
        return self._hessians[key]


@dataclass
class JacobianBatch:
    """Jacobian rows for a batch of (n, c) pairs plus their likelihood Hessians.

    ``scaled`` holds the matching rows of ``Lambda_n^{1/2} J_n``, where the
    symmetric root is taken of each input's full C x C Hessian. Selecting
    rows after scaling keeps per-batch curvature summing to the full GGN.
    ``lam`` is the Hessian restricted to the batch rows (coupling only rows
    of the same n).
    """

    rows: np.ndarray
    row_index: np.ndarray
    inputs: np.ndarray
    point_hessians: np.ndarray
    scaled: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        pos = np.searchsorted(self.inputs, self.row_index[:, 0])
        same = self.row_index[:, 0][:, None] == self.row_index[:, 0][None, :]
        c = self.row_index[:, 1]
        vals = self.point_hessians[pos[:, None], c[:, None], c[None, :]]
        return np.where(same, vals, 0.0)

    def scaled_rows(self) -> np.ndarray:
        """``Lambda^{1/2} J`` restricted to the batch rows."""
        return self.scaled


def jacobian_batch(lin: Linearization, lik: Likelihood, pairs=None) -> JacobianBatch:
    """Jacobian rows at the linearization point for the given (n, c) pairs."""
    pairs = all_pairs(lin.n_inputs, lin.n_outputs) if pairs is None else np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    inputs, inv = np.unique(pairs[:, 0], return_inverse=True)
    hess = lin.hessians(lik)[inputs]
    if lik.kind == "gaussian":
        # Lambda is diagonal, so only the requested outputs are needed
        outs, out_pos = np.unique(pairs[:, 1], return_inverse=True)
        if len(outs) == lin.n_outputs:
            rows = lin.jacobians(inputs)[inv, pairs[:, 1]]
        else:
            rows = lin.jacobians(inputs, outs)[inv, out_pos]
        return JacobianBatch(rows, pairs, inputs, hess, rows / np.sqrt(lik.sigma2))
    jac = lin.jacobians(inputs)
    scaled = np.einsum("ncd,ndp->ncp", psd_sqrt(hess), jac)
    return JacobianBatch(jac[inv, pairs[:, 1]], pairs, inputs, hess, scaled[inv, pairs[:, 1]])


def _check_cap(dim: int, cap: int | None, what: str):
    if cap is not None and dim > cap:
        raise MemoryCapExceeded(f"{what} of dimension {dim} exceeds the cap {cap}")


def ggn(jb: JacobianBatch, max_dim: int | None = DEFAULT_MAX_FULL_GGN_DIM) -> np.ndarray:
    _check_cap(jb.rows.shape[1], max_dim, "full GGN")
    u = jb.scaled_rows()
    return u.T @ u


def ggn_blocks(jb: JacobianBatch, pp: ParamPartition,
               max_dim: int | None = DEFAULT_MAX_FULL_GGN_DIM) -> BlockDiag:
    u = jb.scaled_rows()
    blocks = []
    for a, b in pp.ranges:
        _check_cap(b - a, max_dim, "GGN block")
        blocks.append(u[:, a:b].T @ u[:, a:b])
    return BlockDiag(blocks)


def ggn_diag(jb: JacobianBatch) -> np.ndarray:
    u = jb.scaled_rows()
    return np.einsum("ip,ip->p", u, u)


def ntk_block(jb: JacobianBatch, prior: PriorPrecision,
              max_dim: int | None = DEFAULT_MAX_NTK_DIM) -> np.ndarray:
    """Symmetrized kernel ``Lambda^{1/2} J P0^{-1} J^T Lambda^{1/2}``."""
    _check_cap(jb.rows.shape[0], max_dim, "NTK block")
    u = jb.scaled_rows()
    return (u / precision_diagonal(prior)) @ u.T


def kfac(lin: Linearization, lik: Likelihood, pairs=None) -> list:
    """Per-layer Kronecker factors ``(A_l, G_l)``.

    ``A_l`` averages the bias-augmented layer inputs' outer products over the
    inputs (and transformation samples); ``G_l`` sums the outer products of
    the backpropagated rows of ``Lambda^{1/2}`` over inputs. Only rows for
    outputs present in ``pairs`` contribute to ``G_l``.
    """
    net = lin.net
    for layer in net.layers:
        if layer.activation not in ("tanh", "relu", "identity"):
            raise UnsupportedLayer(layer.activation)
    pairs = all_pairs(lin.n_inputs, lin.n_outputs) if pairs is None else np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    inputs, inv = np.unique(pairs[:, 0], return_inverse=True)
    n = len(inputs)
    mask = np.zeros((n, lin.n_outputs))
    mask[inv, pairs[:, 1]] = 1.0
    # rows of the full per-input root, keeping only the batch's outputs
    root = psd_sqrt(lin.hessians(lik)[inputs]) * mask[:, :, None]
    outs = np.arange(lin.n_outputs)

    Xt = lin.predictor.inputs(lin.X[inputs], inputs)
    s = Xt.shape[1]
    acts, grads = net.forward_cache(lin.w, Xt.reshape(n * s, -1))
    deltas = net.backward_deltas(lin.w, acts, grads, outs)
    root_rep = np.repeat(root, s, axis=0)
    factors = []
    for delta, a_in in zip(deltas, acts[:-1]):
        a_aug = np.concatenate([a_in, np.ones((a_in.shape[0], 1))], axis=1)
        A = a_aug.T @ a_aug / a_aug.shape[0]
        v = np.einsum("mcd,mdi->mci", root_rep, delta).reshape(-1, delta.shape[-1])
        G = v.T @ v / s
        factors.append((A, G))
    return factors


def kfac_dense_block(A: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Expand ``G kron A`` into the flat parameter order of one layer.

    The Kronecker index of weight ``(i, j)`` is ``i * (d_in + 1) + j`` and of
    bias ``i`` is ``i * (d_in + 1) + d_in``; the flat layout stores all
    weights row-major and then the biases.
    """
    d_in = A.shape[0] - 1
    d_out = G.shape[0]
    i, j = np.divmod(np.arange(d_out * d_in), d_in)
    perm = np.concatenate([i * (d_in + 1) + j, np.arange(d_out) * (d_in + 1) + d_in])
    K = np.kron(G, A)
    return K[np.ix_(perm, perm)]
