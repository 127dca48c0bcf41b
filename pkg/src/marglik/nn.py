"""Fully-connected networks with exact per-sample Jacobians, and input
transformations for Monte-Carlo-averaged invariant predictors.

Parameters live in one flat float64 vector. Each layer occupies a
contiguous slice: the weight matrix (row-major, shape ``d_out x d_in``)
followed by the bias. Layer order is preserved.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.linalg import expm

from .errors import BadShape, DimMismatch


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _identity_grad(z, a):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
    "identity": (lambda z: z, _identity_grad),
}


@dataclass(frozen=True)
class Layer:
    d_in: int
    d_out: int
    activation: str = "tanh"

    @property
    def n_params(self) -> int:
        return self.d_out * (self.d_in + 1)


class Network:
    """Architecture of an MLP; parameters are passed in as a flat vector."""

    def __init__(self, widths: Sequence[int], activation: str = "tanh"):
        widths = [int(d) for d in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        n = len(widths) - 1
        self.widths = tuple(widths)
        self.activation = activation
        self.layers = tuple(
            Layer(widths[i], widths[i + 1], activation if i < n - 1 else "identity")
            for i in range(n)
        )
        offsets = np.cumsum([0] + [layer.n_params for layer in self.layers])
        self.layer_slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))

    @classmethod
    def from_layers(cls, layers: Sequence[Layer]) -> "Network":
        net = cls.__new__(cls)
        layers = tuple(layers)
        for a, b in zip(layers[:-1], layers[1:]):
            if a.d_out != b.d_in:
                raise DimMismatch("adjacent layer dimensions do not match")
        if layers[-1].activation != "identity":
            raise ValueError("final layer must be linear")
        net.widths = tuple([layers[0].d_in] + [layer.d_out for layer in layers])
        net.activation = layers[0].activation
        net.layers = layers
        offsets = np.cumsum([0] + [layer.n_params for layer in layers])
        net.layer_slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
        return net

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def param_count(self) -> int:
        return self.layer_slices[-1].stop

    @property
    def layer_param_counts(self) -> tuple:
        return tuple(layer.n_params for layer in self.layers)

    def describe(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "layers": [
                {"d_in": l.d_in, "d_out": l.d_out, "activation": l.activation,
                 "offset": s.start, "n_params": l.n_params}
                for l, s in zip(self.layers, self.layer_slices)
            ],
            "param_count": self.param_count,
        }

    def init_params(self, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        w = np.zeros(self.param_count)
        for layer, sl in zip(self.layers, self.layer_slices):
            n_w = layer.d_in * layer.d_out
            w[sl.start:sl.start + n_w] = rng.normal(0.0, 1.0 / np.sqrt(layer.d_in), n_w)
        return w

    def unflatten(self, w) -> list:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.param_count,):
            raise DimMismatch(f"expected {self.param_count} parameters, got shape {w.shape}")
        out = []
        for layer, sl in zip(self.layers, self.layer_slices):
            chunk = w[sl]
            n_w = layer.d_in * layer.d_out
            out.append((chunk[:n_w].reshape(layer.d_out, layer.d_in), chunk[n_w:]))
        return out

    def flatten(self, params) -> np.ndarray:
        parts = []
        for layer, (W, b) in zip(self.layers, params):
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.shape != (layer.d_out, layer.d_in) or b.shape != (layer.d_out,):
                raise DimMismatch("layer parameter shapes do not match the architecture")
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    # -- batched evaluation ------------------------------------------------

    def _check_inputs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimMismatch(f"expected inputs of shape (N, {self.input_dim}), got {X.shape}")
        return X

    def forward_cache(self, w, X):
        """Forward pass keeping post-activations and activation derivatives."""
        X = self._check_inputs(X)
        acts = [X]
        grads = []
        a = X
        for layer, (W, b) in zip(self.layers, self.unflatten(w)):
            z = a @ W.T + b
            fn, dfn = ACTIVATIONS[layer.activation]
            a = fn(z)
            grads.append(dfn(z, a))
            acts.append(a)
        return acts, grads

    def forward_batch(self, w, X) -> np.ndarray:
        X = self._check_inputs(X)
        a = X
        for layer, (W, b) in zip(self.layers, self.unflatten(w)):
            a = ACTIVATIONS[layer.activation][0](a @ W.T + b)
        return a

    def backward_deltas(self, w, acts, grads, outputs) -> list:
        """Gradients of the selected outputs w.r.t. every layer's pre-activations.

        Returns a list (one entry per layer) of arrays of shape ``(N, k, d_out)``.
        """
        params = self.unflatten(w)
        n = acts[0].shape[0]
        outputs = np.asarray(outputs, dtype=int)
        k = outputs.size
        delta = np.zeros((n, k, self.output_dim))
        delta[:, np.arange(k), outputs] = 1.0
        deltas = [None] * len(self.layers)
        for l in range(len(self.layers) - 1, -1, -1):
            delta = delta * grads[l][:, None, :]
            deltas[l] = delta
            if l > 0:
                delta = delta @ params[l][0]
        return deltas

    def jacobian_batch(self, w, X, outputs=None) -> np.ndarray:
        """Per-sample Jacobians of shape ``(N, k, P)`` for the selected outputs."""
        if outputs is None:
            outputs = np.arange(self.output_dim)
        acts, grads = self.forward_cache(w, X)
        deltas = self.backward_deltas(w, acts, grads, outputs)
        n, k = deltas[-1].shape[:2]
        jac = np.empty((n, k, self.param_count))
        for layer, sl, delta, a_in in zip(self.layers, self.layer_slices, deltas, acts[:-1]):
            n_w = layer.d_in * layer.d_out
            jac[:, :, sl.start:sl.start + n_w] = (
                delta[:, :, :, None] * a_in[:, None, None, :]
            ).reshape(n, k, n_w)
            jac[:, :, sl.start + n_w:sl.stop] = delta
        return jac

    def vjp(self, w, X, grad_out) -> np.ndarray:
        """Sum over the batch of ``grad_out[n] @ J(x_n)``, as a flat vector."""
        acts, grads = self.forward_cache(w, X)
        params = self.unflatten(w)
        out = np.empty(self.param_count)
        delta = np.asarray(grad_out, dtype=np.float64)
        for l in range(len(self.layers) - 1, -1, -1):
            delta = delta * grads[l]
            layer, sl = self.layers[l], self.layer_slices[l]
            n_w = layer.d_in * layer.d_out
            out[sl.start:sl.start + n_w] = (delta.T @ acts[l]).ravel()
            out[sl.start + n_w:sl.stop] = delta.sum(axis=0)
            if l > 0:
                delta = delta @ params[l][0]
        return out


def forward(net: Network, w, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimMismatch(f"expected input of length {net.input_dim}, got shape {x.shape}")
    return net.forward_batch(w, x[None, :])[0]


def per_sample_jacobian(net: Network, w, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimMismatch(f"expected input of length {net.input_dim}, got shape {x.shape}")
    return net.jacobian_batch(w, x[None, :])[0]


# -- transformations ----------------------------------------------------

ETA_DIMS = {"none": 0, "rotation2d": 1, "rotation_image": 1, "affine_image": 6}

# Affine generators in normalized image coordinates (x right, y down, both in
# [-1, 1]), acting on homogeneous coordinates. Order: x-translation,
# y-translation, rotation, x-scale, y-scale, shear.
AFFINE_GENERATORS = np.array([
    [[0, 0, 1], [0, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 0, 1], [0, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    [[1, 0, 0], [0, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 1, 0], [0, 0, 0]],
    [[0, 1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=np.float64)


@dataclass(frozen=True)
class Transformation:
    kind: str = "none"
    eta: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ETA_DIMS:
            raise ValueError(f"unknown transformation {self.kind!r}")
        eta = tuple(float(e) for e in np.atleast_1d(np.asarray(self.eta, dtype=np.float64)))
        if self.kind == "none":
            eta = ()
        elif len(eta) != ETA_DIMS[self.kind]:
            raise BadShape(f"{self.kind} needs {ETA_DIMS[self.kind]} eta components, got {len(eta)}")
        if any(e < 0 for e in eta):
            raise ValueError("eta amplitudes must be non-negative")
        object.__setattr__(self, "eta", eta)

    @property
    def noise_dim(self) -> int:
        return ETA_DIMS[self.kind]


def _square_side(x: np.ndarray) -> int:
    side = int(round(np.sqrt(x.size)))
    if side * side != x.size:
        raise BadShape(f"input of length {x.size} is not a square raster")
    return side


def _resample(img: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Bilinear resampling: output pixel at normalized u reads input at mat @ [u, 1]."""
    side = img.shape[0]
    half = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ux = (cc - half) / half if half > 0 else np.zeros_like(cc, dtype=float)
    uy = (rr - half) / half if half > 0 else np.zeros_like(rr, dtype=float)
    src = np.tensordot(mat[:2], np.stack([ux, uy, np.ones_like(ux)]), axes=1)
    coords = np.stack([src[1] * half + half, src[0] * half + half])
    return ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=0.0)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def transform(t: Transformation, x, eps) -> np.ndarray:
    """Apply ``g(x, eps; eta)`` for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if t.kind == "none":
        return x
    eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    if eps.shape != (t.noise_dim,):
        raise BadShape(f"expected {t.noise_dim} noise components, got shape {eps.shape}")
    eta = np.asarray(t.eta)
    if t.kind == "rotation2d":
        if x.shape != (2,):
            raise BadShape("rotation2d acts on 2-vectors")
        return rotation_matrix(eta[0] * eps[0] * np.pi) @ x
    side = _square_side(x)
    img = x.reshape(side, side)
    if t.kind == "rotation_image":
        theta = eta[0] * eps[0] * np.pi
        mat = np.eye(3)
        # sample the source at R(-theta) u so the content turns by +theta
        mat[:2, :2] = rotation_matrix(-theta)
    else:
        mat = expm(np.tensordot(eta * eps, AFFINE_GENERATORS, axes=1))
    return _resample(img, mat).ravel()


def transform_batch(t: Transformation, X, eps) -> np.ndarray:
    """Transform each row ``X[n]`` with each noise draw ``eps[n, s]``; returns (N, S, D)."""
    X = np.asarray(X, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n, s = eps.shape[:2]
    if t.kind == "none":
        return np.broadcast_to(X[:, None, :], (n, s, X.shape[1])).copy()
    if t.kind == "rotation2d":
        if X.shape[1] != 2:
            raise BadShape("rotation2d acts on 2-vectors")
        theta = t.eta[0] * eps[..., 0] * np.pi
        c, sn = np.cos(theta), np.sin(theta)
        x0, x1 = X[:, None, 0], X[:, None, 1]
        return np.stack([c * x0 - sn * x1, sn * x0 + c * x1], axis=-1)
    out = np.empty((n, s, X.shape[1]))
    for i in range(n):
        for j in range(s):
            out[i, j] = transform(t, X[i], eps[i, j])
    return out


@lru_cache(maxsize=1 << 16)
def _eps_block(seed: int, index: int, n_samples: int, dim: int) -> np.ndarray:
    key = (int(index) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    rng = np.random.Generator(np.random.Philox(key=key))
    out = rng.uniform(-1.0, 1.0, size=(n_samples, dim))
    out.setflags(write=False)
    return out


def draw_eps(seed: int, indices, n_samples: int, dim: int) -> np.ndarray:
    """Uniform[-1, 1] noise of shape (len(indices), S, dim).

    The stream for data point ``n`` is keyed by ``(seed, n)``; sample ``s``
    is the ``s``-th draw of that stream, so draws do not depend on which
    other points are requested.
    """
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if dim == 0:
        return np.zeros((indices.size, n_samples, 0))
    return np.stack([_eps_block(seed, int(i), n_samples, dim) for i in indices]) if indices.size \
        else np.zeros((0, n_samples, dim))


def invariant_forward(net: Network, w, t: Transformation, x, n_samples: int, seed: int,
                      index: int = 0) -> np.ndarray:
    if n_samples < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x, dtype=np.float64)
    if t.kind == "none":
        return forward(net, w, x)
    eps = draw_eps(seed, [index], n_samples, t.noise_dim)
    xt = transform_batch(t, x[None, :], eps)[0]
    return net.forward_batch(w, xt).mean(axis=0)


class InvariantPredictor:
    """Batched invariant predictor: outputs, Jacobians and VJPs averaged over S draws."""

    def __init__(self, net: Network, t: Transformation | None = None, n_samples: int = 1,
                 seed: int = 0):
        self.net = net
        self.t = t or Transformation()
        self.n_samples = n_samples if self.t.kind != "none" else 1
        self.seed = seed

    def inputs(self, X, indices) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.t.kind == "none":
            return X[:, None, :]
        eps = draw_eps(self.seed, indices, self.n_samples, self.t.noise_dim)
        return transform_batch(self.t, X, eps)

    def forward(self, w, X, indices) -> np.ndarray:
        Xt = self.inputs(X, indices)
        n, s, d = Xt.shape
        return self.net.forward_batch(w, Xt.reshape(n * s, d)).reshape(n, s, self.net.output_dim).mean(axis=1)

    def jacobian(self, w, X, indices, outputs=None) -> np.ndarray:
        Xt = self.inputs(X, indices)
        n, s, d = Xt.shape
        jac = self.net.jacobian_batch(w, Xt.reshape(n * s, d), outputs)
        if s == 1:
            return jac
        return jac.reshape(n, s, *jac.shape[1:]).mean(axis=1)

    def forward_and_vjp(self, w, X, indices, grad_fn):
        """Outputs ``F`` and ``sum_n g_n @ J_n`` where ``g = grad_fn(F)``."""
        Xt = self.inputs(X, indices)
        n, s, d = Xt.shape
        flat = Xt.reshape(n * s, d)
        F = self.net.forward_batch(w, flat).reshape(n, s, self.net.output_dim).mean(axis=1)
        g = grad_fn(F)
        g_rep = np.repeat(g / s, s, axis=0)
        return F, g, self.net.vjp(w, flat, g_rep)
