"""Interleaved optimization of network weights and hyperparameters."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss
from .estimators import EstimatorSpec, Model, hyper_gradient
from .nn import InvariantPredictor, Network, Transformation
from .probmodel import (Hyperparameters, log_lik_batch, log_lik_grad_batch, log_prior,
                        precision_diagonal)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    weight_batch_size: int = 32
    weight_lr: float = 1e-2
    weight_lr_end: float | None = None
    weight_schedule: str = "cosine"
    weight_optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    hyper_lr_precision: float = 0.1
    hyper_lr_sigma2: float = 0.1
    hyper_lr_eta: float = 0.05
    hyper_lr_decay: float = 0.1
    burnin_epochs: int = 10
    hyper_every_k: int = 1
    hyper_steps_per_update: int = 1
    learn_prior: bool = True
    learn_sigma2: bool = True
    learn_eta: bool = True
    estimator: EstimatorSpec = field(default_factory=lambda: EstimatorSpec("stochastic", "ntk", "random", 32))
    n_samples: int = 1
    transformation: str = "none"
    seed: int = 0
    fd_step_eta: float = 1e-3

    def __post_init__(self):
        if self.burnin_epochs < 0 or self.hyper_every_k < 1 or self.epochs < 0:
            raise ValueError("need epochs >= 0, burnin_epochs >= 0 and hyper_every_k >= 1")
        rates = (self.weight_lr, self.hyper_lr_precision, self.hyper_lr_sigma2, self.hyper_lr_eta)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_optimizer not in ("adam", "sgd") or self.weight_schedule not in ("constant", "cosine"):
            raise ValueError("unknown optimizer or schedule")

    def hyper_epochs(self) -> list:
        # every k-th epoch after burn-in: epochs b + k - 1, b + 2k - 1, ...
        return [e for e in range(self.epochs)
                if e >= self.burnin_epochs and (e - self.burnin_epochs + 1) % self.hyper_every_k == 0]


def cosine(lr: float, lr_end: float, step: int, total: int) -> float:
    if total <= 1:
        return lr
    frac = min(step / (total - 1), 1.0)
    return lr_end + 0.5 * (lr - lr_end) * (1.0 + np.cos(np.pi * frac))


class Adam:
    """Adam on a flat vector; ``step`` returns the increment to add."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self, grad, lr) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, size: int, momentum: float = 0.0):
        self.buf = np.zeros(size)
        self.momentum = momentum

    def step(self, grad, lr) -> np.ndarray:
        self.buf = self.momentum * self.buf + grad
        return -lr * self.buf


def make_weight_optimizer(cfg: TrainConfig, size: int):
    if cfg.weight_optimizer == "adam":
        return Adam(size, cfg.betas, cfg.adam_eps)
    return SGD(size, cfg.momentum)


def log_joint_and_grad(predictor: InvariantPredictor, w, X, Y, indices, h: Hyperparameters,
                       likelihood: str, n_total: int):
    """``(N/|B|) sum_B log p(y|x, w, h) + log p(w|h)`` and its weight gradient."""
    lik = h.likelihood(likelihood)
    Yb = Y[indices]
    scale = n_total / len(indices)
    F, _, g = predictor.forward_and_vjp(w, X[indices], indices,
                                        lambda F: scale * log_lik_grad_batch(lik, F, Yb))
    value = scale * float(np.sum(log_lik_batch(lik, F, Yb))) + log_prior(h.prior, w)
    grad = g - precision_diagonal(h.prior) * w
    return value, grad


def weight_step(predictor: InvariantPredictor, w, X, Y, indices, h: Hyperparameters, likelihood: str,
                opt, lr: float, n_total: int | None = None):
    """One optimizer step on the negative log joint of a minibatch.

    Returns ``(new_w, objective)`` where ``objective`` is the log joint before the step.
    """
    n_total = len(X) if n_total is None else n_total
    value, grad = log_joint_and_grad(predictor, w, X, Y, indices, h, likelihood, n_total)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(f"log joint {value} is not finite (|w|_max={np.max(np.abs(w)):.3g})")
    return w + opt.step(-grad, lr), value


class HyperOptimizer:
    """Adam ascent on log precision, log sigma^2 and eta with cosine-decayed rates."""

    def __init__(self, cfg: TrainConfig, h: Hyperparameters, likelihood: str, total_steps: int):
        self.cfg = cfg
        self.total = total_steps
        self.count = 0
        self.learn_s2 = cfg.learn_sigma2 and likelihood == "gaussian"
        self.learn_eta = cfg.learn_eta and cfg.transformation != "none" and len(h.eta) > 0
        self.opt = {
            "prior": Adam(len(h.prior.log_values)),
            "sigma2": Adam(1),
            "eta": Adam(len(h.eta)),
        }

    def _lr(self, base):
        return cosine(base, base * self.cfg.hyper_lr_decay, self.count, self.total)

    def step(self, h: Hyperparameters, g) -> Hyperparameters:
        cfg = self.cfg
        kw = {}
        if cfg.learn_prior:
            lv = h.prior.log_values + self.opt["prior"].step(-g.d_log_prior_precision, self._lr(cfg.hyper_lr_precision))
            kw["prior"] = h.prior.with_log_values(lv)
        if self.learn_s2 and g.d_log_sigma2 is not None:
            kw["log_sigma2"] = h.log_sigma2 + float(self.opt["sigma2"].step(np.array([-g.d_log_sigma2]),
                                                                             self._lr(cfg.hyper_lr_sigma2))[0])
        if self.learn_eta and g.d_eta is not None:
            eta = np.asarray(h.eta) + self.opt["eta"].step(-g.d_eta, self._lr(cfg.hyper_lr_eta))
            kw["eta"] = tuple(np.maximum(eta, 0.0))
        self.count += 1
        return h.replace(**kw) if kw else h


def hyper_step(model: Model, h: Hyperparameters, spec: EstimatorSpec, opt: HyperOptimizer, seed: int,
               labels=None, fd_step_eta: float = 1e-3):
    """Sample a batch, take one ascent step on its estimate. Returns ``(h, comps, ms)``."""
    rng = np.random.default_rng(seed)
    dp = spec.data_partition(model.N, model.C, labels, seed) if spec.uses_data_partition else None
    m = spec.sample_batch(dp, rng) if spec.kind == "stochastic" else None
    t0 = time.perf_counter()
    comps, g = hyper_gradient(spec.kind, model, h, fd_step=fd_step_eta, **spec.kwargs(dp, m))
    ms = 1e3 * (time.perf_counter() - t0)
    return opt.step(h, g), comps, ms


@dataclass
class EpochRecord:
    epoch: int
    train_logjoint: float
    marglik_total: float
    marglik_loglik: float
    marglik_logprior: float
    marglik_logdet: float
    hyper: dict
    hypergrad_ms: float
    test_loglik: float
    test_metric: float


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def hyper_names(self, h: Hyperparameters) -> list:
        return list(hyper_values(h).keys())


def hyper_values(h: Hyperparameters) -> dict:
    out = {}
    vals = h.prior.log_values
    for i, v in enumerate(vals):
        out["log_prec" if len(vals) == 1 else f"log_prec_{i}"] = float(v)
    out["log_sigma2"] = h.log_sigma2
    for i, e in enumerate(h.eta):
        out[f"eta_{i}"] = float(e)
    return out


@dataclass
class TrainedState:
    net: Network
    w: np.ndarray
    epoch: int


def evaluate_test(net, w, h: Hyperparameters, likelihood: str, transformation: str, n_samples: int,
                  seed: int, X, Y):
    """Mean test log-likelihood and accuracy (categorical) or RMSE (gaussian)."""
    if X is None or len(X) == 0:
        return float("nan"), float("nan")
    t = Transformation(transformation, h.eta if transformation != "none" else ())
    pred = InvariantPredictor(net, t, n_samples, seed)
    F = pred.forward(w, X, np.arange(len(X)))
    ll = float(np.mean(log_lik_batch(h.likelihood(likelihood), F, Y)))
    if likelihood == "categorical":
        metric = float(np.mean(np.argmax(F, axis=1) == Y))
    else:
        metric = float(np.sqrt(np.mean((F - Y.reshape(F.shape)) ** 2)))
    return ll, metric


def interleaved_train(cfg: TrainConfig, net: Network, X, Y, likelihood: str, h: Hyperparameters,
                      w0=None, labels=None, X_test=None, Y_test=None, on_epoch=None, model_limits=None):
    """Alternate weight epochs with hyperparameter steps after burn-in.

    ``on_epoch(record)`` is called after every epoch, so a caller can flush
    partial trajectories. Returns ``(TrainedState, Hyperparameters, Trajectory)``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, net.input_dim)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1) if likelihood == "gaussian" \
        else np.asarray(Y).astype(np.int64)
    N = len(X)
    w = net.init_params(cfg.seed) if w0 is None else np.array(w0, dtype=np.float64)
    traj = Trajectory()
    if cfg.epochs == 0:
        return TrainedState(net, w, 0), h, traj
    opt = make_weight_optimizer(cfg, net.param_count)
    bs = min(cfg.weight_batch_size, N)
    steps_per_epoch = int(np.ceil(N / bs))
    total_steps = cfg.epochs * steps_per_epoch
    lr_end = cfg.weight_lr * 0.01 if cfg.weight_lr_end is None else cfg.weight_lr_end
    hyper_epochs = set(cfg.hyper_epochs())
    hopt = HyperOptimizer(cfg, h, likelihood, max(1, len(hyper_epochs) * cfg.hyper_steps_per_update))
    limits = model_limits or {}
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        t = Transformation(cfg.transformation, h.eta if cfg.transformation != "none" else ())
        # fresh invariance noise per epoch for the weight updates
        predictor = InvariantPredictor(net, t, cfg.n_samples, cfg.seed + 7919 * (epoch + 1))
        perm = rng.permutation(N)
        objective = 0.0
        for i in range(0, N, bs):
            idx = perm[i:i + bs]
            lr = cfg.weight_lr if cfg.weight_schedule == "constant" else cosine(cfg.weight_lr, lr_end, step, total_steps)
            w, val = weight_step(predictor, w, X, Y, idx, h, likelihood, opt, lr, N)
            objective += val * len(idx) / N
            step += 1
        comps, ms = None, float("nan")
        if epoch in hyper_epochs:
            model = Model(net, w, X, Y, likelihood, cfg.transformation, cfg.n_samples, cfg.seed, **limits)
            for j in range(cfg.hyper_steps_per_update):
                seed = int(rng.integers(0, 2 ** 63))
                h, comps, ms = hyper_step(model, h, cfg.estimator, hopt, seed, labels, cfg.fd_step_eta)
        test_ll, test_metric = evaluate_test(net, w, h, likelihood, cfg.transformation, cfg.n_samples,
                                             cfg.seed, X_test, Y_test)
        nan = float("nan")
        rec = EpochRecord(
            epoch=epoch,
            train_logjoint=objective,
            marglik_total=comps.total if comps else nan,
            marglik_loglik=comps.log_lik if comps else nan,
            marglik_logprior=comps.log_prior if comps else nan,
            marglik_logdet=comps.logdet_term if comps else nan,
            hyper=hyper_values(h),
            hypergrad_ms=ms,
            test_loglik=test_ll,
            test_metric=test_metric,
        )
        traj.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainedState(net, w, cfg.epochs), h, traj
