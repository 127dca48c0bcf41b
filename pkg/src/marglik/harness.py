"""Commands behind the ``marglik`` CLI: grid, pareto, train and check."""
from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

import numpy as np

from . import checks
from .config import grid_values
from .data import Dataset, gen_blobs, gen_rotated_blobs, gen_sinusoid, load_idx_mnist
from .errors import ConfigError, DimMismatch, Truncated
from .estimators import EstimatorSpec, Model, doubly_bound, estimate, hyper_gradient, ntk_subset_bound
from .nn import Network
from .probmodel import Hyperparameters, PriorPrecision
from .trainer import TrainConfig, hyper_values, interleaved_train

GRID_COLUMNS = ["hyper_value", "estimator_tag", "total", "log_lik", "log_prior", "logdet_term", "eval_ms"]
PARETO_COLUMNS = ["estimator_tag", "batch_size", "outputs_per_batch", "mean_total", "sd_total", "mean_ms",
                  "bound_total"]
TRAJECTORY_FIXED = ["epoch", "train_logjoint", "marglik_total", "marglik_loglik", "marglik_logprior",
                    "marglik_logdet"]
TRAJECTORY_TAIL = ["hypergrad_ms", "test_loglik", "test_metric"]


# -- building blocks from a resolved config -------------------------------------


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    seed = cfg["seed"] if d["seed"] is None else d["seed"]
    if d["kind"] == "sinusoid":
        return gen_sinusoid(d["n"], d["noise_sd"], seed, d["n_test"])
    if d["kind"] == "blobs":
        return gen_blobs(d["n"], d["classes"], seed, d["n_test"], d["spread"])
    if d["kind"] == "rotated_blobs":
        return gen_rotated_blobs(d["n"], d["classes"], d["max_angle"], seed, d["n_test"], d["spread"])
    return load_idx_mnist(d["images"], d["labels"], d["n"], seed, d["max_angle"], d["n_test"])


def build_network(cfg: dict) -> Network:
    return Network(cfg["network"]["widths"], cfg["network"]["activation"])


def initial_hyper(cfg: dict, net: Network) -> Hyperparameters:
    hc = cfg["hyper"]
    prior = PriorPrecision.create(hc["prior_mode"], net.layer_param_counts, hc["prior_precision"])
    eta = tuple(hc["eta"]) if hc["transformation"] != "none" else ()
    return Hyperparameters(prior, math.log(hc["sigma2"]), eta)


def training_spec(cfg: dict) -> EstimatorSpec:
    p = cfg["partition"]
    return EstimatorSpec(cfg["estimator"]["kind"], cfg["curvature"]["kind"], p["kind"], p["batch_size"],
                         p["drop_last"])


def entry_spec(entry: dict) -> EstimatorSpec:
    return EstimatorSpec(entry["kind"], entry["curvature"], entry["partition"], entry["batch_size"],
                         entry["drop_last"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    hc = cfg["hyper"]
    return TrainConfig(
        epochs=t["epochs"], weight_batch_size=t["weight_batch_size"], weight_lr=t["weight_lr"],
        weight_lr_end=t["weight_lr_end"], weight_schedule=t["weight_schedule"],
        weight_optimizer=t["weight_optimizer"], momentum=t["momentum"],
        hyper_lr_precision=t["hyper_lr_precision"], hyper_lr_sigma2=t["hyper_lr_sigma2"],
        hyper_lr_eta=t["hyper_lr_eta"], hyper_lr_decay=t["hyper_lr_decay"],
        burnin_epochs=t["burnin_epochs"], hyper_every_k=t["hyper_every_k"],
        hyper_steps_per_update=t["hyper_steps_per_update"], learn_prior=hc["learn_prior"],
        learn_sigma2=hc["learn_sigma2"], learn_eta=hc["learn_eta"], estimator=training_spec(cfg),
        n_samples=hc["n_samples"], transformation=hc["transformation"], seed=cfg["seed"],
        fd_step_eta=t["fd_step_eta"],
    )


def model_limits(cfg: dict) -> dict:
    return dict(cfg["limits"])


def make_model(cfg: dict, net: Network, w, X, Y, **overrides) -> Model:
    hc = cfg["hyper"]
    kw = {**model_limits(cfg), **overrides}
    return Model(net, w, X, Y, cfg["likelihood"], hc["transformation"], hc["n_samples"], cfg["seed"], **kw)


# -- serialization ---------------------------------------------------------------


def fmt(x) -> str:
    """Round-trip exact float formatting (17 significant digits)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def output_path(out_dir: Path, command: str, suffix: str = ".csv") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    path = out_dir / f"{command}_{stamp}{suffix}"
    k = 1
    while path.exists():
        path = out_dir / f"{command}_{stamp}_{k}{suffix}"
        k += 1
    return path


def write_meta(out_dir: Path, command: str, cfg: dict, outputs: list):
    meta = {"command": command, "config": cfg, "outputs": [str(p) for p in outputs]}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_state(base: Path, net: Network, w, h: Hyperparameters) -> tuple:
    """Weights as little-endian float64 in ``<base>.bin`` plus a JSON layout sidecar."""
    bin_path = base.with_suffix(".bin")
    json_path = base.with_suffix(".json")
    bin_path.write_bytes(np.asarray(w, dtype="<f8").tobytes())
    layout = {
        "dtype": "<f8",
        "param_count": net.param_count,
        "network": net.describe(),
        "hyper": {
            "prior_mode": h.prior.mode,
            "log_prior_precision": [float(v) for v in h.prior.log_values],
            "log_sigma2": h.log_sigma2,
            "eta": list(h.eta),
        },
    }
    json_path.write_text(json.dumps(layout, indent=2) + "\n")
    return bin_path, json_path


def load_state(path) -> tuple:
    """Inverse of :func:`save_state`; ``path`` may name the .bin or the .json file."""
    base = Path(path).with_suffix("")
    layout = json.loads(base.with_suffix(".json").read_text())
    raw = base.with_suffix(".bin").read_bytes()
    if len(raw) != 8 * layout["param_count"]:
        raise Truncated(f"{base.with_suffix('.bin')}: expected {8 * layout['param_count']} bytes, found {len(raw)}")
    net = Network(layout["network"]["widths"], layout["network"]["activation"])
    if net.param_count != layout["param_count"]:
        raise DimMismatch("state layout and network disagree on the parameter count")
    w = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    hy = layout["hyper"]
    prior = PriorPrecision(hy["prior_mode"], hy["log_prior_precision"], net.layer_param_counts)
    return net, w, Hyperparameters(prior, hy["log_sigma2"], tuple(hy["eta"]))


# -- commands ----------------------------------------------------------------------


def trained_state(cfg: dict, ds: Dataset):
    """Load the configured state, or train one with the configured schedule."""
    if cfg["state"]:
        net, w, h = load_state(cfg["state"])
        if list(net.describe()["widths"]) != list(cfg["network"]["widths"]):
            raise ConfigError("state network does not match the configured network")
        return net, w, h
    net = build_network(cfg)
    X, Y = ds.train
    state, h, _ = interleaved_train(train_config(cfg), net, X, Y, cfg["likelihood"], initial_hyper(cfg, net),
                                    labels=ds.train_labels, model_limits=model_limits(cfg))
    return net, state.w, h


def _set_axis(h: Hyperparameters, axis: str, value: float) -> Hyperparameters:
    if axis == "log_precision":
        return h.replace(prior=h.prior.with_log_values(np.full(len(h.prior.log_values), value)))
    if axis == "log_sigma2":
        return h.replace(log_sigma2=value)
    i = int(axis.split("_")[1])
    if i >= len(h.eta):
        raise ConfigError(f"grid axis {axis} but the transformation has {len(h.eta)} eta components")
    eta = list(h.eta)
    eta[i] = value
    return h.replace(eta=tuple(eta))


def _spec_kwargs(spec: EstimatorSpec, entry: dict, model: Model, labels, seed: int) -> dict:
    dp = spec.data_partition(model.N, model.C, labels, seed) if spec.uses_data_partition else None
    m = spec.sample_batch(dp, np.random.default_rng(seed)) if spec.kind == "stochastic" else None
    kw = spec.kwargs(dp, m)
    if spec.kind == "exact" and entry.get("route"):
        kw["route"] = entry["route"]
    return kw


def cmd_grid(cfg: dict, out_dir=None) -> Path:
    out_dir = Path(out_dir or cfg["output_dir"])
    ds = build_dataset(cfg)
    X, Y = ds.train
    net, w, h0 = trained_state(cfg, ds)
    model = make_model(cfg, net, w, X, Y)
    timing = cfg["report"]["record_timing"]
    axis = cfg["grid"]["axis"]
    rows = []
    for value in grid_values(cfg["grid"]):
        h = _set_axis(h0, axis, float(value))
        for entry in cfg["grid"]["estimators"]:
            spec = entry_spec(entry)
            kw = _spec_kwargs(spec, entry, model, ds.train_labels, cfg["seed"])
            t0 = time.perf_counter()
            c = estimate(spec.kind, model, h, **kw)
            ms = 1e3 * (time.perf_counter() - t0) if timing else float("nan")
            rows.append([float(value), spec.tag(model.N, model.C), c.total, c.log_lik, c.log_prior,
                         c.logdet_term, ms])
    path = output_path(out_dir, "grid")
    write_csv(path, GRID_COLUMNS, rows)
    write_meta(out_dir, "grid", cfg, [path])
    return path


def _deterministic_bound(spec: EstimatorSpec, model: Model, h: Hyperparameters, kw: dict) -> float:
    if spec.kind != "stochastic":
        return estimate(spec.kind, model, h, **kw).total
    if kw["structure"] == "ntk":
        return ntk_subset_bound(model, h, kw["dp"]).total
    return doubly_bound(model, h, kw["dp"], kw.get("pp", "full")).total


def cmd_pareto(cfg: dict, out_dir=None) -> Path:
    """Mean value and time of one estimate plus its gradient, per matrix cell.

    Each repetition builds a fresh linearization so Jacobian cost is part of
    the timing. ``bound_total`` is the deterministic bound the cell's
    estimator targets (itself for non-stochastic estimators).
    """
    out_dir = Path(out_dir or cfg["output_dir"])
    ds = build_dataset(cfg)
    X, Y = ds.train
    net, w, h = trained_state(cfg, ds)
    timing = cfg["report"]["record_timing"]
    reps = cfg["pareto"]["repetitions"]
    rows = []
    for entry in cfg["pareto"]["cells"]:
        spec = entry_spec(entry)
        totals, times, bounds = [], [], []
        for r in range(reps):
            seed = cfg["seed"] + r
            model = make_model(cfg, net, w, X, Y, cache_bytes=0)
            kw = _spec_kwargs(spec, entry, model, ds.train_labels, seed)
            t0 = time.perf_counter()
            c, _ = hyper_gradient(spec.kind, model, h, **kw)
            times.append(1e3 * (time.perf_counter() - t0))
            totals.append(c.total)
            bounds.append(_deterministic_bound(spec, make_model(cfg, net, w, X, Y), h, kw))
        sd = float(np.std(totals, ddof=1)) if reps > 1 else 0.0
        bs = model.N if spec.batch_size is None or spec.partition == "full" else spec.batch_size
        rows.append([spec.tag(model.N, model.C), bs, spec.outputs_per_batch(model.C), float(np.mean(totals)),
                     sd, float(np.mean(times)) if timing else float("nan"), float(np.mean(bounds))])
    path = output_path(out_dir, "pareto")
    write_csv(path, PARETO_COLUMNS, rows)
    write_meta(out_dir, "pareto", cfg, [path])
    return path


def cmd_train(cfg: dict, out_dir=None) -> tuple:
    """Train, streaming one CSV row per epoch; returns (csv path, state .bin path)."""
    out_dir = Path(out_dir or cfg["output_dir"])
    ds = build_dataset(cfg)
    X, Y = ds.train
    Xt, Yt = ds.test
    net = build_network(cfg)
    h0 = initial_hyper(cfg, net)
    header = TRAJECTORY_FIXED + list(hyper_values(h0)) + TRAJECTORY_TAIL
    timing = cfg["report"]["record_timing"]
    path = output_path(out_dir, "train")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        fh.flush()

        def on_epoch(rec):
            ms = rec.hypergrad_ms if timing else float("nan")
            writer.writerow([fmt(v) for v in (rec.epoch, rec.train_logjoint, rec.marglik_total,
                                              rec.marglik_loglik, rec.marglik_logprior, rec.marglik_logdet,
                                              *rec.hyper.values(), ms, rec.test_loglik, rec.test_metric)])
            fh.flush()

        state, h, _ = interleaved_train(train_config(cfg), net, X, Y, cfg["likelihood"], h0,
                                        labels=ds.train_labels, X_test=Xt if len(Xt) else None,
                                        Y_test=Yt if len(Yt) else None, on_epoch=on_epoch,
                                        model_limits=model_limits(cfg))
    bin_path, json_path = save_state(path.with_name(path.stem + "_state"), net, state.w, h)
    write_meta(out_dir, "train", cfg, [path, bin_path, json_path])
    return path, bin_path


def cmd_check(cfg: dict | None = None, out=print) -> int:
    """Run the property suite; returns the process exit status."""
    instances = cfg["check"]["instances"] if cfg else 20
    seed = cfg["seed"] if cfg else 0
    results = checks.run_all(instances, seed)
    for r in results:
        out(r.line())
    failed = [r for r in results if not r.ok]
    out(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def write_csv(path: Path, header: list, rows: list):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
