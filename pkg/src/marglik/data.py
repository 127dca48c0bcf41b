"""Synthetic datasets and an IDX (MNIST) reader."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, Truncated
from .nn import Transformation, transform

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs, targets and a boolean train mask (the complement is test).

    ``targets`` are class indices for classification and an (N, C) array for
    regression. ``labels`` are used for class-grouped partitions.
    """

    inputs: np.ndarray
    targets: np.ndarray
    train_mask: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")
        if self.inputs.shape[0] != len(self.targets) or self.train_mask.shape != (self.inputs.shape[0],):
            raise ValueError("inputs, targets and split mask disagree in length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def test_mask(self) -> np.ndarray:
        return ~self.train_mask

    def subset(self, mask) -> tuple:
        return self.inputs[mask], self.targets[mask]

    @property
    def train(self) -> tuple:
        return self.subset(self.train_mask)

    @property
    def test(self) -> tuple:
        return self.subset(self.test_mask)

    @property
    def train_labels(self):
        return None if self.labels is None else self.labels[self.train_mask]


def _split(n_train: int, n_test: int) -> np.ndarray:
    return np.concatenate([np.ones(n_train, bool), np.zeros(n_test, bool)])


def gen_sinusoid(n: int, noise_sd: float, seed: int, n_test: int = 0) -> Dataset:
    """``y = sin(2 pi x) + noise`` with ``x ~ U[0, 1]``; first ``n`` rows are train."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n + n_test, 1))
    y = np.sin(2.0 * np.pi * x) + noise_sd * rng.standard_normal((n + n_test, 1))
    return Dataset(x, y, _split(n, n_test))


def _blob_points(n: int, classes: int, rng, spread: float):
    labels = rng.integers(0, classes, size=n)
    # centres on a ring at increasing radii so classes are not rotation invariant trivially
    angles = 2.0 * np.pi * np.arange(classes) / classes
    radii = 1.0 + 0.5 * np.arange(classes)
    centres = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    x = centres[labels] + spread * rng.standard_normal((n, 2))
    return x, labels


def gen_blobs(n: int, classes: int, seed: int, n_test: int = 0, spread: float = 0.3) -> Dataset:
    """Isotropic 2-D Gaussian clusters."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x, labels = _blob_points(n + n_test, classes, rng, spread)
    return Dataset(x, labels, _split(n, n_test), labels, classes)


def gen_rotated_blobs(n: int, classes: int, max_angle: float, seed: int, n_test: int = 0,
                      spread: float = 0.3) -> Dataset:
    """Blobs with every point rotated about the origin by ``U[-max_angle, max_angle]``.

    The rotation angles are drawn after the points, so ``max_angle = 0``
    reproduces ``gen_blobs`` with the same seed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x, labels = _blob_points(n + n_test, classes, rng, spread)
    theta = rng.uniform(-max_angle, max_angle, size=n + n_test)
    c, s = np.cos(theta), np.sin(theta)
    x = np.stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]], axis=1)
    return Dataset(x, labels, _split(n, n_test), labels, classes)


def _read_idx(path: Path, magic: int):
    raw = path.read_bytes()
    if len(raw) < 4:
        raise Truncated(f"{path}: file shorter than the IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    # the low byte of the magic number is the number of dimensions
    header = 4 + 4 * (magic & 0xFF)
    if len(raw) < header:
        raise Truncated(f"{path}: file shorter than the IDX header")
    dims = np.frombuffer(raw[4:header], dtype=">u4").astype(np.int64)
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise Truncated(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw[header:header + size], dtype=np.uint8).reshape(dims)


def load_idx_mnist(images_path, labels_path, n: int, seed: int, max_angle: float = 0.0,
                   n_test: int = 0) -> Dataset:
    """Random subset of an IDX image/label pair, pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    if n + n_test > images.shape[0]:
        raise ValueError(f"requested {n + n_test} digits, only {images.shape[0]} available")
    rng = np.random.default_rng(seed)
    idx = rng.choice(images.shape[0], size=n + n_test, replace=False)
    x = images[idx].reshape(len(idx), images.shape[1] * images.shape[2]).astype(np.float64) / 255.0
    y = labels[idx].astype(np.int64)
    if max_angle > 0 and len(idx):
        theta = rng.uniform(-max_angle, max_angle, size=len(idx))
        # rotation_image turns by eta * eps * pi, so eps = theta / pi with eta = 1
        rot = Transformation("rotation_image", (1.0,))
        x = np.stack([transform(rot, img, [t / np.pi]) for img, t in zip(x, theta)])
    return Dataset(x.reshape(len(idx), images.shape[1] * images.shape[2]), y, _split(n, n_test), y, 10)
