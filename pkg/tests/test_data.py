import struct

import numpy as np
import pytest

from marglik.data import gen_blobs, gen_rotated_blobs, gen_sinusoid, load_idx_mnist
from marglik.errors import BadMagic, CountMismatch, Truncated


def write_idx(path, magic, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 4, 4))
    images[0] = 255
    labels = np.arange(12) % 10
    img, lab = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(img, 0x803, images)
    write_idx(lab, 0x801, labels)
    return img, lab, images, labels


def test_sinusoid_without_noise():
    ds = gen_sinusoid(50, 0.0, 3, n_test=10)
    x, y = ds.inputs, ds.targets
    assert np.allclose(y, np.sin(2 * np.pi * x), atol=0)
    assert ds.train[0].shape == (50, 1) and ds.test[0].shape == (10, 1)
    assert x.min() >= 0 and x.max() <= 1


def test_generators_deterministic():
    a, b = gen_blobs(40, 3, 5), gen_blobs(40, 3, 5)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)
    assert not np.array_equal(gen_blobs(40, 3, 6).inputs, a.inputs)
    assert np.array_equal(gen_sinusoid(9, 0.1, 1).targets, gen_sinusoid(9, 0.1, 1).targets)


def test_rotated_blobs_zero_angle_matches_blobs():
    a, b = gen_rotated_blobs(30, 4, 0.0, 2, n_test=5), gen_blobs(30, 4, 2, n_test=5)
    assert np.allclose(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_rotated_blobs_preserve_norms():
    a, b = gen_rotated_blobs(30, 4, np.pi, 2), gen_blobs(30, 4, 2)
    assert np.allclose(np.linalg.norm(a.inputs, axis=1), np.linalg.norm(b.inputs, axis=1))
    assert not np.allclose(a.inputs, b.inputs)


def test_generators_reject_empty():
    with pytest.raises(ValueError):
        gen_sinusoid(0, 0.1, 0)
    with pytest.raises(ValueError):
        gen_blobs(0, 2, 0)


def test_idx_load(idx_pair):
    img, lab, images, labels = idx_pair
    ds = load_idx_mnist(img, lab, 12, seed=1)
    assert ds.inputs.shape == (12, 16)
    assert ds.inputs.min() >= 0 and ds.inputs.max() == 1.0
    # each loaded row is a scaled copy of a source image with the right label
    for x, y in zip(ds.inputs, ds.targets):
        k = int(np.argmin(np.abs(images.reshape(12, -1) / 255.0 - x).sum(axis=1)))
        assert np.array_equal(images[k].ravel() / 255.0, x) and labels[k] == y


def test_idx_subset_and_empty(idx_pair):
    img, lab, *_ = idx_pair
    assert len(load_idx_mnist(img, lab, 5, seed=1, n_test=3).train[0]) == 5
    assert len(load_idx_mnist(img, lab, 0, seed=1)) == 0


def test_idx_rotation_changes_images(idx_pair):
    img, lab, *_ = idx_pair
    plain = load_idx_mnist(img, lab, 6, seed=1)
    rot = load_idx_mnist(img, lab, 6, seed=1, max_angle=np.pi)
    assert rot.inputs.shape == plain.inputs.shape and not np.allclose(rot.inputs, plain.inputs)


def test_idx_errors(idx_pair, tmp_path):
    img, lab, images, labels = idx_pair
    # a label file passed as the image file: the error names the offending file
    with pytest.raises(BadMagic, match="labels.idx"):
        load_idx_mnist(lab, lab, 2, 0)
    short = tmp_path / "short.idx"
    short.write_bytes(img.read_bytes()[:-5])
    with pytest.raises(Truncated):
        load_idx_mnist(short, lab, 2, 0)
    few = tmp_path / "few.idx"
    write_idx(few, 0x801, labels[:7])
    with pytest.raises(CountMismatch):
        load_idx_mnist(img, few, 2, 0)
