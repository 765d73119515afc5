import struct

import numpy as np
import pytest

from qahfl.datasets import (
    BadMagicError,
    CountMismatchError,
    TruncatedFileError,
    load_mnist_idx,
    mnist_paths,
    synth_digits,
    write_idx,
)
from qahfl.nn.model import init_params, loss_and_grad, predict_logits, sgd_step
from qahfl.nn.specs import probe_spec

from conftest import requires_mnist


@pytest.fixture
def idx_pair(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(6, 28, 28), dtype=np.uint8)
    labels = np.arange(6) % 10
    paths = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(*paths, imgs, labels)
    return paths, imgs, labels


def test_roundtrip(idx_pair):
    (ip, lp), imgs, labels = idx_pair
    ex = load_mnist_idx(ip, lp)
    assert np.allclose(ex.images, imgs / 255.0)
    assert np.array_equal(ex.labels, labels)
    assert len(load_mnist_idx(ip, lp, limit=0)) == 0
    assert len(load_mnist_idx(ip, lp, limit=4)) == 4


def test_bad_magic(idx_pair):
    (ip, lp), *_ = idx_pair
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_mnist_idx(ip, lp)


def test_truncated(idx_pair):
    (ip, lp), *_ = idx_pair
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError):
        load_mnist_idx(ip, lp)


def test_count_mismatch(idx_pair):
    (ip, lp), *_ = idx_pair
    raw = lp.read_bytes()
    lp.write_bytes(struct.pack(">II", 0x801, 5) + raw[8:13])
    with pytest.raises(CountMismatchError):
        load_mnist_idx(ip, lp)


@requires_mnist
def test_mnist_train_slice():
    ex = load_mnist_idx(*mnist_paths(None, "train"), limit=5000)
    assert len(ex) == 5000
    assert set(np.unique(ex.labels)) <= set(range(10))
    assert ex.images.min() >= 0 and ex.images.max() <= 1


def test_synth_covers_classes_and_is_seeded():
    a = synth_digits(10, np.random.default_rng(2))
    assert sorted(a.labels.tolist()) == list(range(10))
    b = synth_digits(10, np.random.default_rng(2))
    assert np.array_equal(a.images, b.images)
    assert len(synth_digits(0, np.random.default_rng(2))) == 0


def test_synth_is_separable_by_dense_probe():
    data = synth_digits(1000, np.random.default_rng(11))
    spec = probe_spec()
    params = init_params(spec, np.random.default_rng(0))
    x = data.images
    vel = np.zeros_like(params.flat)
    r = np.random.default_rng(1)
    for _ in range(15):
        order = r.permutation(800)
        for s in range(0, 800, 32):
            i = order[s : s + 32]
            _, g, _ = loss_and_grad(params, x[i], data.labels[i])
            sgd_step(params.flat, g, 0.05, vel)
    acc = (predict_logits(params, x[800:]).argmax(1) == data.labels[800:]).mean()
    assert acc >= 0.60
