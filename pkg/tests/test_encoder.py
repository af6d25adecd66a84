"""Encoder forward/backward checks: architecture shape contract, the
zero-input epsilon guard, translation covariance, finite-difference
gradients and checkpoint round-trips."""

import numpy as np
import pytest

from meshpose.encoder import (EncoderParams, encode, encode_backward,
                              encode_full, init_encoder, load_encoder,
                              sample_feature, sample_features, save_encoder,
                              scatter_sample_grad)
from meshpose.errors import SamplingError, ShapeError

from oracles import directional_diff


def test_init_shapes_and_ranges():
    p = init_encoder(d=24, seed=1)
    shapes = [w.shape for w in p.weights]
    assert shapes == [(16, 3, 5, 5), (32, 16, 5, 5), (24, 32, 3, 3)]
    assert [b.shape for b in p.biases] == [(16,), (32,), (24,)]
    assert p.d == 24
    for w in p.weights:
        a = np.sqrt(1.0 / (w.shape[1] * w.shape[2] * w.shape[3]))
        assert np.abs(w).max() <= a


def test_init_deterministic():
    a, b = init_encoder(d=8, seed=7), init_encoder(d=8, seed=7)
    c = init_encoder(d=8, seed=8)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not all(np.array_equal(x, y) for x, y in zip(a.weights, c.weights))


def test_encode_shape_and_unit_norm(rng):
    p = init_encoder(d=12, seed=0)
    img = rng.uniform(size=(64, 48, 3))
    fmap = encode(p, img)
    assert fmap.shape == (8, 6, 12)
    norms = np.linalg.norm(fmap, axis=2)
    assert np.max(np.abs(norms - 1.0)) < 1e-5


def test_encode_rejects_bad_shapes():
    p = init_encoder(d=8)
    with pytest.raises(ShapeError):
        encode(p, np.zeros((64, 64)))
    with pytest.raises(ShapeError):
        encode(p, np.zeros((60, 64, 3)))


def test_zero_image_guard():
    # With zero biases a zero image produces all-zero activations; the
    # epsilon guard must return zero vectors instead of dividing by zero.
    p = init_encoder(d=8, seed=0)
    for b in p.biases:
        b[:] = 0.0
    fmap = encode(p, np.zeros((32, 32, 3)))
    assert np.all(fmap == 0.0)
    assert np.all(np.isfinite(fmap))


def test_translation_covariance():
    # Shifting the input by 8 px shifts the stride-8 output by 1 px on
    # interior pixels (borders differ through the padding).
    p = init_encoder(d=16, seed=2)
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(128, 128, 3))
    shifted = np.roll(img, 8, axis=1)
    a = encode(p, img)
    b = encode(p, shifted)
    # interior: off the wrap-around column and the receptive-field border
    assert np.max(np.abs(a[4:-4, 3:-4] - b[4:-4, 4:-3])) < 1e-5


def _loss_with(params, img, gdir):
    fmap = encode(params, img)
    return float(np.sum(fmap.astype(np.float64) * gdir))


def test_backward_matches_finite_differences(rng):
    p64 = EncoderParams(
        [w.astype(np.float64) for w in init_encoder(d=6, seed=3).weights],
        [b.astype(np.float64) for b in init_encoder(d=6, seed=3).biases])
    img = rng.uniform(size=(24, 24, 3))
    gdir = rng.normal(size=(3, 3, 6))

    fmap, cache = encode_full(p64, img)
    wg, bg = encode_backward(p64, cache, gdir.astype(np.float64))

    for li in range(3):
        for arr, grads in ((p64.weights, wg), (p64.biases, bg)):
            v = rng.normal(size=arr[li].shape)
            v /= np.linalg.norm(v)

            def f(x, li=li, arr=arr):
                saved = arr[li]
                arr[li] = x
                out = _loss_with(p64, img, gdir)
                arr[li] = saved
                return out

            analytic = float(np.sum(grads[li] * v))
            numeric = directional_diff(f, arr[li], v, h=1e-6)
            denom = max(abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-4


def test_sample_features_matches_manual_bilinear(rng):
    fmap = rng.normal(size=(6, 7, 5)).astype(np.float32)
    fmap /= np.linalg.norm(fmap, axis=2, keepdims=True)
    pts = np.array([[2.25, 3.5], [0.0, 0.0], [6.0, 5.0]])
    feats, _ = sample_features(fmap, pts)
    for (u, v), got in zip(pts, feats):
        x0, y0 = int(min(np.floor(u), 5)), int(min(np.floor(v), 4))
        wx, wy = u - x0, v - y0
        raw = ((1 - wx) * (1 - wy) * fmap[y0, x0]
               + wx * (1 - wy) * fmap[y0, x0 + 1]
               + (1 - wx) * wy * fmap[y0 + 1, x0]
               + wx * wy * fmap[y0 + 1, x0 + 1])
        raw = raw / max(np.linalg.norm(raw), 1e-8)
        assert np.max(np.abs(got - raw)) < 1e-6
    assert np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6)


def test_sample_feature_single_point_matches_batch(rng):
    fmap = rng.normal(size=(4, 4, 3)).astype(np.float32)
    single = sample_feature(fmap, (1.3, 2.1))
    batch, _ = sample_features(fmap, np.array([[1.3, 2.1]]))
    assert np.array_equal(single, batch[0])


def test_sample_out_of_bounds():
    fmap = np.zeros((4, 4, 3), dtype=np.float32)
    with pytest.raises(SamplingError):
        sample_features(fmap, np.array([[4.5, 1.0]]))
    with pytest.raises(SamplingError):
        sample_features(fmap, np.array([[1.0, -0.1]]))


def test_scatter_sample_grad_matches_finite_differences(rng):
    fmap = rng.normal(size=(5, 5, 4)).astype(np.float64)
    pts = rng.uniform(0.2, 3.8, size=(6, 2))
    gfeat = rng.normal(size=(6, 4))

    def loss(fm):
        feats, _ = sample_features(fm, pts)
        return float(np.sum(feats * gfeat))

    _, cache = sample_features(fmap, pts)
    gmap = np.zeros_like(fmap)
    scatter_sample_grad(cache, gfeat, gmap)

    for _ in range(10):
        v = rng.normal(size=fmap.shape)
        v /= np.linalg.norm(v)
        numeric = directional_diff(loss, fmap, v, h=1e-6)
        analytic = float(np.sum(gmap * v))
        assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    p = init_encoder(d=20, seed=11)
    path = tmp_path / "enc.nmen"
    save_encoder(path, p)
    back = load_encoder(path)
    assert back.d == 20
    for a, b in zip(p.weights + p.biases, back.weights + back.biases):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "enc.nmen"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ValueError):
        load_encoder(path)
