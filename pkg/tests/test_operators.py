import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lift3d.operators import (MAX_CONDITION, PALETTE, ColorQuant, GradFeat, LabelPaint, StyleLite, adapt_dim,
                              encode_views, get_operator, label_boundary_band)


def image(seed, h=8, w=8):
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


def test_feature_dims_and_registry():
    for op_id, D in [("colorquant", 32), ("gradfeat", 32), ("labelpaint", 24), ("stylelite", 40)]:
        op = get_operator(op_id)
        lab = np.zeros((8, 8), int)
        assert op.encode(image(0), 7, labels=lab).shape == (8, 8, D)
        assert op.kappa < MAX_CONDITION
    with pytest.raises(KeyError):
        get_operator("nope")


def test_encode_is_deterministic():
    img = image(1)
    for op in (ColorQuant(), GradFeat(), StyleLite()):
        assert op.encode(img, 42).tobytes() == op.encode(img, 42).tobytes()
        assert op.encode(img, 42).tobytes() != op.encode(img, 43).tobytes()


def test_colorquant_consistent_limit():
    op = ColorQuant(noise_sigma=0, hue_range=0)
    img = image(2)
    assert np.array_equal(op.encode(img, 1), op.encode(img, 999))


def test_colorquant_hard_assignment_limit():
    op = ColorQuant(noise_sigma=0, hue_range=0, temperature=1e-3)
    px = PALETTE[None, :, :]  # 1 x 8 x 3, pixel k is palette color k
    f = op.encode(px, 0)[0]
    assert np.allclose(f, op.embedding, atol=1e-6)


def test_colorquant_noise_is_zero_mean():
    # Monte-Carlo oracle over 1000 view seeds; additive noise only
    op = ColorQuant(noise_sigma=0.05, hue_range=0)
    img = image(3, 1, 1)
    clean = op.clean_features(img)
    mean = np.mean([op.encode(img, s) - clean for s in range(1000)], axis=0)
    assert np.all(np.abs(mean) < 3 * 0.05 / np.sqrt(1000))


def test_colorquant_decode_examples():
    op = ColorQuant()
    for k in range(8):
        assert np.allclose(op.decode(op.embedding[k]), PALETTE[k], atol=1e-9)
    mid = (op.embedding[2] + op.embedding[5]) / 2
    assert np.allclose(op.decode(mid), (PALETTE[2] + PALETTE[5]) / 2, atol=1e-5)
    # zero-corruption round trip is the soft palette blend
    img = image(4)
    off = ColorQuant(noise_sigma=0, hue_range=0)
    from lift3d.operators import soft_assign
    assert np.allclose(off.decode(off.encode(img, 0)), soft_assign(img, PALETTE) @ PALETTE, atol=1e-5)


@given(st.integers(0, 10**6))
def test_decode_is_valid_output(seed):
    f = np.random.default_rng(seed).normal(scale=3, size=(4, 32))
    rgb = ColorQuant().decode(f)
    assert np.all(rgb >= -1e-12) and np.all(rgb <= 1 + 1e-12)


def test_labelpaint_examples():
    lab = np.zeros((16, 16), int)
    lab[4:12, 4:12] = 3
    op = LabelPaint(flip_prob=0.0)
    assert np.array_equal(op.decode(op.encode(None, 5, labels=lab)), lab)
    forced = LabelPaint(flip_prob=1.0)
    out = forced.decode(forced.encode(None, 5, labels=lab))
    band = label_boundary_band(lab)
    assert np.all(out[band] != lab[band]) and np.array_equal(out[~band], lab[~band])
    with pytest.raises(ValueError):
        op.encode(None, 5)


def test_labelpaint_flip_rate_matches_oracle(scene16):
    # expected flip fraction = p * (boundary band fraction); binomial 4-sigma bound
    op = LabelPaint()
    lab = scene16.labels[0]
    band = label_boundary_band(lab)
    n, flips, expect = lab.size, 0, 0.0
    for s in range(20):
        out = op.decode(op.encode(None, s, labels=lab))
        flips += (out != lab).sum()
        expect += op.view_flip_prob(s) * band.sum()
    assert abs(flips - expect) < 4 * np.sqrt(expect) + 1
    assert 0.05 <= min(op.view_flip_prob(s) for s in range(100))
    assert max(op.view_flip_prob(s) for s in range(100)) <= 0.2


def test_stylelite_examples():
    img = image(5)
    off = StyleLite(noise_sigma=0, hue_range=0)
    f = off.encode(img, 0)
    assert np.array_equal(f[..., 32:], f[..., :8])
    assert np.array_equal(off.decode(adapt_dim(f, 32)), off.decode(f))
    on = StyleLite()
    a, b = on.decode(on.encode(img, 1)), on.decode(on.encode(img, 2))
    assert np.sqrt(np.mean((a - b) ** 2)) > 0


def test_adapt_dim_examples():
    f24 = np.random.default_rng(0).normal(size=(3, 24)).astype(np.float32)
    p = adapt_dim(f24, 32)
    assert p.shape == (3, 32) and np.all(p[:, 24:] == 0) and np.array_equal(p[:, :24], f24)
    f40 = np.random.default_rng(1).normal(size=(3, 40))
    assert np.array_equal(adapt_dim(f40, 32), f40[:, :32])
    f32 = np.random.default_rng(2).normal(size=(3, 32))
    assert adapt_dim(f32, 32).tobytes() == f32.tobytes()


def test_encode_views_uses_per_view_seeds(scene16):
    f = encode_views("colorquant", scene16)
    assert f.shape == (16, 64, 64, 32)
    assert np.array_equal(f, scene16.features["colorquant"])
