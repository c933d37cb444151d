import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinemask.masks import (
    AffineScalars,
    Granularity,
    KSpec,
    MaskTransformConfig,
    Surrogate,
    Variant,
    binarize,
    density,
    init_real_mask,
    piggyback_weights,
    surrogate_backward,
    surrogate_scale,
    transform_weights,
)
from affinemask.tensor import DimensionError, Tensor, tsum


def scalars(values, granularity="layer", out=2, learned=False):
    specs = tuple(KSpec(learned, v) for v in values)
    return AffineScalars(specs, Granularity(granularity), out, np.float64)


def test_binarize_threshold():
    m = binarize(Tensor(np.array([-0.3, 0.0, 0.7])))
    np.testing.assert_array_equal(m.data, [0, 1, 1])
    assert not binarize(Tensor(-np.ones(5))).data.any()


def test_fresh_mask_all_ones(rng):
    r = init_real_mask((16, 8, 3, 3), rng)
    assert r.data.min() >= 1e-4 and r.data.max() <= 2e-4
    assert binarize(r).data.all()


def test_surrogate_backward_examples():
    g = np.array([1.5, -2.0, 0.0])
    r = np.array([0.3, -1.0, 4.0])
    np.testing.assert_array_equal(surrogate_backward(g, r, Surrogate.IDENTITY), g)
    assert surrogate_backward(np.ones(1), np.zeros(1), Surrogate.SIGMOID)[0] == 0.25
    with pytest.raises(DimensionError):
        surrogate_backward(np.ones(2), np.ones(3), Surrogate.SIGMOID)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50),
       st.sampled_from([np.float32, np.float64]))
def test_surrogate_strictly_positive(values, dtype):
    r = np.asarray(values, dtype=dtype)
    for s in Surrogate:
        scale = surrogate_scale(r, s)
        assert (scale > 0).all()
    g = np.sign(r) + (r == 0)
    out = surrogate_backward(g, r, Surrogate.SIGMOID)
    assert np.array_equal(np.sign(out), np.sign(g))


def test_transform_examples():
    w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    m = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = transform_weights(w, m, scalars((1, 0.5, 2, -1)))
    np.testing.assert_array_equal(out.data, [[2.5, 2.5], [3.5, 2.5]])
    ident = transform_weights(w, m, scalars((1, 0, 0, 0)))
    assert ident.data.tobytes() == w.data.tobytes()
    pig = transform_weights(w, m, scalars((0, 0, 0, 1)))
    np.testing.assert_array_equal(pig.data, w.data * m.data)


def test_transform_identity_with_learned_zero_coefficients(rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    m = Tensor((rng.random((4, 3, 3, 3)) > 0.5).astype(float))
    specs = (KSpec(False, 1.0), KSpec(True, 0.0), KSpec(True, 0.0), KSpec(True, 0.0))
    ks = AffineScalars(specs, Granularity.LAYER, 4, np.float64)
    np.testing.assert_array_equal(transform_weights(w, m, ks).data, w.data)


def test_transform_gradients_flow(rng):
    w = Tensor(rng.standard_normal((3, 2)))
    r = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    specs = tuple(KSpec(True, v) for v in (1.0, 0.1, 0.2, 0.3))
    ks = AffineScalars(specs, Granularity.CHANNEL, 3, np.float64)
    m = binarize(r)
    tsum(transform_weights(w, m, ks)).backward()
    mbin = (r.data >= 0).astype(float)
    np.testing.assert_allclose(ks.values[0].grad, w.data.sum(axis=1))
    np.testing.assert_allclose(ks.values[1].grad, [2, 2, 2])
    np.testing.assert_allclose(ks.values[2].grad, mbin.sum(axis=1))
    np.testing.assert_allclose(ks.values[3].grad, (w.data * mbin).sum(axis=1))
    np.testing.assert_allclose(r.grad, 0.2 + 0.3 * w.data)


def test_transform_shape_errors(rng):
    w = Tensor(rng.standard_normal((3, 2)))
    with pytest.raises(DimensionError):
        transform_weights(w, Tensor(np.ones((2, 3))), scalars((1, 0, 0, 0), out=3))
    with pytest.raises(DimensionError):
        transform_weights(w, Tensor(np.ones((3, 2))), scalars((1, 0, 0, 0), out=4))
    with pytest.raises(DimensionError):
        piggyback_weights(w, Tensor(np.ones((2, 3))))


def test_density():
    assert density(np.ones((3, 3))) == 100.0
    assert density(np.zeros(7)) == 0.0
    assert density(np.array([1, 0, 1, 1])) == 75.0
    with pytest.raises(ValueError):
        density(np.zeros(0))


def test_variant_coefficients():
    pig = MaskTransformConfig(Variant.PIGGYBACK).kspecs(True)
    assert [str(k) for k in pig] == ["F0", "F0", "F0", "F1"]
    assert [str(k) for k in MaskTransformConfig("simple").kspecs(True)] == ["F1", "L0", "L0", "F0"]
    assert [str(k) for k in MaskTransformConfig("full").kspecs(True)] == ["F1", "L0", "L0", "L0"]
    assert [str(k) for k in MaskTransformConfig("full").kspecs(False)] == ["L1", "L0", "L0", "L0"]
    assert str(MaskTransformConfig("full-nobias").kspecs(True)[1]) == "F0"
    assert str(MaskTransformConfig("full-nok2").kspecs(True)[2]) == "F0"
    with pytest.raises(ValueError):
        MaskTransformConfig("finetune").kspecs(True)


def test_custom_config_rules():
    cfg = MaskTransformConfig("custom", custom=("F1", "L0", "F0", "L0.5"))
    assert cfg.kspecs(True)[3] == KSpec(True, 0.5)
    with pytest.raises(ValueError):
        MaskTransformConfig("custom", custom=("L1", "L0", "L0", "L0")).kspecs(True)
    with pytest.raises(ValueError):
        MaskTransformConfig("custom")
    with pytest.raises(ValueError):
        MaskTransformConfig("full", custom=("F1", "L0", "L0", "L0"))
    with pytest.raises(ValueError):
        KSpec.parse("X1")


@pytest.mark.parametrize("cfg", [
    MaskTransformConfig(),
    MaskTransformConfig("piggyback", "sigmoid"),
    MaskTransformConfig("simple", granularity="channel"),
    MaskTransformConfig("custom", custom=("F1", "L0", "F0", "L1")),
])
def test_config_summary_round_trip(cfg):
    assert MaskTransformConfig.from_summary(cfg.summary()) == cfg


def test_channel_scalars_shape():
    ks = AffineScalars(MaskTransformConfig("full", granularity="channel").kspecs(True), "channel", 5)
    assert [v.shape for _, v in ks.learned()] == [(5,), (5,), (5,)]
    assert ks.num_learned() == 15
    assert ks.resolve(1, 4).shape == (5, 1, 1, 1)
    ks.values[1] = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(DimensionError):
        ks.resolve(1, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_matches_elementwise_oracle(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((3, 2, 2))
    m = (r.random((3, 2, 2)) > 0.5).astype(float)
    k = r.standard_normal(4)
    out = transform_weights(Tensor(w), Tensor(m), scalars(tuple(k), out=3)).data
    ref = np.empty_like(w)
    for idx in np.ndindex(w.shape):
        ref[idx] = k[0] * w[idx] + k[1] + k[2] * m[idx] + k[3] * w[idx] * m[idx]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
