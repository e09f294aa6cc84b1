import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtdnn.core import UsageError, make_rng
from dtdnn.layers import (
    ClipMode,
    ConvParams,
    DeformableTDNNLayer,
    GridSpec,
    OffsetPredictor,
    TDNNLayer,
    clip_offsets,
    clip_offsets_backward,
    deformable_backward,
    deformable_forward,
    deformable_layer_apply,
    offset_predict,
    param_count,
    tdnn_backward,
    tdnn_forward,
)

from oracles import central_diff, naive_deformable, naive_tdnn

RAMP = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])


def ones_kernel():
    return ConvParams(np.ones((1, 1, 3)), np.zeros(1))


def centre_kernel():
    return ConvParams(np.array([[[0.0, 1.0, 0.0]]]), np.zeros(1))


def random_case(rng, c_in=2, c_out=3, T=11, k=3, d=2, s=1):
    x = rng.normal(size=(c_in, T))
    p = ConvParams(rng.normal(size=(c_out, c_in, k)), rng.normal(size=c_out))
    return x, p, GridSpec(k, d, s)


def interior_offsets(rng, shape):
    # fractional parts kept in [0.1, 0.9] so no tap lands near an integer
    return rng.integers(-2, 2, size=shape) + rng.uniform(0.1, 0.9, size=shape)


# -- grid ----------------------------------------------------------------------

def test_grid_taps_and_lengths():
    g = GridSpec(5, 2, 3)
    assert g.taps.tolist() == [-4, -2, 0, 2, 4]
    assert g.reach == 4
    assert g.out_length(9) == 3
    assert g.out_length(10) == 4
    assert g.centers(7).tolist() == [0, 3, 6]


@pytest.mark.parametrize("k, d, s", [(2, 1, 1), (0, 1, 1), (3, 0, 1), (3, 1, 0)])
def test_grid_rejects_bad_values(k, d, s):
    with pytest.raises(UsageError):
        GridSpec(k, d, s)


# -- standard convolution --------------------------------------------------------

def test_tdnn_hand_example():
    y = tdnn_forward(RAMP, ones_kernel(), GridSpec(3, 2, 1))
    assert y.tolist() == [[4.0, 6.0, 9.0, 6.0, 8.0]]
    assert np.array_equal(y, naive_tdnn(RAMP, np.ones((1, 1, 3)), [0.0], 3, 2, 1))


def test_tdnn_identity_kernel():
    x = make_rng(0).normal(size=(3, 8))
    p = ConvParams(np.eye(3)[:, :, None], np.zeros(3))
    assert np.array_equal(tdnn_forward(x, p, GridSpec(1)), x)
    gy = make_rng(1).normal(size=(3, 8))
    gx, _ = tdnn_backward(x, p, GridSpec(1), gy)
    assert np.array_equal(gx, gy)


def test_tdnn_stride_output_length():
    y = tdnn_forward(np.ones((1, 9)), ones_kernel(), GridSpec(3, 1, 3))
    assert y.shape == (1, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 12))
def test_tdnn_matches_naive_loops(seed, k, d, s, T):
    rng = make_rng(seed)
    x, p, g = random_case(rng, 2, 2, T, k, d, s)
    np.testing.assert_allclose(tdnn_forward(x, p, g), naive_tdnn(x, p.weight, p.bias, k, d, s), rtol=0, atol=1e-12)


def test_tdnn_backward_zero_grad():
    rng = make_rng(2)
    x, p, g = random_case(rng)
    gx, gp = tdnn_backward(x, p, g, np.zeros((3, 11)))
    assert not gx.any() and not gp.weight.any() and not gp.bias.any()


def test_tdnn_backward_finite_differences():
    rng = make_rng(5)
    x, p, g = random_case(rng, c_in=2, c_out=3, T=7, k=3, d=2)
    gy = rng.normal(size=(3, 7))

    def loss():
        return float(np.sum(gy * tdnn_forward(x, p, g)))

    gx, gp = tdnn_backward(x, p, g, gy)
    np.testing.assert_allclose(gx, central_diff(loss, x, 1e-6), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gp.weight, central_diff(loss, p.weight, 1e-6), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gp.bias, central_diff(loss, p.bias, 1e-6), rtol=1e-6, atol=1e-9)


def test_tdnn_rejects_mismatched_kernel():
    with pytest.raises(UsageError):
        tdnn_forward(RAMP, ones_kernel(), GridSpec(5))


# -- offsets -----------------------------------------------------------------------

def test_zero_predictor_gives_zero_offsets():
    x = make_rng(0).normal(size=(3, 12))
    f = offset_predict(x, OffsetPredictor.zeros(3, 3), GridSpec(3, 2, 3))
    assert f.shape == (3, 4)
    assert not f.any()


def test_predictor_bias_on_zero_input():
    op = OffsetPredictor.zeros(3, 2)
    op.params.bias[:] = [0.5, -1.0, 2.0]
    f = offset_predict(np.zeros((2, 6)), op, GridSpec(3))
    assert np.array_equal(f, np.repeat([[0.5], [-1.0], [2.0]], 6, axis=1))


def test_clip_examples():
    f = np.array([-1.2, 0.3, 0.0])
    assert clip_offsets(f, "latency_controlled").tolist() == [-1.2, 0.0, 0.0]
    assert np.array_equal(clip_offsets(f, ClipMode.NONE), f)
    with pytest.raises(UsageError, match="clip mode"):
        clip_offsets(f, "future")


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10))
def test_clip_idempotent_and_nonpositive(vals):
    once = clip_offsets(vals, ClipMode.LATENCY)
    assert np.array_equal(clip_offsets(once, ClipMode.LATENCY), once)
    assert np.all(once <= 0)


def test_clip_backward_masks_positive_offsets():
    f = np.array([-1.0, 0.0, 0.5])
    g = np.array([2.0, 3.0, 4.0])
    assert clip_offsets_backward(f, g, "latency_controlled").tolist() == [2.0, 3.0, 0.0]
    assert clip_offsets_backward(f, g, "none").tolist() == [2.0, 3.0, 4.0]


# -- deformable convolution --------------------------------------------------------

def test_deformable_hand_example():
    f = np.zeros((3, 5))
    f[1] = 0.5
    y = deformable_forward(RAMP, centre_kernel(), GridSpec(3), f)
    np.testing.assert_allclose(y, [[1.5, 2.5, 3.5, 4.5, 2.5]], atol=1e-15)


def test_integer_offset_is_grid_shift():
    f = np.zeros((3, 5))
    f[1] = 1.0
    y = deformable_forward(RAMP, centre_kernel(), GridSpec(3), f)
    assert y.tolist() == [[2.0, 3.0, 4.0, 5.0, 0.0]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 10))
def test_deformable_matches_naive_loops(seed, k, d, s, T):
    rng = make_rng(seed)
    x, p, g = random_case(rng, 2, 2, T, k, d, s)
    f = rng.uniform(-3, 3, size=(k, g.out_length(T)))
    expected = naive_deformable(x, p.weight, p.bias, k, d, s, f)
    np.testing.assert_allclose(deformable_forward(x, p, g, f), expected, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5, 7]), st.integers(1, 4), st.integers(1, 3),
       st.integers(1, 20), st.integers(1, 3))
def test_zero_offsets_match_standard(seed, k, d, s, T, batch):
    rng = make_rng(seed)
    x = rng.normal(size=(batch, 2, T))
    p = ConvParams(rng.normal(size=(3, 2, k)), rng.normal(size=3))
    g = GridSpec(k, d, s)
    f = np.zeros((batch, k, g.out_length(T)))
    assert np.max(np.abs(deformable_forward(x, p, g, f) - tdnn_forward(x, p, g))) <= 1e-12


def test_zero_offsets_backward_matches_standard():
    rng = make_rng(8)
    x, p, g = random_case(rng)
    gy = rng.normal(size=(3, 11))
    gx_d, gp_d, _ = deformable_backward(x, p, g, np.zeros((3, 11)), gy)
    gx_s, gp_s = tdnn_backward(x, p, g, gy)
    np.testing.assert_allclose(gx_d, gx_s, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gp_d.weight, gp_s.weight, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gp_d.bias, gp_s.bias, rtol=0, atol=1e-12)


def test_constant_input_has_zero_offset_gradient():
    x = np.full((2, 15), 3.0)
    rng = make_rng(9)
    p = ConvParams(rng.normal(size=(2, 2, 3)), np.zeros(2))
    f = rng.uniform(0.1, 0.9, size=(3, 15))
    gy = rng.normal(size=(2, 15))
    _, _, gf = deformable_backward(x, p, GridSpec(3, 1, 1), f, gy)
    # away from the padded edges every tap sits between two equal frames
    assert not gf[:, 2:-2].any()


def test_deformable_backward_finite_differences():
    rng = make_rng(11)
    x, p, g = random_case(rng, c_in=2, c_out=3, T=11, k=3, d=2)
    f = interior_offsets(rng, (3, 11))
    gy = rng.normal(size=(3, 11))

    def loss():
        return float(np.sum(gy * deformable_forward(x, p, g, f)))

    gx, gp, gf = deformable_backward(x, p, g, f, gy)
    eps = 1e-5
    np.testing.assert_allclose(gx, central_diff(loss, x, eps), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gp.weight, central_diff(loss, p.weight, eps), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gp.bias, central_diff(loss, p.bias, eps), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gf, central_diff(loss, f, eps), rtol=1e-4, atol=1e-8)


# -- layer objects ---------------------------------------------------------------

def make_pair(rng, c_in=3, c_out=4, k=3, d=2, s=1, clip="none"):
    p = ConvParams.uniform(c_out, c_in, k, rng)
    g = GridSpec(k, d, s)
    std = TDNNLayer(p.copy(), g)
    dfm = DeformableTDNNLayer(p.copy(), g, OffsetPredictor.zeros(k, c_in), clip)
    return std, dfm


def test_fresh_deformable_layer_is_standard_twin():
    rng = make_rng(12)
    std, dfm = make_pair(rng, s=3)
    x = rng.normal(size=(3, 20))
    y_std, _ = std.forward(x)
    y_dfm, f = deformable_layer_apply(x, dfm)
    assert np.array_equal(y_std[0], y_dfm)
    assert not f.any()


def test_latency_layer_offsets_nonpositive():
    rng = make_rng(13)
    _, dfm = make_pair(rng, clip="latency_controlled")
    dfm.predictor.params.weight[:] = rng.normal(size=dfm.predictor.params.weight.shape)
    dfm.predictor.params.bias[:] = 1.0
    _, f = deformable_layer_apply(rng.normal(size=(3, 16)), dfm)
    assert (f > 0).sum() == 0
    # the same layer without clipping predicts some positive offsets
    _, free = deformable_layer_apply(rng.normal(size=(3, 16)), dfm, "none")
    assert (free > 0).any()


def test_max_offset_clamps():
    rng = make_rng(14)
    _, dfm = make_pair(rng)
    dfm.predictor.params.bias[:] = [5.0, -5.0, 0.25]
    dfm.max_offset = 1.0
    _, f = deformable_layer_apply(np.zeros((3, 6)), dfm)
    assert f[:, 0].tolist() == [1.0, -1.0, 0.25]


@pytest.mark.parametrize("clip", ["none", "latency_controlled"])
def test_layer_end_to_end_finite_differences(clip):
    rng = make_rng(15)
    _, dfm = make_pair(rng, c_in=2, c_out=3, clip=clip)
    x = rng.normal(size=(2, 9))
    # predictor output = bias on tap positions: offsets with interior fractions
    dfm.predictor.params.weight[:] = 0.01 * rng.normal(size=dfm.predictor.params.weight.shape)
    dfm.predictor.params.bias[:] = [-1.4, 0.3, -0.6]
    gy = rng.normal(size=(1, 3, 9))

    def loss():
        return float(np.sum(gy * dfm.forward(x)[0]))

    y, cache = dfm.forward(x)
    frac = cache["f"] - np.floor(cache["f"])
    live = cache["raw"] <= 0 if clip != "none" else np.ones_like(frac, dtype=bool)
    assert np.all((frac[live] > 0.01) & (frac[live] < 0.99))
    gx, grads = dfm.backward(cache, gy)
    params = dfm.named_params()
    for name, g in grads.items():
        np.testing.assert_allclose(g, central_diff(loss, params[name], 1e-5), rtol=1e-4, atol=1e-8, err_msg=name)
    np.testing.assert_allclose(gx[0], central_diff(loss, x, 1e-5), rtol=1e-4, atol=1e-8)


# -- parameter accounting ---------------------------------------------------------

def test_param_count_table_values():
    c = param_count(640, 640, 5, deformable=True, offset_kernel=5)
    assert c.main == 640 * 640 * 5 + 640 == 2_048_640
    assert c.offset == 5 * 640 * 5 + 5 == 16_005
    assert param_count(640, 640, 5).offset == 0


def test_param_count_matches_live_layer():
    rng = make_rng(16)
    _, dfm = make_pair(rng, c_in=7, c_out=5, k=3)
    pc = param_count(7, 5, 3, deformable=True)
    assert pc.main == dfm.params.size
    assert pc.offset == dfm.predictor.size
