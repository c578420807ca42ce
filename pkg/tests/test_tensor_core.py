"""Dense primitives and the pyramid container."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifpn.tensor_core import (
    FeaturePyramid, FlatVector, ShapeError, add, add_pyramids, conv2d, group_norm,
    pack, relu, scale, unpack, upsample,
)


# ---------------------------------------------------------------------------
# oracles: straightforward loops, no shared code with the package
# ---------------------------------------------------------------------------

def conv_loops(x, w, b, stride):
    n, c, h, wd = x.shape
    k, cout = w.shape[0], w.shape[3]
    pad = (k - 1) // 2
    ho, wo = h // stride, wd // stride
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ki in range(k):
                        for kj in range(k):
                            y = i * stride + ki - pad
                            xx = j * stride + kj - pad
                            if 0 <= y < h and 0 <= xx < wd:
                                for ci in range(c):
                                    acc += x[s, ci, y, xx] * w[ki, kj, ci, o]
                    out[s, o, i, j] = acc
    return out


def bilinear_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))

    def src(i, size):
        s = (i + 0.5) / 2 - 0.5
        s = max(s, 0.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, size - 1)
        return lo, hi, s - lo

    for i in range(2 * h):
        y0, y1, fy = src(i, h)
        for j in range(2 * w):
            x0, x1, fx = src(j, w)
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


def group_norm_two_pass(x, groups, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    per = c // groups
    for s in range(n):
        for g in range(groups):
            block = x[s, g * per:(g + 1) * per]
            count = block.size
            mean = block.sum() / count
            var = ((block - mean) ** 2).sum() / count
            out[s, g * per:(g + 1) * per] = (block - mean) / np.sqrt(var + eps)
    return out * gamma[None, :, None, None] + beta[None, :, None, None]


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.eye(3)[None, None]
    np.testing.assert_array_equal(conv2d(x, w, np.zeros(3)), x)


def test_conv_zero_weights(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    assert not conv2d(x, np.zeros((3, 3, 2, 3)), np.zeros(3)).any()


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_loops(rng, k, stride):
    if k == 1 and stride == 2:
        pytest.skip("1x1 kernels are only used at stride 1")
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(conv2d(x, w, b, stride), conv_loops(x, w, b, stride), rtol=0, atol=1e-12)


def test_conv_stride2_halves_exactly(rng):
    x = rng.standard_normal((1, 2, 8, 6))
    assert conv2d(x, rng.standard_normal((3, 3, 2, 2)), stride=2).shape == (1, 2, 4, 3)


def test_conv_linearity(rng):
    x, y = rng.standard_normal((2, 1, 2, 6, 6))
    w = rng.standard_normal((3, 3, 2, 4))
    a, c = 0.7, -2.3
    np.testing.assert_allclose(conv2d(a * x + c * y, w), a * conv2d(x, w) + c * conv2d(y, w), atol=1e-10)


@pytest.mark.parametrize("bad", [
    dict(x=(1, 2, 4, 4), w=(3, 3, 3, 2)),   # channel mismatch
    dict(x=(1, 2, 5, 4), w=(3, 3, 2, 2), stride=2),  # odd dims at stride 2
    dict(x=(1, 2, 4, 4), w=(5, 5, 2, 2)),   # unsupported kernel
    dict(x=(2, 4, 4), w=(3, 3, 2, 2)),      # not 4-D
])
def test_conv_rejects_bad_shapes(bad):
    with pytest.raises(ShapeError):
        conv2d(np.zeros(bad["x"]), np.zeros(bad["w"]), stride=bad.get("stride", 1))


# ---------------------------------------------------------------------------
# upsample
# ---------------------------------------------------------------------------

def test_nearest_literal():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    want = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(upsample(x, "nearest")[0, 0], want)


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_constant(mode):
    out = upsample(np.full((1, 2, 3, 5), 1.5), mode)
    assert out.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(out, 1.5, atol=1e-15)


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 3, 4)])
def test_bilinear_matches_formula(rng, shape):
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(upsample(x, "bilinear"), bilinear_loops(x), rtol=0, atol=1e-12)


def test_upsample_unknown_mode():
    with pytest.raises(ValueError):
        upsample(np.zeros((1, 1, 2, 2)), "cubic")


# ---------------------------------------------------------------------------
# group_norm
# ---------------------------------------------------------------------------

def test_group_norm_standardises(rng):
    x = 3.0 + 2.5 * rng.standard_normal((2, 4, 5, 5))
    out = group_norm(x, 1, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(out.reshape(2, -1).mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.reshape(2, -1).var(axis=1), 1, atol=1e-5)


def test_group_norm_zero_gamma_gives_beta(rng):
    beta = np.array([0.5, -1.0, 2.0, 0.0])
    out = group_norm(rng.standard_normal((1, 4, 3, 3)), 2, np.zeros(4), beta)
    np.testing.assert_array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_group_norm_two_pass_oracle(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(group_norm(x, 2, gamma, beta), group_norm_two_pass(x, 2, gamma, beta),
                               rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.5, 20.0), b=st.floats(-10, 10), seed=st.integers(0, 2**16))
def test_group_norm_affine_shift_invariance(a, b, seed):
    x = np.random.default_rng(seed).standard_normal((1, 4, 4, 4))
    one = np.ones(4)
    zero = np.zeros(4)
    # exact without the epsilon
    np.testing.assert_allclose(group_norm(a * x + b, 2, one, zero, eps=0.0),
                               group_norm(x, 2, one, zero, eps=0.0), atol=1e-6)
    # with it, the mismatch is the epsilon effect: |xhat| * eps / (2 var) at most,
    # var being the smaller of the two inputs' group variances
    ref = group_norm(x, 2, one, zero)
    var = x.reshape(1, 2, -1).var(axis=2).min() * min(a * a, 1.0)
    bound = np.abs(ref).max() * 1e-5 / (2 * var)
    assert np.abs(group_norm(a * x + b, 2, one, zero) - ref).max() <= bound


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ShapeError):
        group_norm(np.zeros((1, 4, 2, 2)), 3, np.ones(4), np.zeros(4))


# ---------------------------------------------------------------------------
# element-wise ops
# ---------------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_add_zero_pyramid_is_identity(rng):
    p = FeaturePyramid.random(rng, 1, 2, 4, 4, 3)
    q = add_pyramids(p, p.zeros_like())
    for a, b in zip(p, q):
        np.testing.assert_array_equal(a, b)


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        add(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_scale_by_zero(rng):
    assert not scale(rng.standard_normal((1, 2, 3, 3)), 0.0).any()


def test_forward_primitives_stay_finite(rng):
    x = rng.standard_normal((1, 2, 4, 4)) * 1e3
    outs = [conv2d(x, rng.standard_normal((3, 3, 2, 2))), upsample(x, "bilinear"),
            group_norm(x, 1, np.ones(2), np.zeros(2)), relu(x), scale(x, 2.0)]
    assert all(np.isfinite(o).all() for o in outs)


# ---------------------------------------------------------------------------
# pyramids, pack / unpack
# ---------------------------------------------------------------------------

def test_pack_two_level_example():
    p = FeaturePyramid([np.arange(4.0).reshape(1, 1, 2, 2), np.array([[[[7.0]]]])])
    v = pack(p)
    assert v.data.shape == (5,)
    np.testing.assert_array_equal(v.data, [0, 1, 2, 3, 7])
    q = unpack(v, v.layout)
    for a, b in zip(p, q):
        np.testing.assert_array_equal(a, b)


def test_pack_zero_pyramid():
    assert not pack(FeaturePyramid.zeros(2, 3, 8, 8, 3)).data.any()


def test_unpack_length_mismatch():
    p = FeaturePyramid.zeros(1, 1, 2, 2, 2)
    with pytest.raises(ShapeError):
        unpack(np.zeros(4), p.layout())
    with pytest.raises(ShapeError):
        FlatVector(np.zeros(6), p.layout())


@settings(max_examples=40, deadline=None)
@given(batch=st.integers(1, 3), channels=st.integers(1, 4), levels=st.integers(1, 4),
       base=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_pack_round_trip(batch, channels, levels, base, seed):
    side = base * 2 ** (levels - 1)
    p = FeaturePyramid.random(np.random.default_rng(seed), batch, channels, side, side, levels)
    v = pack(p)
    assert v.data.size == sum(a.size for a in p)
    assert np.linalg.norm(pack(unpack(v, v.layout)).data - v.data) == 0


def test_pyramid_rejects_non_halving():
    with pytest.raises(ShapeError):
        FeaturePyramid([np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 3, 4))])
    with pytest.raises(ShapeError):
        FeaturePyramid([np.zeros((1, 2, 8, 8)), np.zeros((1, 3, 4, 4))])
    with pytest.raises(ShapeError):
        FeaturePyramid([np.zeros((1, 2, 8, 8)), np.zeros((2, 2, 4, 4))])
    with pytest.raises(ShapeError):
        FeaturePyramid.zeros(1, 2, 6, 6, 3)


@settings(max_examples=30, deadline=None)
@given(levels=st.integers(1, 4), channels=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_pyramid_arithmetic_preserves_layout(levels, channels, seed):
    rng = np.random.default_rng(seed)
    side = 2 ** levels
    p = FeaturePyramid.random(rng, 1, channels, side, side, levels)
    q = FeaturePyramid.random(rng, 1, channels, side, side, levels)
    for r in (p + q, p - q, p * 3.0, -p):
        assert r.shapes == p.shapes
    assert np.isclose(p.dot(p), p.norm() ** 2)
