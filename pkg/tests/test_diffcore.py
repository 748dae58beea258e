import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relfeat import diffcore as dc
from gradcheck import check, weighted_sum

SEEDS = range(10)


def conv_loop_oracle(x, k, b, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(kk):
                            for v in range(kk):
                                acc += xp[a, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[a, o, i, j] = acc
    return out


def away_from_zero(rng, shape, gap=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (gap + np.abs(u))


# ---------------------------------------------------------------- conv2d

def test_conv_scalar_kernel():
    y = dc.conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(y.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(dc.conv2d(x, k, padding=1).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = dc.conv2d(x, k, b, stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv_loop_oracle(x, k, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_output_size():
    y = dc.conv2d(np.zeros((2, 1, 9, 7)), np.zeros((4, 1, 3, 3)), stride=2, padding=1)
    assert y.shape == (2, 4, 5, 4)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_rejects_even_kernel():
    with pytest.raises(dc.ShapeError):
        dc.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    err = check(lambda x, k, b: weighted_sum(dc.conv2d(x, k, b, stride=stride, padding=pad), seed), x, k, b)
    assert err <= 1e-6


# ---------------------------------------------------------------- maxpool2

def test_maxpool_block():
    assert dc.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0


def test_maxpool_tie_routes_to_first_element():
    x = dc.DiffArray(np.full((1, 1, 4, 4), 7.0), True)
    y = dc.maxpool2(x)
    np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))
    dc.backward(dc.sum_(y))
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expect)


def test_maxpool_matches_window_oracle():
    x = np.random.default_rng(3).standard_normal((1, 1, 4, 4))
    want = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(dc.maxpool2(x).data[0, 0], want)


def test_maxpool_rejects_odd():
    with pytest.raises(dc.ShapeError):
        dc.maxpool2(np.zeros((1, 1, 5, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradient(seed):
    x = np.random.default_rng(seed).permutation(64).reshape(1, 1, 8, 8) * 0.1
    assert check(lambda x: weighted_sum(dc.maxpool2(x), seed), x) <= 1e-6


# ---------------------------------------------------------------- resize / sample

def test_resize_same_size_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 6))
    np.testing.assert_array_equal(dc.bilinear_resize(x, 5, 6).data, x)


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (8, 8), (13, 2)])
def test_resize_constant_stays_constant(size):
    y = dc.bilinear_resize(np.full((1, 2, 4, 4), 3.25), *size).data
    np.testing.assert_allclose(y, 3.25, rtol=0, atol=1e-15)


def test_resize_2x2_to_4x4_closed_form():
    # half-pixel sampling positions along each axis, clamped at the border
    c = np.array([0.0, 0.25, 0.75, 1.0])
    want = c[None, :] + 2.0 * c[:, None]  # f(x, y) = x + 2y interpolates [[0, 1], [2, 3]]
    got = dc.bilinear_resize(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]), 4, 4).data[0, 0]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_resize_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 6))
    oh, ow = rng.integers(1, 10, size=2)
    assert check(lambda x: weighted_sum(dc.bilinear_resize(x, int(oh), int(ow)), seed), x) <= 1e-6


def test_sample_integer_point_is_exact():
    m = np.random.default_rng(1).standard_normal((3, 4, 5))
    np.testing.assert_array_equal(dc.bilinear_sample(m, [(2.0, 3.0)]).data[0], m[:, 3, 2])


def test_sample_midpoint():
    m = np.array([[[0.0, 1.0]]])
    assert dc.bilinear_sample(m, [(0.5, 0.0)]).data.item() == 0.5


def test_sample_matches_oracle():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((2, 6, 7))
    pts = rng.uniform([0, 0], [6, 5], size=(20, 2))
    got = dc.bilinear_sample(m, pts).data
    for p, row in zip(pts, got):
        x, y = p
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, 6), min(y0 + 1, 5)
        fx, fy = x - x0, y - y0
        want = (m[:, y0, x0] * (1 - fx) * (1 - fy) + m[:, y0, x1] * fx * (1 - fy)
                + m[:, y1, x0] * (1 - fx) * fy + m[:, y1, x1] * fx * fy)
        np.testing.assert_allclose(row, want, rtol=0, atol=1e-12)


def test_sample_rejects_outside_point_with_index():
    with pytest.raises(ValueError, match="point 1"):
        dc.bilinear_sample(np.zeros((1, 4, 4)), [(1.0, 1.0), (3.5, 0.0)])


@pytest.mark.parametrize("seed", SEEDS)
def test_sample_gradient(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((3, 5, 6))
    pts = rng.uniform([0, 0], [5, 4], size=(7, 2))
    assert check(lambda m: weighted_sum(dc.bilinear_sample(m, pts), seed), m) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_depth_to_space_gradient(seed):
    x = np.random.default_rng(seed).standard_normal((2, 8, 3, 3))
    assert check(lambda x: weighted_sum(dc.depth_to_space(x, 2), seed), x) <= 1e-6


def test_depth_to_space_layout():
    x = np.arange(4.0).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(dc.depth_to_space(x, 2).data[0, 0], [[0, 1], [2, 3]])


# ---------------------------------------------------------------- softmax / normalisation

def test_softmax_uniform():
    np.testing.assert_array_equal(dc.softmax_lastdim(np.zeros(4)).data, [0.25] * 4)


def test_softmax_no_overflow():
    y = dc.softmax_lastdim(np.array([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0, 0.0], atol=1e-300)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_matches_oracle(row):
    row = np.array(row)
    want = np.exp(row - row.max()) / np.exp(row - row.max()).sum()
    got = dc.softmax_lastdim(row).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)
    assert abs(got.sum() - 1.0) <= 1e-9


def test_l2_normalize_rows_and_zero_row():
    x = np.random.default_rng(4).standard_normal((6, 5))
    x[2] = 0.0
    leaf = dc.DiffArray(x, True)
    y = dc.l2_normalize_lastdim(leaf)
    norms = np.linalg.norm(y.data, axis=1)
    np.testing.assert_allclose(np.delete(norms, 2), 1.0, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(y.data[2], 0.0)
    dc.backward(weighted_sum(y))
    np.testing.assert_array_equal(leaf.grad[2], 0.0)


# ---------------------------------------------------------------- generic op gradients

def _ops(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    nz = away_from_zero(rng, (3, 4))
    return {
        "add": (lambda a, b: dc.add(a, b), (a, b)),
        "add_broadcast": (lambda a, b: dc.add(a, b), (a, b[0])),
        "sub": (lambda a, b: dc.sub(a, b), (a, b)),
        "mul": (lambda a, b: dc.mul(a, b), (a, b)),
        "div": (lambda a, b: dc.div(a, b), (a, pos)),
        "neg": (lambda a: dc.neg(a), (a,)),
        "relu": (lambda a: dc.relu(a), (nz,)),
        "sigmoid": (lambda a: dc.sigmoid(a), (a,)),
        "softplus": (lambda a: dc.softplus(a), (a * 5,)),
        "exp": (lambda a: dc.exp(a), (a,)),
        "log": (lambda a: dc.log(a), (pos,)),
        "abs": (lambda a: dc.abs_(a), (nz,)),
        "maximum_const": (lambda a: dc.maximum_const(a, 0.05), (nz,)),
        "sum_axis": (lambda a: dc.sum_(a, axis=1), (a,)),
        "mean_axis": (lambda a: dc.mean(a, axis=0, keepdims=True), (a,)),
        "reshape": (lambda a: dc.reshape(a, (4, 3)), (a,)),
        "transpose": (lambda a: dc.transpose(a, (1, 0)), (a,)),
        "take": (lambda a: dc.take(a, [2, 0, 2], axis=1), (a,)),
        "concat": (lambda a, b: dc.concat([a, b], axis=0), (a, b)),
        "matmul": (lambda a, b: dc.matmul(a, dc.transpose(b, (1, 0))), (a, b)),
        "batched_matmul": (lambda a, b: dc.matmul(dc.reshape(a, (3, 4, 1)), dc.reshape(b, (3, 1, 4))), (a, b)),
        "l2_normalize": (lambda a: dc.l2_normalize_lastdim(a), (a,)),
        "softmax": (lambda a: dc.softmax_lastdim(a), (a,)),
        "distance_matrix": (lambda a, b: dc.euclidean_distance_matrix(a, b), (a, b)),
    }


OP_NAMES = sorted(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradient(name, seed):
    fn, inputs = _ops(np.random.default_rng(seed))[name]
    assert check(lambda *xs: weighted_sum(fn(*xs), seed), *inputs) <= 1e-6


# ---------------------------------------------------------------- backward / tape

def test_backward_sum_gives_ones():
    x = dc.DiffArray(np.random.default_rng(0).standard_normal((3, 2)), True)
    dc.backward(dc.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_gives_2x():
    v = np.random.default_rng(1).standard_normal(5)
    x = dc.DiffArray(v, True)
    dc.backward(dc.sum_(x * x))
    np.testing.assert_array_equal(x.grad, 2 * v)


def test_backward_rejects_non_scalar():
    with pytest.raises(dc.ShapeError):
        dc.backward(dc.DiffArray(np.ones(3), True) * 2.0)


def test_tape_is_topological():
    x = dc.DiffArray(np.ones(3), True)
    y = dc.relu(x * 2.0)
    z = dc.sum_(dc.add(y, x))
    tape = dc.backward(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.leaves() == [x]


def test_constants_are_not_recorded():
    c = dc.DiffArray(np.ones(3))
    y = dc.exp(c)
    assert not y.requires_grad and y.is_leaf


def test_grad_shape_matches_data():
    rng = np.random.default_rng(5)
    x = dc.DiffArray(rng.standard_normal((1, 2, 4, 4)), True)
    k = dc.DiffArray(rng.standard_normal((3, 2, 3, 3)), True)
    dc.backward(dc.sum_(dc.maxpool2(dc.conv2d(x, k, padding=1))))
    assert x.grad.shape == x.shape and k.grad.shape == k.shape


def test_replay_is_bit_identical():
    rng = np.random.default_rng(6)
    xd, kd = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))

    def run():
        x, k = dc.DiffArray(xd, True), dc.DiffArray(kd, True)
        y = dc.softmax_lastdim(dc.bilinear_resize(dc.conv2d(x, k, padding=1), 3, 5))
        loss = weighted_sum(y)
        dc.backward(loss)
        return loss.data.copy(), x.grad, k.grad

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.sampled_from([1, 3]), st.integers(1, 2))
def test_conv_shape_property(cin, cout, size, k, stride):
    pad = k // 2
    y = dc.conv2d(np.zeros((1, cin, size, size)), np.zeros((cout, cin, k, k)), stride=stride, padding=pad)
    ho = (size + 2 * pad - k) // stride + 1
    assert y.shape == (1, cout, ho, ho)
