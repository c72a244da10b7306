import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aggnet import tensor as T
from aggnet.tensor import Graph, GraphError, ShapeError, Tensor

from oracles import conv2d_loops, deconv2d_loops, fc_loops


def rand(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = T.conv2d(x, Tensor(w), Tensor([0.0]), stride=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_pointwise_affine():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([1.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[3, 5], [7, 9]])


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loops(rng, stride, k):
    x, w, b = rand(rng, 2, 3, 8, 8), rand(rng, 4, 3, k, k), rand(rng, 4)
    out = T.conv2d(x, w, b, stride=stride)
    assert out.shape == (2, 4, 8 // stride, 8 // stride)
    ref = conv2d_loops(x.data, w.data, b.data, stride, (k - 1) // 2)
    np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


def test_conv_odd_size_stride2_is_ceil(rng):
    out = T.conv2d(rand(rng, 1, 2, 7, 5), rand(rng, 3, 2, 3, 3), None, stride=2)
    assert out.shape == (1, 3, 4, 3)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(rand(rng, 1, 3, 4, 4), rand(rng, 2, 4, 3, 3))


# --- deconv2d -------------------------------------------------------------

def test_deconv_identity_stride1():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.deconv2d(x, Tensor(w), None, stride=1).data, x.data)


def test_deconv_hand_unrolled():
    out = T.deconv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))),
                     Tensor([0.0]), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


@pytest.mark.parametrize("k,stride", [(3, 2), (3, 1), (7, 2), (2, 2)])
def test_deconv_matches_loops(rng, k, stride):
    x, w, b = rand(rng, 2, 3, 4, 4), rand(rng, 3, 5, k, k), rand(rng, 5)
    out = T.deconv2d(x, w, b, stride=stride)
    assert out.shape == (2, 5, 4 * stride, 4 * stride)
    ref = deconv2d_loops(x.data, w.data, b.data, stride, (k - 1) // 2, out.shape[2:])
    np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_deconv_adjoint(rng, stride):
    x = rand(rng, 1, 2, 8, 8)
    w = rand(rng, 3, 2, 3, 3)
    y = rand(rng, 1, 3, 8 // stride, 8 // stride)
    lhs = np.vdot(T.conv2d(x, w, None, stride).data, y.data)
    rhs = np.vdot(x.data, T.deconv2d(y, w, None, stride).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_stride2_round_trip_shape(rng):
    x = rand(rng, 1, 2, 12, 10)
    down = T.conv2d(x, rand(rng, 4, 2, 3, 3), None, 2)
    up = T.deconv2d(down, rand(rng, 4, 2, 3, 3), None, 2)
    assert up.shape == x.shape


def test_deconv_rejects_bad_kernel(rng):
    with pytest.raises(ShapeError):
        T.deconv2d(rand(rng, 1, 1, 2, 2), rand(rng, 1, 1, 2, 2), None, stride=1)


# --- fully connected -------------------------------------------------------

def test_fc_identity(rng):
    x = rand(rng, 3, 4)
    out = T.fully_connected(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)


def test_fc_hand_example():
    out = T.fully_connected(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([1.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[4.0, 2.0]])


def test_fc_matches_loops(rng):
    x, w, b = rand(rng, 3, 5), rand(rng, 6, 5), rand(rng, 6)
    np.testing.assert_allclose(T.fully_connected(x, w, b).data, fc_loops(x.data, w.data, b.data),
                               rtol=1e-12, atol=1e-12)


def test_fc_mismatch(rng):
    with pytest.raises(ShapeError):
        T.fully_connected(rand(rng, 3, 5), rand(rng, 6, 4))


# --- elementwise -----------------------------------------------------------

def test_elementwise_values():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(T.mul(Tensor(np.ones(3)), Tensor(np.full(3, 0.5))).data, 0.5)
    assert T.leaky_relu(Tensor([-2.0]), 0.2).data[0] == pytest.approx(-0.4)
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_mul_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        T.mul(rand(rng, 2, 3), rand(rng, 3, 2))


def test_concat_channels_shape(rng):
    out = T.concat_channels([rand(rng, 2, 1, 4, 4), rand(rng, 2, 3, 4, 4)])
    assert out.shape == (2, 4, 4, 4)
    with pytest.raises(ShapeError):
        T.concat_channels([rand(rng, 2, 1, 4, 4), rand(rng, 2, 1, 2, 4)])


def test_huber_corner_uses_quadratic_slope():
    a = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.huber_elem(a, Tensor([0.0]), 1.0))
    g.backward(loss)
    assert a.grad[0] == 1.0
    assert loss.data == 0.5


def test_relu_kink_subgradient_zero():
    a = Tensor([0.0], requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.relu(a))
    g.backward(loss)
    assert a.grad[0] == 0.0


# --- batch norm ------------------------------------------------------------

def test_batch_norm_standardized_input(rng):
    x = rng.normal(size=(4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_constant_channel_gives_beta():
    beta = np.array([0.3, -0.7])
    out = T.batch_norm(Tensor(np.full((2, 2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(beta),
                       np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))


def test_batch_norm_running_stats_and_eval(rng):
    x = rng.normal(loc=2.0, size=(2, 3, 4, 4))
    rm, rv = np.zeros(3), np.ones(3)
    T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=False)
    ref = (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, ref)


def test_batch_norm_needs_two_values():
    with pytest.raises(ShapeError):
        T.batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1))


# --- graph / backward --------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = rand(rng, 2, 3, grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square(rng):
    x = rand(rng, 4, grad=True)
    with Graph() as g:
        loss = T.scale(T.sum_all(T.mul(x, x)), 0.5)
    g.backward(loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates(rng):
    x = rand(rng, 3, grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_rejects_foreign_tensor(rng):
    x = rand(rng, 3, grad=True)
    with Graph():
        loss = T.sum_all(x)
    with pytest.raises(GraphError):
        Graph().backward(loss)
    with pytest.raises(GraphError):
        Graph().backward(Tensor(1.0))


def test_backward_rejects_non_scalar(rng):
    x = rand(rng, 3, grad=True)
    with Graph() as g:
        y = T.scale(x, 2.0)
    with pytest.raises(GraphError):
        g.backward(y)


def test_backward_reverse_order_and_intermediate_grads(rng):
    x = rand(rng, 1, 1, 4, 4, grad=True)
    with Graph() as g:
        h = T.sigmoid(x)
        loss = T.sum_all(T.mul(h, h))
    g.backward(loss)
    assert [n.op for n in g.nodes] == ["sigmoid", "mul", "sum"]
    assert h.grad is not None and h.grad.shape == h.shape
    np.testing.assert_allclose(h.grad, 2 * h.data)


def test_no_graph_no_recording(rng):
    x = rand(rng, 3, grad=True)
    y = T.sum_all(x)
    assert y._node is None


# --- finite-difference gradient checks ------------------------------------

GRADCHECK_TOL = 1e-4


def _check(fn, tensors):
    errs = T.gradcheck(fn, tensors)
    assert max(errs.values()) < GRADCHECK_TOL, errs


def test_gradcheck_conv(rng):
    for stride in (1, 2):
        x, w, b = rand(rng, 2, 3, 6, 6, grad=True), rand(rng, 4, 3, 3, 3, grad=True), rand(rng, 4, grad=True)
        proj = rng.normal(size=(2, 4, 6 // stride, 6 // stride))
        _check(lambda: T.sum_all(T.mul(T.conv2d(x, w, b, stride), Tensor(proj))), dict(x=x, w=w, b=b))


def test_gradcheck_deconv(rng):
    x, w, b = rand(rng, 2, 3, 3, 3, grad=True), rand(rng, 3, 2, 3, 3, grad=True), rand(rng, 2, grad=True)
    proj = rng.normal(size=(2, 2, 6, 6))
    _check(lambda: T.sum_all(T.mul(T.deconv2d(x, w, b, 2), Tensor(proj))), dict(x=x, w=w, b=b))


def test_gradcheck_fc(rng):
    x, w, b = rand(rng, 3, 5, grad=True), rand(rng, 4, 5, grad=True), rand(rng, 4, grad=True)
    proj = rng.normal(size=(3, 4))
    _check(lambda: T.sum_all(T.mul(T.fully_connected(x, w, b), Tensor(proj))), dict(x=x, w=w, b=b))


def test_gradcheck_batch_norm(rng):
    x = rand(rng, 2, 2, 3, 3, grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = rand(rng, 2, grad=True)
    proj = rng.normal(size=(2, 2, 3, 3))

    def fn():
        out = T.batch_norm(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
        return T.sum_all(T.mul(out, Tensor(proj)))

    errs = T.gradcheck(fn, dict(x=x, gamma=gamma, beta=beta))
    assert max(errs.values()) < 1e-5, errs


@pytest.mark.parametrize("op", ["sigmoid", "relu", "leaky_relu", "huber", "abs_diff", "diff",
                                "concat", "reshape", "add", "sub", "clamp_min", "where"])
def test_gradcheck_elementwise(rng, op):
    # keep values away from kinks so central differences are smooth
    def away(shape):
        v = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1, 1], size=shape)
        return Tensor(v, requires_grad=True)

    a, b = away((2, 2, 3, 3)), away((2, 2, 3, 3))
    proj = Tensor(rng.normal(size=(2, 2, 3, 3)))
    mask = rng.random((2, 2, 3, 3)) < 0.5
    fns = {
        "sigmoid": lambda: T.sigmoid(a),
        "relu": lambda: T.relu(a),
        "leaky_relu": lambda: T.leaky_relu(a, 0.2),
        "huber": lambda: T.huber_elem(a, b, 1.0),
        "abs_diff": lambda: T.abs_diff(a, b),
        "add": lambda: T.add(a, b),
        "sub": lambda: T.sub(a, b),
        "clamp_min": lambda: T.clamp_min(a, 0.05),
        "where": lambda: T.where(mask, a, b),
    }
    if op == "diff":
        fn = lambda: T.sum_all(T.mul(T.diff(a, -1), Tensor(proj.data[..., :-1])))
    elif op == "concat":
        stacked = Tensor(np.concatenate([proj.data, 2 * proj.data], axis=1))
        fn = lambda: T.sum_all(T.mul(T.concat_channels([a, b]), stacked))
    elif op == "reshape":
        fn = lambda: T.sum_all(T.mul(T.reshape(a, (4, 9)), Tensor(proj.data.reshape(4, 9))))
    else:
        fn = lambda: T.sum_all(T.mul(fns[op](), proj))
    _check(fn, dict(a=a, b=b))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6),
       k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**16))
def test_conv_property_matches_loops(n, c, h, w, k, stride, seed):
    r = np.random.default_rng(seed)
    x, wt = r.normal(size=(n, c, h, w)), r.normal(size=(2, c, k, k))
    out = T.conv2d(Tensor(x), Tensor(wt), None, stride)
    assert out.shape == (n, 2, -(-h // stride), -(-w // stride))
    np.testing.assert_allclose(out.data, conv2d_loops(x, wt, None, stride, (k - 1) // 2),
                               rtol=1e-10, atol=1e-12)


def test_float32_stays_float32(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
    out = T.leaky_relu(T.conv2d(x, w, None, 1))
    assert out.dtype == np.float32


def test_clamp_min_propagates_nan():
    out = T.clamp_min(Tensor(np.array([np.nan, -1.0, 2.0])), 0.0).data
    assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == 2.0
