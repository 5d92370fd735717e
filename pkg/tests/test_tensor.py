import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dinn import tensor as T
from dinn.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(f, *inputs, tol=1e-6):
    """backward() vs central differences for every input of ``f``."""
    loss = f(*inputs)
    grads = T.backward(loss, inputs)
    for x, g in zip(inputs, grads):
        fd = T.finite_diff_grad(lambda _: f(*inputs).item(), x)
        assert rel_err(g, fd) < tol, x.shape


# ---------------------------------------------------------------- conv2d


def test_conv_shapes_from_layer_table():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(30, 20, 4)))
    k = Tensor(rng.normal(size=(3, 3, 4, 8)))
    assert T.conv2d(x, k, Tensor(np.zeros(8)), 2).shape == (15, 10, 8)
    x = Tensor(rng.normal(size=(8, 5, 32)))
    k = Tensor(rng.normal(size=(3, 3, 32, 128)))
    assert T.conv2d(x, k, Tensor(np.zeros(128)), 2).shape == (4, 3, 128)


def test_conv_hand_sum():
    out = T.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)), 1)
    assert out.data[1, 1, 0] == 9
    assert out.data[0, 0, 0] == 4


def test_conv_channel_mismatch_names_both():
    with pytest.raises(ShapeError, match=r"5.*C_in=4"):
        T.conv2d(Tensor(np.ones((6, 6, 5))), Tensor(np.ones((3, 3, 4, 2))), Tensor(np.zeros(2)))


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 7, 5, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), 2).data
    # ceil-same: 7 -> 4 (pad 0 before, 2 after... total (4-1)*2+3-7 = 2 -> 1/1), 5 -> 3 (total 2 -> 1/1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 3, 4))
    for i in range(4):
        for j in range(3):
            patch = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            ref[:, i, j] = np.einsum("nhwc,hwco->no", patch, k) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_same_padding_ladder():
    assert [T.same_padding(n, 3, 2)[0] for n in (30, 15, 8)] == [15, 8, 4]
    assert [T.same_padding(n, 3, 2)[0] for n in (20, 10, 5)] == [10, 5, 3]
    # odd total padding goes after
    assert T.same_padding(15, 3, 2) == (8, 1, 1)
    assert T.same_padding(30, 3, 2) == (15, 0, 1)


@pytest.mark.parametrize("k,s,hw", [(3, 2, (7, 5)), (3, 1, (4, 6)), (1, 1, (3, 3)), (3, 2, (4, 3))])
def test_conv_gradients(k, s, hw):
    rng = np.random.default_rng(k * 10 + s)
    x = leaf(rng.normal(size=(2,) + hw + (3,)))
    w = leaf(rng.normal(size=(k, k, 3, 2)))
    b = leaf(rng.normal(size=2))
    r = rng.normal(size=T.conv2d(x, w, b, s).shape)
    check_grad(lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b, s), Tensor(r))), x, w, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-4, 4).filter(lambda a: abs(a) > 1e-3))
def test_conv_linearity(seed, a):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 6, 5, 3))
    k = Tensor(rng.normal(size=(3, 3, 3, 4)))
    zero = Tensor(np.zeros(4))
    lhs = T.conv2d(Tensor(a * x), k, zero, 2).data
    rhs = a * T.conv2d(Tensor(x), k, zero, 2).data
    assert rel_err(lhs, rhs) < 1e-6


# ---------------------------------------------------------------- dense


def test_dense_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 128)))
    w = Tensor(np.zeros((1536, 1024)))
    assert T.dense(T.reshape(x, (1536,)), w, Tensor(np.zeros(1024))).shape == (1024,)
    b = np.arange(3.0)
    np.testing.assert_array_equal(T.dense(Tensor(np.ones(5)), Tensor(np.zeros((5, 3))), Tensor(b)).data, b)
    out = T.dense(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_dense_batch_of_one_and_mismatch():
    out = T.dense(Tensor(np.ones((1, 4, 3, 128))), Tensor(np.ones((1536, 2))), Tensor(np.zeros(2)))
    assert out.shape == (1, 2)
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.ones(5)), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


def test_dense_gradients():
    rng = np.random.default_rng(3)
    x, w, b = leaf(rng.normal(size=(3, 2, 2))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    r = Tensor(rng.normal(size=(3, 5)))
    check_grad(lambda x, w, b: T.tsum(T.mul(T.dense(x, w, b), r)), x, w, b)


# ---------------------------------------------------------------- resize


def test_resize_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(8, 10, 128)))
    assert T.resize_nearest(x, (15, 20)).shape == (15, 20, 128)
    np.testing.assert_array_equal(T.resize_nearest(x, (8, 10)).data, x.data)
    np.testing.assert_array_equal(T.resize_nearest(Tensor([[[3.0]]]), (2, 2)).data, np.full((2, 2, 1), 3.0))
    with pytest.raises(ShapeError):
        T.resize_nearest(x, (4, 10))


def test_resize_index_rule():
    x = np.arange(8 * 10, dtype=np.float64).reshape(8, 10, 1)
    out = T.resize_nearest(Tensor(x), (15, 20)).data
    for i in range(15):
        for j in range(20):
            assert out[i, j, 0] == x[i * 8 // 15, j * 10 // 20, 0]


@pytest.mark.parametrize("src,dst", [((8, 10), (15, 20)), ((2, 3), (4, 6)), ((3, 2), (7, 5))])
def test_resize_gradients(src, dst):
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(2,) + src + (3,)))
    r = Tensor(rng.normal(size=(2,) + dst + (3,)))
    check_grad(lambda x: T.tsum(T.mul(T.resize_nearest(x, dst), r)), x)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)),
           elements=st.floats(-100, 100)),
    st.integers(1, 4),
    st.integers(1, 4),
)
def test_integer_upscale_preserves_channel_mean(x, fh, fw):
    h, w, _ = x.shape
    up = T.resize_nearest(Tensor(x), (h * fh, w * fw)).data
    # each source cell is replicated exactly fh*fw times
    np.testing.assert_allclose(up.sum(axis=(0, 1)), fh * fw * x.sum(axis=(0, 1)), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(up.mean(axis=(0, 1)), x.mean(axis=(0, 1)), rtol=1e-12, atol=1e-9)


# ---------------------------------------------------------------- activations


def test_activation_examples():
    np.testing.assert_array_equal(T.activation(Tensor([-1.0, 2.0]), "relu").data, [0.0, 2.0])
    assert T.activation(Tensor([-1.0]), "lrelu", 0.2).data[0] == pytest.approx(-0.2)
    assert T.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    with pytest.raises(ValueError):
        T.leaky_relu(Tensor([1.0]), 1.5)


def test_kink_subgradient_is_one():
    x = leaf([0.0])
    (g,) = T.backward(T.tsum(T.relu(x)), [x])
    assert g[0] == 1.0
    (g,) = T.backward(T.tsum(T.leaky_relu(x, 0.2)), [x])
    assert g[0] == 1.0


def test_sigmoid_extremes_are_finite():
    s = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


@pytest.mark.parametrize("kind", ["relu", "lrelu", "sigmoid"])
def test_activation_gradients(kind):
    # keep away from the kink
    x = np.random.default_rng(7).normal(size=(3, 4))
    x[np.abs(x) < 0.05] = 0.3
    x = leaf(x)
    check_grad(lambda x: T.tsum(T.square(T.activation(x, kind))), x)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([2.0] * 4)).data, [0.25] * 4)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(x, c):
    s = T.softmax(Tensor(x)).data
    assert np.all(s > 0)
    assert abs(s.sum() - 1.0) <= 1e-6
    shifted = T.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(shifted, s, rtol=1e-6, atol=1e-12)
    assert np.argmax(shifted) == np.argmax(s)


def test_softmax_large_inputs_stable():
    s = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(s, [0.5, 0.5, 0.0])


def test_softmax_gradients():
    x = leaf(np.random.default_rng(2).normal(size=(3, 4)))
    r = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    check_grad(lambda x: T.tsum(T.mul(T.softmax(x), r)), x)


# ---------------------------------------------------------------- pooling, gating, BCE


def test_global_avg_pool_examples():
    assert T.global_avg_pool(Tensor(np.full((4, 3, 2), 1.5))).data.tolist() == [1.5, 1.5]
    x = np.arange(1.0, 13.0).reshape(4, 3, 1)
    assert T.global_avg_pool(Tensor(x)).data[0] == 6.5
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.zeros((4, 3, 5)))).data, np.zeros(5))


def test_pool_and_gate_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 4, 3, 5)))
    gate = leaf(rng.uniform(size=(2, 5)))
    r = Tensor(rng.normal(size=(2, 4, 3, 5)))
    check_grad(lambda x, gate: T.tsum(T.mul(T.channel_scale(x, gate), r)), x, gate)
    check_grad(lambda x: T.tsum(T.square(T.global_avg_pool(x))), x)


def test_bce_gradients():
    rng = np.random.default_rng(6)
    p = leaf(rng.uniform(0.05, 0.95, size=(3, 6)))
    y = (rng.uniform(size=(3, 6)) > 0.5).astype(np.float64)
    check_grad(lambda p: T.binary_cross_entropy(p, y), p)


# ---------------------------------------------------------------- backward / oracle


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    (g,) = T.backward(T.tsum(T.square(x)), [x])
    np.testing.assert_array_equal(g, [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unused_parameter_gets_exact_zero():
    x, theta = leaf([1.0, 2.0]), leaf([[5.0]])
    gx, gt = T.backward(T.tsum(T.square(x)), [x, theta])
    assert gt.shape == (1, 1) and np.all(gt == 0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.square(leaf([1.0, 2.0])))


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = T.square(x)
    (g,) = T.backward(T.tsum(T.add(y, y)), [x])
    assert g[0] == 12.0


def test_graph_is_topological():
    x = leaf(np.ones((2, 3)))
    w = leaf(np.ones((3, 2)))
    loss = T.tsum(T.sigmoid(T.dense(x, w, leaf(np.zeros(2)))))
    graph = T.Graph(loss)
    assert graph.is_topological()
    assert graph.nodes[-1] is loss
    assert [r.op for r in graph.records][-1] == "sum"


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y.parents == ()


def test_finite_diff_examples():
    x = leaf([1.0, 2.0])
    fd = T.finite_diff_grad(lambda t: float(np.sum(t.data**2)), x, 1e-5)
    np.testing.assert_allclose(fd, [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(T.finite_diff_grad(lambda t: 3.0, x), [0.0, 0.0])
    z = leaf(np.zeros(3))
    fd = T.finite_diff_grad(lambda t: T.tsum(T.sigmoid(t)).item(), z)
    np.testing.assert_allclose(fd, 0.25, atol=1e-9)
    # probing a subset leaves theta untouched
    before = x.data.copy()
    assert T.finite_diff_grad(lambda t: float(np.sum(t.data**2)), x, indices=[1]).shape == (1,)
    np.testing.assert_array_equal(x.data, before)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_small_network_gradient_fidelity(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 6, 4, 2)))
    k = leaf(rng.normal(size=(3, 3, 2, 3)))
    b = leaf(rng.normal(size=3) * 0.1)
    w = leaf(rng.normal(size=(3, 2)))
    c = leaf(np.zeros(2))

    def f(x, k, b, w, c):
        h = T.leaky_relu(T.conv2d(x, k, b, 2), 0.2)
        h = T.resize_nearest(h, (5, 3))
        return T.binary_cross_entropy(T.softmax(T.dense(T.global_avg_pool(h), w, c)), np.eye(2))

    check_grad(f, x, k, b, w, c, tol=1e-6)


def test_determinism_bitwise():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 30, 20, 4)).astype(np.float32)
    k = rng.normal(size=(3, 3, 4, 8)).astype(np.float32)
    outs = []
    for _ in range(2):
        xt, kt = leaf(x.astype(np.float32)), Tensor(k, requires_grad=True)
        y = T.tsum(T.square(T.conv2d(xt, kt, Tensor(np.zeros(8, np.float32)), 2)))
        outs.append((y.data.tobytes(),) + tuple(g.tobytes() for g in T.backward(y, [xt, kt])))
    assert outs[0] == outs[1]


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(leaf([1.0, 2.0]), leaf([1.0]))
