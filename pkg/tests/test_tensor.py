import numpy as np
import pytest

import daml.tensor as T
from daml.params import ParameterVector, merge, split
from helpers import fd_grad_array, fd_grad_pv, rel_err


def scalar(x):
    return float(x.data)


# ---------------------------------------------------------------------------
# pinned examples


def test_square_gradient_at_three():
    x = T.parameter(3.0)
    y = x * x
    (g,) = T.grad(y, [x])
    assert g.data == pytest.approx(6.0, abs=1e-12)


def test_second_derivative_of_cube():
    x = T.parameter(2.0)
    y = x * x * x
    (g,) = T.grad(y, [x], retain_higher_order=True)
    (h,) = T.grad(g, [x])
    assert h.data == pytest.approx(12.0, abs=1e-10)


def test_conv1d_fixed_example():
    x = T.tensor(np.array([1.0, 2.0, 4.0, 7.0, 11.0]).reshape(5, 1))
    k = T.tensor(np.array([1.0, -1.0]).reshape(2, 1, 1))
    b = T.tensor(np.zeros(1))
    out = T.conv1d_valid(x, k, b)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, -2.0, -3.0, -4.0], atol=1e-12)


def test_conv2d_identity_kernel():
    rng = np.random.RandomState(0)
    img = rng.rand(6, 5, 3)
    k = np.zeros((1, 1, 3, 3))
    for c in range(3):
        k[0, 0, c, c] = 1.0
    out = T.conv2d(T.tensor(img), T.tensor(k), stride=1)
    np.testing.assert_allclose(out.data, img, atol=1e-12)


def test_conv2d_ones_kernel_counts_window():
    img = np.ones((5, 5, 1))
    k = np.ones((3, 3, 1, 1))
    out = T.conv2d(T.tensor(img), T.tensor(k), stride=1)
    assert out.shape == (3, 3, 1)
    np.testing.assert_allclose(out.data, 9.0, atol=1e-12)


def test_conv2d_stride_two_shapes():
    img = np.zeros((24, 24, 3))
    k = np.zeros((3, 3, 3, 16))
    out = T.conv2d(T.tensor(img), T.tensor(k), stride=2)
    assert out.shape == (11, 11, 16)


def test_softmax_fixed_example():
    x = T.tensor(np.array([0.0, np.log(2.0)]))
    s = T.softmax(x, axis=-1)
    np.testing.assert_allclose(s.data, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)
    assert abs(s.data.sum() - 1.0) <= 1e-12


def test_layer_norm_constant_input_is_zero():
    x = T.tensor(np.full(7, 3.25))
    out = T.layer_norm(x, T.tensor(np.ones(7)), T.tensor(np.zeros(7)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_matmul_identity():
    rng = np.random.RandomState(1)
    a = rng.randn(4, 4)
    out = T.matmul(T.tensor(a), T.tensor(np.eye(4)))
    np.testing.assert_allclose(out.data, a, atol=1e-15)


def test_l2_norm_zero_input_gradient_is_zero():
    x = T.parameter(np.zeros(5))
    y = T.l2_norm(x)
    assert scalar(y) == 0.0
    (g,) = T.grad(y, [x])
    np.testing.assert_array_equal(g.data, np.zeros(5))


def test_clip_straight_through_mask():
    x = T.parameter(np.array([-40.0, -5.0, 0.0, 29.0, 100.0]))
    y = T.tsum(T.clip(x, -30.0, 30.0))
    (g,) = T.grad(y, [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 1.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.clip(x, -30.0, 30.0).data, [-30.0, -5.0, 0.0, 29.0, 30.0])


# ---------------------------------------------------------------------------
# finite-difference checks


def test_two_layer_network_gradient_matches_fd():
    rng = np.random.RandomState(7)
    pv = ParameterVector({
        "w1": T.parameter(rng.randn(6, 10) * 0.4),
        "b1": T.parameter(rng.randn(10) * 0.1),
        "w2": T.parameter(rng.randn(10, 3) * 0.4),
        "b2": T.parameter(rng.randn(3) * 0.1),
    })
    assert pv.total_size < 200
    x = rng.randn(4, 6)
    t = rng.randn(4, 3)

    def loss(p):
        h = T.relu(T.add(T.matmul(T.tensor(x), p["w1"]), p["b1"]))
        out = T.add(T.matmul(h, p["w2"]), p["b2"])
        d = T.sub(out, T.tensor(t))
        return T.tsum(T.mul(d, d))

    g = T.grad(loss(pv), pv)
    fd = fd_grad_pv(lambda p: scalar(loss(p)), pv)
    assert rel_err(g.flatten(), fd) <= 1e-4


PRIM_CASES = [
    ("add", lambda p: T.tsum(T.mul(T.add(p["a"], p["b"]), T.tensor([[1.0, -2.0, 0.5]]))), {"a": (4, 3), "b": (3,)}),
    ("sub", lambda p: T.tsum(T.mul(T.sub(p["a"], p["b"]), p["a"])), {"a": (4, 3), "b": (4, 1)}),
    ("mul", lambda p: T.tsum(T.mul(p["a"], p["b"])), {"a": (2, 5), "b": (2, 5)}),
    ("div", lambda p: T.tsum(T.div(p["a"], T.add(T.mul(p["b"], p["b"]), 1.0))), {"a": (3, 3), "b": (3, 3)}),
    ("exp", lambda p: T.tsum(T.exp(p["a"])), {"a": (6,)}),
    ("log", lambda p: T.tsum(T.log(T.add(T.mul(p["a"], p["a"]), 0.5))), {"a": (6,)}),
    ("sqrt", lambda p: T.tsum(T.sqrt(T.add(T.mul(p["a"], p["a"]), 0.3))), {"a": (5,)}),
    ("matmul", lambda p: T.tsum(T.mul(T.matmul(p["a"], p["b"]), T.matmul(p["a"], p["b"]))), {"a": (3, 4), "b": (4, 2)}),
    ("sigmoid", lambda p: T.tsum(T.sigmoid(p["a"])), {"a": (7,)}),
    ("tanh", lambda p: T.tsum(T.mul(T.tanh(p["a"]), p["a"])), {"a": (7,)}),
    ("softmax", lambda p: T.tsum(T.mul(T.softmax(p["a"], axis=1), T.tensor(np.arange(12.0).reshape(3, 4)))), {"a": (3, 4)}),
    ("logsumexp", lambda p: T.tsum(T.logsumexp(p["a"], axis=1)), {"a": (3, 5)}),
    ("log_softmax", lambda p: T.tsum(T.mul(T.log_softmax(p["a"], axis=0), T.tensor(np.arange(5.0)))), {"a": (5,)}),
    ("l2_norm", lambda p: T.l2_norm(p["a"]), {"a": (4, 3)}),
    ("layer_norm", lambda p: T.tsum(T.mul(T.layer_norm(p["a"], p["g"], p["o"]), T.tensor(np.arange(8.0)))), {"a": (3, 8), "g": (8,), "o": (8,)}),
    ("sum_axis", lambda p: T.tsum(T.mul(T.tsum(p["a"], axis=1), T.tensor([1.0, -1.0, 2.0]))), {"a": (3, 4)}),
    ("mean", lambda p: T.tsum(T.mul(T.mean(p["a"], axis=0), T.tensor([1.0, 3.0]))), {"a": (5, 2)}),
    ("transpose", lambda p: T.tsum(T.mul(T.transpose(p["a"]), T.tensor(np.arange(12.0).reshape(4, 3)))), {"a": (3, 4)}),
    ("reshape", lambda p: T.tsum(T.mul(T.reshape(p["a"], (2, 6)), T.tensor(np.arange(12.0).reshape(2, 6)))), {"a": (3, 4)}),
    ("broadcast_to", lambda p: T.tsum(T.mul(T.broadcast_to(p["a"], (4, 3)), T.tensor(np.arange(12.0).reshape(4, 3)))), {"a": (1, 3)}),
    ("concat", lambda p: T.tsum(T.mul(T.concat([p["a"], p["b"]], axis=1), T.tensor(np.arange(15.0).reshape(3, 5)))), {"a": (3, 2), "b": (3, 3)}),
    ("getitem", lambda p: T.tsum(T.mul(p["a"][1:3, ::2], p["a"][0:2, 1::2])), {"a": (4, 4)}),
    ("conv1d", lambda p: T.tsum(T.mul(T.conv1d_valid(p["x"], p["k"], p["b"]), T.tensor(np.arange(8.0).reshape(4, 2)))), {"x": (6, 3), "k": (3, 3, 2), "b": (2,)}),
    ("conv2d", lambda p: T.tsum(T.mul(T.conv2d(p["x"], p["k"], stride=2), T.tensor(np.arange(8.0).reshape(2, 2, 2)))), {"x": (5, 5, 3), "k": (3, 3, 3, 2)}),
]


@pytest.mark.parametrize("name,fn,shapes", PRIM_CASES, ids=[c[0] for c in PRIM_CASES])
def test_primitive_gradient_matches_fd(name, fn, shapes):
    rng = np.random.RandomState(hash(name) % (2**31))
    pv = ParameterVector({k: T.parameter(rng.randn(*s) * 0.7) for k, s in shapes.items()})
    g = T.grad(fn(pv), pv)
    fd = fd_grad_pv(lambda p: scalar(fn(p)), pv)
    assert rel_err(g.flatten(), fd) <= 1e-4, f"{name}: rel err too large"


def test_getitem_gradient_accumulates_repeated_indices():
    # the adjoint of a gather must sum over duplicate index positions, not
    # keep whichever write landed last
    x = T.parameter(np.array([1.0, 2.0, 3.0]))
    idx = np.array([0, 2, 0, 0])
    (g,) = T.grad(T.tsum(T.mul(x[idx], T.tensor(np.array([1.0, 10.0, 100.0, 1000.0])))), [x])
    assert np.array_equal(g.data, [1101.0, 0.0, 10.0])


def test_relu_gradient_matches_fd_away_from_kink():
    rng = np.random.RandomState(3)
    x = rng.randn(20)
    x[np.abs(x) < 0.05] += 0.1
    p = ParameterVector({"a": T.parameter(x)})

    def f(pv):
        return T.tsum(T.mul(T.relu(pv["a"]), T.tensor(np.arange(20.0))))

    g = T.grad(f(p), p)
    fd = fd_grad_pv(lambda pv: scalar(f(pv)), p)
    assert rel_err(g.flatten(), fd) <= 1e-4


def test_second_order_composite_matches_fd():
    # d/dx of (dL/dx . v) for fixed v, against central differences of the
    # analytic first-order gradient
    rng = np.random.RandomState(11)
    n = 6
    x0 = rng.randn(n)
    v = rng.randn(n)
    w = rng.randn(n, n) * 0.3

    def build_loss(xt):
        h = T.tanh(T.matmul(T.reshape(xt, (1, n)), T.tensor(w)))
        return T.tsum(T.mul(h, h)) + T.tsum(T.exp(T.mul(xt, 0.3)))

    x = T.parameter(x0)
    (g,) = T.grad(build_loss(x), [x], retain_higher_order=True)
    gv = T.tsum(T.mul(g, T.tensor(v)))
    (h,) = T.grad(gv, [x])

    def first_order(xarr):
        xt = T.parameter(xarr)
        (gg,) = T.grad(build_loss(xt), [xt])
        return float(np.dot(gg.data, v))

    fd = fd_grad_array(first_order, x0.copy())
    assert rel_err(h.data, fd) <= 1e-3


def test_gradient_linearity():
    rng = np.random.RandomState(5)
    x = T.parameter(rng.randn(8))

    def f(xt):
        return T.tsum(T.mul(T.sigmoid(xt), T.tensor(np.arange(8.0))))

    def g(xt):
        return T.l2_norm(T.mul(xt, xt))

    a, b = 1.7, -0.4
    (gf,) = T.grad(f(x), [x])
    (gg,) = T.grad(g(x), [x])
    combined = T.add(T.mul(f(x), a), T.mul(g(x), b))
    (gc,) = T.grad(combined, [x])
    np.testing.assert_allclose(gc.data, a * gf.data + b * gg.data, rtol=0, atol=1e-12)


def test_flatten_unflatten_identity_bit_exact():
    rng = np.random.RandomState(9)
    pv = ParameterVector({
        "a": T.parameter(rng.randn(3, 4)),
        "b": T.parameter(rng.randn(7)),
        "c": T.parameter(rng.randn(2, 2, 2)),
    })
    back = pv.unflatten(pv.flatten())
    for name, t in pv.items():
        assert np.array_equal(back[name].data, t.data)
        assert back[name].grad_tracked == t.grad_tracked


def test_grad_of_disconnected_input_is_zero():
    x = T.parameter(np.ones(3))
    y = T.parameter(np.ones(2))
    out = T.tsum(T.mul(x, x))
    gx, gy = T.grad(out, [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(2))
    np.testing.assert_allclose(gx.data, 2.0, atol=1e-15)


def test_grad_rejects_nonscalar_output():
    x = T.parameter(np.ones(3))
    with pytest.raises(ValueError):
        T.grad(T.mul(x, 2.0), [x])


def test_no_grad_blocks_tracking():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.grad_tracked


def test_grad_wrt_intermediate_node():
    x = T.parameter(2.0)
    y = T.mul(x, x)       # y = x^2
    z = T.mul(y, y)       # z = y^2 = x^4
    (gy,) = T.grad(z, [y])
    assert gy.data == pytest.approx(2.0 * 4.0)  # dz/dy = 2y = 8
    (gx,) = T.grad(z, [x])
    assert gx.data == pytest.approx(4.0 * 8.0)  # 4x^3 = 32


def test_conv1d_rejects_short_input():
    with pytest.raises(ValueError):
        T.conv1d_valid(T.tensor(np.zeros((2, 1))), T.tensor(np.zeros((3, 1, 1))), T.tensor(np.zeros(1)))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(T.tensor(np.zeros((5, 5, 2))), T.tensor(np.zeros((3, 3, 3, 4))))


def test_parameter_vector_arithmetic_and_errors():
    a = ParameterVector({"x": T.parameter(np.ones(3)), "y": T.parameter(np.zeros(2))})
    b = a.map(lambda t: T.mul(t, 2.0))
    c = a + b
    np.testing.assert_allclose(c["x"].data, 3.0)
    with pytest.raises(ValueError):
        _ = a + ParameterVector({"x": T.parameter(np.ones(3))})
    with pytest.raises(ValueError):
        _ = a + ParameterVector({"x": T.parameter(np.ones(4)), "y": T.parameter(np.zeros(2))})


def test_merge_split_roundtrip():
    a = ParameterVector({"x": T.parameter(np.ones(3))})
    b = ParameterVector({"y": T.parameter(np.zeros(2))})
    m = merge({"theta": a, "psi": b})
    assert m.names() == ["theta.x", "psi.y"]
    back = split(m, ["theta", "psi"])
    assert back["theta"].names() == ["x"]
    assert np.array_equal(back["psi"]["y"].data, b["y"].data)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.RandomState(21)
    x = rng.randn(3, 7, 7, 2)
    k = rng.randn(3, 3, 2, 4)
    batched = T.conv2d(T.tensor(x), T.tensor(k), stride=2)
    for i in range(3):
        single = T.conv2d(T.tensor(x[i]), T.tensor(k), stride=2)
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-13)


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.RandomState(13)
    x = rng.randn(6, 7, 2)
    k = rng.randn(3, 3, 2, 4)
    stride = 2
    out = T.conv2d(T.tensor(x), T.tensor(k), stride=stride).data
    oh, ow = out.shape[0], out.shape[1]
    expect = np.zeros_like(out)
    for i in range(oh):
        for j in range(ow):
            for o in range(4):
                acc = 0.0
                for ki in range(3):
                    for kj in range(3):
                        for c in range(2):
                            acc += x[i * stride + ki, j * stride + kj, c] * k[ki, kj, c, o]
                expect[i, j, o] = acc
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_conv1d_matches_nested_loop_oracle():
    rng = np.random.RandomState(14)
    x = rng.randn(9, 3)
    k = rng.randn(4, 3, 2)
    b = rng.randn(2)
    out = T.conv1d_valid(T.tensor(x), T.tensor(k), T.tensor(b)).data
    expect = np.zeros((6, 2))
    for t in range(6):
        for o in range(2):
            acc = b[o]
            for j in range(4):
                for c in range(3):
                    acc += k[j, c, o] * x[t + j, c]
            expect[t, o] = acc
    np.testing.assert_allclose(out, expect, atol=1e-12)
