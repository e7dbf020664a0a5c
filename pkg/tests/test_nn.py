import numpy as np
import pytest

import daml.nn as nn
import daml.tensor as T
from daml.params import ParameterVector
from helpers import fd_grad_pv, rel_err


# ---------------------------------------------------------------------------
# spatial soft-argmax


def test_soft_argmax_uniform_map_is_centered():
    fp = nn.spatial_soft_argmax(T.tensor(np.zeros((5, 5, 3))))
    np.testing.assert_allclose(fp.points.data, 0.0, atol=1e-12)
    assert fp.points.shape == (6,)


def test_soft_argmax_peak_at_top_left():
    act = np.zeros((5, 5, 1))
    act[0, 0, 0] = 1000.0
    fp = nn.spatial_soft_argmax(T.tensor(act))
    np.testing.assert_allclose(fp.points.data, [-1.0, -1.0], atol=1e-6)


def test_soft_argmax_two_by_two_fixed_example():
    act = np.array([[0.0, np.log(2.0)], [0.0, 0.0]]).reshape(2, 2, 1)
    fp = nn.spatial_soft_argmax(T.tensor(act))
    np.testing.assert_allclose(fp.points.data, [0.2, -0.2], atol=1e-9)


def test_soft_argmax_single_pixel_maps_to_zero():
    fp = nn.spatial_soft_argmax(T.tensor(np.ones((1, 1, 2))))
    np.testing.assert_allclose(fp.points.data, 0.0, atol=1e-12)


def test_soft_argmax_matches_expectation_oracle():
    rng = np.random.RandomState(2)
    act = rng.randn(4, 6, 3)
    fp = nn.spatial_soft_argmax(T.tensor(act)).points.data
    xs = np.linspace(-1, 1, 6)
    ys = np.linspace(-1, 1, 4)
    for c in range(3):
        w = np.exp(act[:, :, c] - act[:, :, c].max())
        w = w / w.sum()
        ex = float(np.sum(w * xs[None, :]))
        ey = float(np.sum(w * ys[:, None]))
        assert fp[2 * c] == pytest.approx(ex, abs=1e-10)
        assert fp[2 * c + 1] == pytest.approx(ey, abs=1e-10)


def test_soft_argmax_output_within_bounds_and_differentiable():
    rng = np.random.RandomState(3)
    p = ParameterVector({"a": T.parameter(rng.randn(3, 4, 2))})

    def f(pv):
        fp = nn.spatial_soft_argmax(pv["a"])
        return T.tsum(T.mul(fp.points, T.tensor(np.arange(4.0))))

    fp = nn.spatial_soft_argmax(p["a"]).points.data
    assert np.all(fp >= -1.0) and np.all(fp <= 1.0)
    g = T.grad(f(p), p)
    fd = fd_grad_pv(lambda pv: float(f(pv).data), p)
    assert rel_err(g.flatten(), fd) <= 1e-4


# ---------------------------------------------------------------------------
# mixture density


def _mdn(logits, means, log_sigmas):
    return nn.MdnParams(T.tensor(np.asarray(logits, dtype=float)),
                        T.tensor(np.asarray(means, dtype=float)),
                        T.tensor(np.asarray(log_sigmas, dtype=float)))


def test_mdn_nll_single_standard_normal_at_mean():
    params = _mdn([0.0], [[0.0]], [0.0])
    out = nn.mdn_nll(params, T.tensor(np.zeros(1)))
    assert float(out.data) == pytest.approx(0.9189385332046727, abs=1e-12)


def test_mdn_nll_degenerate_pair_equals_single_mode():
    params = _mdn([0.3, 0.3], [[0.0], [0.0]], [0.0, 0.0])
    out = nn.mdn_nll(params, T.tensor(np.zeros(1)))
    assert float(out.data) == pytest.approx(0.9189385332046727, abs=1e-12)


def test_mdn_nll_two_separated_modes():
    params = _mdn([0.0, 0.0], [[1.0], [-1.0]], [0.0, 0.0])
    out = nn.mdn_nll(params, T.tensor(np.zeros(1)))
    assert float(out.data) == pytest.approx(0.9189385332046727 + 0.5, abs=1e-12)


def test_mdn_nll_matches_bruteforce_density():
    rng = np.random.RandomState(4)
    for _ in range(50):
        m = rng.randint(1, 21)
        a = rng.randint(1, 5)
        logits = rng.randn(m) * 2.0
        means = rng.randn(m, a)
        log_sigmas = rng.randn(m) * 0.5
        action = rng.randn(a)
        params = _mdn(logits, means, log_sigmas)
        nll = float(nn.mdn_nll(params, T.tensor(action)).data)
        dens = nn.mdn_density_oracle(logits, means, log_sigmas, action)
        assert abs(nll - (-np.log(dens))) <= 1e-10


def test_mdn_weights_sum_to_one():
    rng = np.random.RandomState(5)
    logits = T.tensor(rng.randn(20) * 3)
    w = T.softmax(logits, axis=-1).data
    assert abs(w.sum() - 1.0) <= 1e-12


def test_mdn_nll_gradient_matches_fd():
    rng = np.random.RandomState(6)
    m, a = 4, 2
    p = ParameterVector({
        "logits": T.parameter(rng.randn(m)),
        "means": T.parameter(rng.randn(m, a)),
        "ls": T.parameter(rng.randn(m) * 0.3),
    })
    action = rng.randn(a)

    def f(pv):
        return nn.mdn_nll(nn.MdnParams(pv["logits"], pv["means"], pv["ls"]),
                          T.tensor(action))

    g = T.grad(f(p), p)
    fd = fd_grad_pv(lambda pv: float(f(pv).data), p)
    assert rel_err(g.flatten(), fd) <= 1e-4


def test_mdn_select_concentrated_mode():
    rng = np.random.default_rng(7)
    params = _mdn([0.0], [[0.4, -0.7]], [np.log(1e-6)])
    act = nn.mdn_select_action(params, rng)
    np.testing.assert_allclose(act, [0.4, -0.7], atol=1e-4)


def test_mdn_select_prefers_dominant_mode():
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(100 + trial)
        params = _mdn([np.log(0.99), np.log(0.01)],
                      [[2.0, 2.0], [-2.0, -2.0]], [np.log(0.05), np.log(0.05)])
        act = nn.mdn_select_action(params, rng)
        if np.linalg.norm(act - np.array([2.0, 2.0])) < 1.0:
            hits += 1
    assert hits >= 95


def test_mdn_select_deterministic_given_rng():
    params = _mdn([0.1, -0.2], [[0.5, 0.5], [-0.5, 0.0]], [0.0, -1.0])
    a1 = nn.mdn_select_action(params, np.random.default_rng(9))
    a2 = nn.mdn_select_action(params, np.random.default_rng(9))
    np.testing.assert_array_equal(a1, a2)


def test_mdn_rejects_inconsistent_shapes():
    with pytest.raises(ValueError):
        nn.MdnParams(T.tensor(np.zeros(3)), T.tensor(np.zeros((2, 2))), T.tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# gripper cross-entropy


def test_gripper_ce_fixed_values():
    assert float(nn.gripper_ce(T.tensor(0.0), 1.0).data) == pytest.approx(np.log(2.0), abs=1e-12)
    assert float(nn.gripper_ce(T.tensor(0.0), 0.0).data) == pytest.approx(np.log(2.0), abs=1e-12)
    expect = -np.log(1.0 / (1.0 + np.exp(-2.0)))
    assert float(nn.gripper_ce(T.tensor(2.0), 1.0).data) == pytest.approx(expect, abs=1e-12)


def test_gripper_ce_large_logits_stable():
    assert np.isfinite(float(nn.gripper_ce(T.tensor(500.0), 0.0).data))
    assert np.isfinite(float(nn.gripper_ce(T.tensor(-500.0), 1.0).data))
    assert float(nn.gripper_ce(T.tensor(500.0), 1.0).data) == pytest.approx(0.0, abs=1e-12)


def test_gripper_ce_gradient_matches_fd():
    rng = np.random.RandomState(8)
    z = rng.randn(6) * 2
    z[np.abs(z) < 0.05] += 0.2
    labels = (rng.rand(6) > 0.5).astype(float)
    p = ParameterVector({"z": T.parameter(z)})

    def f(pv):
        return T.tsum(nn.gripper_ce_seq(pv["z"], T.tensor(labels)))

    g = T.grad(f(p), p)
    fd = fd_grad_pv(lambda pv: float(f(pv).data), p)
    assert rel_err(g.flatten(), fd) <= 1e-4


def test_gripper_ce_gradient_exact_at_zero_logit():
    # a freshly initialized head emits exactly zero, so the derivative there
    # must be sigmoid(0) - y, not a kinked subgradient
    for y in (0.0, 1.0):
        p = ParameterVector({"z": T.parameter(np.zeros(1))})
        g = T.grad(T.tsum(nn.gripper_ce_seq(p["z"], T.tensor(np.array([y])))), p)
        assert g.flatten()[0] == pytest.approx(0.5 - y, abs=1e-12)


def test_fan_in_uniform_bounds():
    rng = np.random.default_rng(10)
    w = nn.fan_in_uniform(rng, (50, 50), fan_in=25)
    assert np.all(np.abs(w) <= 0.2)
    assert np.std(w) > 0.05
