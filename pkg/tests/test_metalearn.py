"""Outer loop: cloning loss fixtures, Adam oracle, meta-gradients, training."""

import numpy as np
import pytest

import daml.tensor as T
from daml import metalearn as M
from daml import sim
from daml.adaptloss import LossNetConfig, init_temporal_loss, inner_adapt
from daml.params import merge, split
from daml.policy import PolicyConfig, init_policy_params, policy_forward_seq
from helpers import rel_err

TINY = PolicyConfig(image_hw=8, conv_channels=(2,), conv_strides=(2,),
                    fc_width=8, fc_layers=1, mdn_modes=2, bias_dim=2)
SMALL_NET = LossNetConfig(channels=(2, 2), kernel=4)
LOG_2PI = float(np.log(2.0 * np.pi))


def tiny_mcfg(**kw):
    base = dict(inner_step_size=0.01, inner_steps=1, meta_batch_size=2,
                iterations=1, demo_subsample=20)
    base.update(kw)
    return M.MetaConfig(**base)


def synthetic_demo(rng, t=8, hw=8):
    return M.DemoTensors(frames=T.tensor(rng.uniform(size=(t, hw, hw, 3))),
                         states=T.tensor(rng.normal(size=(t, 4)) * 0.1),
                         actions=np.concatenate(
                             [rng.normal(size=(t, 2)) * 0.3,
                              rng.integers(0, 2, size=(t, 1)).astype(float)], axis=1),
                         final_pose=rng.uniform(size=2))


class FakeTask:
    """Stand-in task record: prerendered frames, no simulator involved."""

    def __init__(self, rng, t=24, hw=8):
        frames = (rng.uniform(size=(t, hw, hw, 3)) * 255).astype(np.uint8)
        states = rng.normal(size=(t, 4)).astype(np.float32) * 0.1
        actions = np.concatenate(
            [rng.normal(size=(t, 2)) * 0.3,
             rng.integers(0, 2, size=(t, 1)).astype(float)], axis=1).astype(np.float32)
        self.humans = [sim.HumanDemo(frames=frames, style_id=1)]
        self.robots = [sim.RobotDemo(frames=frames, states=states, actions=actions,
                                     final_pose=rng.uniform(size=2).astype(np.float32),
                                     style_id=0)]


# ---------------------------------------------------------------------------
# behavior cloning loss


def test_bc_loss_fresh_policy_pinned_value():
    # fresh heads emit zero means, unit sigmas, uniform modes, zero logit and
    # zero pose, so every term has a closed form
    rng = np.random.default_rng(0)
    theta = init_policy_params(TINY, rng)
    demo = synthetic_demo(np.random.default_rng(1), t=6)
    mcfg = tiny_mcfg()
    got = float(M.bc_loss(theta, demo, mcfg, TINY).data)
    a = demo.actions
    want = sum(LOG_2PI + 0.5 * np.sum(a[t, :2] ** 2) + np.log(2.0)
               + 0.1 * np.sum(demo.final_pose ** 2)
               for t in range(a.shape[0]))
    assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_bc_loss_l1_l2_pinned_value():
    rng = np.random.default_rng(2)
    theta = init_policy_params(TINY, rng)
    demo = synthetic_demo(np.random.default_rng(3), t=5)
    mcfg = tiny_mcfg(bc_mode="l1_l2")
    got = float(M.bc_loss(theta, demo, mcfg, TINY).data)
    a = demo.actions
    want = sum(np.sum(np.abs(a[t, :2])) + 0.01 * np.sum(a[t, :2] ** 2) + np.log(2.0)
               + 0.1 * np.sum(demo.final_pose ** 2)
               for t in range(a.shape[0]))
    assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_bc_terms_pose_weight_scales_linearly():
    rng = np.random.default_rng(4)
    theta = init_policy_params(TINY, rng)
    demo = synthetic_demo(np.random.default_rng(5), t=4)
    lo = float(M.bc_loss(theta, demo, tiny_mcfg(pose_weight=0.0), TINY).data)
    hi = float(M.bc_loss(theta, demo, tiny_mcfg(pose_weight=0.2), TINY).data)
    want_gap = 0.2 * 4 * np.sum(demo.final_pose ** 2)
    assert abs((hi - lo) - want_gap) <= 1e-10


def test_bc_loss_requires_actions():
    rng = np.random.default_rng(6)
    theta = init_policy_params(TINY, rng)
    demo = synthetic_demo(np.random.default_rng(7), t=4)
    demo.actions = None
    with pytest.raises(ValueError):
        M.bc_loss(theta, demo, tiny_mcfg(), TINY)


def test_bc_loss_gradient_matches_fd():
    rng = np.random.default_rng(8)
    theta = init_policy_params(TINY, rng)
    demo = synthetic_demo(np.random.default_rng(9), t=4)
    mcfg = tiny_mcfg()
    g = T.grad(M.bc_loss(theta, demo, mcfg, TINY), theta)
    x0 = theta.flatten()
    eps = 1e-5
    idx = np.random.default_rng(10).choice(x0.size, size=40, replace=False)
    for i in idx:
        up, dn = x0.copy(), x0.copy()
        up[i] += eps
        dn[i] -= eps
        fd = (float(M.bc_loss(theta.unflatten(up), demo, mcfg, TINY).data)
              - float(M.bc_loss(theta.unflatten(dn), demo, mcfg, TINY).data)) / (2 * eps)
        denom = max(abs(fd), abs(g.flatten()[i]), 1e-6)
        assert abs(g.flatten()[i] - fd) / denom <= 1e-4


# ---------------------------------------------------------------------------
# Adam


def quad_setup():
    rng = np.random.default_rng(11)
    from daml.params import ParameterVector
    p = ParameterVector({"x": T.parameter(rng.normal(size=5)),
                         "y": T.parameter(rng.normal(size=(2, 3)))})
    return p


def grads_of(params):
    from daml.params import ParameterVector
    return ParameterVector((n, T.tensor(2.0 * t.data)) for n, t in params.items())


def test_adam_zero_gradient_is_identity():
    p = quad_setup()
    from daml.params import ParameterVector
    zg = ParameterVector((n, T.tensor(np.zeros_like(t.data))) for n, t in p.items())
    state = M.AdamState.fresh(p)
    out, state2 = M.adam_update(p, zg, state, lr=0.1)
    assert np.array_equal(out.flatten(), p.flatten())
    assert state2.step == 1


def test_adam_first_step_is_signed_lr():
    p = quad_setup()
    g = grads_of(p)
    out, _ = M.adam_update(p, g, M.AdamState.fresh(p), lr=0.01)
    delta = out.flatten() - p.flatten()
    sign = np.sign(g.flatten())
    mask = np.abs(g.flatten()) > 1e-3
    assert np.allclose(delta[mask], -0.01 * sign[mask], atol=1e-8)


def test_adam_ten_steps_match_reference_loop():
    p = quad_setup()
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    x = p.flatten()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    ref = x.copy()
    state = M.AdamState.fresh(p)
    cur = p
    for step in range(1, 11):
        g = 2.0 * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        cur, state = M.adam_update(cur, grads_of(cur), state, lr=lr)
    assert np.allclose(cur.flatten(), ref, atol=1e-12, rtol=0)
    assert state.step == 10


def test_adam_returns_fresh_tracked_leaves():
    p = quad_setup()
    out, _ = M.adam_update(p, grads_of(p), M.AdamState.fresh(p), lr=0.1)
    for name in out.names():
        assert out[name] is not p[name]
        assert out[name].grad_tracked
        assert out[name]._parents == ()


# ---------------------------------------------------------------------------
# meta-gradients


def meta_setup(seed=0):
    rng = np.random.default_rng(seed)
    theta = init_policy_params(TINY, rng)
    loss_obj = init_temporal_loss(TINY, SMALL_NET, rng)
    human = T.tensor(rng.uniform(size=(8, 8, 8, 3)))
    demo = synthetic_demo(rng, t=6)
    return theta, loss_obj, human, demo


def outer_value(theta, loss_obj, human, demo, mcfg):
    res = inner_adapt(theta, loss_obj, human, TINY, mcfg.inner_step_size,
                      mcfg.inner_steps, mcfg.clip_lo, mcfg.clip_hi)
    return M.bc_loss(res.phi, demo, mcfg, TINY)


def test_meta_gradient_matches_fd_spot_check():
    theta, loss_obj, human, demo = meta_setup(12)
    mcfg = tiny_mcfg(inner_step_size=0.05)
    joint = merge({"theta": theta, "psi": loss_obj.params})
    g = T.grad(outer_value(theta, loss_obj, human, demo, mcfg), joint).flatten()

    x0 = joint.flatten()
    eps = 1e-5

    def value_at(vec):
        parts = split(joint.unflatten(vec), ["theta", "psi"])
        lo = loss_obj.with_params(parts["psi"])
        return float(outer_value(parts["theta"], lo, human, demo, mcfg).data)

    idx = np.random.default_rng(13).choice(x0.size, size=40, replace=False)
    psi_block = x0.size - loss_obj.params.total_size
    idx = np.concatenate([idx, np.arange(psi_block, psi_block + 8)])
    for i in idx:
        up, dn = x0.copy(), x0.copy()
        up[i] += eps
        dn[i] -= eps
        fd = (value_at(up) - value_at(dn)) / (2 * eps)
        denom = max(abs(fd), abs(g[i]), 1e-6)
        assert abs(g[i] - fd) / denom <= 1e-3, f"coord {i}"


def test_alpha_zero_reduces_to_plain_cloning():
    theta, loss_obj, human, demo = meta_setup(14)
    mcfg = tiny_mcfg(inner_step_size=0.0)
    joint = merge({"theta": theta, "psi": loss_obj.params})
    g = T.grad(outer_value(theta, loss_obj, human, demo, mcfg), joint)
    parts = split(g, ["theta", "psi"])
    plain = T.grad(M.bc_loss(theta, demo, mcfg, TINY), theta)
    diff = np.abs(parts["theta"].flatten() - plain.flatten())
    assert np.max(diff) <= 1e-10
    assert np.array_equal(parts["psi"].flatten(),
                          np.zeros(loss_obj.params.total_size))


def test_second_order_term_changes_gradient():
    theta, loss_obj, human, demo = meta_setup(15)
    mcfg = tiny_mcfg(inner_step_size=0.05)
    joint = merge({"theta": theta, "psi": loss_obj.params})

    def grad_with(first_order):
        res = inner_adapt(theta, loss_obj, human, TINY, mcfg.inner_step_size,
                          1, mcfg.clip_lo, mcfg.clip_hi, first_order=first_order)
        return T.grad(M.bc_loss(res.phi, demo, mcfg, TINY), joint)

    full = grad_with(False)
    fo = grad_with(True)
    tdiff = np.linalg.norm(split(full, ["theta", "psi"])["theta"].flatten()
                           - split(fo, ["theta", "psi"])["theta"].flatten())
    psi_norm = np.linalg.norm(split(full, ["theta", "psi"])["psi"].flatten())
    assert tdiff > 1e-8
    assert psi_norm > 1e-8
    assert np.array_equal(split(fo, ["theta", "psi"])["psi"].flatten(),
                          np.zeros(loss_obj.params.total_size))


# ---------------------------------------------------------------------------
# demo plumbing


def test_subsample_indices_ordered_unique():
    rng = np.random.default_rng(16)
    idx = M.subsample_indices(rng, 50, 20)
    assert idx.shape == (20,)
    assert np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() < 50


def test_subsample_short_demo_keeps_everything():
    idx = M.subsample_indices(np.random.default_rng(17), 12, 40)
    assert np.array_equal(idx, np.arange(12))


def test_sample_robot_demo_brightness_stays_in_range():
    rng = np.random.default_rng(18)
    task = FakeTask(np.random.default_rng(19))
    d = M.sample_robot_demo(rng, task.robots[0], tiny_mcfg(), brightness_aug=0.9)
    assert d.frames.data.min() >= 0.0 and d.frames.data.max() <= 1.0
    d0 = M.sample_robot_demo(np.random.default_rng(20), task.robots[0],
                             tiny_mcfg(), brightness_aug=0.0)
    assert d0.frames.data.max() <= 1.0
    assert d0.actions.shape[1] == 3


def test_draw_meta_batch_needs_enough_tasks():
    rng = np.random.default_rng(21)
    tasks = [FakeTask(np.random.default_rng(22))]
    with pytest.raises(ValueError):
        M.draw_meta_batch(rng, tasks, tiny_mcfg(meta_batch_size=2), 0.0)


# ---------------------------------------------------------------------------
# training loop


def make_fake_tasks(n, seed):
    return [FakeTask(np.random.default_rng(seed + i)) for i in range(n)]


def run_training(iterations, seed=23):
    tasks = make_fake_tasks(3, 1000)
    rng = np.random.default_rng(seed)
    theta = init_policy_params(TINY, np.random.default_rng(24))
    loss_obj = init_temporal_loss(TINY, SMALL_NET, np.random.default_rng(25))
    mcfg = tiny_mcfg(iterations=iterations, outer_step_size=0.01)
    return M.meta_train(tasks, theta, loss_obj, mcfg, TINY, rng)


def test_meta_train_deterministic():
    t1, l1, log1 = run_training(3)
    t2, l2, log2 = run_training(3)
    assert np.array_equal(t1.flatten(), t2.flatten())
    assert np.array_equal(l1.params.flatten(), l2.params.flatten())
    assert [r.outer_loss for r in log1] == [r.outer_loss for r in log2]


def test_meta_train_seed_changes_result():
    t1, _, _ = run_training(2, seed=30)
    t2, _, _ = run_training(2, seed=31)
    assert not np.array_equal(t1.flatten(), t2.flatten())


def test_meta_train_reduces_outer_loss():
    _, _, log = run_training(40)
    first = np.mean([r.outer_loss for r in log[:5]])
    last = np.mean([r.outer_loss for r in log[-5:]])
    assert last < first


def test_meta_train_log_rows_complete():
    _, _, log = run_training(2)
    assert [r.iteration for r in log] == [0, 1]
    for r in log:
        assert np.isfinite(r.outer_loss)
        assert np.isfinite(r.inner_loss_pre) and np.isfinite(r.inner_loss_post)
        assert r.wall_time_ms >= 0.0


def test_meta_test_adapt_returns_detached_params():
    theta, loss_obj, human, _ = meta_setup(26)
    phi = M.meta_test_adapt(theta, loss_obj, human, tiny_mcfg(), TINY)
    assert phi.total_size == theta.total_size
    assert not np.array_equal(phi.flatten(), theta.flatten())
    for name in phi.names():
        assert phi[name]._parents == ()


def test_meta_config_validation():
    with pytest.raises(ValueError):
        M.MetaConfig(bc_mode="mse")
    with pytest.raises(ValueError):
        M.MetaConfig(demo_subsample=10)
    with pytest.raises(ValueError):
        M.MetaConfig(inner_steps=0)
    with pytest.raises(ValueError):
        M.MetaConfig(clip_lo=1.0, clip_hi=-1.0)
