"""Tabletop pushing world: tasks, physics, rendering, scripted expert, demos.

The table is the unit square with y growing downward (matching image rows).
One target and one distractor sit mid-table; the goal region is near the top;
the gripper starts near the bottom.  Physics is position-resolved: after the
gripper moves, any object closer than the contact radius is pushed out to
exactly that radius along the center line.

Appearance is split from physics.  A DomainStyle bundles everything that
differs between the robot's view and a demonstrator's view: object palette
shift (hue rotation + brightness), gripper sprite, a small affine view
transform, and the background texture.  Demonstrator physics equals robot
physics; only rendering differs.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace

import numpy as np

SHAPES = ("disc", "square", "triangle", "diamond")

# layout bands, in table coordinates
GOAL_X = (0.3, 0.7)
GOAL_Y = (0.14, 0.26)
OBJ_X = (0.18, 0.82)
OBJ_Y = (0.42, 0.68)
START_X = (0.38, 0.62)
START_Y = (0.85, 0.92)
MIN_OBJECT_SEPARATION = 0.24
CONFOUND_DIST = (0.11, 0.19)   # distractor-to-goal distance in confounded tasks
GRIPPER_MARGIN = 0.02


@dataclass(frozen=True)
class SimConfig:
    image_hw: int = 24
    contact_radius: float = 0.08
    goal_radius: float = 0.1
    horizon: int = 100
    step_delta: float = 0.05
    demo_min_len: int = 30
    demo_max_len: int = 80
    expert_noise: float = 0.03
    start_jitter: float = 0.02
    demo_start_uniform: bool = False
    distractor_near_goal_prob: float = 0.4
    object_radius: float = 0.055
    demo_retries: int = 25
    success_hold: int = 10
    train_hues: tuple = (0, 60, 120, 180, 240, 300)
    heldout_hues: tuple = (30, 90, 150, 210, 270, 330)
    train_shapes: tuple = ("disc", "square")
    heldout_shapes: tuple = ("triangle", "diamond")

    def __post_init__(self):
        if self.contact_radius <= 0 or self.goal_radius <= 0 or self.step_delta <= 0:
            raise ValueError("radii and step size must be positive")
        if not (0 < self.demo_min_len <= self.demo_max_len):
            raise ValueError("demo length bounds out of order")
        if self.image_hw < 8:
            raise ValueError("image too small to draw the scene")


@dataclass(frozen=True)
class TaskSpec:
    split: str                      # "train" | "heldout"
    target_shape: str
    distractor_shape: str
    target_color: tuple             # RGB in [0,1]
    distractor_color: tuple
    target_pos0: tuple
    distractor_pos0: tuple
    goal: tuple
    gripper_start: tuple


@dataclass(frozen=True)
class DomainStyle:
    style_id: int
    hue_shift: float = 0.0          # degrees
    brightness: float = 0.0
    background_id: int = 0
    view_shift: tuple = (0.0, 0.0)  # pixels (dx, dy)
    view_rot: float = 0.0           # degrees
    gripper_kind: str = "square"    # robot: square sprite; demonstrator: disc
    gripper_size: float = 0.035

    def __post_init__(self):
        if abs(self.view_shift[0]) > 3 or abs(self.view_shift[1]) > 3:
            raise ValueError("view translation above 3 px")
        if abs(self.view_rot) > 10:
            raise ValueError("view rotation above 10 degrees")


def robot_style() -> DomainStyle:
    return DomainStyle(style_id=0)


def demonstrator_style_pool(cfg: SimConfig) -> list[DomainStyle]:
    """Fixed pool of demonstrator appearances (ids 1..n)."""
    table = [
        dict(hue_shift=25.0, brightness=-0.08, background_id=1,
             view_shift=(1.0, -1.0), view_rot=4.0, gripper_size=0.055),
        dict(hue_shift=-30.0, brightness=0.06, background_id=2,
             view_shift=(-2.0, 1.0), view_rot=-6.0, gripper_size=0.06),
        dict(hue_shift=40.0, brightness=-0.05, background_id=3,
             view_shift=(2.0, 2.0), view_rot=8.0, gripper_size=0.048),
        dict(hue_shift=-20.0, brightness=0.1, background_id=4,
             view_shift=(-1.0, -2.0), view_rot=-9.0, gripper_size=0.065),
    ]
    return [DomainStyle(style_id=i + 1, gripper_kind="disc", **kw)
            for i, kw in enumerate(table)]


@dataclass
class WorldState:
    gripper: np.ndarray       # [2]
    gripper_vel: np.ndarray   # [2], displacement per unit time
    objects: np.ndarray       # [2, 2] rows: target, distractor
    t: int = 0


@dataclass
class Trajectory:
    gripper: np.ndarray       # [N+1, 2]
    target: np.ndarray        # [N+1, 2]
    distractor: np.ndarray    # [N+1, 2]
    frames: np.ndarray        # [N, H, W, 3] uint8, observation before each action
    states: np.ndarray        # [N, 4] float32, gripper pos+vel before each action
    actions: np.ndarray       # [N, 3] float32, (vx, vy, gripper)

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass
class HumanDemo:
    frames: np.ndarray        # [T, H, W, 3] uint8
    style_id: int


@dataclass
class RobotDemo:
    frames: np.ndarray        # [T, H, W, 3] uint8
    states: np.ndarray        # [T, 4] float32
    actions: np.ndarray       # [T, 3] float32
    final_pose: np.ndarray    # [2] float32, gripper position at demo end
    style_id: int


# ---------------------------------------------------------------------------
# task sampling


def _color_from_hue(hue_deg: float) -> tuple:
    r, g, b = colorsys.hsv_to_rgb((hue_deg % 360) / 360.0, 0.85, 0.85)
    return (r, g, b)


def sample_task(cfg: SimConfig, rng: np.random.Generator, split: str) -> TaskSpec:
    """Draw a task; appearance pools are disjoint between splits."""
    if split == "train":
        hues, shapes = cfg.train_hues, cfg.train_shapes
    elif split == "heldout":
        hues, shapes = cfg.heldout_hues, cfg.heldout_shapes
    else:
        raise ValueError(f"unknown split {split!r}")
    if not hues or not shapes:
        raise ValueError(f"empty appearance pool for split {split!r}")
    for s in shapes:
        if s not in SHAPES:
            raise ValueError(f"unknown shape {s!r}")

    hue_pair = rng.choice(len(hues), size=2, replace=(len(hues) == 1))
    target_color = _color_from_hue(hues[int(hue_pair[0])])
    distractor_color = _color_from_hue(hues[int(hue_pair[1])])
    target_shape = shapes[int(rng.integers(len(shapes)))]
    distractor_shape = shapes[int(rng.integers(len(shapes)))]

    goal = np.array([rng.uniform(*GOAL_X), rng.uniform(*GOAL_Y)])
    target = np.array([rng.uniform(*OBJ_X), rng.uniform(*OBJ_Y)])
    if rng.uniform() < cfg.distractor_near_goal_prob:
        # confounded layout: the distractor already sits near the goal, so a
        # single late frame cannot tell which object was moved there
        for _ in range(100):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(*CONFOUND_DIST)
            distractor = goal + rad * np.array([np.cos(ang), np.sin(ang)])
            if (OBJ_X[0] - 0.25 <= distractor[0] <= OBJ_X[1] + 0.25
                    and 0.08 <= distractor[1] <= 0.9
                    and np.linalg.norm(distractor - target) >= MIN_OBJECT_SEPARATION):
                break
        else:
            distractor = goal + np.array([CONFOUND_DIST[1], 0.0])
    else:
        for _ in range(100):
            distractor = np.array([rng.uniform(*OBJ_X), rng.uniform(*OBJ_Y)])
            if np.linalg.norm(distractor - target) >= MIN_OBJECT_SEPARATION:
                break
        else:
            distractor = np.array([OBJ_X[0], OBJ_Y[0]])
    start = np.array([rng.uniform(*START_X), rng.uniform(*START_Y)])
    return TaskSpec(split=split,
                    target_shape=target_shape, distractor_shape=distractor_shape,
                    target_color=target_color, distractor_color=distractor_color,
                    target_pos0=tuple(target), distractor_pos0=tuple(distractor),
                    goal=tuple(goal), gripper_start=tuple(start))


def reset(task: TaskSpec) -> WorldState:
    return WorldState(gripper=np.array(task.gripper_start, dtype=float),
                      gripper_vel=np.zeros(2),
                      objects=np.array([task.target_pos0, task.distractor_pos0], dtype=float),
                      t=0)


# ---------------------------------------------------------------------------
# physics


def step(cfg: SimConfig, world: WorldState, action: np.ndarray) -> WorldState:
    """Advance one tick: move the gripper, resolve object contact by pushing."""
    a = np.clip(np.asarray(action, dtype=float)[:2], -1.0, 1.0)
    new_g = np.clip(world.gripper + a * cfg.step_delta,
                    GRIPPER_MARGIN, 1.0 - GRIPPER_MARGIN)
    vel = (new_g - world.gripper) / cfg.step_delta
    objs = world.objects.copy()
    for i in range(objs.shape[0]):
        d = objs[i] - new_g
        dist = float(np.hypot(d[0], d[1]))
        if dist < cfg.contact_radius:
            if dist < 1e-9:
                mv = np.linalg.norm(a)
                d = a / mv if mv > 1e-9 else np.array([1.0, 0.0])
            else:
                d = d / dist
            objs[i] = new_g + d * cfg.contact_radius
            objs[i] = np.clip(objs[i], cfg.object_radius, 1.0 - cfg.object_radius)
    return WorldState(gripper=new_g, gripper_vel=vel, objects=objs, t=world.t + 1)


def state_vector(world: WorldState) -> np.ndarray:
    return np.concatenate([world.gripper, world.gripper_vel]).astype(np.float64)


def success(target_positions: np.ndarray, task: TaskSpec, cfg: SimConfig) -> bool:
    """True iff the target sat within the goal radius after at least
    ``success_hold`` of the episode's steps (not necessarily consecutive)."""
    pos = np.asarray(target_positions, dtype=float)
    d = np.linalg.norm(pos - np.asarray(task.goal), axis=1)
    return int(np.sum(d <= cfg.goal_radius)) >= cfg.success_hold


# ---------------------------------------------------------------------------
# scripted expert


def _detour(pos: np.ndarray, target: np.ndarray,
            obstacles: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Waypoint toward ``target`` that skirts blocking discs."""
    seg = target - pos
    length = float(np.linalg.norm(seg))
    if length < 1e-9:
        return target
    u = seg / length
    best = None
    for center, radius in obstacles:
        w = center - pos
        proj = float(np.dot(w, u))
        if proj <= 0.0 or proj >= length:
            continue
        perp = w - proj * u
        pd = float(np.linalg.norm(perp))
        if pd < radius and (best is None or proj < best[0]):
            best = (proj, center, radius, perp, pd)
    if best is None:
        return target
    _, center, radius, perp, pd = best
    if pd > 1e-9:
        side = -perp / pd
    else:
        side = np.array([-u[1], u[0]])
    return center + side * (radius + 0.03)


def scripted_expert(cfg: SimConfig, world: WorldState, task: TaskSpec) -> np.ndarray:
    """Proportional push controller: get behind the target relative to the
    goal, then push along the goal line.  Gripper closed while pushing."""
    g = world.gripper
    tgt = world.objects[0]
    goal = np.asarray(task.goal)
    to_goal = goal - tgt
    dist_goal = float(np.linalg.norm(to_goal))
    if dist_goal < 0.3 * cfg.goal_radius:
        return np.array([0.0, 0.0, 1.0])
    d = to_goal / dist_goal
    behind = tgt - d * (cfg.contact_radius + 0.03)
    rel = g - tgt
    along = float(np.dot(rel, -d))            # how far behind the object
    lateral = float(np.linalg.norm(rel + along * d))
    ready = (np.linalg.norm(g - behind) < 0.035
             or (along > 0.0 and lateral < 0.025
                 and np.linalg.norm(rel) < cfg.contact_radius + 0.06))
    if ready:
        aim = tgt - d * (cfg.contact_radius * 0.4)
        act = (aim - g) / cfg.step_delta
        return np.array([*np.clip(act, -1.0, 1.0), 1.0])
    avoid = [(tgt, cfg.contact_radius + 0.025),
             (world.objects[1], cfg.contact_radius + 0.025)]
    wp = _detour(g, behind, avoid)
    act = (wp - g) / cfg.step_delta
    return np.array([*np.clip(act, -1.0, 1.0), 0.0])


# ---------------------------------------------------------------------------
# rendering


def _rotate_hue(color: tuple, degrees: float) -> tuple:
    h, s, v = colorsys.rgb_to_hsv(*color)
    return colorsys.hsv_to_rgb((h + degrees / 360.0) % 1.0, s, v)


def _background(hw: int, bg_id: int) -> np.ndarray:
    base = np.array([0.16, 0.17, 0.20]) + 0.012 * np.array([
        [0.0, 0.0, 0.0], [1.0, 0.5, -0.5], [-0.5, 1.0, 0.5],
        [0.5, -0.5, 1.0], [1.0, 1.0, 0.0]])[bg_id % 5]
    img = np.broadcast_to(base, (hw, hw, 3)).copy()
    ii, jj = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    stripe = (((ii + jj * (1 + bg_id % 3)) // 3) % 2).astype(float)
    img += (stripe * 0.015 - 0.0075)[:, :, None]
    return img


def _shape_mask(shape: str, xx: np.ndarray, yy: np.ndarray,
                cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.92
    if shape == "triangle":
        half_w = (r - dy) * 0.9
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= np.maximum(half_w, 0.0) * 0.6)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.25
    raise ValueError(f"unknown shape {shape!r}")


def _view_transform(img: np.ndarray, shift: tuple, rot_deg: float) -> np.ndarray:
    """Small affine warp (rotate about center, translate), bilinear, edge clamp."""
    if shift == (0.0, 0.0) and rot_deg == 0.0:
        return img
    hw = img.shape[0]
    c = (hw - 1) / 2.0
    th = np.deg2rad(rot_deg)
    cos_t, sin_t = np.cos(th), np.sin(th)
    ii, jj = np.meshgrid(np.arange(hw, dtype=float), np.arange(hw, dtype=float),
                         indexing="ij")
    # inverse map: destination pixel -> source pixel
    y = ii - c - shift[1]
    x = jj - c - shift[0]
    src_x = cos_t * x + sin_t * y + c
    src_y = -sin_t * x + cos_t * y + c
    x0 = np.clip(np.floor(src_x).astype(int), 0, hw - 1)
    y0 = np.clip(np.floor(src_y).astype(int), 0, hw - 1)
    x1 = np.clip(x0 + 1, 0, hw - 1)
    y1 = np.clip(y0 + 1, 0, hw - 1)
    fx = np.clip(src_x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(src_y - y0, 0.0, 1.0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render(cfg: SimConfig, task: TaskSpec, world: WorldState, style: DomainStyle,
           brightness_noise: float = 0.0) -> np.ndarray:
    """Draw the scene as float64 RGB in [0,1]; deterministic given arguments."""
    hw = cfg.image_hw
    img = _background(hw, style.background_id)
    coords = (np.arange(hw) + 0.5) / hw
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    # goal marker: a light plus sign
    gx, gy = task.goal
    arm, thick = 0.07, 0.016
    plus = (((np.abs(xx - gx) <= arm) & (np.abs(yy - gy) <= thick))
            | ((np.abs(yy - gy) <= arm) & (np.abs(xx - gx) <= thick)))
    img[plus] = np.array([0.82, 0.83, 0.85])

    # objects: distractor below target when overlapping
    for idx in (1, 0):
        color = task.distractor_color if idx == 1 else task.target_color
        shape = task.distractor_shape if idx == 1 else task.target_shape
        color = _rotate_hue(tuple(color), style.hue_shift)
        cx, cy = world.objects[idx]
        mask = _shape_mask(shape, xx, yy, cx, cy, cfg.object_radius)
        img[mask] = np.array(color)

    # gripper sprite on top
    gpx, gpy = world.gripper
    if style.gripper_kind == "square":
        gm = _shape_mask("square", xx, yy, gpx, gpy, style.gripper_size)
        img[gm] = np.array([0.62, 0.60, 0.57])
    else:
        gm = _shape_mask("disc", xx, yy, gpx, gpy, style.gripper_size)
        img[gm] = np.array([0.82, 0.79, 0.74])

    img = _view_transform(img, tuple(style.view_shift), style.view_rot)
    img = img + style.brightness + brightness_noise
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def dequantize(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# episodes and demonstrations


def run_episode(cfg: SimConfig, task: TaskSpec, style: DomainStyle, policy_fn,
                max_steps: int, stop_fn=None) -> Trajectory:
    """Roll ``policy_fn(frame_u8, state_vec, world) -> action[3]`` through the sim.

    Frames and states are recorded before each action (decision-time pairing).
    ``stop_fn(held, t)`` may end the episode early.
    """
    world = reset(task)
    grip, tgt, dis = [world.gripper.copy()], [world.objects[0].copy()], [world.objects[1].copy()]
    frames, states, actions = [], [], []
    held = 0
    goal = np.asarray(task.goal)
    for t in range(max_steps):
        frame = quantize(render(cfg, task, world, style))
        sv = state_vector(world)
        act = np.asarray(policy_fn(frame, sv, world), dtype=float)
        world = step(cfg, world, act)
        frames.append(frame)
        states.append(sv.astype(np.float32))
        actions.append(act.astype(np.float32))
        grip.append(world.gripper.copy())
        tgt.append(world.objects[0].copy())
        dis.append(world.objects[1].copy())
        if np.linalg.norm(world.objects[0] - goal) <= cfg.goal_radius:
            held += 1
        if stop_fn is not None and stop_fn(held, t + 1):
            break
    return Trajectory(gripper=np.array(grip), target=np.array(tgt),
                      distractor=np.array(dis),
                      frames=np.array(frames, dtype=np.uint8),
                      states=np.array(states, dtype=np.float32),
                      actions=np.array(actions, dtype=np.float32))


def gen_demo(cfg: SimConfig, task: TaskSpec, style: DomainStyle,
             with_actions: bool, rng: np.random.Generator):
    """Produce one expert demonstration in the given style.

    Retries with fresh noise when the expert fails (bounded), then errors.
    Demo length lands in [demo_min_len, demo_max_len] by construction.
    """
    for _ in range(cfg.demo_retries):
        if cfg.demo_start_uniform:
            # approaches from every direction end up in the data, so the
            # cloned policy can recover after losing the object mid-push
            start = rng.uniform(GRIPPER_MARGIN, 1 - GRIPPER_MARGIN, size=2)
        else:
            start = (np.asarray(task.gripper_start)
                     + rng.uniform(-cfg.start_jitter, cfg.start_jitter, size=2))
        jittered = replace(task, gripper_start=tuple(
            np.clip(start, GRIPPER_MARGIN, 1 - GRIPPER_MARGIN)))
        noise = rng.normal(0.0, cfg.expert_noise, size=(cfg.demo_max_len, 2))
        # pacing and lingering vary per demonstration (always drawn, to keep
        # the rng stream layout identical for both demo kinds)
        speed = rng.uniform(0.6, 1.0)
        dwell = int(rng.integers(0, 16))
        if with_actions:
            # action-labeled demos come from one canonical controller: pace
            # and lingering are observable style, not state, so leaving them
            # random would put irreducible noise in the cloning targets
            speed, dwell = 1.0, 0

        def expert(frame, sv, world, _noise=noise, _speed=speed):
            act = scripted_expert(cfg, world, jittered)
            act[:2] = np.clip(act[:2] * _speed + _noise[world.t], -1.0, 1.0)
            return act

        def stop(held, t, _dwell=dwell):
            return held >= cfg.success_hold + _dwell and t >= cfg.demo_min_len

        traj = run_episode(cfg, jittered, style, expert, cfg.demo_max_len, stop_fn=stop)
        if success(traj.target[1:], task, cfg):
            if with_actions:
                return RobotDemo(frames=traj.frames, states=traj.states,
                                 actions=traj.actions,
                                 final_pose=traj.gripper[-1].astype(np.float32),
                                 style_id=style.style_id)
            return HumanDemo(frames=traj.frames, style_id=style.style_id)
    raise RuntimeError(f"expert failed {cfg.demo_retries} times on task {task}")
