"""Deterministic 2D ball-throwing tasks: Hand, Hand-Wall and Robot.

The hand (or the arm's end-effector) moves inside an axis-aligned
workspace. It grasps the ball by coming within ``grasp_radius`` of it;
the ball is thrown when a hand carrying it is stopped by the workspace
boundary while moving outward faster than ``release_speed``. After
release the ball is ballistic (explicit Euler), may be stopped by a wall,
and comes to rest on the floor.

Canonical full state vector ``S`` (hand kinds, length 11)::

    hand_pos(2) hand_vel(2) ball_pos(2) ball_vel(2) grasped(1) goal(2)

The robot kind prepends joint angles and joint velocities (3 each).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import numpy as np

KINDS = ("hand", "hand_wall", "robot")


class ConfigError(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class StateLayout:
    """Index sets into ``S`` for each named quantity."""

    size: int
    hand_pos: tuple
    hand_vel: tuple
    ball_pos: tuple
    ball_vel: tuple
    grasped: tuple
    goal: tuple
    joint_angles: tuple = ()
    joint_vels: tuple = ()


def _layout(offset: int, joints: int) -> StateLayout:
    o = offset

    def span(start, n):
        return tuple(range(start, start + n))

    return StateLayout(
        size=o + 11,
        joint_angles=span(0, joints) if joints else (),
        joint_vels=span(joints, joints) if joints else (),
        hand_pos=span(o, 2),
        hand_vel=span(o + 2, 2),
        ball_pos=span(o + 4, 2),
        ball_vel=span(o + 6, 2),
        grasped=(o + 8,),
        goal=span(o + 9, 2),
    )


HAND_LAYOUT = _layout(0, 0)
ROBOT_LAYOUT = _layout(6, 3)


def state_layout(kind: str) -> StateLayout:
    if kind in ("hand", "hand_wall"):
        return HAND_LAYOUT
    if kind == "robot":
        return ROBOT_LAYOUT
    raise ConfigError(f"unknown env kind {kind!r}")


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "hand"
    dt: float = 0.05
    max_steps: int = 50
    gravity: float = 9.81
    workspace: tuple = (0.0, 0.0, 1.0, 1.0)        # x_lo, y_lo, x_hi, y_hi
    target_region: tuple = (1.5, 0.0, 3.0, 0.5)
    grasp_radius: float = 0.1
    ball_radius: float = 0.1
    hole_radius: float = 0.15
    p_ball_in_hand: float = 0.0
    wall: Optional[tuple] = None                   # (x position, height)
    arm_link_lengths: tuple = ()
    arm_base: tuple = (0.5, 0.0)
    max_hand_speed: float = 2.0
    max_joint_speed: float = 1.5
    release_speed: float = 0.2
    floor_y: Optional[float] = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown env kind {self.kind!r}")
        x0, y0, x1, y1 = self.workspace
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("workspace must have positive area")
        tx0, ty0, tx1, ty1 = self.target_region
        if not (tx1 >= tx0 and ty1 >= ty0):
            raise ConfigError("malformed target region")
        if self.dt <= 0 or self.max_steps < 1:
            raise ConfigError("dt and max_steps must be positive")
        if not 0.0 <= self.p_ball_in_hand <= 1.0:
            raise ConfigError("p_ball_in_hand must be a probability")
        if self.kind == "robot" and not self.arm_link_lengths:
            raise ConfigError("robot config needs arm_link_lengths")

    @property
    def action_dim(self) -> int:
        return len(self.arm_link_lengths) if self.kind == "robot" else 2

    @property
    def layout(self) -> StateLayout:
        return state_layout(self.kind)

    @property
    def workspace_center(self) -> np.ndarray:
        x0, y0, x1, y1 = self.workspace
        return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])


def load_presets(path=None) -> dict:
    """Read preset configs from a JSON document (defaults to the bundled one)."""
    if path is None:
        text = resources.files("sherlab").joinpath("presets.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    if doc.get("schema_version") != 1:
        raise ConfigError("unsupported preset schema version")
    return {name: config_from_dict(d) for name, d in doc["presets"].items()}


def config_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    for key in ("workspace", "target_region", "arm_link_lengths", "arm_base"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    if d.get("wall") is not None:
        d["wall"] = tuple(d["wall"])
    try:
        return EnvConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def preset(name: str, **overrides) -> EnvConfig:
    presets = load_presets()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = presets[name]
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class EnvState:
    hand_pos: np.ndarray
    hand_vel: np.ndarray
    ball_pos: np.ndarray
    ball_vel: np.ndarray
    grasped: bool
    released: bool
    goal: np.ndarray
    episode_initial_ball_pos: np.ndarray
    step_index: int = 0
    joint_angles: np.ndarray = field(default_factory=lambda: np.zeros(0))
    joint_vels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hit: bool = False          # ball's path has touched the hole disk (absorbing)
    ever_grasped: bool = False


@dataclass(frozen=True)
class ObservationDict:
    observation: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray


def sparse_reward(achieved, desired, threshold: float) -> float:
    """0 inside the closed ball of radius ``threshold``, -1 outside."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = np.asarray(achieved, dtype=float) - np.asarray(desired, dtype=float)
    return 0.0 if math.sqrt(float(d @ d)) <= threshold else -1.0


def sparse_reward_batch(achieved: np.ndarray, desired: np.ndarray, threshold: float) -> np.ndarray:
    d = np.linalg.norm(np.asarray(achieved) - np.asarray(desired), axis=-1)
    return np.where(d <= threshold, 0.0, -1.0)


def robot_forward_kinematics(joint_angles, link_lengths, base=(0.0, 0.0)) -> np.ndarray:
    q = np.asarray(joint_angles, dtype=float)
    lengths = np.asarray(link_lengths, dtype=float)
    if q.size == 0 or lengths.size == 0:
        raise ConfigError("empty kinematic chain")
    if q.shape != lengths.shape:
        raise ConfigError("joint and link counts differ")
    cum = np.cumsum(q)
    return np.array([base[0] + np.sum(lengths * np.cos(cum)),
                     base[1] + np.sum(lengths * np.sin(cum))])


def _initial_joint_angles(config: EnvConfig) -> np.ndarray:
    # Put the end-effector at the workspace center with the last link vertical.
    lengths = config.arm_link_lengths
    if len(lengths) != 3:
        raise ConfigError("initial pose solver supports 3-link arms")
    l1, l2, l3 = lengths
    c = config.workspace_center
    wx = c[0] - config.arm_base[0]
    wy = c[1] - l3 - config.arm_base[1]
    d2 = wx * wx + wy * wy
    cos_q2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if abs(cos_q2) > 1.0:
        raise ConfigError("workspace center unreachable by the arm")
    q2 = math.acos(cos_q2)
    q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    q3 = math.pi / 2.0 - q1 - q2
    return np.array([q1, q2, q3])


def _uniform_in_box(rng: np.random.Generator, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])


def reset(config: EnvConfig, rng: np.random.Generator):
    """Start an episode. Returns ``(state, S)``."""
    joint_angles = np.zeros(0)
    joint_vels = np.zeros(0)
    if config.kind == "robot":
        joint_angles = _initial_joint_angles(config)
        joint_vels = np.zeros_like(joint_angles)
        hand = robot_forward_kinematics(joint_angles, config.arm_link_lengths, config.arm_base)
    else:
        hand = config.workspace_center.copy()
    grasped = bool(config.p_ball_in_hand > 0 and rng.uniform() < config.p_ball_in_hand)
    if grasped:
        ball = hand.copy()
    else:
        # a ball spawned inside the grasp radius would start the episode grasped
        while True:
            ball = _uniform_in_box(rng, config.workspace)
            if np.linalg.norm(ball - hand) > config.grasp_radius:
                break
    goal = _uniform_in_box(rng, config.target_region)
    state = EnvState(
        hand_pos=hand,
        hand_vel=np.zeros(2),
        ball_pos=ball,
        ball_vel=np.zeros(2),
        grasped=grasped,
        released=False,
        goal=goal,
        episode_initial_ball_pos=ball.copy(),
        joint_angles=joint_angles,
        joint_vels=joint_vels,
        ever_grasped=grasped,
    )
    return state, full_state_vector(state)


def full_state_vector(state: EnvState) -> np.ndarray:
    return np.concatenate([
        state.joint_angles, state.joint_vels,
        state.hand_pos, state.hand_vel, state.ball_pos, state.ball_vel,
        [1.0 if state.grasped else 0.0], state.goal,
    ])


def _inside(p: np.ndarray, box) -> bool:
    return box[0] <= p[0] <= box[2] and box[1] <= p[1] <= box[3]


def _segment_point_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(a + t * ab - p))


def _outward_excess(target: np.ndarray, vel: np.ndarray, box, release_speed: float) -> bool:
    """True if the commanded motion leaves ``box`` through a face faster than ``release_speed``."""
    x0, y0, x1, y1 = box
    lo = (x0, y0)
    hi = (x1, y1)
    for axis in range(2):
        if target[axis] > hi[axis] and vel[axis] > release_speed:
            return True
        if target[axis] < lo[axis] and -vel[axis] > release_speed:
            return True
    return False


def _ballistic(state: EnvState, config: EnvConfig):
    vel = state.ball_vel + np.array([0.0, -config.gravity * config.dt])
    old = state.ball_pos
    new = old + vel * config.dt
    if config.wall is not None and vel[0] != 0.0:
        wx, wh = config.wall
        crossed = (old[0] - wx) * (new[0] - wx) < 0.0 or new[0] == wx
        if crossed:
            frac = (wx - old[0]) / (new[0] - old[0])
            y_cross = old[1] + frac * (new[1] - old[1])
            if y_cross < wh:
                side = -1.0 if old[0] < wx else 1.0
                new = np.array([wx + side * 1e-9, new[1]])
                vel = np.array([0.0, vel[1]])
    if config.floor_y is not None and new[1] <= config.floor_y:
        # inelastic landing; the hit test below still sees the swept segment
        new = np.array([new[0], config.floor_y])
        vel = np.zeros(2)
    return new, vel


def step(state: EnvState, action, config: EnvConfig) -> EnvState:
    """Advance one control step. Pure: returns a new state."""
    if state.step_index >= config.max_steps:
        raise EpisodeFinished("episode already reached max_steps")
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    if a.shape != (config.action_dim,):
        raise ValueError(f"action must have shape ({config.action_dim},), got {a.shape}")
    ws = config.workspace

    joint_angles, joint_vels = state.joint_angles, state.joint_vels
    if config.kind == "robot":
        qd = a * config.max_joint_speed
        q_new = state.joint_angles + qd * config.dt
        ee_target = robot_forward_kinematics(q_new, config.arm_link_lengths, config.arm_base)
        cmd_vel = (ee_target - state.hand_pos) / config.dt
        if _inside(ee_target, ws):
            hand, joint_angles, joint_vels = ee_target, q_new, qd
            blocked = False
        else:
            # command rejected: the arm holds its pose at the boundary
            hand, joint_vels = state.hand_pos.copy(), np.zeros_like(qd)
            blocked = True
    else:
        cmd_vel = a * config.max_hand_speed
        ee_target = state.hand_pos + cmd_vel * config.dt
        hand = np.clip(ee_target, [ws[0], ws[1]], [ws[2], ws[3]])
        blocked = bool(np.any(hand != ee_target))

    grasped, released, ever_grasped = state.grasped, state.released, state.ever_grasped
    ball_pos, ball_vel = state.ball_pos, state.ball_vel
    if released:
        ball_pos, ball_vel = _ballistic(state, config)
    elif grasped:
        if blocked and _outward_excess(ee_target, cmd_vel, ws, config.release_speed):
            grasped, released = False, True
            ball_pos, ball_vel = hand.copy(), cmd_vel.copy()
        else:
            ball_pos, ball_vel = hand.copy(), cmd_vel.copy()
    elif np.linalg.norm(hand - ball_pos) <= config.grasp_radius:
        grasped = ever_grasped = True
        ball_pos, ball_vel = hand.copy(), cmd_vel.copy()

    hit = state.hit or (
        _segment_point_distance(state.ball_pos, ball_pos, state.goal) <= config.hole_radius)

    return replace(
        state,
        hand_pos=hand,
        hand_vel=cmd_vel,
        ball_pos=ball_pos,
        ball_vel=ball_vel,
        grasped=grasped,
        released=released,
        joint_angles=joint_angles,
        joint_vels=joint_vels,
        step_index=state.step_index + 1,
        hit=hit,
        ever_grasped=ever_grasped,
    )
