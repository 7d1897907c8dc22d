"""Planar grasp-and-place environment with a staged shaping reward.

The world is a vertical x/y plane with the table at y = 0. A point hand
moves under velocity commands and can kinematically attach a rectangular
object when the grip closes nearby; a released object drops straight back
to the table. Episodes are sequences of attempts: each attempt gives the
controller a fresh target and a time budget, a success requires keeping the
object within the current tolerance of the target for a hold duration, and
the episode ends at the first failed attempt (timeout or dropping a lifted
object) or after ``max_successes`` consecutive successes.

The per-step reward pays three mutually exclusive stages: approach progress
towards the object, height while lifting (plus a one-off bonus the moment
the object clears the pick threshold), and progress of the object towards
the target (plus a one-off success bonus inside the tolerance). Progress
terms only ever pay for new minima of the relevant distance, so each has a
hard total budget set by the attempt's initial distances and idling near
the goal earns nothing.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.05
    max_speed: float = 4.0
    x_limit: float = 0.8
    y_limit: float = 0.8
    grasp_radius: float = 0.03
    pick_height: float = 0.15
    hold_steps: int = 20
    attempt_limit: int = 300       # steps per attempt before it fails
    max_successes: int = 50
    dims_range: tuple[float, float] = (0.03, 0.30)
    object_x_range: tuple[float, float] = (-0.5, 0.5)
    target_x_range: tuple[float, float] = (-0.5, 0.5)
    target_y_range: tuple[float, float] = (0.25, 0.5)
    hand_x_range: tuple[float, float] = (-0.6, 0.6)
    hand_y_range: tuple[float, float] = (0.0, 0.6)
    orientation_match: bool = False  # success/target distance over keypoints


@dataclass
class EnvState:
    hand_x: float
    hand_y: float
    hand_vx: float
    hand_vy: float
    grip_closed: bool
    obj_x: float
    obj_y: float
    obj_heading: float
    obj_w: float
    obj_h: float
    held: bool
    grasp_dx: float
    grasp_dy: float
    targ_x: float
    targ_y: float
    targ_heading: float
    steps_left: int
    successes: int
    hold_count: int
    lifted: bool          # object cleared pick_height at some point this attempt
    done: bool
    failure: str | None   # "timeout" | "drop" | None


@dataclass(frozen=True)
class StepFlags:
    success: bool = False      # an attempt just completed successfully
    new_attempt: bool = False  # a fresh target was sampled this step
    dropped: bool = False
    timeout: bool = False
    done: bool = False


@dataclass(frozen=True)
class RewardCoeffs:
    reach_coef: float = 50.0
    pick_coef: float = 20.0
    picked_bonus: float = 300.0
    targ_coef: float = 200.0
    success_bonus: float = 1000.0
    vel_penalty: float = 0.0


@dataclass
class RewardState:
    """Per-attempt bookkeeping for the staged reward."""

    d_closest: float        # best hand-object distance so far this attempt
    dhat_closest: float     # best object-target distance so far this attempt
    picked: bool = False
    success_paid: bool = False
    pick_height: float = 0.15
    tolerance: float = 0.075


def keypoints_of(pose: tuple[float, float, float], dims: tuple[float, float]):
    """Corners of the oriented rectangle, in fixed index order."""
    x, y, heading = pose
    w, h = dims
    c, s = math.cos(heading), math.sin(heading)
    corners = []
    for cx, cy in ((w / 2, h / 2), (-w / 2, h / 2), (-w / 2, -h / 2), (w / 2, -h / 2)):
        corners.append((x + c * cx - s * cy, y + s * cx + c * cy))
    return tuple(corners)


def success_check(kp, target_kp, tolerance: float) -> bool:
    """All corners within tolerance of their index-matched target corners."""
    return keypoint_distance(kp, target_kp) <= tolerance


def keypoint_distance(kp, target_kp) -> float:
    worst = 0.0
    for (ax, ay), (bx, by) in zip(kp, target_kp):
        d = math.hypot(ax - bx, ay - by)
        if d > worst:
            worst = d
    return worst


def hand_object_distance(state: EnvState) -> float:
    return math.hypot(state.obj_x - state.hand_x, state.obj_y - state.hand_y)


def task_distance(state: EnvState, cfg: EnvConfig) -> float:
    """Distance that defines both success and the target-stage reward:
    max keypoint separation when orientation matters, else center distance."""
    if cfg.orientation_match:
        kp = keypoints_of((state.obj_x, state.obj_y, state.obj_heading), (state.obj_w, state.obj_h))
        tkp = keypoints_of((state.targ_x, state.targ_y, state.targ_heading), (state.obj_w, state.obj_h))
        return keypoint_distance(kp, tkp)
    return math.hypot(state.obj_x - state.targ_x, state.obj_y - state.targ_y)


def _sample_target(cfg: EnvConfig, rng: np.random.Generator):
    tx = rng.uniform(*cfg.target_x_range)
    ty = rng.uniform(*cfg.target_y_range)
    th = rng.uniform(-math.pi, math.pi) if cfg.orientation_match else 0.0
    return tx, ty, th


def reset(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    tx, ty, th = _sample_target(cfg, rng)
    return EnvState(
        hand_x=rng.uniform(*cfg.hand_x_range),
        hand_y=rng.uniform(*cfg.hand_y_range),
        hand_vx=0.0,
        hand_vy=0.0,
        grip_closed=False,
        obj_x=rng.uniform(*cfg.object_x_range),
        obj_y=0.0,
        obj_heading=rng.uniform(-math.pi, math.pi),
        obj_w=rng.uniform(*cfg.dims_range),
        obj_h=rng.uniform(*cfg.dims_range),
        held=False,
        grasp_dx=0.0,
        grasp_dy=0.0,
        targ_x=tx,
        targ_y=ty,
        targ_heading=th,
        steps_left=cfg.attempt_limit,
        successes=0,
        hold_count=0,
        lifted=False,
        done=False,
        failure=None,
    )


def env_step(
    state: EnvState,
    action,
    cfg: EnvConfig,
    tolerance: float,
    rng: np.random.Generator,
) -> tuple[EnvState, StepFlags]:
    """Advance one step. ``action`` is (vx, vy, grip), components clamped;
    grip > 0.5 commands a closed gripper. Returns the new state and flags."""
    vx, vy, grip = float(action[0]), float(action[1]), float(action[2])
    vx = min(max(vx, -cfg.max_speed), cfg.max_speed)
    vy = min(max(vy, -cfg.max_speed), cfg.max_speed)
    close = grip > 0.5

    s = copy.copy(state)
    if s.done:
        return s, StepFlags(done=True)

    s.hand_vx, s.hand_vy = vx, vy
    s.hand_x = min(max(s.hand_x + vx * cfg.dt, -cfg.x_limit), cfg.x_limit)
    s.hand_y = min(max(s.hand_y + vy * cfg.dt, 0.0), cfg.y_limit)
    s.grip_closed = close

    dropped = False
    if s.held:
        if close:
            s.obj_x = s.hand_x + s.grasp_dx
            s.obj_y = max(0.0, s.hand_y + s.grasp_dy)
        else:
            s.held = False
            s.obj_y = 0.0  # no airborne phase: a released object lands at once
            if s.lifted:
                dropped = True
    elif close and hand_object_distance(s) <= cfg.grasp_radius:
        s.held = True
        s.grasp_dx = s.obj_x - s.hand_x
        s.grasp_dy = s.obj_y - s.hand_y

    if s.obj_y > cfg.pick_height:
        s.lifted = True

    if dropped:
        s.done = True
        s.failure = "drop"
        return s, StepFlags(dropped=True, done=True)

    success = False
    new_attempt = False
    if task_distance(s, cfg) <= tolerance:
        s.hold_count += 1
    else:
        s.hold_count = 0
    if s.hold_count >= cfg.hold_steps:
        success = True
        s.successes += 1
        if s.successes >= cfg.max_successes:
            s.done = True
        else:
            s.targ_x, s.targ_y, s.targ_heading = _sample_target(cfg, rng)
            s.steps_left = cfg.attempt_limit
            s.hold_count = 0
            s.lifted = s.obj_y > cfg.pick_height
            new_attempt = True
        return s, StepFlags(success=True, new_attempt=new_attempt, done=s.done)

    s.steps_left -= 1
    if s.steps_left <= 0:
        s.done = True
        s.failure = "timeout"
        return s, StepFlags(timeout=True, done=True)
    return s, StepFlags()


def initial_reward_state(state: EnvState, cfg: EnvConfig, tolerance: float) -> RewardState:
    """Fresh per-attempt bookkeeping anchored at the attempt's starting distances."""
    return RewardState(
        d_closest=hand_object_distance(state),
        dhat_closest=task_distance(state, cfg),
        pick_height=cfg.pick_height,
        tolerance=tolerance,
    )


@dataclass(frozen=True)
class RewardParts:
    reach: float
    pick_dense: float
    pick_bonus: float
    targ_dense: float
    success_bonus: float
    vel_penalty: float

    @property
    def total(self) -> float:
        return (
            self.reach
            + self.pick_dense
            + self.pick_bonus
            + self.targ_dense
            + self.success_bonus
            - self.vel_penalty
        )


def staged_reward_parts(
    prev: EnvState,
    next_state: EnvState,
    action,
    rs: RewardState,
    coeffs: RewardCoeffs,
    cfg: EnvConfig,
) -> tuple[RewardParts, RewardState]:
    """Component-wise reward for the prev -> next transition.

    The pick indicator latches the moment the object clears the pick height;
    from that step on the lifting stage is silent and the target stage is
    live, so the two can never pay together.
    """
    d = hand_object_distance(next_state)
    reach = coeffs.reach_coef * max(rs.d_closest - d, 0.0)

    h_t = next_state.obj_y
    picked = rs.picked or h_t > rs.pick_height
    pick_dense = pick_bonus = 0.0
    if not rs.picked:
        if picked:
            pick_bonus = coeffs.picked_bonus
        else:
            pick_dense = coeffs.pick_coef * h_t

    dhat = task_distance(next_state, cfg)
    targ_dense = success_bonus = 0.0
    success_paid = rs.success_paid
    if picked:
        targ_dense = coeffs.targ_coef * max(rs.dhat_closest - dhat, 0.0)
        if dhat <= rs.tolerance and not success_paid:
            success_bonus = coeffs.success_bonus
            success_paid = True

    vel_penalty = coeffs.vel_penalty * (float(action[0]) ** 2 + float(action[1]) ** 2)

    new_rs = RewardState(
        d_closest=min(rs.d_closest, d),
        dhat_closest=min(rs.dhat_closest, dhat),
        picked=picked,
        success_paid=success_paid,
        pick_height=rs.pick_height,
        tolerance=rs.tolerance,
    )
    parts = RewardParts(reach, pick_dense, pick_bonus, targ_dense, success_bonus, vel_penalty)
    return parts, new_rs


def staged_reward(
    prev: EnvState,
    next_state: EnvState,
    action,
    rs: RewardState,
    coeffs: RewardCoeffs,
    cfg: EnvConfig,
) -> tuple[float, RewardState]:
    parts, new_rs = staged_reward_parts(prev, next_state, action, rs, coeffs, cfg)
    return parts.total, new_rs


@dataclass
class RolloutResult:
    total_reward: float
    successes: int
    steps: int
    failure: str | None


def rollout(
    cfg: EnvConfig,
    coeffs: RewardCoeffs,
    policy,
    rng: np.random.Generator,
    tolerance: float,
    max_steps: int = 10_000,
) -> RolloutResult:
    """Run one episode under ``policy(state) -> (vx, vy, grip)``.

    Reward bookkeeping resets whenever the environment starts a new attempt.
    """
    state = reset(cfg, rng)
    rs = initial_reward_state(state, cfg, tolerance)
    total = 0.0
    steps = 0
    while steps < max_steps:
        action = policy(state)
        nxt, flags = env_step(state, action, cfg, tolerance, rng)
        r, rs = staged_reward(state, nxt, action, rs, coeffs, cfg)
        total += r
        steps += 1
        state = nxt
        if flags.new_attempt:
            rs = initial_reward_state(state, cfg, tolerance)
        if flags.done:
            break
    return RolloutResult(total, state.successes, steps, state.failure)
