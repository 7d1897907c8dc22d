import math

import numpy as np
import pytest

from pbtlab.env import (
    EnvConfig,
    RewardCoeffs,
    env_step,
    hand_object_distance,
    initial_reward_state,
    keypoint_distance,
    keypoints_of,
    reset,
    rollout,
    staged_reward_parts,
    success_check,
    task_distance,
)

CFG = EnvConfig()
COEFFS = RewardCoeffs()


def scripted_action(state, cfg=CFG):
    """Hand-written controller: approach, grasp, lift in one step, carry, hold."""
    if not state.held:
        dx, dy = state.obj_x - state.hand_x, state.obj_y - state.hand_y
        dist = math.hypot(dx, dy)
        if dist > 1e-12:
            speed = min(cfg.max_speed, dist / cfg.dt)
            return (dx / dist * speed, dy / dist * speed, 1.0)
        return (0.0, 0.0, 1.0)
    if state.obj_y <= cfg.pick_height:
        return (0.0, cfg.max_speed, 1.0)  # clears the pick threshold in one step
    dx, dy = state.targ_x - state.obj_x, state.targ_y - state.obj_y
    dist = math.hypot(dx, dy)
    if dist > 1e-9:
        speed = min(cfg.max_speed, dist / cfg.dt)
        return (dx / dist * speed, dy / dist * speed, 1.0)
    return (0.0, 0.0, 1.0)


class TestKeypoints:
    def test_matches_brute_force_corner_transform(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y = rng.uniform(-1, 1, 2)
            heading = rng.uniform(-math.pi, math.pi)
            w, h = rng.uniform(0.03, 0.3, 2)
            got = keypoints_of((x, y, heading), (w, h))
            # independent oracle: rotate each corner offset explicitly
            for (gx, gy), (sx, sy) in zip(got, [(1, 1), (-1, 1), (-1, -1), (1, -1)]):
                cx, cy = sx * w / 2, sy * h / 2
                ox = x + cx * math.cos(heading) - cy * math.sin(heading)
                oy = y + cx * math.sin(heading) + cy * math.cos(heading)
                assert gx == pytest.approx(ox, abs=1e-12)
                assert gy == pytest.approx(oy, abs=1e-12)

    def test_identity_pose_succeeds_at_any_tolerance(self):
        kp = keypoints_of((0.1, 0.2, 0.7), (0.1, 0.05))
        assert keypoint_distance(kp, kp) == 0.0
        assert success_check(kp, kp, 1e-9)

    def test_pure_translation_moves_all_corners_equally(self):
        kp = keypoints_of((0.0, 0.0, 0.3), (0.2, 0.1))
        shifted = keypoints_of((0.05, -0.02, 0.3), (0.2, 0.1))
        delta = math.hypot(0.05, 0.02)
        for (ax, ay), (bx, by) in zip(kp, shifted):
            assert math.hypot(ax - bx, ay - by) == pytest.approx(delta, rel=1e-12)
        assert success_check(kp, shifted, delta + 1e-12)
        assert not success_check(kp, shifted, delta - 1e-9)

    def test_half_turn_square_needs_diagonal_tolerance(self):
        # closed form: a half turn moves every corner by the full diagonal
        w = 0.1
        kp = keypoints_of((0.0, 0.0, 0.0), (w, w))
        rot = keypoints_of((0.0, 0.0, math.pi), (w, w))
        displacement = 2 * math.hypot(w / 2, w / 2)
        assert keypoint_distance(kp, rot) == pytest.approx(displacement, rel=1e-12)
        assert success_check(kp, rot, displacement + 1e-9)
        assert not success_check(kp, rot, displacement * 0.99)


class TestEnvStep:
    def test_noop_times_out_after_attempt_limit(self):
        rng = np.random.default_rng(1)
        state = reset(CFG, rng)
        steps = 0
        while True:
            state, flags = env_step(state, (0.0, 0.0, 0.0), CFG, 0.075, rng)
            steps += 1
            if flags.done:
                break
        assert steps == CFG.attempt_limit
        assert flags.timeout and state.failure == "timeout"
        assert state.successes == 0

    def test_released_object_lands_on_table(self):
        rng = np.random.default_rng(2)
        state = reset(CFG, rng)
        # drive to the object, grasp, lift a little (below pick height)
        while not state.held:
            state, _ = env_step(state, scripted_action(state), CFG, 0.075, rng)
        state, _ = env_step(state, (0.0, 1.0, 1.0), CFG, 0.075, rng)
        assert state.obj_y > 0
        state, flags = env_step(state, (0.0, 0.0, 0.0), CFG, 0.075, rng)
        assert not state.held
        assert state.obj_y == 0.0
        assert not flags.dropped  # never cleared the pick height, so no failure

    def test_dropping_a_lifted_object_fails_the_episode(self):
        rng = np.random.default_rng(3)
        state = reset(CFG, rng)
        while not state.held:
            state, _ = env_step(state, scripted_action(state), CFG, 0.075, rng)
        state, _ = env_step(state, (0.0, CFG.max_speed, 1.0), CFG, 0.075, rng)
        assert state.lifted
        state, flags = env_step(state, (0.0, 0.0, 0.0), CFG, 0.075, rng)
        assert flags.dropped and flags.done and state.failure == "drop"

    def test_held_object_follows_hand(self):
        rng = np.random.default_rng(4)
        state = reset(CFG, rng)
        while not state.held:
            state, _ = env_step(state, scripted_action(state), CFG, 0.075, rng)
        offset = (state.grasp_dx, state.grasp_dy)
        for action in [(1.0, 2.0, 1.0), (-2.0, 1.0, 1.0)]:
            state, _ = env_step(state, action, CFG, 0.075, rng)
            assert state.obj_x == pytest.approx(state.hand_x + offset[0])
            assert state.obj_y == pytest.approx(max(0.0, state.hand_y + offset[1]))

    def test_scripted_trajectory_completes_an_attempt(self):
        rng = np.random.default_rng(5)
        state = reset(CFG, rng)
        for _ in range(400):
            state, flags = env_step(state, scripted_action(state), CFG, 0.075, rng)
            if flags.success:
                break
        assert state.successes == 1
        assert flags.new_attempt  # fresh target issued, episode continues

    def test_action_clamping(self):
        rng = np.random.default_rng(6)
        state = reset(CFG, rng)
        nxt, _ = env_step(state, (1e9, -1e9, 1.0), CFG, 0.075, rng)
        assert abs(nxt.hand_x - state.hand_x) <= CFG.max_speed * CFG.dt + 1e-12
        assert abs(nxt.hand_y - state.hand_y) <= CFG.max_speed * CFG.dt + 1e-12
        assert -CFG.x_limit <= nxt.hand_x <= CFG.x_limit
        assert 0.0 <= nxt.hand_y <= CFG.y_limit


class TestStagedReward:
    def test_reach_pays_for_new_minima_only(self):
        # worked example: closest-so-far 0.5, current distance 0.4
        rng = np.random.default_rng(7)
        state = reset(CFG, rng)
        rs = initial_reward_state(state, CFG, 0.075)
        rs.d_closest = 0.5
        # build a next state at distance 0.4 from the object
        import copy

        nxt = copy.copy(state)
        nxt.hand_x = nxt.obj_x - 0.4
        nxt.hand_y = nxt.obj_y
        parts, rs2 = staged_reward_parts(state, nxt, (0.0, 0.0, 0.0), rs, COEFFS, CFG)
        assert parts.reach == pytest.approx(50.0 * 0.1, rel=1e-12)
        assert parts.reach == pytest.approx(5.0, rel=1e-12)
        # a stationary hand at that distance collects nothing afterwards
        parts, _ = staged_reward_parts(nxt, nxt, (0.0, 0.0, 0.0), rs2, COEFFS, CFG)
        assert parts.reach == 0.0

    def test_oracle_trajectory_reward_bounds(self):
        # total reward for one grasp-lift-place attempt lands inside the
        # window implied by the bounded-progress structure
        rng = np.random.default_rng(8)
        state = reset(CFG, rng)
        rs = initial_reward_state(state, CFG, 0.075)
        d_init = hand_object_distance(state)
        dhat_init = task_distance(state, CFG)
        total = 0.0
        bonuses = 0.0
        for _ in range(400):
            action = scripted_action(state)
            nxt, flags = env_step(state, action, CFG, 0.075, rng)
            parts, rs = staged_reward_parts(state, nxt, action, rs, COEFFS, CFG)
            total += parts.total
            bonuses += parts.pick_bonus + parts.success_bonus
            state = nxt
            if flags.success:
                break
        assert state.successes == 1
        assert bonuses == COEFFS.picked_bonus + COEFFS.success_bonus
        lo = COEFFS.picked_bonus + COEFFS.success_bonus
        hi = lo + COEFFS.reach_coef * d_init + COEFFS.pick_coef * CFG.pick_height \
            + COEFFS.targ_coef * dhat_init
        assert lo <= total <= hi

    def test_holding_near_target_collects_nothing(self):
        # park the object a hair outside the tolerance: zero dense reward
        rng = np.random.default_rng(9)
        state = reset(CFG, rng)
        rs = initial_reward_state(state, CFG, 0.075)
        while True:
            action = scripted_action(state)
            nxt, _ = env_step(state, action, CFG, 0.075, rng)
            parts, rs = staged_reward_parts(state, nxt, action, rs, COEFFS, CFG)
            state = nxt
            if state.held and state.lifted and task_distance(state, CFG) < 0.11:
                break
        idle = (0.0, 0.0, 1.0)
        for _ in range(50):
            nxt, _ = env_step(state, idle, CFG, 0.075, rng)
            parts, rs = staged_reward_parts(state, nxt, idle, rs, COEFFS, CFG)
            assert parts.total == 0.0
            state = nxt


def random_policy(rng, cfg=CFG):
    def policy(state):
        return (
            rng.uniform(-cfg.max_speed, cfg.max_speed),
            rng.uniform(-cfg.max_speed, cfg.max_speed),
            float(rng.random() < 0.5),
        )

    return policy


def noisy_oracle_policy(rng, scale=1.5):
    def policy(state):
        vx, vy, grip = scripted_action(state)
        return (
            vx + rng.normal(0, scale),
            vy + rng.normal(0, scale),
            grip if rng.random() < 0.9 else 1.0 - grip,
        )

    return policy


def check_rollout_invariants(policy, rng, tolerance=0.075, max_steps=600):
    """Shared oracle for the reward-structure invariants over one episode."""
    state = reset(CFG, rng)
    rs = initial_reward_state(state, CFG, tolerance)
    sums = {"reach": 0.0, "targ": 0.0, "pick_bonus": 0, "success_bonus": 0}
    d_init = hand_object_distance(state)
    dhat_init = task_distance(state, CFG)
    steps = 0
    while steps < max_steps:
        action = policy(state)
        nxt, flags = env_step(state, action, CFG, tolerance, rng)
        parts, rs = staged_reward_parts(state, nxt, action, rs, COEFFS, CFG)
        # mutual exclusivity of the lifting stage and the target stage
        assert parts.pick_dense * (parts.targ_dense + parts.success_bonus) == 0.0
        sums["reach"] += parts.reach
        sums["targ"] += parts.targ_dense
        sums["pick_bonus"] += parts.pick_bonus > 0
        sums["success_bonus"] += parts.success_bonus > 0
        assert sums["reach"] <= COEFFS.reach_coef * d_init + 1e-9
        assert sums["targ"] <= COEFFS.targ_coef * dhat_init + 1e-9
        assert sums["pick_bonus"] <= 1
        assert sums["success_bonus"] <= 1
        state = nxt
        steps += 1
        if flags.new_attempt:
            rs = initial_reward_state(state, CFG, tolerance)
            sums = {"reach": 0.0, "targ": 0.0, "pick_bonus": 0, "success_bonus": 0}
            d_init = hand_object_distance(state)
            dhat_init = task_distance(state, CFG)
        if flags.done:
            break


class TestRewardInvariants:
    def test_random_rollouts(self):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            check_rollout_invariants(random_policy(rng), rng)

    def test_noisy_oracle_rollouts(self):
        rng = np.random.default_rng(4321)
        for _ in range(100):
            check_rollout_invariants(noisy_oracle_policy(rng), rng)


class TestRollout:
    def test_deterministic_per_seed(self):
        a = rollout(CFG, COEFFS, scripted_action, np.random.default_rng(10), 0.075, 2000)
        b = rollout(CFG, COEFFS, scripted_action, np.random.default_rng(10), 0.075, 2000)
        assert (a.total_reward, a.successes, a.steps) == (b.total_reward, b.successes, b.steps)

    def test_scripted_policy_chains_successes(self):
        res = rollout(CFG, COEFFS, scripted_action, np.random.default_rng(11), 0.075, 4000)
        assert res.successes >= 3
