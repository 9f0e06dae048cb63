"""Environment tests: determinism, invariants, and each dynamics rule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillchain.env import (
    ACTION_DIM,
    PHASES,
    AssemblyEnv,
    EnvConfig,
    SubtaskSpec,
    WorldState,
    angle_diff,
    check_state,
    compute_phase,
    make_task,
    observation_dim,
    observe,
)


@pytest.fixture
def cfg():
    return make_task(3)


def fresh(cfg, subtask=0, seed=0, noise=0.0):
    env = AssemblyEnv(cfg)
    env.reset(subtask, np.random.default_rng(seed), noise_pos=noise, noise_ang=noise)
    return env


def test_angle_diff_wraps():
    assert angle_diff(0.1, -0.1) == pytest.approx(0.2)
    assert angle_diff(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(-0.2)
    assert abs(angle_diff(3 * math.pi, 0.0)) == pytest.approx(math.pi)


@given(st.floats(-20, 20), st.floats(-20, 20))
@settings(max_examples=100, deadline=None)
def test_angle_diff_range_and_consistency(a, b):
    d = angle_diff(a, b)
    assert -math.pi <= d <= math.pi
    # adding d to b lands on a modulo 2*pi
    assert abs(angle_diff(b + d, a)) < 1e-9


def test_layout_slot_order_reversed(cfg):
    # staging row is left-to-right; slots are mirrored, so part 1 mounts
    # on the far side and the carry path crosses the other parts.
    xs = cfg.part_xs()
    assert xs[0] < xs[-1]
    assert cfg.slot_pose(1)[0] == pytest.approx(xs[-1])
    assert cfg.slot_pose(cfg.n_parts)[0] == pytest.approx(xs[0])


def test_observation_layout(cfg):
    env = fresh(cfg)
    obs = env.observe()
    assert obs.shape == (observation_dim(cfg.n_parts),)
    np.testing.assert_array_equal(obs[:2], env.state.robot)
    assert obs[2] == 0.0 and obs[3] == 0.0
    np.testing.assert_array_equal(obs[4:4 + 3 * (cfg.n_parts + 1)],
                                  env.state.poses.ravel())
    onehot = obs[-len(PHASES):]
    assert onehot.sum() == 1.0
    assert PHASES[int(np.argmax(onehot))] == env.state.phase


def test_step_deterministic(cfg):
    rng = np.random.default_rng(1)
    actions = rng.uniform(-1, 1, size=(40, ACTION_DIM))
    traces = []
    for _ in range(2):
        env = fresh(cfg, seed=7, noise=0.02)
        trace = []
        for a in actions:
            res = env.step(a)
            trace.append((res.state.poses.copy(), res.reward))
        traces.append(trace)
    for (p1, r1), (p2, r2) in zip(*traces):
        np.testing.assert_array_equal(p1, p2)
        assert r1 == r2


def test_sample_initial_attaches_earlier_parts(cfg):
    env = AssemblyEnv(cfg)
    s = env.sample_initial(2, np.random.default_rng(0))
    assert s.attached[:2].all() and not s.attached[2]
    for p in (1, 2):
        np.testing.assert_allclose(s.poses[p], cfg.slot_pose(p))
    check_state(cfg, s)


def test_sample_initial_noise_bounds(cfg):
    env = AssemblyEnv(cfg)
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = env.sample_initial(0, rng)
        for p in range(1, cfg.n_parts + 1):
            canon = cfg.canonical_part_pose(p)
            assert np.all(np.abs(s.poses[p, :2] - canon[:2]) <= cfg.noise_pos)
            assert abs(s.poses[p, 2] - canon[2]) <= cfg.noise_ang


def test_closed_gripper_grasps_in_range(cfg):
    env = fresh(cfg)
    part_xy = env.state.poses[1, :2]
    # walk to part 1 with the gripper already closed: grasp still happens
    # the moment the robot comes within grasp_radius
    for _ in range(60):
        if env.state.held == 1:
            break
        delta = part_xy - env.state.robot
        a = np.clip(delta / (cfg.max_speed * cfg.dt), -1, 1)
        env.step(np.array([a[0], a[1], 1.0]))
    assert env.state.held == 1
    env.step(np.array([0.0, 0.0, -1.0]))   # drop
    assert env.state.held == -1
    env.step(np.array([0.0, 0.0, 1.0]))    # close again re-grasps
    assert env.state.held == 1


def test_drop_releases_part_in_place(cfg):
    env = fresh(cfg)
    # grasp part 1, carry it a bit, then open
    grab_at(env, 1)
    env.step(np.array([1.0, 1.0, 1.0]))
    carried_to = env.state.poses[1, :2].copy()
    env.step(np.array([0.0, 0.0, -1.0]))
    assert env.state.held == -1
    # the now-empty robot still overlaps the part, so the same step nudges
    # it out to push_radius; beyond that it stays where it was set down
    assert np.linalg.norm(env.state.poses[1, :2] - carried_to) <= cfg.push_radius + 1e-12
    rested = env.state.poses[1, :2].copy()
    env.step(np.array([-1.0, -1.0, -1.0]))  # walk away
    env.step(np.array([-1.0, -1.0, -1.0]))
    np.testing.assert_array_equal(env.state.poses[1, :2], rested)


def grab_at(env, part):
    """Drive the robot to `part` and grasp it (helper, not a test)."""
    for _ in range(80):
        delta = env.state.poses[part, :2] - env.state.robot
        # plowing parks loose parts push_radius away, so close between
        # push_radius and grasp_radius
        if np.linalg.norm(delta) <= 0.9 * env.cfg.grasp_radius:
            env.step(np.array([0.0, 0.0, 1.0]))
            break
        a = np.clip(delta / (env.cfg.max_speed * env.cfg.dt), -1, 1)
        env.step(np.array([a[0], a[1], -1.0]))
    assert env.state.held == part
    return env


def test_held_part_rides_robot_and_self_rights(cfg):
    env = fresh(cfg)
    grab_at(env, 1)
    env.state.poses[1, 2] = 0.5  # tilt it by hand
    env.step(np.array([0.5, -0.5, 1.0]))
    np.testing.assert_array_equal(env.state.poses[1, :2], env.state.robot)
    assert env.state.poses[1, 2] == pytest.approx(0.5 - cfg.held_angle_rate)
    for _ in range(20):
        env.step(np.array([0.0, 0.0, 1.0]))
    assert env.state.poses[1, 2] == pytest.approx(0.0)


def test_plowing_displaces_loose_parts(cfg):
    env = fresh(cfg)
    # part 2 sits within carry_radius of part 1, so it is shoved as soon as
    # the robot grasps part 1 and starts moving
    before = env.state.poses[2, :2].copy()
    grab_at(env, 1)
    # drive the carried part straight at part 2's staging position
    target = cfg.canonical_part_pose(2)[:2]
    for _ in range(60):
        delta = target - env.state.robot
        if np.linalg.norm(delta) < 1e-6:
            break
        env.step(np.concatenate([np.clip(delta / (cfg.max_speed * cfg.dt), -1, 1), [1.0]]))
    after = env.state.poses[2, :2]
    assert np.linalg.norm(after - before) > 0.5 * cfg.carry_radius
    assert np.linalg.norm(after - env.state.robot) >= cfg.carry_radius - 1e-9


def test_push_radius_smaller_when_empty_handed(cfg):
    env = fresh(cfg)
    # empty-handed robot just outside push radius must not move the part
    env.state.robot = cfg.canonical_part_pose(1)[:2] + np.array([cfg.push_radius + 0.02, 0.0])
    before = env.state.poses[1, :2].copy()
    env.step(np.array([0.0, 0.0, -1.0]))
    np.testing.assert_array_equal(env.state.poses[1, :2], before)


def test_attach_requires_release_within_tolerance(cfg):
    env = fresh(cfg)
    grab_at(env, 1)
    slot = cfg.slot_pose(1)
    # releasing 4.2 cm out just drops the part where it is
    drive_to(env, slot[:2] + np.array([0.09, -0.09]))
    drive_to(env, slot[:2] + np.array([0.03, -0.03]))
    env.step(np.array([0.0, 0.0, -1.0]))
    assert not env.state.attached[0] and env.state.held == -1
    env.step(np.array([0.0, 0.0, 1.0]))  # magnet regrasp where it fell
    assert env.state.held == 1
    # carrying the part across the slot without opening does not attach
    drive_to(env, slot[:2])
    assert not env.state.attached[0]
    # releasing inside 1 cm seats the part at the exact slot pose
    res = env.step(np.array([0.0, 0.0, -1.0]))
    assert env.state.attached[0]
    assert env.state.held == -1
    np.testing.assert_array_equal(env.state.poses[1], slot)
    assert res.subtask_success and res.episode_done


def drive_to(env, target_xy):
    res = None
    for _ in range(80):
        delta = target_xy - env.state.robot
        if np.linalg.norm(delta) < 1e-9:
            break
        res = env.step(np.concatenate(
            [np.clip(delta / (env.cfg.max_speed * env.cfg.dt), -1, 1), [1.0]]))
        if res.episode_done:
            break
    return res


def test_attach_rejects_bad_angle(cfg):
    env = fresh(cfg)
    grab_at(env, 1)
    env.state.poses[1, 2] = 2.0  # heavy tilt; self-rights held_angle_rate/step
    slot = cfg.slot_pose(1)
    drive_to(env, slot[:2])
    # position is aligned but the angle is still far out of tolerance:
    # releasing only drops the part
    assert np.linalg.norm(env.state.poses[1, :2] - slot[:2]) <= cfg.align_pos_tol
    env.step(np.array([0.0, 0.0, -1.0]))
    assert not env.state.attached[0]
    env.step(np.array([0.0, 0.0, 1.0]))  # pick it back up
    assert env.state.held == 1
    # hold until the part rights itself, then release to seat it
    for _ in range(60):
        env.step(np.array([0.0, 0.0, 1.0]))
    res = env.step(np.array([0.0, 0.0, -1.0]))
    assert res.subtask_success
    assert env.state.attached[0]


def test_success_reward_exceeds_time_penalty(cfg):
    env = fresh(cfg)
    grab_at(env, 1)
    drive_to(env, cfg.slot_pose(1)[:2])
    res = env.step(np.array([0.0, 0.0, -1.0]))
    assert res.subtask_success
    assert res.reward > cfg.success_bonus * 0.5


def test_wrong_hold_penalty(cfg):
    env = fresh(cfg, subtask=0)
    grab_at(env, 2)  # part 2 is not the target of subtask 0
    res = env.step(np.array([0.0, 0.0, 1.0]))
    assert env.state.held == 2
    # stationary step: reward is -time_penalty - wrong_hold_penalty plus a
    # tiny potential change from the part snapping to the robot
    assert res.reward < -cfg.wrong_hold_penalty + 0.05


def test_reward_bounded(cfg):
    env = fresh(cfg, seed=5, noise=0.02)
    rng = np.random.default_rng(6)
    for _ in range(200):
        res = env.step(rng.uniform(-1, 1, ACTION_DIM))
        assert abs(res.reward) <= cfg.reward_bound
        if res.episode_done:
            env.reset(0, rng)


def test_workspace_clipping(cfg):
    env = fresh(cfg)
    for _ in range(100):
        env.step(np.array([1.0, 1.0, -1.0]))
    assert np.all(np.abs(env.state.robot) <= cfg.workspace + 1e-12)


def test_horizon_ends_episode(cfg):
    env = fresh(cfg)
    done = False
    for t in range(cfg.horizon):
        res = env.step(np.zeros(ACTION_DIM))
        done = res.episode_done
    assert done and not res.subtask_success


def test_task_mode_advances_subtasks():
    # two parts are staged farther apart than the carry radius, so the
    # straight-line expert completes the whole task without wedging anything
    cfg = make_task(2)
    env = AssemblyEnv(cfg, mode="task")
    env.reset(0, np.random.default_rng(0), noise_pos=0.0, noise_ang=0.0)
    from skillchain.demos import scripted_expert
    for _ in range(cfg.horizon * cfg.n_parts):
        res = env.step(scripted_expert(env.state, cfg))
        if res.episode_done:
            break
    assert env.state.attached.all()
    assert env.state.subtask == cfg.n_parts
    assert res.episode_done


def test_reset_to_recenters_and_opens(cfg):
    env = fresh(cfg)
    grab_at(env, 1)
    held_xy = env.state.poses[1, :2].copy()
    s = env.reset_to(env.state)
    np.testing.assert_array_equal(s.robot, np.array(cfg.robot_start))
    assert not s.gripper_closed and s.held == -1
    np.testing.assert_array_equal(s.poses[1, :2], held_xy)  # set down in place


def test_reset_to_validates(cfg):
    env = AssemblyEnv(cfg)
    s = env.sample_initial(0, np.random.default_rng(0))
    s.attached[0] = True  # attached but not at the slot pose
    with pytest.raises(ValueError):
        env.reset_to(s)


def test_check_state_rejects_held_attached(cfg):
    env = AssemblyEnv(cfg)
    s = env.sample_initial(1, np.random.default_rng(0))
    s.held = 1
    with pytest.raises(ValueError):
        check_state(cfg, s)


def test_compute_phase_progression(cfg):
    env = fresh(cfg)
    assert env.state.phase == "reach"
    grab_at(env, 1)
    assert compute_phase(cfg, env.state) == "move"
    drive_to(env, cfg.slot_pose(1)[:2])
    assert env.state.phase == "align"
    env.step(np.array([0.0, 0.0, -1.0]))
    assert env.state.phase == "done"


def test_subtask_spec(cfg):
    spec = SubtaskSpec.for_subtask(cfg, 1)
    assert spec.part == 2
    np.testing.assert_array_equal(spec.target_pose, cfg.slot_pose(2))
    with pytest.raises(ValueError):
        SubtaskSpec.for_subtask(cfg, cfg.n_parts)


def test_config_json_roundtrip(cfg):
    again = EnvConfig.from_json(cfg.to_json())
    assert again == cfg


def test_state_dict_roundtrip(cfg):
    env = fresh(cfg, seed=11, noise=0.02)
    env.step(np.array([0.3, -0.2, 1.0]))
    s = env.state
    again = WorldState.from_dict(s.to_dict())
    np.testing.assert_array_equal(again.poses, s.poses)
    np.testing.assert_array_equal(again.robot, s.robot)
    assert again.held == s.held and again.subtask == s.subtask
    assert again.phase == s.phase


def test_invalid_actions_rejected(cfg):
    env = fresh(cfg)
    with pytest.raises(ValueError):
        env.step(np.zeros(2))
    with pytest.raises(ValueError):
        env.step(np.array([0.0, np.nan, 0.0]))


def test_observe_matches_free_function(cfg):
    env = fresh(cfg, seed=13, noise=0.02)
    np.testing.assert_array_equal(env.observe(), observe(cfg, env.state))
