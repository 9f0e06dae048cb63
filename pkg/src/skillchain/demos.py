"""Scripted expert controllers and demonstration recording/loading."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import (ACTION_DIM, AssemblyEnv, EnvConfig, SubtaskSpec, WorldState,
                  angle_diff, is_wedged, observe)

DEMO_MAGIC = b"SCDM0001"


def scripted_expert(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Proportional pick-and-place controller for the current subtask.

    Drives toward the target part with the gripper closed (the magnet
    gripper grasps on proximity), carries the part to its slot, and opens
    the gripper at the alignment tolerance to seat it. Actions are clipped
    to [-1, 1].
    """
    k = cfg.n_parts
    action = np.zeros(ACTION_DIM)
    if state.subtask >= k or state.attached[min(state.subtask, k - 1)]:
        return action
    part = state.subtask + 1
    step_len = cfg.max_speed * cfg.dt

    def go(target_xy, gain=0.8):
        delta = target_xy - state.robot
        return np.clip(gain * delta / step_len, -1.0, 1.0)

    if state.held == part:
        slot = cfg.slot_pose(part)
        action[:2] = go(slot[:2])
        # open exactly when the part is within the alignment tolerance:
        # releasing there seats it, releasing anywhere else drops it
        pos_err = float(np.linalg.norm(state.poses[part, :2] - slot[:2]))
        ang_err = abs(angle_diff(state.poses[part, 2], slot[2]))
        aligned = pos_err <= cfg.align_pos_tol and ang_err <= cfg.align_ang_tol
        action[2] = -1.0 if aligned else 1.0
    elif state.held != -1:
        # wrong part in hand: release it and keep moving toward the target
        action[:2] = go(state.poses[part, :2])
        action[2] = -1.0
    else:
        part_xy = state.poses[part, :2]
        action[:2] = go(part_xy)
        # the magnet grasps the nearest loose part in range, so closing is
        # safe whenever the target is nearest or no wrong part is in reach
        d_target = float(np.linalg.norm(part_xy - state.robot))
        d_wrong = min((float(np.linalg.norm(state.poses[p, :2] - state.robot))
                       for p in range(1, k + 1)
                       if p != part and not state.attached[p - 1]
                       and not is_wedged(cfg, state.poses[p, :2])),
                      default=np.inf)
        action[2] = -1.0 if (d_wrong < d_target
                             and d_wrong <= 1.5 * cfg.grasp_radius) else 1.0
    return action


@dataclass
class Demonstration:
    """One successful expert episode for a single subtask."""

    subtask: int
    observations: np.ndarray   # (T+1, obs_dim), includes the terminal obs
    actions: np.ndarray        # (T, act_dim)
    success: bool = True

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def terminal_observation(self) -> np.ndarray:
        return self.observations[-1]

    def __post_init__(self):
        if self.actions.shape[0] < 1:
            raise ValueError("demonstration must have length >= 1")
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("observation/action length mismatch")
        if not self.success:
            raise ValueError("only successful demonstrations are stored")


@dataclass
class DemoSet:
    subtask: int
    demos: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.demos)

    @property
    def obs_dim(self) -> int:
        return self.demos[0].observations.shape[1]

    def all_states(self) -> np.ndarray:
        """All observations across demos (including terminal ones)."""
        return np.concatenate([d.observations for d in self.demos], axis=0)

    def all_pairs(self):
        obs = np.concatenate([d.observations[:-1] for d in self.demos], axis=0)
        act = np.concatenate([d.actions for d in self.demos], axis=0)
        return obs, act

    def __post_init__(self):
        for d in self.demos:
            if d.subtask != self.subtask:
                raise ValueError("mixed subtask indices in DemoSet")


class ExpertFailure(RuntimeError):
    pass


def collect_demos(cfg: EnvConfig, subtask: int, n: int, seed: int,
                  noise_pos: float | None = None,
                  noise_ang: float | None = None) -> DemoSet:
    """Roll the scripted expert until `n` successful demos are recorded.

    Starts are drawn at the (narrower) demo staging noise unless overridden.
    Failed rollouts are discarded and resampled; more failures than
    successes aborts with a diagnostic.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    if noise_pos is None:
        noise_pos = cfg.demo_noise_pos
    rng = np.random.default_rng(seed)
    env = AssemblyEnv(cfg, mode="subtask")
    demos, failures = [], 0
    while len(demos) < n:
        state = env.reset(subtask, rng, noise_pos=noise_pos, noise_ang=noise_ang)
        obs = [env.observe()]
        acts = []
        success = False
        for _ in range(cfg.horizon):
            a = scripted_expert(env.state, cfg)
            res = env.step(a)
            acts.append(a)
            obs.append(env.observe())
            if res.episode_done:
                success = res.subtask_success
                break
        if success:
            demos.append(Demonstration(subtask, np.array(obs), np.array(acts)))
        else:
            failures += 1
            if failures > max(n, 10):
                raise ExpertFailure(
                    f"scripted expert failed {failures} times collecting {n} "
                    f"demos for subtask {subtask}; check env config")
    return DemoSet(subtask, demos)


# -- on-disk format ------------------------------------------------------
#
# magic (8 bytes) | header length (u32 LE) | JSON header | per demo:
#   T (u32 LE) | observations ((T+1)*obs_dim f64 LE) | actions (T*act_dim f64 LE)


def save_demos(demo_set: DemoSet, path) -> None:
    header = json.dumps({
        "format": "skillchain-demos",
        "version": 1,
        "subtask": demo_set.subtask,
        "obs_dim": demo_set.obs_dim,
        "act_dim": int(demo_set.demos[0].actions.shape[1]),
        "count": demo_set.count,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for d in demo_set.demos:
            f.write(struct.pack("<I", d.length))
            f.write(np.ascontiguousarray(d.observations, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(d.actions, dtype="<f8").tobytes())


class DemoFormatError(ValueError):
    pass


def load_demos(path, expect_obs_dim: int | None = None) -> DemoSet:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(DEMO_MAGIC) + 4:
        raise DemoFormatError(f"file truncated at byte {len(data)}: no header")
    if data[: len(DEMO_MAGIC)] != DEMO_MAGIC:
        raise DemoFormatError("bad magic: not a demo file")
    pos = len(DEMO_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise DemoFormatError(f"file truncated at byte {len(data)}: header incomplete")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("format") != "skillchain-demos" or header.get("version") != 1:
        raise DemoFormatError(f"unsupported format/version: {header}")
    obs_dim, act_dim = header["obs_dim"], header["act_dim"]
    if expect_obs_dim is not None and obs_dim != expect_obs_dim:
        raise DemoFormatError(f"obs dim {obs_dim} != expected {expect_obs_dim}")
    demos = []
    for j in range(header["count"]):
        if pos + 4 > len(data):
            raise DemoFormatError(f"file truncated at byte {pos}: demo {j} length missing")
        (t,) = struct.unpack_from("<I", data, pos)
        pos += 4
        nbytes = 8 * ((t + 1) * obs_dim + t * act_dim)
        if pos + nbytes > len(data):
            raise DemoFormatError(f"file truncated at byte {len(data)}: demo {j} payload incomplete")
        obs = np.frombuffer(data, dtype="<f8", count=(t + 1) * obs_dim, offset=pos)
        pos += 8 * (t + 1) * obs_dim
        act = np.frombuffer(data, dtype="<f8", count=t * act_dim, offset=pos)
        pos += 8 * t * act_dim
        demos.append(Demonstration(header["subtask"],
                                   obs.reshape(t + 1, obs_dim).copy(),
                                   act.reshape(t, act_dim).copy()))
    if pos != len(data):
        raise DemoFormatError(f"trailing bytes starting at {pos}")
    return DemoSet(header["subtask"], demos)
