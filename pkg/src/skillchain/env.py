"""Deterministic 2-D chained-assembly environment.

A point robot with a magnet gripper picks up K parts from a staging row and
mounts them on fixed slots of a base object, one part per subtask. The parts
are staged closer together than the shoving radius of a carried part, so
extracting one part inevitably plows its neighbors off their canonical
poses; the staging row also sits near the table edge, and a part squeezed
against the edge is wedged there for good (it can never be grasped again).
A policy can never wedge its *own* target — the empty robot pushes nothing
and the held part is not plowed — so wedging is a pure externality imposed
on the subtasks that follow. Sloppy policies mess up the workplace for the
policies that come after them, which is the failure mode skill chaining has
to survive.

Dynamics are purely kinematic and bit-deterministic: identical
(state, action) always yields an identical step result.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

PHASES = ("reach", "grasp", "move", "align", "done")
ACTION_DIM = 3  # planar velocity + gripper command, each in [-1, 1]


@dataclass
class EnvConfig:
    task: str = "rack_k4"
    n_parts: int = 4
    workspace: float = 0.35         # half-extent of the square workspace (m)
    dt: float = 0.1                 # s
    max_speed: float = 0.5          # m/s -> 5 cm max displacement per step
    grasp_radius: float = 0.03      # m
    align_pos_tol: float = 0.01     # m
    align_ang_tol: float = math.radians(5.0)
    push_radius: float = 0.0        # empty-handed the robot is a point and
                                    # displaces nothing; only carrying plows
    carry_radius: float = 0.15      # shoving radius while carrying a part
    held_angle_rate: float = 0.06   # rad/step a held part self-rights
    horizon: int = 150              # steps per subtask
    noise_pos: float = 0.045        # initial-state noise, m
    noise_ang: float = math.radians(3.0)
    demo_noise_pos: float = 0.02    # demonstrations are staged more carefully
                                    # than the deployed task varies; monolithic
                                    # cloning inherits that narrow coverage
    success_bonus: float = 30.0     # must beat farming per-step imitation
                                    # reward for a whole horizon: finishing
                                    # ends the episode and forfeits it
    time_penalty: float = 0.01
    wrong_hold_penalty: float = 0.05
    reward_bound: float = 40.0
    # layout
    part_row_y: float = -0.25       # staging row 10 cm from the table edge
    part_span: float = 0.08         # parts at x in [-span, span]; tight
                                    # spacing (< carry_radius) so extracting
                                    # a part shoves its neighbors off their
                                    # canonical poses — later subtasks then
                                    # start from drifted states
    base_pos: tuple = (0.0, 0.3)
    slot_y: float = 0.0
    robot_start: tuple = (0.0, 0.0)

    def part_xs(self) -> np.ndarray:
        k = self.n_parts
        if k == 1:
            return np.array([0.0])
        return np.linspace(-self.part_span, self.part_span, k)

    def canonical_part_pose(self, part: int) -> np.ndarray:
        """Staging pose of part `part` (1-based id)."""
        return np.array([self.part_xs()[part - 1], self.part_row_y, 0.0])

    def slot_pose(self, part: int) -> np.ndarray:
        """Mount pose for part `part`: slot order is reversed vs the row."""
        xs = self.part_xs()[::-1]
        return np.array([xs[part - 1], self.slot_y, 0.0])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EnvConfig":
        d = json.loads(text)
        d["base_pos"] = tuple(d["base_pos"])
        d["robot_start"] = tuple(d["robot_start"])
        return cls(**d)


def make_task(k: int = 4, **overrides) -> EnvConfig:
    return EnvConfig(task=f"rack_k{k}", n_parts=k, **overrides)


@dataclass
class WorldState:
    """Full simulator state. poses[0] is the (immovable) base; poses[k] is
    part k. Attached parts sit exactly at their slot pose."""

    robot: np.ndarray               # (2,)
    gripper_closed: bool
    held: int                       # part id, or -1
    poses: np.ndarray               # (K+1, 3): x, y, angle
    attached: np.ndarray            # (K,) bool
    subtask: int                    # 0-based; == K when the whole task is done
    phase: str = "reach"

    def copy(self) -> "WorldState":
        return WorldState(
            self.robot.copy(), self.gripper_closed, self.held,
            self.poses.copy(), self.attached.copy(), self.subtask, self.phase,
        )

    @property
    def n_parts(self) -> int:
        return self.poses.shape[0] - 1

    def object_state(self) -> np.ndarray:
        """Flat (K+1)*3 vector of all object poses."""
        return self.poses.ravel().copy()

    def to_dict(self) -> dict:
        return {
            "robot": self.robot.tolist(),
            "gripper_closed": bool(self.gripper_closed),
            "held": int(self.held),
            "poses": self.poses.tolist(),
            "attached": self.attached.astype(int).tolist(),
            "subtask": int(self.subtask),
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            robot=np.asarray(d["robot"], dtype=np.float64),
            gripper_closed=bool(d["gripper_closed"]),
            held=int(d["held"]),
            poses=np.asarray(d["poses"], dtype=np.float64),
            attached=np.asarray(d["attached"], dtype=bool),
            subtask=int(d["subtask"]),
            phase=d["phase"],
        )


@dataclass
class SubtaskSpec:
    """One MDP of the chain: mount part index+1 on its slot."""

    index: int                      # 0-based subtask index
    part: int                       # target part id = index + 1
    target_pose: np.ndarray
    horizon: int

    @classmethod
    def for_subtask(cls, cfg: EnvConfig, index: int) -> "SubtaskSpec":
        if not 0 <= index < cfg.n_parts:
            raise ValueError(f"subtask index {index} out of range")
        return cls(index=index, part=index + 1,
                   target_pose=cfg.slot_pose(index + 1), horizon=cfg.horizon)


@dataclass
class StepResult:
    state: WorldState
    reward: float
    subtask_done: bool
    subtask_success: bool
    episode_done: bool


def angle_diff(a: float, b: float) -> float:
    d = (a - b) % (2.0 * math.pi)
    return d - 2.0 * math.pi if d > math.pi else d


def observation_dim(n_parts: int) -> int:
    return 4 + 3 * (n_parts + 1) + len(PHASES)


def is_wedged(cfg: EnvConfig, pose_xy: np.ndarray) -> bool:
    """A loose part squeezed against the table edge is stuck there: the
    magnet cannot pull it free, so it can never be grasped again. Plowing
    clamps pushed parts to the workspace boundary, which is the only way a
    part ends up exactly on the edge."""
    return float(np.max(np.abs(pose_xy))) >= cfg.workspace - 1e-9


def compute_phase(cfg: EnvConfig, state: WorldState) -> str:
    i = min(state.subtask, cfg.n_parts - 1)
    if state.subtask >= cfg.n_parts or state.attached[i]:
        return "done"
    part = i + 1
    if state.held == part:
        slot = cfg.slot_pose(part)
        near = np.linalg.norm(state.poses[part, :2] - slot[:2]) <= 3.0 * cfg.align_pos_tol
        return "align" if near else "move"
    d = np.linalg.norm(state.robot - state.poses[part, :2])
    return "grasp" if d <= 1.5 * cfg.grasp_radius else "reach"


def check_state(cfg: EnvConfig, state: WorldState) -> None:
    """Raise if `state` violates the world invariants."""
    k = cfg.n_parts
    if state.poses.shape != (k + 1, 3):
        raise ValueError("poses shape mismatch")
    if not 0 <= state.subtask <= k:
        raise ValueError("subtask index out of range")
    if state.held != -1 and not 1 <= state.held <= k:
        raise ValueError("held id out of range")
    if state.held != -1 and state.attached[state.held - 1]:
        raise ValueError("held part is attached")
    for p in range(1, k + 1):
        if state.attached[p - 1]:
            slot = cfg.slot_pose(p)
            if not np.allclose(state.poses[p], slot, atol=1e-12):
                raise ValueError(f"attached part {p} not at its slot pose")


class AssemblyEnv:
    """Stateful wrapper over the kinematic step function.

    mode "subtask": an episode is one subtask (ends at success or horizon).
    mode "task": subtasks advance automatically after each success (the
    robot recenters, as between-parts in the real rig); the episode ends
    when all parts are attached or the total horizon runs out.
    """

    def __init__(self, cfg: EnvConfig, mode: str = "subtask"):
        if mode not in ("subtask", "task"):
            raise ValueError("mode must be 'subtask' or 'task'")
        self.cfg = cfg
        self.mode = mode
        self.state: WorldState | None = None
        self.t = 0

    # -- initial states -------------------------------------------------

    def sample_initial(self, subtask: int, rng: np.random.Generator,
                       noise_pos: float | None = None,
                       noise_ang: float | None = None) -> WorldState:
        """Canonical layout for `subtask` with uniform noise on unattached
        object poses; parts of earlier subtasks sit attached at their slots."""
        cfg = self.cfg
        np_, na = (cfg.noise_pos if noise_pos is None else noise_pos,
                   cfg.noise_ang if noise_ang is None else noise_ang)
        if np_ < 0 or na < 0:
            raise ValueError("noise bounds must be >= 0")
        k = cfg.n_parts
        poses = np.zeros((k + 1, 3))
        poses[0, :2] = cfg.base_pos
        attached = np.zeros(k, dtype=bool)
        for p in range(1, k + 1):
            if p <= subtask:
                poses[p] = cfg.slot_pose(p)
                attached[p - 1] = True
            else:
                poses[p] = cfg.canonical_part_pose(p)
                poses[p, 0] += rng.uniform(-np_, np_)
                poses[p, 1] += rng.uniform(-np_, np_)
                poses[p, 2] += rng.uniform(-na, na)
        state = WorldState(
            robot=np.array(cfg.robot_start, dtype=np.float64),
            gripper_closed=False, held=-1, poses=poses,
            attached=attached, subtask=subtask,
        )
        state.phase = compute_phase(cfg, state)
        return state

    def reset(self, subtask: int, rng: np.random.Generator, **noise) -> WorldState:
        self.state = self.sample_initial(subtask, rng, **noise)
        self.t = 0
        return self.state.copy()

    def reset_to(self, state: WorldState, subtask: int | None = None) -> WorldState:
        """Start an episode at `state`; the robot is recentered with the
        gripper open regardless of the stored robot pose."""
        s = state.copy()
        if subtask is not None:
            s.subtask = subtask
        check_state(self.cfg, s)
        s.robot = np.array(self.cfg.robot_start, dtype=np.float64)
        s.gripper_closed = False
        if s.held != -1:
            # a carried part is set down where it was
            s.held = -1
        s.phase = compute_phase(self.cfg, s)
        self.state = s
        self.t = 0
        return s.copy()

    # -- dynamics --------------------------------------------------------

    def _potential(self, state: WorldState) -> float:
        # Phase-shaped progress: approach the part, jump on grasp, approach
        # the slot, jump on attach. Local cones near the part and the slot
        # steepen the gradient right where precision matters: without them,
        # policies hover at full speed and rarely enter the grasp radius or
        # the align tolerance.
        cfg = self.cfg
        i = min(state.subtask, cfg.n_parts - 1)
        part = i + 1
        if state.subtask >= cfg.n_parts or state.attached[i]:
            return 3.0
        slot = cfg.slot_pose(part)
        if state.held == part:
            d = float(np.linalg.norm(state.poses[part, :2] - slot[:2]))
            cone = max(0.0, 1.0 - d / 0.12)
            # base sits 1.0 above the best unheld reach value (0.8) so the
            # grasp itself is a clear step up, not a lateral move
            return 1.8 - d + cone
        d = float(np.linalg.norm(state.robot - state.poses[part, :2]))
        cone = max(0.0, 1.0 - d / 0.1)
        # reward a closed gripper near the part: imitation of the open-
        # gripper approach otherwise drives the close probability to zero
        # before the grasp is ever sampled
        closed = 0.3 * cone if state.gripper_closed and state.held == -1 else 0.0
        return -d + 0.5 * cone + closed

    def step(self, action: np.ndarray) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset the environment first")
        cfg = self.cfg
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise ValueError(f"action must have shape ({ACTION_DIM},)")
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        action = np.clip(action, -1.0, 1.0)

        s = self.state
        prev_phi = self._potential(s)
        ns = s.copy()
        k = cfg.n_parts
        i = min(ns.subtask, k - 1)
        target_part = i + 1

        # robot motion
        ns.robot = np.clip(ns.robot + action[:2] * cfg.max_speed * cfg.dt,
                           -cfg.workspace, cfg.workspace)
        close_cmd = action[2] > 0.0

        # release: opening the gripper seats the held target part in its
        # slot if it is within the alignment tolerance, and drops it where
        # it is otherwise (the seating action itself must be timed; a part
        # merely carried across the slot does not attach)
        success = False
        if ns.held != -1 and not close_cmd:
            released = ns.held
            ns.held = -1
            if released == target_part and ns.subtask < k:
                slot = cfg.slot_pose(released)
                pos_err = float(np.linalg.norm(ns.poses[released, :2] - slot[:2]))
                ang_err = abs(angle_diff(ns.poses[released, 2], slot[2]))
                if pos_err <= cfg.align_pos_tol and ang_err <= cfg.align_ang_tol:
                    ns.poses[released] = slot
                    ns.attached[released - 1] = True
                    success = True
        # grasp: a closed gripper picks up the nearest loose part in range
        # (magnet-style: no open->close edge needed, which would make the
        # grasp event razor-thin to discover by exploration)
        if ns.held == -1 and close_cmd:
            best, best_d = -1, cfg.grasp_radius
            for p in range(1, k + 1):
                if ns.attached[p - 1] or is_wedged(cfg, ns.poses[p, :2]):
                    continue
                d = float(np.linalg.norm(ns.robot - ns.poses[p, :2]))
                if d <= best_d:
                    best, best_d = p, d
            if best != -1:
                ns.held = best
        ns.gripper_closed = close_cmd

        # held part rides with the robot and self-rights toward angle 0
        if ns.held != -1:
            ns.poses[ns.held, :2] = ns.robot
            ang = ns.poses[ns.held, 2]
            ns.poses[ns.held, 2] = ang - np.clip(angle_diff(ang, 0.0),
                                                 -cfg.held_angle_rate,
                                                 cfg.held_angle_rate)

        # plowing: the robot disc displaces loose parts it overlaps
        radius = cfg.carry_radius if ns.held != -1 else cfg.push_radius
        for p in range(1, k + 1):
            if ns.attached[p - 1] or p == ns.held:
                continue
            delta = ns.poses[p, :2] - ns.robot
            d = float(np.linalg.norm(delta))
            if d < radius:
                direction = delta / d if d > 1e-12 else np.array([1.0, 0.0])
                ns.poses[p, :2] = np.clip(ns.robot + direction * radius,
                                          -cfg.workspace, cfg.workspace)

        reward = self._potential(ns) - prev_phi - cfg.time_penalty
        if ns.held != -1 and ns.held != target_part:
            reward -= cfg.wrong_hold_penalty
        if success:
            reward += cfg.success_bonus
        reward = float(np.clip(reward, -cfg.reward_bound, cfg.reward_bound))

        self.t += 1
        subtask_done = success
        if self.mode == "subtask":
            episode_done = success or self.t >= cfg.horizon
        else:
            if success:
                ns.subtask += 1
                if ns.subtask < k:
                    ns.robot = np.array(cfg.robot_start, dtype=np.float64)
                    ns.gripper_closed = False
            episode_done = ns.subtask >= k or self.t >= cfg.horizon * k
        ns.phase = compute_phase(cfg, ns)
        self.state = ns
        return StepResult(ns.copy(), reward, subtask_done, success, episode_done)

    # -- observations ----------------------------------------------------

    def observe(self, state: WorldState | None = None) -> np.ndarray:
        s = self.state if state is None else state
        return observe(self.cfg, s)


def observe(cfg: EnvConfig, state: WorldState) -> np.ndarray:
    """Fixed-length flattening: robot block, object poses, phase one-hot."""
    phase_onehot = np.zeros(len(PHASES))
    phase_onehot[PHASES.index(state.phase)] = 1.0
    return np.concatenate([
        state.robot,
        [1.0 if state.gripper_closed else 0.0],
        [1.0 if state.held != -1 else 0.0],
        state.poses.ravel(),
        phase_onehot,
    ])
