"""Skill-chain orchestrator: per-subtask pretraining with the weighted
environment+imitation reward, then joint fine-tuning rounds where each
policy starts from its predecessor's terminal states and earns a
terminal-state bonus for ending inside the successor's initiation set."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_chain_checkpoint, save_chain_checkpoint
from .demos import DemoSet, collect_demos, load_demos, save_demos
from .discriminators import (GailDiscriminator, InitSetDiscriminator,
                             gail_pair_input, update_gail, update_initset)
from .env import (ACTION_DIM, AssemblyEnv, EnvConfig, WorldState, make_task,
                  observation_dim)
from .ppo import (Agent, PpoConfig, RewardWeights, RolloutCollector,
                  lr_schedule, ppo_update)


@dataclass
class ChainConfig:
    env: EnvConfig = field(default_factory=make_task)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    lam1: float = 0.5
    lam2: float = 0.5
    lam3: float = 10000.0
    p_env: float = 0.2               # env-vs-buffer start sampling mix
    start_sampling: str = "buffer"   # "buffer" (ours) | "gaussian" (sequencing baseline)
    buffer_capacity: int = 10000
    n_demos: int = 200
    pretrain_rounds: int = 800       # rollout rounds per subtask, upper bound
    pretrain_stop_success: float = 0.9
    pretrain_stop_patience: int = 5
    pretrain_attempts: int = 3       # random restarts if a subtask stalls
    finetune_iters: int = 300
    rounds_per_subtask: int = 2
    disc_batch: int = 128
    disc_lr: float = 1e-3
    gail_updates_per_round: int = 8  # disc must track the moving policy
    init_buffer_seed_size: int = 256
    eval_episodes: int = 100
    checkpoint_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_env <= 1.0:
            raise ValueError("p_env must be in [0, 1]")
        if self.env.n_parts < 2:
            raise ValueError("need at least 2 subtasks to chain")
        if self.start_sampling not in ("buffer", "gaussian"):
            raise ValueError("start_sampling must be 'buffer' or 'gaussian'")
        for lam in (self.lam1, self.lam2, self.lam3):
            if lam < 0:
                raise ValueError("reward weights must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def ps_config(cfg: ChainConfig) -> ChainConfig:
    """Policy Sequencing preset: same orchestrator, no terminal-state bonus,
    Gaussian start-state model fitted to predecessor terminals."""
    return replace(cfg, lam3=0.0, start_sampling="gaussian")


@dataclass
class StateBuffer:
    """Bounded FIFO of full world states from successful trajectories."""

    capacity: int
    subtask: int
    kind: str  # "initiation" | "terminal"
    states: deque = None

    def __post_init__(self):
        if self.kind not in ("initiation", "terminal"):
            raise ValueError("kind must be 'initiation' or 'terminal'")
        if self.states is None:
            self.states = deque(maxlen=self.capacity)

    def add(self, state: WorldState) -> None:
        self.states.append(state.copy())

    def __len__(self) -> int:
        return len(self.states)

    def sample(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.integers(0, len(self.states), size=n)
        return [self.states[int(j)] for j in idx]

    def object_states(self) -> np.ndarray:
        return np.array([s.object_state() for s in self.states])


class SkillChain:
    """Per-subtask agents, discriminators, buffers, and demo references."""

    def __init__(self, cfg: ChainConfig, agents, gail_discs, init_discs, demos):
        k = cfg.env.n_parts
        self.cfg = cfg
        self.k = k
        self.agents: list[Agent] = agents
        self.gail_discs: list[GailDiscriminator] = gail_discs
        self.init_discs: list[InitSetDiscriminator] = init_discs
        self.demos: list[DemoSet] = demos
        self.b_init = [StateBuffer(cfg.buffer_capacity, i, "initiation") for i in range(k)]
        self.b_term = [StateBuffer(cfg.buffer_capacity, i, "terminal") for i in range(k)]
        self.env_steps = 0

    @classmethod
    def create(cls, cfg: ChainConfig, demos: list) -> "SkillChain":
        k = cfg.env.n_parts
        obs_dim = observation_dim(k)
        obj_dim = 3 * (k + 1)
        agents, gails, inits = [], [], []
        for i in range(k):
            rng = _rng(cfg.seed, "init", i)
            agents.append(Agent.create(obs_dim, ACTION_DIM, rng, lr=cfg.ppo.lr))
            gails.append(GailDiscriminator.create(obs_dim + ACTION_DIM, i, rng,
                                                  lr=cfg.disc_lr))
            inits.append(InitSetDiscriminator.create(obj_dim, i, rng,
                                                     lr=cfg.disc_lr))
        chain = cls(cfg, agents, gails, inits, demos)
        # seed the first initiation buffer with canonical env samples so its
        # discriminator is well-defined (it has no predecessor feeding it)
        env = AssemblyEnv(cfg.env)
        seed_rng = _rng(cfg.seed, "binit_seed", 0)
        for _ in range(cfg.init_buffer_seed_size):
            chain.b_init[0].add(env.sample_initial(0, seed_rng))
        return chain

    def tsr_disc_for(self, i: int) -> InitSetDiscriminator | None:
        """Successor initiation-set discriminator used to score terminal
        states of subtask i; None for the last subtask."""
        return self.init_discs[i + 1] if i + 1 < self.k else None


def _rng(seed: int, tag: str, i: int) -> np.random.Generator:
    digest = sum(ord(c) * 131**j for j, c in enumerate(tag)) % (2**31)
    return np.random.default_rng(np.random.SeedSequence([seed, digest, i]))


# -- start-state sampling ---------------------------------------------------


def make_start_sampler(chain: SkillChain, i: int, noise_pos=None, noise_ang=None):
    """Start-state sampler for subtask i during fine-tuning.

    With probability p_env (or always for the first subtask / while the
    predecessor terminal buffer is empty) a canonical env sample; otherwise
    a predecessor terminal state, drawn directly or from a diagonal
    Gaussian fit depending on cfg.start_sampling.
    """
    cfg = chain.cfg
    env = AssemblyEnv(cfg.env)
    buf = chain.b_term[i - 1] if i > 0 else None
    gauss = None
    if cfg.start_sampling == "gaussian" and buf is not None and len(buf) >= 2:
        obj = buf.object_states()
        gauss = (obj.mean(axis=0), obj.std(axis=0))

    def sample(rng: np.random.Generator) -> WorldState:
        if buf is None or len(buf) == 0 or rng.uniform() < cfg.p_env:
            return env.sample_initial(i, rng, noise_pos=noise_pos, noise_ang=noise_ang)
        if gauss is not None:
            vec = gauss[0] + gauss[1] * rng.standard_normal(gauss[0].shape[0])
            return project_object_state(cfg.env, vec, subtask=i)
        state = buf.sample(rng, 1)[0].copy()
        state.subtask = i
        return state

    return sample


def pretrain_start_sampler(cfg: ChainConfig, i: int):
    env = AssemblyEnv(cfg.env)
    return lambda rng: env.sample_initial(i, rng)


def project_object_state(env_cfg: EnvConfig, obj_vec: np.ndarray, subtask: int) -> WorldState:
    """Build a valid world state for `subtask` from a sampled object-state
    vector: base pose forced canonical, attached parts re-snapped to their
    slots, loose parts clamped to the workspace with wrapped angles."""
    k = env_cfg.n_parts
    poses = np.asarray(obj_vec, dtype=np.float64).reshape(k + 1, 3).copy()
    poses[0] = [env_cfg.base_pos[0], env_cfg.base_pos[1], 0.0]
    attached = np.zeros(k, dtype=bool)
    for p in range(1, k + 1):
        if p <= subtask:
            poses[p] = env_cfg.slot_pose(p)
            attached[p - 1] = True
        else:
            poses[p, :2] = np.clip(poses[p, :2], -env_cfg.workspace, env_cfg.workspace)
            poses[p, 2] = math.remainder(poses[p, 2], 2.0 * math.pi)
    state = WorldState(
        robot=np.array(env_cfg.robot_start, dtype=np.float64),
        gripper_closed=False, held=-1, poses=poses,
        attached=attached, subtask=subtask)
    from .env import compute_phase
    state.phase = compute_phase(env_cfg, state)
    return state


# -- metrics ----------------------------------------------------------------

METRIC_FIELDS = [
    "phase", "iteration", "subtask", "step", "success_rate", "n_episodes",
    "reward_mean", "pg_loss", "v_loss", "entropy", "clip_frac",
    "gail_loss", "initset_loss", "tsr_mean", "term_spread",
]


class MetricsWriter:
    """Append-only CSV stream with deterministic float formatting."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=METRIC_FIELDS)
        self._writer.writeheader()
        self.rows = []

    def write(self, **row):
        full = {k: "" for k in METRIC_FIELDS}
        for k, v in row.items():
            full[k] = repr(float(v)) if isinstance(v, (float, np.floating)) else v
        self._writer.writerow(full)
        self._file.flush()
        self.rows.append(full)

    def close(self):
        self._file.close()


# -- training phases ---------------------------------------------------------


def _train_round(chain, i, collector, start_fn, weights, tsr_disc, lr_scale,
                 rngs, insert_buffers: bool):
    """One rollout + discriminator + policy update round for subtask i.

    Returns (diagnostics dict, episode records, batch)."""
    cfg = chain.cfg
    agent = chain.agents[i]
    batch, episodes = collector.collect(
        agent, i, start_fn, weights, chain.gail_discs[i], tsr_disc,
        cfg.ppo.rollout_size, rngs["roll"])
    chain.env_steps += batch.size

    if insert_buffers:
        for ep in episodes:
            if ep.success:
                chain.b_init[i].add(ep.start_state)
                chain.b_term[i].add(ep.terminal_state)

    # imitation discriminator: several minibatches per rollout so it keeps
    # separating the current policy (stale scores reward loitering)
    expert_obs, expert_act = chain.demos[i].all_pairs()
    norm = agent.normalizer
    gail_loss_val = 0.0
    for _ in range(cfg.gail_updates_per_round):
        e_idx = rngs["disc"].integers(0, expert_obs.shape[0], size=cfg.disc_batch)
        a_idx = rngs["disc"].integers(0, batch.size, size=cfg.disc_batch)
        gail_loss_val = update_gail(
            chain.gail_discs[i],
            gail_pair_input(norm.apply(expert_obs[e_idx]), expert_act[e_idx]),
            gail_pair_input(norm.apply(batch.obs[a_idx]), batch.actions[a_idx]))

    # initiation-set discriminator: needs both classes populated
    initset_loss_val = ""
    if insert_buffers and i > 0 and len(chain.b_term[i - 1]) > 0 and len(chain.b_init[i]) > 0:
        s_init = np.array([s.object_state()
                           for s in chain.b_init[i].sample(rngs["disc"], cfg.disc_batch)])
        s_term = np.array([s.object_state()
                           for s in chain.b_term[i - 1].sample(rngs["disc"], cfg.disc_batch)])
        initset_loss_val = update_initset(chain.init_discs[i], s_init, s_term)

    diag = ppo_update(agent, batch, cfg.ppo, lr_scale, rngs["update"])
    agent.normalizer.update(batch.obs)

    n_eps = len(episodes)
    diag.update({
        "success_rate": (sum(e.success for e in episodes) / n_eps) if n_eps else 0.0,
        "n_episodes": n_eps,
        "reward_mean": float(batch.rewards.mean()),
        "gail_loss": gail_loss_val,
        "initset_loss": initset_loss_val,
        "tsr_mean": float(batch.r_tsr.mean()),
    })
    return diag, episodes, batch


def pretrain_subtask(chain: SkillChain, i: int, budget_rounds: int | None = None,
                     metrics: MetricsWriter | None = None) -> None:
    """Train policy i with the environment+imitation reward on canonical
    noisy starts; stops at the budget or once the success rate plateaus.

    The objective is non-convex and an unlucky initialization occasionally
    parks a policy in a no-grasp local optimum for the whole budget, so a
    run that ends with a near-zero recent success rate is restarted from a
    fresh (seed-derived, deterministic) initialization, up to
    cfg.pretrain_attempts attempts."""
    cfg = chain.cfg
    if budget_rounds is None:
        budget_rounds = cfg.pretrain_rounds
    if budget_rounds <= 0:
        return
    collector = RolloutCollector(cfg.env, cfg.ppo.n_workers)
    start_fn = pretrain_start_sampler(cfg, i)
    weights = RewardWeights(cfg.lam1, cfg.lam2, 0.0, cfg.ppo.reward_scale)
    obs_dim = observation_dim(cfg.env.n_parts)
    iteration = 0
    for attempt in range(max(1, cfg.pretrain_attempts)):
        if attempt > 0:
            rng = _rng(cfg.seed, f"pre_retry{attempt}", i)
            chain.agents[i] = Agent.create(obs_dim, ACTION_DIM, rng, lr=cfg.ppo.lr)
            chain.gail_discs[i] = GailDiscriminator.create(
                obs_dim + ACTION_DIM, i, rng, lr=cfg.disc_lr)
        suffix = "" if attempt == 0 else f"_r{attempt}"
        rngs = {tag: _rng(cfg.seed, f"pre_{tag}{suffix}", i)
                for tag in ("roll", "disc", "update")}
        streak = 0
        recent = deque(maxlen=20)
        solved = False
        for r in range(budget_rounds):
            lr_scale = lr_schedule(r, budget_rounds, 1.0)
            diag, _, _ = _train_round(chain, i, collector, start_fn, weights,
                                      None, lr_scale, rngs, insert_buffers=False)
            if metrics is not None:
                metrics.write(phase="pretrain", iteration=iteration, subtask=i,
                              step=chain.env_steps, **{
                                  k: diag[k] for k in
                                  ("success_rate", "n_episodes", "reward_mean",
                                   "pg_loss", "v_loss", "entropy", "clip_frac",
                                   "gail_loss", "tsr_mean")})
            iteration += 1
            if diag["n_episodes"] > 0:
                recent.append(diag["success_rate"])
            if diag["n_episodes"] > 0 and diag["success_rate"] >= cfg.pretrain_stop_success:
                streak += 1
                if streak >= cfg.pretrain_stop_patience:
                    solved = True
                    break
            else:
                streak = 0
        if solved or (recent and float(np.mean(recent)) > 0.5):
            break


def finetune_iteration(chain: SkillChain, m: int,
                       collectors: list[RolloutCollector], rngs_by_subtask: list,
                       metrics: MetricsWriter | None = None,
                       dump_sink=None) -> None:
    """One joint fine-tuning pass over subtasks 1..K: mixed-start rollouts,
    success-only buffer insertion, imitation and initiation-set
    discriminator updates, then a policy update with the terminal-state
    bonus from the successor's discriminator."""
    cfg = chain.cfg
    total_rounds = cfg.finetune_iters * cfg.rounds_per_subtask
    for i in range(chain.k):
        start_fn = make_start_sampler(chain, i)
        weights = RewardWeights(cfg.lam1, cfg.lam2, cfg.lam3, cfg.ppo.reward_scale)
        tsr_disc = chain.tsr_disc_for(i)
        term_states = []
        for r in range(cfg.rounds_per_subtask):
            lr_scale = lr_schedule(m * cfg.rounds_per_subtask + r, total_rounds, 1.0)
            diag, episodes, _ = _train_round(chain, i, collectors[i], start_fn,
                                             weights, tsr_disc, lr_scale,
                                             rngs_by_subtask[i], insert_buffers=True)
            term_states.extend(e.terminal_state.object_state()
                               for e in episodes if e.success)
            if metrics is not None:
                spread = (analysis.termination_spread(chain.b_term[i].object_states())
                          if len(chain.b_term[i]) >= 2 else "")
                metrics.write(phase="finetune", iteration=m, subtask=i,
                              step=chain.env_steps, term_spread=spread, **{
                                  k: diag[k] for k in
                                  ("success_rate", "n_episodes", "reward_mean",
                                   "pg_loss", "v_loss", "entropy", "clip_frac",
                                   "gail_loss", "initset_loss", "tsr_mean")})
        if dump_sink is not None and term_states:
            dump_sink(iteration=m, subtask=i, step=chain.env_steps,
                      states=np.array(term_states))


# -- evaluation ---------------------------------------------------------------


def evaluate_chain(agents: list[Agent], env_cfg: EnvConfig, n_episodes: int,
                   seed: int, collect_terminals_of: int | None = None) -> dict:
    """Run the stochastic policies back-to-back from fresh task starts
    (seeded, so reruns are bit-identical); progress per episode =
    completed subtasks / K. Actions are sampled rather than taken at the
    mean: the Gaussian jitter is part of the learned controller — the
    final 1 cm alignment is often reached by dithering around a mean that
    sits just outside tolerance."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be > 0")
    k = env_cfg.n_parts
    env = AssemblyEnv(env_cfg, mode="subtask")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7331]))
    progress = []
    subtask_success = np.zeros(k)
    subtask_attempts = np.zeros(k)
    terminals = []
    for _ in range(n_episodes):
        state = env.sample_initial(0, rng)
        completed = 0
        for i in range(k):
            env.reset_to(state, subtask=i)
            subtask_attempts[i] += 1
            success = False
            for _ in range(env_cfg.horizon):
                obs_n = agents[i].normalizer.apply(env.observe())
                action, _ = agents[i].act(obs_n, rng)
                res = env.step(np.clip(action, -1.0, 1.0))
                if res.episode_done:
                    success = res.subtask_success
                    break
            if not success:
                break
            state = env.state.copy()
            subtask_success[i] += 1
            completed += 1
            if collect_terminals_of == i:
                terminals.append(state.object_state())
        progress.append(completed / k)
    out = {
        "progress_mean": float(np.mean(progress)),
        "progress": progress,
        "subtask_success_rate": [
            float(subtask_success[i] / subtask_attempts[i]) if subtask_attempts[i] else 0.0
            for i in range(k)],
        "n_episodes": n_episodes,
    }
    if collect_terminals_of is not None:
        out["terminal_states"] = np.array(terminals) if terminals else np.zeros((0, 3 * (k + 1)))
    return out


# -- run orchestration --------------------------------------------------------


def prepare_demos(cfg: ChainConfig, demo_dir) -> list[DemoSet]:
    """Load per-subtask demo files from demo_dir, collecting them first if
    missing. Filenames encode task and seed, so runs can share a corpus."""
    demo_dir = Path(demo_dir)
    demo_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(cfg.env.n_parts):
        path = demo_dir / f"{cfg.env.task}_s{i}_n{cfg.n_demos}.demos"
        if not path.exists():
            ds = collect_demos(cfg.env, i, cfg.n_demos, seed=10_000 + i)
            save_demos(ds, path)
        out.append(load_demos(path, expect_obs_dim=observation_dim(cfg.env.n_parts)))
    return out


class DumpSink:
    """Writes per-iteration terminal-state dumps as JSON files."""

    def __init__(self, run_dir, method: str):
        self.dir = Path(run_dir) / "dumps"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.method = method

    def __call__(self, iteration: int, subtask: int, step: int, states: np.ndarray):
        path = self.dir / f"term_m{iteration:04d}_s{subtask}.json"
        with open(path, "w") as f:
            json.dump({"method": self.method, "iteration": iteration,
                       "step": step, "subtask": subtask,
                       "states": states.tolist()}, f)


def run_chain(cfg: ChainConfig, run_dir, demo_dir, method: str = "tsr",
              pretrained_checkpoint=None) -> dict:
    """Full pipeline: demos, pretraining (or a pretrained checkpoint),
    fine-tuning with dumps and metrics, final evaluation. Returns the
    results dict; everything is also written under run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    demos = prepare_demos(cfg, demo_dir)
    chain = SkillChain.create(cfg, demos)
    metrics = MetricsWriter(run_dir / "metrics.csv")

    if pretrained_checkpoint is not None:
        agents, gails, inits, _ = load_chain_checkpoint(pretrained_checkpoint)
        chain.agents, chain.gail_discs, chain.init_discs = agents, gails, inits
    else:
        for i in range(chain.k):
            pretrain_subtask(chain, i, metrics=metrics)
        save_chain_checkpoint(run_dir / "pretrained.npz", chain.agents,
                              chain.gail_discs, chain.init_discs,
                              {"phase": "pretrained"})

    naive = evaluate_chain(chain.agents, cfg.env, cfg.eval_episodes, cfg.seed)

    sink = DumpSink(run_dir, method)
    collectors = [RolloutCollector(cfg.env, cfg.ppo.n_workers) for _ in range(chain.k)]
    rngs_by_subtask = [
        {tag: _rng(cfg.seed, f"ft_{tag}", i) for tag in ("roll", "disc", "update")}
        for i in range(chain.k)]
    for m in range(cfg.finetune_iters):
        finetune_iteration(chain, m, collectors, rngs_by_subtask, metrics, sink)
        if (m + 1) % cfg.checkpoint_interval == 0 or m == cfg.finetune_iters - 1:
            save_chain_checkpoint(run_dir / f"chain_m{m + 1:04d}.npz",
                                  chain.agents, chain.gail_discs,
                                  chain.init_discs, {"iteration": m + 1})

    final = evaluate_chain(chain.agents, cfg.env, cfg.eval_episodes, cfg.seed)
    metrics.close()
    results = {
        "method": method,
        "seed": cfg.seed,
        "naive_progress": naive["progress_mean"],
        "final_progress": final["progress_mean"],
        "naive_subtask_success": naive["subtask_success_rate"],
        "final_subtask_success": final["subtask_success_rate"],
        "env_steps": chain.env_steps,
    }
    (run_dir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results
