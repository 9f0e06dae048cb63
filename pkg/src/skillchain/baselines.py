"""Comparison methods sharing the chain infrastructure: behavioral cloning,
single-policy RL/imitation on the whole task, naive sequencing of
pretrained skills, and the Gaussian-start sequencing baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chaining import (ChainConfig, MetricsWriter, evaluate_chain, ps_config,
                       run_chain, _rng)
from .demos import DemoSet
from .discriminators import GailDiscriminator, gail_pair_input, update_gail
from .env import ACTION_DIM, AssemblyEnv, EnvConfig, observation_dim
from .nn import Mlp, RunningNormalizer, AdamState, adam_step
from .ppo import (Agent, PpoConfig, RewardWeights, RolloutCollector,
                  lr_schedule, ppo_update)

WHOLE_TASK_MODES = ("ppo", "gail", "gail+ppo")


@dataclass
class BcPolicy:
    """Deterministic regression policy: identical observation, identical action."""

    mlp: Mlp
    normalizer: RunningNormalizer

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward(self.normalizer.apply(obs))

    def action(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # regression policies are deterministic; rng kept for protocol parity
        return self.mean_action(obs)


def train_bc(demo_sets: list[DemoSet], epochs: int = 1000, batch_size: int = 256,
             lr: float = 1e-4, seed: int = 0, val_frac: float = 0.1):
    """Mean-squared-error regression of demo actions on observations over
    the concatenation of all subtask demos. Returns (policy, report) where
    the report carries train and held-out MSE."""
    if not demo_sets or all(d.count == 0 for d in demo_sets):
        raise ValueError("demos must be nonempty")
    obs = np.concatenate([d.all_pairs()[0] for d in demo_sets], axis=0)
    act = np.concatenate([d.all_pairs()[1] for d in demo_sets], axis=0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    n = obs.shape[0]
    perm = rng.permutation(n)
    n_val = max(1, int(val_frac * n)) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.shape[0] == 0:
        train_idx = perm

    norm = RunningNormalizer.create(obs.shape[1])
    norm.update(obs[train_idx])
    x = norm.apply(obs[train_idx])
    y = act[train_idx]

    mlp = Mlp.create(obs.shape[1], (128, 256), act.shape[1], rng=rng)
    adam = AdamState.for_params(mlp.n_params, lr=lr, beta1=0.9, beta2=0.999)
    n_train = x.shape[0]
    last_mse = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for s in range(0, n_train, batch_size):
            idx = order[s : s + batch_size]
            pred, cache = mlp.forward_cached(x[idx])
            err = pred - y[idx]
            grads, _ = mlp.backward(cache, 2.0 * err / idx.shape[0])
            mlp.set_flat(adam_step(adam, mlp.flat(), grads))
            last_mse = float(np.mean(err**2))
    policy = BcPolicy(mlp, norm)
    report = {"train_mse": last_mse}
    if n_val > 0:
        pred = mlp.forward(norm.apply(obs[val_idx]))
        report["val_mse"] = float(np.mean((pred - act[val_idx]) ** 2))
    return policy, report


def evaluate_single_policy(actor, env_cfg: EnvConfig, n_episodes: int, seed: int) -> dict:
    """Run one policy on the whole K-subtask episode (sampling from it if
    it is stochastic, like chain evaluation does);
    progress = subtasks completed / K."""
    env = AssemblyEnv(env_cfg, mode="task")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    progress = []
    for _ in range(n_episodes):
        env.reset(0, rng)
        done = False
        while not done:
            a = np.clip(actor.action(env.observe(), rng), -1.0, 1.0)
            done = env.step(a).episode_done
        progress.append(int(env.state.attached.sum()) / env_cfg.n_parts)
    return {"progress_mean": float(np.mean(progress)), "progress": progress,
            "n_episodes": n_episodes}


class _NormalizedActor:
    """Adapts an Agent to raw observations for evaluation."""

    def __init__(self, agent: Agent):
        self.agent = agent

    def mean_action(self, obs):
        return self.agent.mean_action(self.agent.normalizer.apply(obs))

    def action(self, obs, rng):
        a, _ = self.agent.act(self.agent.normalizer.apply(obs), rng)
        return a


def train_whole_task(mode: str, cfg: ChainConfig, demo_sets: list[DemoSet],
                     budget_rounds: int, metrics: MetricsWriter | None = None) -> Agent:
    """Single policy on the full K-subtask episode.

    mode 'ppo' masks the imitation weight to 0; mode 'gail' masks the
    environment weight to 0; 'gail+ppo' keeps both at the configured values.
    """
    if mode not in WHOLE_TASK_MODES:
        raise ValueError(f"mode must be one of {WHOLE_TASK_MODES}")
    lam1 = 0.0 if mode == "gail" else cfg.lam1
    lam2 = 0.0 if mode == "ppo" else cfg.lam2
    weights = RewardWeights(lam1, lam2, 0.0, cfg.ppo.reward_scale)

    obs_dim = observation_dim(cfg.env.n_parts)
    rng_init = _rng(cfg.seed, f"whole_{mode}", 0)
    agent = Agent.create(obs_dim, ACTION_DIM, rng_init, lr=cfg.ppo.lr)
    disc = None
    expert_obs = expert_act = None
    if lam2 > 0:
        disc = GailDiscriminator.create(obs_dim + ACTION_DIM, -1, rng_init,
                                        lr=cfg.disc_lr)
        pairs = [d.all_pairs() for d in demo_sets]
        expert_obs = np.concatenate([p[0] for p in pairs], axis=0)
        expert_act = np.concatenate([p[1] for p in pairs], axis=0)

    collector = RolloutCollector(cfg.env, cfg.ppo.n_workers, mode="task")
    env = AssemblyEnv(cfg.env)
    start_fn = lambda rng: env.sample_initial(0, rng)
    rngs = {tag: _rng(cfg.seed, f"whole_{mode}_{tag}", 1)
            for tag in ("roll", "disc", "update")}
    for r in range(budget_rounds):
        batch, episodes = collector.collect(agent, 0, start_fn, weights, disc,
                                            None, cfg.ppo.rollout_size, rngs["roll"])
        gail_loss_val = ""
        if disc is not None:
            for _ in range(cfg.gail_updates_per_round):
                e_idx = rngs["disc"].integers(0, expert_obs.shape[0], size=cfg.disc_batch)
                a_idx = rngs["disc"].integers(0, batch.size, size=cfg.disc_batch)
                gail_loss_val = update_gail(
                    disc,
                    gail_pair_input(agent.normalizer.apply(expert_obs[e_idx]),
                                    expert_act[e_idx]),
                    gail_pair_input(agent.normalizer.apply(batch.obs[a_idx]),
                                    batch.actions[a_idx]))
        diag = ppo_update(agent, batch, cfg.ppo, lr_schedule(r, budget_rounds, 1.0),
                          rngs["update"])
        agent.normalizer.update(batch.obs)
        if metrics is not None:
            n_eps = len(episodes)
            metrics.write(phase=f"whole:{mode}", iteration=r, subtask=-1,
                          step=(r + 1) * cfg.ppo.rollout_size,
                          success_rate=(sum(e.success for e in episodes) / n_eps) if n_eps else 0.0,
                          n_episodes=n_eps, reward_mean=float(batch.rewards.mean()),
                          pg_loss=diag["pg_loss"], v_loss=diag["v_loss"],
                          entropy=diag["entropy"], clip_frac=diag["clip_frac"],
                          gail_loss=gail_loss_val, tsr_mean=0.0)
    return agent


def naive_sequencing(agents: list[Agent], env_cfg: EnvConfig,
                     n_episodes: int, seed: int) -> dict:
    """Back-to-back execution of the pretrained subtask policies with no
    fine-tuning; the same code path as any chain evaluation."""
    return evaluate_chain(agents, env_cfg, n_episodes, seed)


def policy_sequencing_finetune(cfg: ChainConfig, run_dir, demo_dir,
                               pretrained_checkpoint=None) -> dict:
    """The sequencing baseline: identical orchestrator with the
    terminal-state weight forced to 0 and Gaussian start modeling."""
    return run_chain(ps_config(cfg), run_dir, demo_dir, method="ps",
                     pretrained_checkpoint=pretrained_checkpoint)


def fit_diag_gaussian(samples: np.ndarray):
    """Diagonal Gaussian fit (sample mean, population std per dim)."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return samples.mean(axis=0), samples.std(axis=0)
