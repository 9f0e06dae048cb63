"""On-policy optimizer: rollout collection over a bank of worker envs,
GAE, and the clipped-surrogate update with entropy bonus and value
regression. Gradients flow through the hand-written MLP backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discriminators import (GailDiscriminator, InitSetDiscriminator,
                             combined_reward, gail_pair_input,
                             gail_reward_from_scores,
                             tsr_reward)
from .env import (ACTION_DIM, AssemblyEnv, EnvConfig, WorldState,
                  observation_dim)
from .nn import (AdamState, GaussianHead, Mlp, RunningNormalizer, adam_step,
                 gaussian_entropy, gaussian_logprob, gaussian_sample)

POLICY_HIDDEN = (128, 256)


@dataclass
class PpoConfig:
    lr: float = 3e-4
    minibatch: int = 128
    epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    reward_scale: float = 0.05
    rollout_size: int = 1024
    n_workers: int = 16
    kl_stop: float | None = 0.015   # stop remaining epochs past this drift

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip ratio must be in (0, 1)")
        if self.kl_stop is not None and self.kl_stop <= 0:
            raise ValueError("kl_stop must be positive or None")
        for name in ("lr", "minibatch", "epochs", "gamma", "gae_lambda",
                     "entropy_coef", "reward_scale", "rollout_size", "n_workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RewardWeights:
    lam1: float = 0.5
    lam2: float = 0.5
    lam3: float = 0.0
    scale: float = 0.05


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from base_lr to 0 over total_steps, floored at 0."""
    if not 0 <= step:
        raise ValueError("step must be >= 0")
    return base_lr * max(0.0, 1.0 - step / total_steps)


class Agent:
    """Gaussian policy + value critic sharing one observation normalizer."""

    def __init__(self, policy: Mlp, head: GaussianHead, critic: Mlp,
                 normalizer: RunningNormalizer, lr: float = 3e-4):
        self.policy = policy
        self.head = head
        self.critic = critic
        self.normalizer = normalizer
        self.adam_policy = AdamState.for_params(policy.n_params + head.action_dim, lr=lr)
        self.adam_critic = AdamState.for_params(critic.n_params, lr=lr)

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, rng: np.random.Generator,
               lr: float = 3e-4) -> "Agent":
        policy = Mlp.create(obs_dim, POLICY_HIDDEN, action_dim, rng=rng, final_scale=0.01)
        critic = Mlp.create(obs_dim, POLICY_HIDDEN, 1, rng=rng)
        head = GaussianHead.create(action_dim)
        return cls(policy, head, critic, RunningNormalizer.create(obs_dim), lr=lr)

    # flat (mlp + logstd) packing for the optimizer
    def policy_flat(self) -> np.ndarray:
        return np.concatenate([self.policy.flat(), self.head.logstd])

    def set_policy_flat(self, v: np.ndarray) -> None:
        n = self.policy.n_params
        self.policy.set_flat(v[:n])
        self.head.logstd = v[n:].copy()

    def act(self, obs_norm: np.ndarray, rng: np.random.Generator):
        mean = self.policy.forward(obs_norm)
        return gaussian_sample(self.head, mean, rng)

    def mean_action(self, obs_norm: np.ndarray) -> np.ndarray:
        return self.policy.forward(obs_norm)

    def values(self, obs_norm: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.critic.forward(obs_norm))[..., 0] \
            if obs_norm.ndim > 1 else self.critic.forward(obs_norm)[0]


@dataclass
class RolloutBatch:
    """Flat on-policy batch, concatenated in worker-index order (each
    worker's steps are contiguous)."""

    obs: np.ndarray          # raw observations (N, d)
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray      # combined + scaled, the quantity PPO sees
    r_env: np.ndarray        # unscaled components, kept for audits
    r_gail: np.ndarray
    r_tsr: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    terminals: np.ndarray    # true episode end (no bootstrap past it)
    dones: np.ndarray        # any episode boundary (GAE accumulation reset)
    worker_slices: list      # [(start, stop)] contiguous per-worker segments
    subtask: int

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def compute_gae(rewards, values, next_values, terminals, dones,
                gamma: float, lam: float):
    """GAE over one contiguous trajectory segment.

    terminals[t] true means no value is bootstrapped past step t;
    dones[t] true resets the exponential accumulation (episode boundary).
    Returns raw (unnormalized) advantages and returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    n = rewards.shape[0]
    if not (values.shape[0] == next_values.shape[0] == len(terminals) == len(dones) == n):
        raise ValueError("array length mismatch")
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        nv = 0.0 if terminals[t] else next_values[t]
        delta = rewards[t] + gamma * nv - values[t]
        acc = delta + gamma * lam * (0.0 if dones[t] else acc)
        adv[t] = acc
    return adv, adv + values


def batch_gae(batch: RolloutBatch, gamma: float, lam: float):
    adv = np.zeros(batch.size)
    ret = np.zeros(batch.size)
    for a, b in batch.worker_slices:
        adv[a:b], ret[a:b] = compute_gae(
            batch.rewards[a:b], batch.values[a:b], batch.next_values[a:b],
            batch.terminals[a:b], batch.dones[a:b], gamma, lam)
    return adv, ret


@dataclass
class EpisodeRecord:
    start_state: WorldState
    terminal_state: WorldState
    success: bool
    length: int


class RolloutCollector:
    """Bank of n_workers independent env instances stepped in lockstep.

    Episodes persist across collect() calls; start states come from the
    supplied sampler. Results are merged in worker-index order, so a fixed
    seed reproduces the batch bit-exactly.
    """

    def __init__(self, env_cfg: EnvConfig, n_workers: int, mode: str = "subtask"):
        self.envs = [AssemblyEnv(env_cfg, mode=mode) for _ in range(n_workers)]
        self.mode = mode
        self.needs_reset = [True] * n_workers
        self.episode_starts: list[WorldState | None] = [None] * n_workers

    def collect(self, agent: Agent, subtask: int, start_fn, weights: RewardWeights,
                gail_disc: GailDiscriminator | None,
                tsr_disc: InitSetDiscriminator | None,
                n_steps: int, rng: np.random.Generator):
        """Collect exactly n_steps transitions (n_steps / n_workers each).

        start_fn(rng) -> WorldState supplies episode start states.
        Returns (RolloutBatch, list[EpisodeRecord]).
        """
        n_w = len(self.envs)
        if n_steps % n_w != 0:
            raise ValueError("n_steps must divide evenly across workers")
        steps = n_steps // n_w
        obs = np.zeros((n_w, steps, observation_dim(self.envs[0].cfg.n_parts)))
        next_obs = np.zeros_like(obs)
        actions = np.zeros((n_w, steps, ACTION_DIM))
        logprobs = np.zeros((n_w, steps))
        r_env = np.zeros((n_w, steps))
        r_gail = np.zeros((n_w, steps))
        r_tsr = np.zeros((n_w, steps))
        terminals = np.zeros((n_w, steps), dtype=bool)
        dones = np.zeros((n_w, steps), dtype=bool)
        episodes: list[EpisodeRecord] = []

        for t in range(steps):
            for w, env in enumerate(self.envs):
                if self.needs_reset[w]:
                    env.reset_to(start_fn(rng), subtask=None if self.mode == "task" else subtask)
                    self.episode_starts[w] = env.state.copy()
                    self.needs_reset[w] = False
                obs[w, t] = env.observe()
            obs_norm = agent.normalizer.apply(obs[:, t])
            act, logp = agent.act(obs_norm, rng)
            if gail_disc is not None:
                r_gail[:, t] = gail_reward_from_scores(
                    gail_disc.score(gail_pair_input(obs_norm, act)))
            for w, env in enumerate(self.envs):
                res = env.step(act[w])
                actions[w, t] = act[w]
                logprobs[w, t] = logp[w]
                r_env[w, t] = res.reward
                next_obs[w, t] = env.observe()
                if res.episode_done:
                    done_success = (res.subtask_success if self.mode == "subtask"
                                    else bool(res.state.attached.all()))
                    if tsr_disc is not None:
                        r_tsr[w, t] = tsr_reward(tsr_disc, res.state.object_state(),
                                                 res.subtask_success)
                    dones[w, t] = True
                    terminals[w, t] = done_success
                    episodes.append(EpisodeRecord(self.episode_starts[w],
                                                  res.state.copy(), done_success,
                                                  env.t))
                    self.needs_reset[w] = True

        rewards = weights.scale * combined_reward(r_env, r_gail, r_tsr,
                                                  weights.lam1, weights.lam2,
                                                  weights.lam3)
        flat = lambda a: a.reshape(n_w * steps, *a.shape[2:])
        obs_f, next_obs_f = flat(obs), flat(next_obs)
        values = self.critic_values(agent, obs_f)
        next_values = self.critic_values(agent, next_obs_f)
        batch = RolloutBatch(
            obs=obs_f, actions=flat(actions), logprobs=flat(logprobs),
            rewards=flat(rewards), r_env=flat(r_env), r_gail=flat(r_gail),
            r_tsr=flat(r_tsr), values=values, next_values=next_values,
            terminals=flat(terminals), dones=flat(dones),
            worker_slices=[(w * steps, (w + 1) * steps) for w in range(n_w)],
            subtask=subtask,
        )
        return batch, episodes

    @staticmethod
    def critic_values(agent: Agent, obs_raw: np.ndarray) -> np.ndarray:
        return agent.critic.forward(agent.normalizer.apply(obs_raw))[:, 0]


def ppo_update(agent: Agent, batch: RolloutBatch, cfg: PpoConfig,
               lr_scale: float, rng: np.random.Generator) -> dict:
    """Clipped-surrogate update: cfg.epochs passes of shuffled minibatches.

    A non-finite loss or gradient aborts the update and restores the
    pre-update parameters.
    """
    obs_norm = agent.normalizer.apply(batch.obs)
    adv_raw, returns = batch_gae(batch, cfg.gamma, cfg.gae_lambda)
    adv = (adv_raw - adv_raw.mean()) / (adv_raw.std() + 1e-8)

    snapshot = (agent.policy_flat(), agent.critic.flat())
    n = batch.size
    eps = cfg.clip_ratio
    diag = {"pg_loss": 0.0, "v_loss": 0.0, "entropy": gaussian_entropy(agent.head),
            "clip_frac": 0.0, "approx_kl": 0.0, "ratio_dev_first": 0.0,
            "aborted": False}
    n_mb = 0
    kl_exceeded = False
    logstd_mask = ((agent.head.logstd > agent.head.logstd_min)
                   & (agent.head.logstd < agent.head.logstd_max)).astype(np.float64)
    for epoch in range(cfg.epochs):
        if kl_exceeded:
            break
        epoch_kl = 0.0
        epoch_mb = 0
        perm = rng.permutation(n)
        for start in range(0, n - cfg.minibatch + 1, cfg.minibatch):
            idx = perm[start : start + cfg.minibatch]
            o, a = obs_norm[idx], batch.actions[idx]
            adv_mb, ret_mb, logp_old = adv[idx], returns[idx], batch.logprobs[idx]
            b = idx.shape[0]

            mean, cache = agent.policy.forward_cached(o)
            logp = gaussian_logprob(agent.head, mean, a)
            ratio = np.exp(logp - logp_old)
            if epoch == 0 and n_mb == 0:
                diag["ratio_dev_first"] = float(np.max(np.abs(ratio - 1.0)))
            unclipped = ratio * adv_mb
            clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv_mb
            pg_loss = -np.mean(np.minimum(unclipped, clipped))
            # gradient of the surrogate wrt logp: active where the min picks
            # the unclipped branch or the ratio is inside the clip interval
            active = (unclipped <= clipped) | ((ratio > 1.0 - eps) & (ratio < 1.0 + eps))
            dlogp = np.where(active, -adv_mb * ratio, 0.0) / b

            std2 = np.exp(2.0 * agent.head.clamped_logstd())
            resid = a - mean
            dmean = dlogp[:, None] * resid / std2
            dlogstd = (dlogp[:, None] * (resid * resid / std2 - 1.0)).sum(axis=0)
            dlogstd -= cfg.entropy_coef  # entropy bonus: dH/dlogstd = 1
            dlogstd *= logstd_mask
            pgrad, _ = agent.policy.backward(cache, dmean)

            v, vcache = agent.critic.forward_cached(o)
            v = v[:, 0]
            v_loss = 0.5 * np.mean((v - ret_mb) ** 2)
            dv = cfg.value_coef * (v - ret_mb)[:, None] / b
            cgrad, _ = agent.critic.backward(vcache, dv)

            if not (np.isfinite(pg_loss) and np.isfinite(v_loss)
                    and np.all(np.isfinite(pgrad)) and np.all(np.isfinite(cgrad))
                    and np.all(np.isfinite(dlogstd))):
                agent.set_policy_flat(snapshot[0])
                agent.critic.set_flat(snapshot[1])
                diag["aborted"] = True
                return diag

            agent.set_policy_flat(adam_step(
                agent.adam_policy, agent.policy_flat(),
                np.concatenate([pgrad, dlogstd]), lr_scale))
            agent.critic.set_flat(adam_step(agent.adam_critic, agent.critic.flat(),
                                            cgrad, lr_scale))

            mb_kl = float(np.mean(logp_old - logp))
            diag["pg_loss"] += float(pg_loss)
            diag["v_loss"] += float(v_loss)
            diag["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > eps))
            diag["approx_kl"] += mb_kl
            epoch_kl += mb_kl
            epoch_mb += 1
            n_mb += 1
        # stop whole epochs, never mid-epoch: each sample gets equal use
        if (cfg.kl_stop is not None and epoch_mb
                and epoch_kl / epoch_mb > cfg.kl_stop):
            kl_exceeded = True
    for key in ("pg_loss", "v_loss", "clip_frac", "approx_kl"):
        diag[key] /= max(n_mb, 1)
    diag["entropy"] = gaussian_entropy(agent.head)
    return diag
