"""Adversarial components: the least-squares imitation discriminator with
its bounded reward, and the initiation-set discriminator whose output pays
the terminal-state regularization bonus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AdamState, Mlp, adam_step

DISC_HIDDEN = (256, 256)


def _scores(mlp: Mlp, states: np.ndarray) -> np.ndarray:
    out = mlp.forward(np.atleast_2d(np.asarray(states, dtype=np.float64)))
    return out[:, 0]


def gail_pair_input(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Imitation discriminator input: observation concatenated with the
    executed ([-1, 1]-clipped) action. State-only inputs reward loitering in
    expert-visited states; the action part makes staying put agent-like."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    return np.concatenate([obs, np.clip(actions, -1.0, 1.0)], axis=-1)


@dataclass
class GailDiscriminator:
    """Scalar-output tanh network scoring observation-action pairs as
    expert-like (+1) or agent-like (-1); least-squares objective."""

    mlp: Mlp
    subtask: int
    adam: AdamState

    @classmethod
    def create(cls, input_dim: int, subtask: int, rng: np.random.Generator,
               lr: float = 3e-4) -> "GailDiscriminator":
        mlp = Mlp.create(input_dim, DISC_HIDDEN, 1, hidden_act="tanh", rng=rng)
        return cls(mlp=mlp, subtask=subtask, adam=AdamState.for_params(mlp.n_params, lr=lr))

    def score(self, states: np.ndarray) -> np.ndarray:
        return _scores(self.mlp, states)


@dataclass
class InitSetDiscriminator:
    """Scalar-output tanh network separating the initiation set of subtask
    `subtask` (label 1) from terminal states of its predecessor (label 0).
    Consumers clip the output to [0, 1]."""

    mlp: Mlp
    subtask: int
    adam: AdamState

    @classmethod
    def create(cls, input_dim: int, subtask: int, rng: np.random.Generator,
               lr: float = 3e-4) -> "InitSetDiscriminator":
        mlp = Mlp.create(input_dim, DISC_HIDDEN, 1, hidden_act="tanh", rng=rng)
        return cls(mlp=mlp, subtask=subtask, adam=AdamState.for_params(mlp.n_params, lr=lr))

    def score(self, states: np.ndarray) -> np.ndarray:
        """Clipped [0, 1] initiation score."""
        return np.clip(_scores(self.mlp, states), 0.0, 1.0)


# -- losses ----------------------------------------------------------------


def gail_loss_from_scores(expert_scores: np.ndarray, agent_scores: np.ndarray) -> float:
    return float(np.mean((expert_scores - 1.0) ** 2) + np.mean((agent_scores + 1.0) ** 2))


def gail_loss(disc: GailDiscriminator, expert_states: np.ndarray,
              agent_states: np.ndarray):
    """Least-squares discriminator loss and its flat parameter gradient:
    mean (f-1)^2 over expert states plus mean (f+1)^2 over agent states."""
    expert_states = np.atleast_2d(np.asarray(expert_states, dtype=np.float64))
    agent_states = np.atleast_2d(np.asarray(agent_states, dtype=np.float64))
    if expert_states.shape[0] == 0 or agent_states.shape[0] == 0:
        raise ValueError("both batches must be nonempty")
    fe, ce = disc.mlp.forward_cached(expert_states)
    fa, ca = disc.mlp.forward_cached(agent_states)
    loss = gail_loss_from_scores(fe[:, 0], fa[:, 0])
    ge, _ = disc.mlp.backward(ce, 2.0 * (fe - 1.0) / fe.shape[0])
    ga, _ = disc.mlp.backward(ca, 2.0 * (fa + 1.0) / fa.shape[0])
    return loss, ge + ga


def initset_loss_from_scores(init_scores: np.ndarray, term_scores: np.ndarray) -> float:
    return float(np.mean((init_scores - 1.0) ** 2) + np.mean(term_scores**2))


def initset_loss(disc: InitSetDiscriminator, initiation_states: np.ndarray,
                 terminal_states: np.ndarray):
    """Least-squares separation loss: mean (D-1)^2 on initiation states plus
    mean D^2 on predecessor terminal states; returns (loss, flat grads)."""
    initiation_states = np.atleast_2d(np.asarray(initiation_states, dtype=np.float64))
    terminal_states = np.atleast_2d(np.asarray(terminal_states, dtype=np.float64))
    if initiation_states.shape[0] == 0 or terminal_states.shape[0] == 0:
        raise ValueError("both batches must be nonempty")
    di, ci = disc.mlp.forward_cached(initiation_states)
    dt, ct = disc.mlp.forward_cached(terminal_states)
    loss = initset_loss_from_scores(di[:, 0], dt[:, 0])
    gi, _ = disc.mlp.backward(ci, 2.0 * (di - 1.0) / di.shape[0])
    gt, _ = disc.mlp.backward(ct, 2.0 * dt / dt.shape[0])
    return loss, gi + gt


def update_gail(disc: GailDiscriminator, expert_states: np.ndarray,
                agent_states: np.ndarray) -> float:
    loss, grads = gail_loss(disc, expert_states, agent_states)
    disc.mlp.set_flat(adam_step(disc.adam, disc.mlp.flat(), grads))
    return loss


def update_initset(disc: InitSetDiscriminator, initiation_states: np.ndarray,
                   terminal_states: np.ndarray) -> float:
    loss, grads = initset_loss(disc, initiation_states, terminal_states)
    disc.mlp.set_flat(adam_step(disc.adam, disc.mlp.flat(), grads))
    return loss


# -- rewards -----------------------------------------------------------------


def gail_reward_from_scores(scores: np.ndarray) -> np.ndarray:
    """Bounded imitation reward 1 - 0.25 (f-1)^2, clipped to [0, 1]."""
    return np.clip(1.0 - 0.25 * (np.asarray(scores) - 1.0) ** 2, 0.0, 1.0)


def gail_reward(disc: GailDiscriminator, states: np.ndarray) -> np.ndarray:
    return gail_reward_from_scores(disc.score(states))


def tsr_reward(disc_next: InitSetDiscriminator | None, object_state: np.ndarray,
               is_success_terminal: bool) -> float:
    """Terminal-state bonus: the successor's clipped initiation score, paid
    only on a successful terminal state; 0 for the last subtask (no
    successor) and on every non-terminal step."""
    if not is_success_terminal or disc_next is None:
        return 0.0
    return float(disc_next.score(object_state.reshape(1, -1))[0])


def combined_reward(r_env, r_gail, r_tsr, lam1: float, lam2: float, lam3: float):
    """lam1 * R_env + lam2 * R_imitation + lam3 * R_terminal; pretraining is
    the lam3 = 0 case."""
    if lam1 < 0 or lam2 < 0 or lam3 < 0:
        raise ValueError("reward weights must be >= 0")
    return lam1 * r_env + lam2 * r_gail + lam3 * r_tsr
