"""Minimal dense-network engine: MLP forward/backward, Adam, Gaussian policy
head, and a running state normalizer.

Everything is plain float64 numpy. Networks are small (two hidden layers),
so there is no autodiff graph; backward passes are written by hand and
checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

LOGSTD_MIN = -5.0
LOGSTD_MAX = 2.0


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation: {name}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # a = act(z), passed in so tanh' can reuse the forward value
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation: {name}")


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    """Orthogonal weight init (scaled), as used for on-policy training."""
    a = rng.standard_normal(shape)
    if shape[0] < shape[1]:
        a = a.T
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


@dataclass
class Mlp:
    """Fully connected network with per-layer activation tags.

    weights[k] has shape (in_k, out_k); consecutive layer shapes must agree.
    The flat parameter layout is (W_0, b_0, W_1, b_1, ...), row-major.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer list lengths disagree")
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[1] != self.weights[k + 1].shape[0]:
                raise ValueError(f"layer {k} out dim != layer {k + 1} in dim")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation: {a}")

    @classmethod
    def create(
        cls,
        input_dim: int,
        hidden_dims: tuple[int, ...],
        output_dim: int,
        hidden_act: str = "relu",
        final_act: str = "identity",
        rng: np.random.Generator | None = None,
        final_scale: float = 1.0,
    ) -> "Mlp":
        if rng is None:
            rng = np.random.default_rng(0)
        dims = [input_dim, *hidden_dims, output_dim]
        weights, biases, acts = [], [], []
        for k in range(len(dims) - 1):
            last = k == len(dims) - 2
            gain = final_scale if last else np.sqrt(2.0)
            weights.append(orthogonal(rng, (dims[k], dims[k + 1]), gain))
            biases.append(np.zeros(dims[k + 1]))
            acts.append(final_act if last else hidden_act)
        return cls(weights, biases, acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping intermediates for backward.

        Accepts a single vector (d,) or a batch (n, d); output matches.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.input_dim}")
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            a = _act(act, z)
            cache.append((h, z, a))
            h = a
        return (h[0] if single else h), (cache, single)

    def backward(self, cache_pack, output_grad: np.ndarray):
        """Backprop an output gradient; returns (flat param grads, input grad)."""
        cache, single = cache_pack
        g = np.asarray(output_grad, dtype=np.float64)
        if single:
            g = g.reshape(1, -1)
        if g.shape[1] != self.output_dim:
            raise ValueError(f"output grad dim {g.shape[1]} != {self.output_dim}")
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            h, z, a = cache[k]
            dz = g * _act_grad(self.activations[k], z, a)
            w_grads[k] = h.T @ dz
            b_grads[k] = dz.sum(axis=0)
            g = dz @ self.weights[k].T
        flat = np.concatenate(
            [np.concatenate([wg.ravel(), bg]) for wg, bg in zip(w_grads, b_grads)]
        )
        return flat, (g[0] if single else g)

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]
        )

    def set_flat(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError("flat vector length mismatch")
        i = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = v[i : i + w.size].reshape(w.shape).copy()
            i += w.size
            self.biases[k] = v[i : i + b.size].copy()
            i += b.size

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def arch(self) -> dict:
        dims = [self.input_dim] + [w.shape[1] for w in self.weights]
        return {"dims": dims, "activations": list(self.activations)}


@dataclass
class AdamState:
    """Adam accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, beta1=beta1, beta2=beta2)


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr_scale: float = 1.0
) -> np.ndarray:
    """One Adam update; mutates `state`, returns the new parameter vector."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("grad/param length mismatch")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient entries; update rejected")
    if not 0.0 <= lr_scale <= 1.0:
        raise ValueError("lr_scale must be in [0, 1]")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * lr_scale * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class GaussianHead:
    """State-independent diagonal-Gaussian action head.

    The mean comes from the policy MLP; log-std is a free parameter vector,
    clamped to [logstd_min, logstd_max] wherever it is consumed.
    """

    logstd: np.ndarray
    logstd_min: float = LOGSTD_MIN
    logstd_max: float = LOGSTD_MAX

    @classmethod
    def create(cls, action_dim: int, init_logstd: float = -0.5) -> "GaussianHead":
        return cls(logstd=np.full(action_dim, float(init_logstd)))

    @property
    def action_dim(self) -> int:
        return self.logstd.shape[0]

    def clamped_logstd(self) -> np.ndarray:
        return np.clip(self.logstd, self.logstd_min, self.logstd_max)

    def copy(self) -> "GaussianHead":
        return GaussianHead(self.logstd.copy(), self.logstd_min, self.logstd_max)


def gaussian_logprob(head: GaussianHead, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Exact diagonal-Gaussian log density; batched over leading axis."""
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if mean.shape[-1] != head.action_dim or action.shape[-1] != head.action_dim:
        raise ValueError("action dim mismatch")
    logstd = head.clamped_logstd()
    z = (action - mean) / np.exp(logstd)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(logstd) - 0.5 * head.action_dim * np.log(2.0 * np.pi)


def gaussian_sample(head: GaussianHead, mean: np.ndarray, rng: np.random.Generator):
    """Sample actions and return (action, logprob); reproducible via `rng`."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.exp(head.clamped_logstd())
    noise = rng.standard_normal(mean.shape)
    action = mean + std * noise
    return action, gaussian_logprob(head, mean, action)


def gaussian_entropy(head: GaussianHead) -> float:
    logstd = head.clamped_logstd()
    return float(np.sum(logstd) + 0.5 * head.action_dim * (1.0 + np.log(2.0 * np.pi)))


@dataclass
class RunningNormalizer:
    """Streaming mean/variance tracker with clipped standardization.

    Uses batch-merge (Chan) updates so the result matches the one-shot
    computation over everything seen so far, regardless of batching.
    """

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 10.0
    eps: float = 1e-8

    @classmethod
    def create(cls, dim: int, clip: float = 10.0) -> "RunningNormalizer":
        return cls(mean=np.zeros(dim), var=np.zeros(dim), count=0.0, clip=clip)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch.reshape(1, -1)
        if batch.shape[0] == 0:
            raise ValueError("empty batch")
        n = float(batch.shape[0])
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0.0:
            self.mean, self.var, self.count = b_mean, b_var, n
            return
        tot = self.count + n
        delta = b_mean - self.mean
        new_mean = self.mean + delta * (n / tot)
        m_a = self.var * self.count
        m_b = b_var * n
        new_var = (m_a + m_b + delta * delta * self.count * n / tot) / tot
        self.mean, self.var, self.count = new_mean, np.maximum(new_var, 0.0), tot

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.count == 0.0:
            return x.copy()
        z = (x - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def copy(self) -> "RunningNormalizer":
        return RunningNormalizer(self.mean.copy(), self.var.copy(), self.count, self.clip, self.eps)
