"""Self-contained differentiable building blocks on numpy.

Multi-layer perceptrons with leaky-rectifier hidden layers, bilinear
key/query attention, categorical policy heads, and an adaptive-moment
optimizer. Every forward pass returns a cache sufficient for an exact
analytic backward pass; there is no general-purpose autodiff here, only
the layer kinds this project needs. All randomness flows through an
explicit numpy Generator so parameter evolution is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0.0, 1.0, slope)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.clip(probs, 1e-12, 1.0)
    return -np.sum(p * np.log(p), axis=axis)


def init_weight(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Mlp:
    """Fully-connected stack: affine layers, leaky rectifier between them.

    forward() works on a batch (B, d_in) and returns the output together
    with the cache that backward() consumes. Parameters live in `Ws`/`bs`
    and are exposed flat through params() in a fixed order.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 leak: float = 0.01):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.leak = leak
        self.Ws = [init_weight(rng, o, i) for i, o in zip(sizes[:-1], sizes[1:])]
        self.bs = [np.zeros(o) for o in sizes[1:]]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != expected {self.in_dim}")
        cache = []
        h = x
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = h @ W.T + b
            cache.append((h, z))
            h = z if i == last else leaky_relu(z, self.leak)
        return h, cache

    def backward(self, cache: list, dout: np.ndarray) -> tuple[list, np.ndarray]:
        """Exact gradients for every parameter and the input.

        Returns (grads, dx) where grads matches params() ordering.
        """
        if len(cache) != len(self.Ws):
            raise ValueError("cache does not match this network")
        dWs = [None] * len(self.Ws)
        dbs = [None] * len(self.bs)
        dh = np.atleast_2d(dout)
        last = len(self.Ws) - 1
        for i in range(last, -1, -1):
            h_in, z = cache[i]
            dz = dh if i == last else dh * leaky_relu_grad(z, self.leak)
            dWs[i] = dz.T @ h_in
            dbs[i] = dz.sum(axis=0)
            dh = dz @ self.Ws[i]
        return dWs + dbs, dh

    def params(self) -> list[np.ndarray]:
        return self.Ws + self.bs

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "Mlp":
        other = object.__new__(Mlp)
        other.sizes = self.sizes
        other.leak = self.leak
        other.Ws = [W.copy() for W in self.Ws]
        other.bs = [b.copy() for b in self.bs]
        return other


def attention_weights(query_embed: np.ndarray, key_embeds: np.ndarray,
                      key_mat: np.ndarray, query_mat: np.ndarray) -> np.ndarray:
    """Attention weights of one agent over the others, for one head.

    Logits are the bilinear products key(e_l) . query(e_j), scaled by
    1/sqrt(key_dim) to keep gradients alive, then normalized with a shared
    softmax so the weights are a distribution over the other agents.
    """
    keys = key_embeds @ key_mat.T                  # (L, d_att)
    if keys.shape[0] < 1:
        raise ValueError("need at least one other agent")
    query = query_mat @ query_embed                # (d_att,)
    logits = keys @ query / np.sqrt(key_mat.shape[0])
    return softmax(logits)


def attention_contribution(query_embed: np.ndarray, key_embeds: np.ndarray,
                           key_mats: np.ndarray, query_mats: np.ndarray,
                           value_mats: np.ndarray, leak: float = 0.01) -> np.ndarray:
    """Concatenated weighted contributions over all heads for one agent.

    Per head: weights from attention_weights, values are the leaky-rectified
    shared transform of the other agents' embeddings.
    """
    outs = []
    for key_mat, query_mat, value_mat in zip(key_mats, query_mats, value_mats):
        rho = attention_weights(query_embed, key_embeds, key_mat, query_mat)
        values = leaky_relu(key_embeds @ value_mat.T, leak)   # (L, d_att)
        outs.append(rho @ values)
    return np.concatenate(outs)


class CategoricalPolicy:
    """Discrete policy: an Mlp over the observation plus softmax head."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: Sequence[int],
                 rng: np.random.Generator, leak: float = 0.01):
        self.net = Mlp([obs_dim, *hidden, n_actions], rng, leak=leak)
        self.n_actions = n_actions

    def logits(self, obs: np.ndarray) -> tuple[np.ndarray, list]:
        return self.net.forward(obs)

    def probs(self, obs: np.ndarray) -> np.ndarray:
        logits, _ = self.net.forward(obs)
        return softmax(logits)

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        logits, _ = self.net.forward(obs)
        return log_softmax(logits)

    def act(self, obs: np.ndarray, rng: Optional[np.random.Generator] = None,
            greedy: bool = False) -> int:
        """Pick one action from a single local observation.

        This is the decentralized execution path: it sees nothing beyond
        the agent's own observation and parameters.
        """
        logits, _ = self.net.forward(obs.reshape(1, -1))
        if greedy:
            return int(np.argmax(logits[0]))
        if rng is None:
            raise ValueError("sampled mode needs a Generator")
        return int(sample_categorical(softmax(logits), rng)[0])

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def copy(self) -> "CategoricalPolicy":
        other = object.__new__(CategoricalPolicy)
        other.net = self.net.copy()
        other.n_actions = self.n_actions
        return other


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized inverse-CDF sampling of one action per row."""
    probs = np.atleast_2d(probs)
    cum = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators for adaptive-moment descent."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class AdamOptimizer:
    """Adaptive-moment gradient descent, with a plain-descent mode.

    Updates are in place and deterministic given the state. Non-finite
    gradients raise TrainingDiverged rather than silently corrupting the
    parameters.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 plain: bool = False):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.plain = plain
        self.state = OptimizerState(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params])

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.state.m) or len(params) != len(grads):
            raise ValueError("parameter/gradient count mismatch")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged("non-finite gradient")
        if self.plain:
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1 ** st.step
        bc2 = 1.0 - self.beta2 ** st.step
        for p, g, m, v in zip(params, grads, st.m, st.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def flatten_params(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_flat_params(params: Sequence[np.ndarray], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        p[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != flat.size:
        raise ValueError("flat vector size mismatch")


def polyak_update(target: Sequence[np.ndarray], live: Sequence[np.ndarray],
                  tau: float) -> None:
    """target <- (1 - tau) * target + tau * live, in place; tau=1 hard-copies."""
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    for t, l in zip(target, live):
        t *= (1.0 - tau)
        t += tau * l
