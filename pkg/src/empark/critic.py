"""Centralized critic ensembles with exact analytic backward passes.

Three interchangeable variants share one interface (forward over all
agents' observations and one-hot actions, returning one Q value per
candidate action of each agent):

* AttentionCritic - per-agent encoders plus shared multi-head bilinear
  attention over the other agents' state-action embeddings. Each agent's
  query comes from an observation-only encoder so its own action never
  enters its Q-vector; that is what makes the per-action output and the
  counterfactual baseline exact.
* IndependentCritic - each agent's Q-vector reads its own observation
  only (the fully decentralized comparison rung).
* ConcatCritic - each agent's Q-vector reads all observations and the
  other agents' actions concatenated, with no attention.

The attention forward/backward is batched over agents and heads with
einsum; tests pin it against the single-example reference operations in
nets.py.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .nets import Mlp, leaky_relu, leaky_relu_grad


def one_hot(indices: np.ndarray, n: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=int)
    out = np.zeros((indices.shape[0], n))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


class AttentionCritic:
    """Per-agent Q-vectors through shared multi-head attention.

    Parameters are exposed flat in a fixed order: observation encoders,
    state-action encoders, output heads (agent-major), then the stacked
    key/query/value transforms. `uniform` freezes every attention weight
    at 1/(N-1); the bilinear transforms then receive zero gradient.
    """

    def __init__(self, obs_dims: Sequence[int], act_dims: Sequence[int],
                 rng: np.random.Generator, embed_dim: int = 64, n_heads: int = 4,
                 enc_hidden: Sequence[int] = (128, 128),
                 head_hidden: Sequence[int] = (128, 128),
                 leak: float = 0.01, uniform: bool = False):
        if len(obs_dims) != len(act_dims) or len(obs_dims) < 2:
            raise ValueError("need matching obs/action dims for at least 2 agents")
        if embed_dim % n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        self.n_agents = len(obs_dims)
        self.obs_dims = tuple(int(d) for d in obs_dims)
        self.act_dims = tuple(int(d) for d in act_dims)
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.attend_dim = embed_dim // n_heads
        self.leak = leak
        self.uniform = uniform

        self.obs_encoders = [Mlp([o, *enc_hidden, embed_dim], rng, leak=leak)
                             for o in self.obs_dims]
        self.sa_encoders = [Mlp([o + a, *enc_hidden, embed_dim], rng, leak=leak)
                            for o, a in zip(self.obs_dims, self.act_dims)]
        self.heads = [Mlp([2 * embed_dim, *head_hidden, a], rng, leak=leak)
                      for a in self.act_dims]
        bound = 1.0 / np.sqrt(embed_dim)
        shape = (n_heads, self.attend_dim, embed_dim)
        self.key_mats = rng.uniform(-bound, bound, size=shape)
        self.query_mats = rng.uniform(-bound, bound, size=shape)
        self.value_mats = rng.uniform(-bound, bound, size=shape)

    def forward(self, obs: Sequence[np.ndarray], acts: Sequence[np.ndarray]
                ) -> tuple[list[np.ndarray], dict]:
        """Q-vectors for every agent given the joint observation and action.

        `obs[j]` is (B, obs_dim_j), `acts[j]` one-hot (B, act_dim_j). Agent
        j's own action only matters where j serves as key/value for others.
        """
        n, B = self.n_agents, np.atleast_2d(obs[0]).shape[0]
        eq_caches, ek_caches = [], []
        Eq = np.empty((n, B, self.embed_dim))
        Ek = np.empty((n, B, self.embed_dim))
        for j in range(n):
            e_q, c_q = self.obs_encoders[j].forward(obs[j])
            e_k, c_k = self.sa_encoders[j].forward(
                np.concatenate([np.atleast_2d(obs[j]), np.atleast_2d(acts[j])], axis=1))
            Eq[j], Ek[j] = e_q, e_k
            eq_caches.append(c_q)
            ek_caches.append(c_k)

        pre_values = np.einsum("mde,nbe->nbmd", self.value_mats, Ek)
        values = leaky_relu(pre_values, self.leak)

        if self.uniform:
            rho = np.broadcast_to(
                ((1.0 - np.eye(n)) / (n - 1))[:, :, None, None],
                (n, n, B, self.n_heads)).copy()
            keys = queries = None
        else:
            keys = np.einsum("mde,nbe->nbmd", self.key_mats, Ek)
            queries = np.einsum("mde,nbe->nbmd", self.query_mats, Eq)
            logits = np.einsum("jbmd,lbmd->jlbm", queries, keys) / np.sqrt(self.attend_dim)
            idx = np.arange(n)
            logits[idx, idx] = -np.inf
            logits -= logits.max(axis=1, keepdims=True)
            expl = np.exp(logits)
            rho = expl / expl.sum(axis=1, keepdims=True)

        z = np.einsum("jlbm,lbmd->jbmd", rho, values).reshape(n, B, self.embed_dim)

        q_out, head_caches = [], []
        for j in range(n):
            head_in = np.concatenate([Eq[j], z[j]], axis=1)
            q, c = self.heads[j].forward(head_in)
            q_out.append(q)
            head_caches.append(c)
        cache = dict(Eq=Eq, Ek=Ek, pre_values=pre_values, values=values,
                     keys=keys, queries=queries, rho=rho,
                     eq_caches=eq_caches, ek_caches=ek_caches, head_caches=head_caches)
        return q_out, cache

    def backward(self, cache: dict, dq: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Exact gradients of sum_j <dq[j], Q_j> for every parameter."""
        n = self.n_agents
        Eq, Ek = cache["Eq"], cache["Ek"]
        B = Eq.shape[1]
        dEq = np.zeros_like(Eq)
        dEk = np.zeros_like(Ek)
        dZ = np.empty((n, B, self.n_heads, self.attend_dim))
        head_grads = []
        for j in range(n):
            g, dhead_in = self.heads[j].backward(cache["head_caches"][j], dq[j])
            head_grads.append(g)
            dEq[j] += dhead_in[:, :self.embed_dim]
            dZ[j] = dhead_in[:, self.embed_dim:].reshape(B, self.n_heads, self.attend_dim)

        rho, values = cache["rho"], cache["values"]
        dvalues = np.einsum("jlbm,jbmd->lbmd", rho, dZ)
        dK = dQr = None
        if not self.uniform:
            drho = np.einsum("jbmd,lbmd->jlbm", dZ, values)
            ssum = np.einsum("jlbm,jlbm->jbm", rho, drho)
            dlogits = rho * (drho - ssum[:, None])
            dlogits /= np.sqrt(self.attend_dim)
            dQr = np.einsum("jlbm,lbmd->jbmd", dlogits, cache["keys"])
            dK = np.einsum("jlbm,jbmd->lbmd", dlogits, cache["queries"])
            dEk += np.einsum("mde,nbmd->nbe", self.key_mats, dK)
            dEq += np.einsum("mde,nbmd->nbe", self.query_mats, dQr)
        dpre = dvalues * leaky_relu_grad(cache["pre_values"], self.leak)
        dEk += np.einsum("mde,nbmd->nbe", self.value_mats, dpre)

        obs_grads, sa_grads = [], []
        for j in range(n):
            g, _ = self.obs_encoders[j].backward(cache["eq_caches"][j], dEq[j])
            obs_grads.append(g)
            g, _ = self.sa_encoders[j].backward(cache["ek_caches"][j], dEk[j])
            sa_grads.append(g)

        if self.uniform:
            d_key = np.zeros_like(self.key_mats)
            d_query = np.zeros_like(self.query_mats)
        else:
            d_key = np.einsum("nbmd,nbe->mde", dK, Ek)
            d_query = np.einsum("nbmd,nbe->mde", dQr, Eq)
        d_value = np.einsum("nbmd,nbe->mde", dpre, Ek)

        grads: list[np.ndarray] = []
        for g in obs_grads:
            grads.extend(g)
        for g in sa_grads:
            grads.extend(g)
        for g in head_grads:
            grads.extend(g)
        grads.extend([d_key, d_query, d_value])
        return grads

    def attention_stats(self, cache: dict) -> tuple[float, float, float]:
        """(min, mean, max) attention weight over agents/batch/heads."""
        n = self.n_agents
        mask = ~np.eye(n, dtype=bool)
        w = cache["rho"][mask]
        return float(w.min()), float(w.mean()), float(w.max())

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for net in self.obs_encoders:
            out.extend(net.params())
        for net in self.sa_encoders:
            out.extend(net.params())
        for net in self.heads:
            out.extend(net.params())
        out.extend([self.key_mats, self.query_mats, self.value_mats])
        return out

    def copy(self) -> "AttentionCritic":
        other = object.__new__(AttentionCritic)
        other.__dict__.update({k: v for k, v in self.__dict__.items()
                               if not isinstance(v, (list, np.ndarray))})
        other.obs_encoders = [m.copy() for m in self.obs_encoders]
        other.sa_encoders = [m.copy() for m in self.sa_encoders]
        other.heads = [m.copy() for m in self.heads]
        other.key_mats = self.key_mats.copy()
        other.query_mats = self.query_mats.copy()
        other.value_mats = self.value_mats.copy()
        return other


class IndependentCritic:
    """One local critic per agent: Q-vector from its own observation only."""

    def __init__(self, obs_dims: Sequence[int], act_dims: Sequence[int],
                 rng: np.random.Generator, hidden: Sequence[int] = (128, 128),
                 leak: float = 0.01, **_unused):
        self.n_agents = len(obs_dims)
        self.obs_dims = tuple(int(d) for d in obs_dims)
        self.act_dims = tuple(int(d) for d in act_dims)
        self.nets = [Mlp([o, *hidden, a], rng, leak=leak)
                     for o, a in zip(self.obs_dims, self.act_dims)]

    def forward(self, obs: Sequence[np.ndarray], acts: Sequence[np.ndarray]
                ) -> tuple[list[np.ndarray], dict]:
        del acts  # local critics never see actions of any agent
        q_out, caches = [], []
        for j, net in enumerate(self.nets):
            q, c = net.forward(obs[j])
            q_out.append(q)
            caches.append(c)
        return q_out, dict(caches=caches)

    def backward(self, cache: dict, dq: Sequence[np.ndarray]) -> list[np.ndarray]:
        grads: list[np.ndarray] = []
        for j, net in enumerate(self.nets):
            g, _ = net.backward(cache["caches"][j], dq[j])
            grads.extend(g)
        return grads

    def attention_stats(self, cache: dict) -> None:
        return None

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def copy(self) -> "IndependentCritic":
        other = object.__new__(IndependentCritic)
        other.n_agents = self.n_agents
        other.obs_dims = self.obs_dims
        other.act_dims = self.act_dims
        other.nets = [m.copy() for m in self.nets]
        return other


class ConcatCritic:
    """Per-agent critics over concatenated global observations and actions.

    Agent j's input is every observation plus the one-hot actions of all
    other agents; its own action indexes the per-action output instead.
    """

    def __init__(self, obs_dims: Sequence[int], act_dims: Sequence[int],
                 rng: np.random.Generator, hidden: Sequence[int] = (128, 128),
                 leak: float = 0.01, **_unused):
        self.n_agents = len(obs_dims)
        self.obs_dims = tuple(int(d) for d in obs_dims)
        self.act_dims = tuple(int(d) for d in act_dims)
        total_obs = sum(self.obs_dims)
        total_act = sum(self.act_dims)
        self.nets = [Mlp([total_obs + total_act - a, *hidden, a], rng, leak=leak)
                     for a in self.act_dims]

    def _inputs(self, obs: Sequence[np.ndarray], acts: Sequence[np.ndarray]) -> list[np.ndarray]:
        all_obs = np.concatenate([np.atleast_2d(o) for o in obs], axis=1)
        return [np.concatenate([all_obs] + [np.atleast_2d(acts[l])
                                            for l in range(self.n_agents) if l != j], axis=1)
                for j in range(self.n_agents)]

    def forward(self, obs: Sequence[np.ndarray], acts: Sequence[np.ndarray]
                ) -> tuple[list[np.ndarray], dict]:
        q_out, caches = [], []
        for j, (net, x) in enumerate(zip(self.nets, self._inputs(obs, acts))):
            q, c = net.forward(x)
            q_out.append(q)
            caches.append(c)
        return q_out, dict(caches=caches)

    def backward(self, cache: dict, dq: Sequence[np.ndarray]) -> list[np.ndarray]:
        grads: list[np.ndarray] = []
        for j, net in enumerate(self.nets):
            g, _ = net.backward(cache["caches"][j], dq[j])
            grads.extend(g)
        return grads

    def attention_stats(self, cache: dict) -> None:
        return None

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def copy(self) -> "ConcatCritic":
        other = object.__new__(ConcatCritic)
        other.n_agents = self.n_agents
        other.obs_dims = self.obs_dims
        other.act_dims = self.act_dims
        other.nets = [m.copy() for m in self.nets]
        return other


def build_critic(kind: str, obs_dims: Sequence[int], act_dims: Sequence[int],
                 rng: np.random.Generator, embed_dim: int = 64, n_heads: int = 4,
                 enc_hidden: Sequence[int] = (128, 128),
                 head_hidden: Sequence[int] = (128, 128), leak: float = 0.01):
    if kind == "proposed":
        return AttentionCritic(obs_dims, act_dims, rng, embed_dim=embed_dim,
                               n_heads=n_heads, enc_hidden=enc_hidden,
                               head_hidden=head_hidden, leak=leak)
    if kind == "uniform":
        return AttentionCritic(obs_dims, act_dims, rng, embed_dim=embed_dim,
                               n_heads=n_heads, enc_hidden=enc_hidden,
                               head_hidden=head_hidden, leak=leak, uniform=True)
    if kind == "independent":
        return IndependentCritic(obs_dims, act_dims, rng, hidden=enc_hidden, leak=leak)
    if kind == "concat":
        return ConcatCritic(obs_dims, act_dims, rng, hidden=enc_hidden, leak=leak)
    raise ValueError(f"unknown critic kind {kind!r}")
