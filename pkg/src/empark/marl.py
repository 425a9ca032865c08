"""Centralized-training / decentralized-execution engine.

The loop follows the soft-actor recipe on discrete device actions: every
slot each agent samples from its own policy on its local observation, the
transition lands in a small replay ring, and after warm-up the shared
critic regresses to entropy-regularized targets from the target networks
while each actor ascends the score-function gradient weighted by its
advantage over the exact counterfactual baseline. Targets track the live
networks with Polyak blending.

Rewards and a few energy-valued observation entries are scaled inside the
learner only (metrics stay in raw currency/kWh); the scaling never changes
any argmax.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import env as envmod
from .critic import build_critic, one_hot
from .env import OBS_DIM, OBS_LAYOUT_TAG, ParkEnv, Scenario
from .nets import (AdamOptimizer, CategoricalPolicy, TrainingDiverged, entropy,
                   log_softmax, polyak_update, sample_categorical, softmax)

# Demands and PV arrive in kWh (thousands); squash them to unit scale for
# the networks. Index layout matches env.OBS_FIELDS.
OBS_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3, 1e-3, 1.0])

ALGO_KINDS = ("proposed", "uniform", "independent", "concat")

CHECKPOINT_VERSION = 1


class IncompatibleCheckpoint(RuntimeError):
    """Checkpoint layout tag or agent structure does not fit the scenario."""


@dataclass
class TrainConfig:
    episodes: int = 500
    horizon: Optional[int] = None         # defaults to the series length
    gamma: float = 0.95
    entropy_coef: float = 0.01
    n_heads: int = 4
    batch_size: int = 32
    buffer_capacity: int = 1000
    warmup: int = 100
    tau: float = 0.01
    critic_lr: float = 1e-3
    actor_lr: float = 3e-4
    reward_scale: float = 1e-3
    embed_dim: int = 64
    enc_hidden: tuple[int, ...] = (128, 128)
    head_hidden: tuple[int, ...] = (128, 128)
    actor_hidden: tuple[int, ...] = (64, 64)
    leak: float = 0.01
    update_every: int = 1
    lagrange_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.entropy_coef < 0.0:
            raise ValueError("entropy_coef must be >= 0")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("buffer must hold at least one minibatch")
        self.enc_hidden = tuple(self.enc_hidden)
        self.head_hidden = tuple(self.head_hidden)
        self.actor_hidden = tuple(self.actor_hidden)


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int = OBS_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=int)
        self.rewards = np.zeros((capacity, n_agents))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.dones = np.zeros(capacity)
        self.slots = np.zeros(capacity, dtype=int)
        self.size = 0
        self._head = 0

    def add(self, obs, actions, rewards, next_obs, done: bool, t: int) -> None:
        i = self._head
        self.obs[i] = obs
        self.actions[i] = actions
        self.rewards[i] = rewards
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self.slots[i] = t
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement within the minibatch."""
        if batch_size > self.size:
            raise ValueError("not enough transitions buffered")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.dones[idx])

    def __len__(self) -> int:
        return self.size


def counterfactual_baseline(probs: np.ndarray, q_values: np.ndarray) -> np.ndarray:
    """Policy-weighted expectation of an agent's per-action Q values.

    Works on a single (A,) pair or batched (B, A) arrays; the other agents'
    actions are already baked into `q_values`.
    """
    probs = np.asarray(probs)
    q_values = np.asarray(q_values)
    if probs.shape != q_values.shape:
        raise ValueError("policy and Q-vector shapes differ")
    return np.sum(probs * q_values, axis=-1)


def compute_targets(target_critic, target_actors: Sequence[CategoricalPolicy],
                    next_obs: np.ndarray, rewards: np.ndarray, dones: np.ndarray,
                    gamma: float, entropy_coef: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Entropy-regularized bootstrap targets y, shape (N, B).

    The expectation over each agent's own next action is exact over its
    discrete distribution; the other agents' next actions are sampled once
    from the target policies. Terminal transitions drop the bootstrap.
    """
    n = len(target_actors)
    probs, logps, onehots = [], [], []
    for j in range(n):
        logits, _ = target_actors[j].net.forward(next_obs[j])
        p = softmax(logits)
        probs.append(p)
        logps.append(log_softmax(logits))
        onehots.append(one_hot(sample_categorical(p, rng), target_actors[j].n_actions))
    qvecs, _ = target_critic.forward(list(next_obs), onehots)
    y = np.empty((n, next_obs.shape[1]))
    for j in range(n):
        expected = np.sum(probs[j] * (qvecs[j] - entropy_coef * logps[j]), axis=1)
        y[j] = rewards[j] + gamma * (1.0 - dones) * expected
    return y


def critic_loss(critic, obs: np.ndarray, actions: np.ndarray,
                targets: np.ndarray):
    """Joint regression loss sum_j mean_B (Q_j(s,a) - y_j)^2 and its gradients.

    Returns (loss, grads, cache); grads align with critic.params().
    """
    n, B = actions.shape[1], actions.shape[0]
    onehots = [one_hot(actions[:, j], critic.act_dims[j]) for j in range(n)]
    qvecs, cache = critic.forward([obs[:, j] for j in range(n)], onehots)
    loss = 0.0
    dqs = []
    rows = np.arange(B)
    for j in range(n):
        err = qvecs[j][rows, actions[:, j]] - targets[j]
        loss += float(np.mean(err ** 2))
        dq = np.zeros_like(qvecs[j])
        dq[rows, actions[:, j]] = 2.0 * err / B
        dqs.append(dq)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"critic loss became {loss}")
    return loss, critic.backward(cache, dqs), cache


def actor_gradient(actors: Sequence[CategoricalPolicy], critic, obs: np.ndarray,
                   entropy_coef: float, rng: np.random.Generator):
    """Score-function gradients of the entropy-regularized actor objective.

    All agents' actions are sampled fresh from the current policies at the
    replayed observations; each agent weights its log-probability gradient
    by Q minus the entropy term minus the exact counterfactual baseline.
    The critic is only read, never differentiated. Returned gradients are
    minimization-signed (feed them straight to the optimizer).
    """
    n = len(actors)
    B = obs.shape[0]
    logits_all, caches, probs, logps, samples = [], [], [], [], []
    for j in range(n):
        logits, cache = actors[j].net.forward(obs[:, j])
        p = softmax(logits)
        logits_all.append(logits)
        caches.append(cache)
        probs.append(p)
        logps.append(log_softmax(logits))
        samples.append(sample_categorical(p, rng))
    onehots = [one_hot(samples[j], actors[j].n_actions) for j in range(n)]
    qvecs, _ = critic.forward([obs[:, j] for j in range(n)], onehots)

    rows = np.arange(B)
    grads, info = [], {"weights": [], "samples": samples, "surrogate": [],
                       "entropy": [], "probs": probs}
    for j in range(n):
        q = qvecs[j]
        lp_sel = logps[j][rows, samples[j]]
        advantage = (q[rows, samples[j]] - entropy_coef * lp_sel
                     - counterfactual_baseline(probs[j], q))
        dlogits = -(onehots[j] - probs[j]) * advantage[:, None] / B
        g, _ = actors[j].net.backward(caches[j], dlogits)
        grads.append(g)
        info["weights"].append(advantage)
        info["surrogate"].append(float(np.mean(lp_sel * advantage)))
        info["entropy"].append(float(np.mean(entropy(probs[j]))))
    return grads, info


def target_update(target_params: Sequence[np.ndarray],
                  live_params: Sequence[np.ndarray], tau: float) -> None:
    polyak_update(target_params, live_params, tau)


@dataclass
class Checkpoint:
    """All learnable tensors plus the metadata needed to reuse them."""

    meta: dict
    actors: list[CategoricalPolicy]
    critic: object

    def save(self, path: str | Path) -> None:
        arrays = {}
        for j, actor in enumerate(self.actors):
            for i, p in enumerate(actor.params()):
                arrays[f"actor{j}_p{i}"] = p
        for i, p in enumerate(self.critic.params()):
            arrays[f"critic_p{i}"] = p
        arrays["meta_json"] = np.array(json.dumps(self.meta))
        np.savez(path, **arrays)

    @staticmethod
    def load(path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta_json"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise IncompatibleCheckpoint(
                    f"checkpoint version {meta.get('version')} unsupported")
            rng = np.random.default_rng(0)
            actors = []
            for j, (obs_dim, n_act) in enumerate(zip(meta["obs_dims"], meta["act_dims"])):
                actor = CategoricalPolicy(obs_dim, n_act, meta["actor_hidden"], rng,
                                          leak=meta["leak"])
                for i, p in enumerate(actor.params()):
                    p[...] = data[f"actor{j}_p{i}"]
                actors.append(actor)
            critic = build_critic(meta["algo"], meta["obs_dims"], meta["act_dims"], rng,
                                  embed_dim=meta["embed_dim"], n_heads=meta["n_heads"],
                                  enc_hidden=meta["enc_hidden"],
                                  head_hidden=meta["head_hidden"], leak=meta["leak"])
            for i, p in enumerate(critic.params()):
                p[...] = data[f"critic_p{i}"]
        return Checkpoint(meta=meta, actors=actors, critic=critic)


METRIC_BASE_COLUMNS = ("episode", "mean_reward", "total_cost", "lambda_b",
                       "lambda_w", "violations", "critic_loss")


def metric_columns(n_agents: int) -> list[str]:
    cols = list(METRIC_BASE_COLUMNS)
    cols += [f"actor_loss_{j}" for j in range(n_agents)]
    cols += [f"entropy_{j}" for j in range(n_agents)]
    cols += ["attn_min", "attn_mean", "attn_max"]
    return cols


def format_metric(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics(rows: list[dict], columns: Sequence[str], path: str | Path) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_metric(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    columns: list[str]
    env_steps: int


class Learner:
    """Owns the networks, targets, optimizers and the Algorithm-style loop."""

    def __init__(self, scenario: Scenario, config: TrainConfig,
                 algo: str = "proposed"):
        if algo not in ALGO_KINDS:
            raise ValueError(f"unknown algo {algo!r}; pick one of {ALGO_KINDS}")
        self.scenario = scenario
        self.config = config
        self.algo = algo
        self.n_agents = scenario.n_agents
        self.act_dims = envmod.action_sizes(scenario.n_hubs)
        self.obs_dims = [OBS_DIM] * self.n_agents

        root = np.random.default_rng(config.seed)
        self.init_rng, self.rollout_rng, self.update_rng = root.spawn(3)

        self.actors = [CategoricalPolicy(OBS_DIM, a, config.actor_hidden,
                                         self.init_rng, leak=config.leak)
                       for a in self.act_dims]
        self.critic = build_critic(algo, self.obs_dims, self.act_dims, self.init_rng,
                                   embed_dim=config.embed_dim, n_heads=config.n_heads,
                                   enc_hidden=config.enc_hidden,
                                   head_hidden=config.head_hidden, leak=config.leak)
        self.target_actors = [a.copy() for a in self.actors]
        self.target_critic = self.critic.copy()

        self.critic_opt = AdamOptimizer(self.critic.params(), config.critic_lr)
        self.actor_opts = [AdamOptimizer(a.params(), config.actor_lr)
                           for a in self.actors]
        self.buffer = ReplayBuffer(config.buffer_capacity, self.n_agents)
        self.env_steps = 0

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return obs * OBS_SCALE

    def select_actions(self, obs: np.ndarray, greedy: bool = False) -> np.ndarray:
        """Decentralized action selection: each actor sees only its own row."""
        scaled = self.normalize(obs)
        return np.array([
            self.actors[j].act(scaled[j],
                               rng=None if greedy else self.rollout_rng,
                               greedy=greedy)
            for j in range(self.n_agents)], dtype=int)

    def update(self) -> dict:
        cfg = self.config
        obs, actions, rewards, next_obs, dones = self.buffer.sample(
            cfg.batch_size, self.update_rng)
        obs = self.normalize(obs)
        next_obs = self.normalize(next_obs)
        rewards = rewards * cfg.reward_scale

        y = compute_targets(self.target_critic, self.target_actors,
                            np.swapaxes(next_obs, 0, 1), rewards.T, dones,
                            cfg.gamma, cfg.entropy_coef, self.update_rng)
        loss, grads, cache = critic_loss(self.critic, obs, actions, y)
        self.critic_opt.step(self.critic.params(), grads)

        a_grads, info = actor_gradient(self.actors, self.critic, obs,
                                       cfg.entropy_coef, self.update_rng)
        for j, g in enumerate(a_grads):
            self.actor_opts[j].step(self.actors[j].params(), g)

        target_update(self.target_critic.params(), self.critic.params(), cfg.tau)
        for j in range(self.n_agents):
            target_update(self.target_actors[j].params(),
                          self.actors[j].params(), cfg.tau)

        stats = dict(critic_loss=loss,
                     actor_loss=[-s for s in info["surrogate"]],
                     entropy=info["entropy"],
                     attn=self.critic.attention_stats(cache))
        return stats

    def train(self) -> TrainResult:
        cfg = self.config
        park = ParkEnv(self.scenario, strict=False, horizon=cfg.horizon)
        horizon = park.horizon
        columns = metric_columns(self.n_agents)
        metrics: list[dict] = []

        for episode in range(cfg.episodes):
            park.reset(keep_lambda=True)
            obs = np.stack(park.observe_all())
            ep_rewards, ep_cost, ep_violations = [], 0.0, 0
            losses, actor_losses, entropies, attn_rows = [], [], [], []
            for t in range(horizon):
                actions = self.select_actions(obs)
                outcome = park.step(actions)
                self.env_steps += 1
                done = park.done
                if done:
                    next_obs = obs
                else:
                    next_obs = np.stack(park.observe_all())
                if cfg.lagrange_enabled:
                    stored = outcome.agent_rewards
                else:
                    stored = np.full(self.n_agents, outcome.reward)
                self.buffer.add(obs, actions, stored, next_obs, done, t)
                obs = next_obs

                ep_rewards.append(outcome.reward)
                ep_cost += outcome.cost
                ep_violations += outcome.violations
                if (len(self.buffer) >= max(cfg.warmup, cfg.batch_size)
                        and self.env_steps % cfg.update_every == 0):
                    try:
                        stats = self.update()
                    except TrainingDiverged as exc:
                        exc.diagnostics = dict(episode=episode, slot=t,
                                               env_steps=self.env_steps)
                        raise
                    losses.append(stats["critic_loss"])
                    actor_losses.append(stats["actor_loss"])
                    entropies.append(stats["entropy"])
                    if stats["attn"] is not None:
                        attn_rows.append(stats["attn"])

            hubs = park.state.hubs
            row = dict(
                episode=episode,
                mean_reward=float(np.mean(ep_rewards)),
                total_cost=float(ep_cost),
                lambda_b=float(np.mean([h.lambda_b for h in hubs])),
                lambda_w=float(np.mean([h.lambda_w for h in hubs])),
                violations=int(ep_violations),
                critic_loss=float(np.mean(losses)) if losses else float("nan"),
            )
            a_losses = (np.mean(actor_losses, axis=0) if actor_losses
                        else np.full(self.n_agents, np.nan))
            ents = (np.mean(entropies, axis=0) if entropies
                    else np.full(self.n_agents, np.nan))
            for j in range(self.n_agents):
                row[f"actor_loss_{j}"] = float(a_losses[j])
                row[f"entropy_{j}"] = float(ents[j])
            if attn_rows:
                attn = np.asarray(attn_rows)
                row["attn_min"] = float(attn[:, 0].min())
                row["attn_mean"] = float(attn[:, 1].mean())
                row["attn_max"] = float(attn[:, 2].max())
            else:
                row["attn_min"] = row["attn_mean"] = row["attn_max"] = float("nan")
            metrics.append(row)

        return TrainResult(checkpoint=self.make_checkpoint(), metrics=metrics,
                           columns=columns, env_steps=self.env_steps)

    def make_checkpoint(self) -> Checkpoint:
        cfg = self.config
        meta = dict(
            version=CHECKPOINT_VERSION,
            obs_tag=OBS_LAYOUT_TAG,
            algo=self.algo,
            n_hubs=self.scenario.n_hubs,
            n_agents=self.n_agents,
            obs_dims=self.obs_dims,
            act_dims=list(self.act_dims),
            actor_hidden=list(cfg.actor_hidden),
            enc_hidden=list(cfg.enc_hidden),
            head_hidden=list(cfg.head_hidden),
            embed_dim=cfg.embed_dim,
            n_heads=cfg.n_heads,
            leak=cfg.leak,
            obs_scale=OBS_SCALE.tolist(),
            config=_config_dict(cfg),
        )
        return Checkpoint(meta=meta, actors=self.actors, critic=self.critic)


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["enc_hidden"] = list(cfg.enc_hidden)
    d["head_hidden"] = list(cfg.head_hidden)
    d["actor_hidden"] = list(cfg.actor_hidden)
    return d


def train(scenario: Scenario, config: TrainConfig, algo: str = "proposed"
          ) -> TrainResult:
    """Run the full training loop and return checkpoint plus metrics rows."""
    return Learner(scenario, config, algo=algo).train()


EVAL_ROW_COLUMNS = ("t", "reward", "cost", "e_buy", "e_sell", "g_buy",
                    "mismatch_e", "mismatch_g", "mismatch_h",
                    "chp_e", "chp_h", "boiler_h", "charge_e", "discharge_e",
                    "charge_h", "discharge_h", "b_level", "w_level", "violations")


@dataclass
class EvalReport:
    total_cost: float
    total_reward: float
    e_buy_cost: float
    g_buy_cost: float
    sell_revenue: float
    mismatch_e: float
    mismatch_g: float
    mismatch_h: float
    violations: int
    mode: str
    strict: bool
    horizon: int
    rows: list[dict] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "rows"}

    def write_dispatch_csv(self, path: str | Path) -> None:
        lines = [",".join(EVAL_ROW_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(format_metric(row[c]) for c in EVAL_ROW_COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_summary_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate(checkpoint: Checkpoint, scenario: Scenario, mode: str = "greedy",
             strict: bool = False, horizon: Optional[int] = None,
             seed: int = 0) -> EvalReport:
    """Roll the checkpointed policies out on a scenario and report costs.

    Greedy mode takes each agent's argmax action and is fully deterministic;
    sampled mode draws from the policies with the given seed. Strict mode
    clamps charging to storage headroom and counts attempted violations.
    """
    if mode not in ("greedy", "sampled"):
        raise ValueError("mode must be 'greedy' or 'sampled'")
    meta = checkpoint.meta
    if meta.get("obs_tag") != OBS_LAYOUT_TAG:
        raise IncompatibleCheckpoint(
            f"checkpoint observation layout {meta.get('obs_tag')!r} != {OBS_LAYOUT_TAG!r}")
    if meta.get("n_agents") != scenario.n_agents:
        raise IncompatibleCheckpoint(
            f"checkpoint has {meta.get('n_agents')} agents, scenario has "
            f"{scenario.n_agents}")
    obs_scale = np.asarray(meta["obs_scale"])
    rng = np.random.default_rng(seed)
    park = ParkEnv(scenario, strict=strict, horizon=horizon)
    park.reset(keep_lambda=False)

    rows: list[dict] = []
    totals = dict(cost=0.0, reward=0.0, e_buy_cost=0.0, g_buy_cost=0.0,
                  sell_revenue=0.0, mm_e=0.0, mm_g=0.0, mm_h=0.0)
    violations = 0
    series = scenario.series
    for t in range(park.horizon):
        obs = np.stack(park.observe_all()) * obs_scale
        actions = np.array([
            checkpoint.actors[j].act(obs[j], rng=rng, greedy=(mode == "greedy"))
            for j in range(scenario.n_agents)], dtype=int)
        outcome = park.step(actions)
        totals["cost"] += outcome.cost
        totals["reward"] += outcome.reward
        totals["e_buy_cost"] += outcome.e_buy * series.p_e[t]
        totals["g_buy_cost"] += outcome.g_buy * series.p_g[t]
        totals["sell_revenue"] += outcome.e_sell * series.p_o[t]
        totals["mm_e"] += outcome.mismatch_e
        totals["mm_g"] += outcome.mismatch_g
        totals["mm_h"] += outcome.mismatch_h
        violations += outcome.violations
        d = outcome.dispatch
        rows.append(dict(
            t=t, reward=outcome.reward, cost=outcome.cost,
            e_buy=outcome.e_buy, e_sell=outcome.e_sell, g_buy=outcome.g_buy,
            mismatch_e=outcome.mismatch_e, mismatch_g=outcome.mismatch_g,
            mismatch_h=outcome.mismatch_h,
            chp_e=sum(h.chp_e for h in d), chp_h=sum(h.chp_h for h in d),
            boiler_h=sum(h.boiler_h for h in d),
            charge_e=sum(h.charge_e for h in d),
            discharge_e=sum(h.discharge_e for h in d),
            charge_h=sum(h.charge_h for h in d),
            discharge_h=sum(h.discharge_h for h in d),
            b_level=sum(h.b for h in outcome.next_state.hubs),
            w_level=sum(h.w for h in outcome.next_state.hubs),
            violations=outcome.violations))
    return EvalReport(
        total_cost=totals["cost"], total_reward=totals["reward"],
        e_buy_cost=totals["e_buy_cost"], g_buy_cost=totals["g_buy_cost"],
        sell_revenue=totals["sell_revenue"],
        mismatch_e=totals["mm_e"], mismatch_g=totals["mm_g"], mismatch_h=totals["mm_h"],
        violations=violations, mode=mode, strict=strict, horizon=park.horizon,
        rows=rows)
