"""Deterministic multi-energy hub simulation for an industrial park.

Each hub bundles a battery, a hot-water tank, a CHP unit and a boiler.
Every slot the park decodes the four device actions per hub, settles the
electricity/gas markets with a deterministic balancing rule (buy the
shortfall, sell the surplus, clamp to trading limits), computes the shared
reward plus per-storage multiplier penalties, and advances storage levels.

Agent order is hub-major: [battery, tank, chp, boiler] per hub.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

BATTERY, TANK, CHP, BOILER = "battery", "tank", "chp", "boiler"
DEVICE_KINDS = (BATTERY, TANK, CHP, BOILER)

# Discrete dispatch grids: storage agents pick from 21 signed fractions,
# converter agents from 11 nonnegative fractions.
N_STORAGE_ACTIONS = 21
N_CONVERTER_ACTIONS = 11

OBS_DIM = 10
# Index map for AgentObservation vectors (embedded in checkpoints as a tag).
OBS_LAYOUT_TAG = "obs-v1"
OBS_FIELDS = (
    "sin_hour", "cos_hour", "p_e", "p_g", "p_o",
    "demand_e", "demand_h", "demand_g", "pv", "own_signal",
)


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class EpisodeExhausted(RuntimeError):
    """step() was called past the end of the exogenous series."""


@dataclass(frozen=True)
class HubParams:
    """Per-hub device efficiencies, capacities and rate limits (kWh units)."""

    eta_ce: float = 0.98   # battery charge efficiency
    eta_de: float = 0.98   # battery discharge efficiency
    eta_ch: float = 0.98   # tank charge efficiency
    eta_dh: float = 0.98   # tank discharge efficiency
    eta_pg: float = 0.35   # CHP gas -> electricity
    eta_hg: float = 0.35   # CHP gas -> heat
    eta_bg: float = 0.80   # boiler gas -> heat
    b_max: float = 4000.0
    w_max: float = 4000.0
    c_e_max: float = 1000.0
    d_e_max: float = 1000.0
    c_h_max: float = 1000.0
    d_h_max: float = 1000.0
    e_chp_max: float = 1500.0
    h_chp_max: float = 1500.0
    h_b_max: float = 2000.0

    def __post_init__(self):
        for name in ("eta_ce", "eta_de", "eta_ch", "eta_dh", "eta_pg", "eta_hg", "eta_bg"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ContractViolation(f"{name}={v} outside (0, 1]")
        for name in ("b_max", "w_max", "c_e_max", "d_e_max", "c_h_max", "d_h_max",
                     "e_chp_max", "h_chp_max", "h_b_max"):
            if getattr(self, name) < 0.0:
                raise ContractViolation(f"{name} must be >= 0")
        # Both CHP output caps must trace back to one gas-input cap.
        if abs(self.e_chp_max / self.eta_pg - self.h_chp_max / self.eta_hg) > 1e-9:
            raise ContractViolation(
                "e_chp_max/eta_pg and h_chp_max/eta_hg disagree; "
                "CHP electric and heat caps must imply the same gas cap")

    @property
    def chp_gas_cap(self) -> float:
        return self.e_chp_max / self.eta_pg

    @property
    def boiler_gas_cap(self) -> float:
        return self.h_b_max / self.eta_bg


@dataclass(frozen=True)
class MarketParams:
    """Per-slot trading limits and reward utility coefficients."""

    e_max: float = 8000.0    # purchase limit, electricity (kWh)
    g_max: float = 20000.0   # purchase limit, gas (kWh)
    e_o_max: float = 2000.0  # sale limit, electricity (kWh)
    b1: float = 20.0         # constant utility (currency)
    b2: float = 2.0          # mismatch penalty (currency/kWh)

    def __post_init__(self):
        for name in ("e_max", "g_max", "e_o_max", "b2"):
            if getattr(self, name) < 0.0:
                raise ContractViolation(f"{name} must be >= 0")


@dataclass(frozen=True)
class HubState:
    """Mutable-per-step hub quantities: storage levels, multipliers, last dispatch.

    `b` and `w` are never negative (discharge is clamped); `b` may exceed
    `b_max` while training with the soft capacity mode. `prev_chp` and
    `prev_boiler` remember the previous dispatch fraction so converter
    agents can observe their own last set-point.
    """

    b: float
    w: float
    lambda_b: float = 0.5
    lambda_w: float = 0.5
    prev_chp: float = 0.0
    prev_boiler: float = 0.0

    def __post_init__(self):
        if self.b < 0.0 or self.w < 0.0:
            raise ContractViolation("storage levels must be >= 0")
        if not (0.0 <= self.lambda_b <= 1.0 and 0.0 <= self.lambda_w <= 1.0):
            raise ContractViolation("multipliers must lie in [0, 1]")


@dataclass(frozen=True)
class ExogenousSeries:
    """Time-indexed prices, aggregate target demands and PV generation."""

    p_e: np.ndarray
    p_g: np.ndarray
    p_o: np.ndarray
    demand_e: np.ndarray
    demand_g: np.ndarray
    demand_h: np.ndarray
    pv: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("p_e", "p_g", "p_o", "demand_e", "demand_g", "demand_h", "pv"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1:
                raise ContractViolation(f"{name} must be one-dimensional")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ContractViolation(f"series lengths differ: {sorted(lengths)}")
        if next(iter(lengths)) == 0:
            raise ContractViolation("series must contain at least one slot")
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"{name} contains non-finite entries")
            if np.any(arr < 0.0):
                raise ContractViolation(f"{name} contains negative entries")
        bad = np.nonzero(arrays["p_o"] > arrays["p_e"])[0]
        if bad.size:
            raise ContractViolation(
                f"p_o > p_e at slot {int(bad[0])}: selling above the purchase "
                "price would create an arbitrage loop")

    @property
    def horizon(self) -> int:
        return int(self.p_e.shape[0])


@dataclass(frozen=True)
class Scenario:
    """Everything env_step needs besides the per-slot state."""

    hubs: tuple[HubParams, ...]
    market: MarketParams
    series: ExogenousSeries
    zeta: float = 1e-4           # multiplier ascent rate per kWh of violation
    init_soc_b: float = 0.5
    init_soc_w: float = 0.5
    lambda_init: float = 0.5

    def __post_init__(self):
        if not self.hubs:
            raise ContractViolation("scenario needs at least one hub")
        if self.zeta <= 0.0:
            raise ContractViolation("zeta must be > 0")

    @property
    def n_hubs(self) -> int:
        return len(self.hubs)

    @property
    def n_agents(self) -> int:
        return 4 * len(self.hubs)

    def initial_state(self) -> "ParkState":
        hubs = tuple(
            HubState(b=self.init_soc_b * hp.b_max, w=self.init_soc_w * hp.w_max,
                     lambda_b=self.lambda_init, lambda_w=self.lambda_init)
            for hp in self.hubs)
        return ParkState(hubs=hubs)


@dataclass(frozen=True)
class ParkState:
    hubs: tuple[HubState, ...]


@dataclass(frozen=True)
class JointAction:
    """Discrete action indices, hub-major [battery, tank, chp, boiler]."""

    indices: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.indices, dtype=int)
        object.__setattr__(self, "indices", arr)
        if arr.ndim != 1 or arr.shape[0] % 4 != 0:
            raise ContractViolation("joint action must hold 4 indices per hub")
        kinds = agent_kinds(arr.shape[0] // 4)
        for idx, kind in zip(arr, kinds):
            check_action_index(kind, int(idx))


@dataclass(frozen=True)
class HubDispatch:
    """Realized (post-clamp) energy flows of one hub for one slot, in kWh."""

    charge_e: float
    discharge_e: float
    charge_h: float
    discharge_h: float
    chp_gas: float
    chp_e: float
    chp_h: float
    boiler_gas: float
    boiler_h: float


@dataclass(frozen=True)
class StepOutcome:
    e_buy: float
    e_sell: float
    g_buy: float
    e_tot: float
    g_tot: float
    h_tot: float
    mismatch_e: float
    mismatch_g: float
    mismatch_h: float
    reward: float
    agent_rewards: np.ndarray
    next_state: ParkState
    cost: float                      # e_buy*p_e + g_buy*p_g - e_sell*p_o
    violations: int                  # capacity violations this slot
    dispatch: tuple[HubDispatch, ...]
    t: int


def agent_kinds(n_hubs: int) -> list[str]:
    return list(DEVICE_KINDS) * n_hubs


def action_sizes(n_hubs: int) -> list[int]:
    sizes = [N_STORAGE_ACTIONS, N_STORAGE_ACTIONS, N_CONVERTER_ACTIONS, N_CONVERTER_ACTIONS]
    return sizes * n_hubs


def check_action_index(kind: str, index: int) -> None:
    n = N_STORAGE_ACTIONS if kind in (BATTERY, TANK) else N_CONVERTER_ACTIONS
    if not (0 <= index < n):
        raise ContractViolation(f"action index {index} out of range for {kind}")


def decode_action(kind: str, index: int) -> float:
    """Map a discrete action index to its dispatch fraction.

    Battery/tank indices 0..20 decode to -1.0..+1.0 (negative = discharge,
    positive = charge); CHP/boiler indices 0..10 decode to 0.0..1.0. Values
    land exactly on the 0.1 grid.
    """
    check_action_index(kind, index)
    if kind in (BATTERY, TANK):
        return (index - 10) / 10
    return index / 10


def storage_step(level: float, charge: float, discharge: float,
                 eta_c: float, eta_d: float) -> float:
    """Advance a storage level one slot: level + eta_c*charge - discharge/eta_d.

    `charge` is energy drawn from the park, `discharge` is energy delivered
    to it. Exactly one of the two may be nonzero. Callers clamp `discharge`
    to level*eta_d beforehand so the result stays nonnegative.
    """
    if charge < 0.0 or discharge < 0.0:
        raise ContractViolation("charge and discharge must be >= 0")
    if charge > 0.0 and discharge > 0.0:
        raise ContractViolation("cannot charge and discharge in the same slot")
    return level + eta_c * charge - discharge / eta_d


def chp_output(gas_in: float, params: HubParams) -> tuple[float, float]:
    """Electricity and heat produced by the CHP from `gas_in` kWh of gas."""
    if gas_in < 0.0:
        raise ContractViolation("gas_in must be >= 0")
    e = min(params.eta_pg * gas_in, params.e_chp_max)
    h = min(params.eta_hg * gas_in, params.h_chp_max)
    return e, h


def boiler_output(gas_in: float, params: HubParams) -> float:
    """Heat produced by the boiler from `gas_in` kWh of gas."""
    if gas_in < 0.0:
        raise ContractViolation("gas_in must be >= 0")
    return min(params.eta_bg * gas_in, params.h_b_max)


def update_lagrange(lam: float, level: float, cap: float, zeta: float) -> float:
    """Clipped dual ascent: clip(lam + zeta*(level - cap), 0, 1)."""
    if zeta <= 0.0:
        raise ContractViolation("zeta must be > 0")
    if not (0.0 <= lam <= 1.0):
        raise ContractViolation("lambda must lie in [0, 1]")
    x = lam + zeta * (level - cap)
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


def penalized_reward(reward: float, level: float, cap: float, lam: float) -> float:
    """Storage-agent reward: shared reward minus lam*(level - cap).

    The term is a bonus while the level sits below the cap, so feasible
    behaviour earns more than the shared reward until lam decays to zero.
    """
    if not (0.0 <= lam <= 1.0):
        raise ContractViolation("lambda must lie in [0, 1]")
    return reward - lam * (level - cap)


def _resolve_storage(level: float, frac: float, c_max: float, d_max: float,
                     eta_c: float, eta_d: float, cap: float,
                     strict: bool) -> tuple[float, float, int]:
    """Turn a signed dispatch fraction into clamped (charge, discharge).

    Discharge is always clamped so the level cannot go negative. In strict
    mode charging is additionally clamped to the remaining headroom and an
    attempted overshoot counts as one violation; in soft mode the level may
    run past the cap (the multiplier penalty handles it).
    """
    violations = 0
    charge = 0.0
    discharge = 0.0
    if frac > 0.0:
        charge = frac * c_max
        if strict:
            headroom = max(cap - level, 0.0) / eta_c
            if charge > headroom + 1e-9:
                violations = 1
            charge = min(charge, headroom)
    elif frac < 0.0:
        discharge = min(-frac * d_max, level * eta_d)
    return charge, discharge, violations


def balance_market(dispatches: Sequence[HubDispatch], market: MarketParams,
                   demand_e: float, demand_g: float, demand_h: float,
                   pv: float) -> tuple[float, float, float, float, float, float,
                                       float, float, float]:
    """Settle both markets for one slot with the deterministic balancing rule.

    Electricity: the park buys any shortfall (up to e_max) and sells any
    surplus (up to e_o_max), never both. Gas: purchases cover converter fuel
    plus user demand, clamped to g_max. Heat has no market. Returns
    (e_buy, e_sell, g_buy, e_tot, g_tot, h_tot, mismatch_e, mismatch_g,
    mismatch_h).
    """
    supply_e = pv + sum(d.chp_e + d.discharge_e - d.charge_e for d in dispatches)
    net = supply_e - demand_e
    if net < 0.0:
        e_buy = min(-net, market.e_max)
        e_sell = 0.0
    else:
        e_buy = 0.0
        e_sell = min(net, market.e_o_max)

    gas_fuel = sum(d.chp_gas + d.boiler_gas for d in dispatches)
    g_buy = min(gas_fuel + demand_g, market.g_max)

    e_tot = supply_e + e_buy - e_sell
    g_tot = g_buy - gas_fuel
    h_tot = sum(d.chp_h + d.boiler_h + d.discharge_h - d.charge_h for d in dispatches)

    mismatch_e = abs(e_tot - demand_e)
    mismatch_g = abs(g_tot - demand_g)
    mismatch_h = abs(h_tot - demand_h)
    return e_buy, e_sell, g_buy, e_tot, g_tot, h_tot, mismatch_e, mismatch_g, mismatch_h


def park_reward(e_buy: float, e_sell: float, g_buy: float,
                mismatch_e: float, mismatch_g: float, mismatch_h: float,
                p_e: float, p_g: float, p_o: float, market: MarketParams) -> float:
    """Shared park reward: sale revenue minus purchases minus mismatch utility."""
    return (e_sell * p_o - e_buy * p_e - g_buy * p_g
            + market.b1 - market.b2 * (mismatch_e + mismatch_g + mismatch_h))


def env_step(scenario: Scenario, state: ParkState, action: JointAction | np.ndarray,
             t: int, strict: bool = False) -> StepOutcome:
    """Advance the park one slot. Pure: identical inputs give identical outcomes.

    Composition: decode actions, clamp storage flows, run converters, settle
    markets, compute the shared reward, penalize the storage agents with
    their current multipliers against the post-action level, then advance
    levels and multipliers into `next_state`.
    """
    series = scenario.series
    if t >= series.horizon:
        raise EpisodeExhausted(f"slot {t} outside horizon {series.horizon}")
    indices = action.indices if isinstance(action, JointAction) else np.asarray(action, dtype=int)
    if indices.shape[0] != scenario.n_agents:
        raise ContractViolation(
            f"joint action holds {indices.shape[0]} indices, scenario has "
            f"{scenario.n_agents} agents")

    dispatches = []
    fracs = []
    violations = 0
    for k, (hp, hs) in enumerate(zip(scenario.hubs, state.hubs)):
        a_b, a_w, a_c, a_bo = (int(i) for i in indices[4 * k: 4 * k + 4])
        f_b = decode_action(BATTERY, a_b)
        f_w = decode_action(TANK, a_w)
        f_c = decode_action(CHP, a_c)
        f_bo = decode_action(BOILER, a_bo)

        c_e, d_e, v_b = _resolve_storage(hs.b, f_b, hp.c_e_max, hp.d_e_max,
                                         hp.eta_ce, hp.eta_de, hp.b_max, strict)
        c_h, d_h, v_w = _resolve_storage(hs.w, f_w, hp.c_h_max, hp.d_h_max,
                                         hp.eta_ch, hp.eta_dh, hp.w_max, strict)
        violations += v_b + v_w

        chp_gas = f_c * hp.chp_gas_cap
        chp_e, chp_h = chp_output(chp_gas, hp)
        boiler_gas = f_bo * hp.boiler_gas_cap
        boiler_h = boiler_output(boiler_gas, hp)

        dispatches.append(HubDispatch(
            charge_e=c_e, discharge_e=d_e, charge_h=c_h, discharge_h=d_h,
            chp_gas=chp_gas, chp_e=chp_e, chp_h=chp_h,
            boiler_gas=boiler_gas, boiler_h=boiler_h))
        fracs.append((f_c, f_bo))

    (e_buy, e_sell, g_buy, e_tot, g_tot, h_tot,
     mm_e, mm_g, mm_h) = balance_market(
        dispatches, scenario.market,
        series.demand_e[t], series.demand_g[t], series.demand_h[t], series.pv[t])
    reward = park_reward(e_buy, e_sell, g_buy, mm_e, mm_g, mm_h,
                         series.p_e[t], series.p_g[t], series.p_o[t], scenario.market)
    cost = e_buy * series.p_e[t] + g_buy * series.p_g[t] - e_sell * series.p_o[t]

    next_hubs = []
    agent_rewards = np.empty(scenario.n_agents)
    for k, (hp, hs, d) in enumerate(zip(scenario.hubs, state.hubs, dispatches)):
        next_b = storage_step(hs.b, d.charge_e, d.discharge_e, hp.eta_ce, hp.eta_de)
        next_w = storage_step(hs.w, d.charge_h, d.discharge_h, hp.eta_ch, hp.eta_dh)
        next_b = max(next_b, 0.0)  # guard rounding residue from clamped discharge
        next_w = max(next_w, 0.0)
        if not strict:
            violations += int(next_b > hp.b_max + 1e-9) + int(next_w > hp.w_max + 1e-9)

        # Storage agents are penalized against the level their action produced;
        # converter agents receive the shared reward unchanged.
        agent_rewards[4 * k + 0] = penalized_reward(reward, next_b, hp.b_max, hs.lambda_b)
        agent_rewards[4 * k + 1] = penalized_reward(reward, next_w, hp.w_max, hs.lambda_w)
        agent_rewards[4 * k + 2] = reward
        agent_rewards[4 * k + 3] = reward

        next_hubs.append(HubState(
            b=next_b, w=next_w,
            lambda_b=update_lagrange(hs.lambda_b, next_b, hp.b_max, scenario.zeta),
            lambda_w=update_lagrange(hs.lambda_w, next_w, hp.w_max, scenario.zeta),
            prev_chp=fracs[k][0], prev_boiler=fracs[k][1]))

    return StepOutcome(
        e_buy=e_buy, e_sell=e_sell, g_buy=g_buy,
        e_tot=e_tot, g_tot=g_tot, h_tot=h_tot,
        mismatch_e=mm_e, mismatch_g=mm_g, mismatch_h=mm_h,
        reward=reward, agent_rewards=agent_rewards,
        next_state=ParkState(hubs=tuple(next_hubs)),
        cost=cost, violations=violations, dispatch=tuple(dispatches), t=t)


def observe(scenario: Scenario, state: ParkState, t: int, agent: int) -> np.ndarray:
    """Local observation of one agent, laid out per OBS_FIELDS.

    Time enters as sin/cos of the daily phase; prices, demands and PV come
    from the exogenous series; the last entry is the agent's own device
    signal (storage level over cap, or the previous dispatch fraction).
    """
    if not (0 <= agent < scenario.n_agents):
        raise ContractViolation(f"agent {agent} out of range")
    series = scenario.series
    if t >= series.horizon:
        raise EpisodeExhausted(f"slot {t} outside horizon {series.horizon}")
    hub = state.hubs[agent // 4]
    params = scenario.hubs[agent // 4]
    kind = DEVICE_KINDS[agent % 4]
    if kind == BATTERY:
        own = hub.b / params.b_max if params.b_max > 0 else 0.0
    elif kind == TANK:
        own = hub.w / params.w_max if params.w_max > 0 else 0.0
    elif kind == CHP:
        own = hub.prev_chp
    else:
        own = hub.prev_boiler
    phase = 2.0 * math.pi * t / 24.0
    return np.array([
        math.sin(phase), math.cos(phase),
        series.p_e[t], series.p_g[t], series.p_o[t],
        series.demand_e[t], series.demand_h[t], series.demand_g[t],
        series.pv[t], own,
    ])


def observe_all(scenario: Scenario, state: ParkState, t: int) -> list[np.ndarray]:
    return [observe(scenario, state, t, j) for j in range(scenario.n_agents)]


class ParkEnv:
    """Stateful convenience wrapper around the pure env_step.

    A single instance is not safe for concurrent stepping; create one per
    rollout. Multipliers persist across reset() by default so the dual
    ascent continues over training episodes.
    """

    def __init__(self, scenario: Scenario, strict: bool = False,
                 horizon: Optional[int] = None):
        self.scenario = scenario
        self.strict = strict
        self.horizon = min(horizon or scenario.series.horizon, scenario.series.horizon)
        self.state = scenario.initial_state()
        self.t = 0

    def reset(self, keep_lambda: bool = True) -> ParkState:
        fresh = self.scenario.initial_state()
        if keep_lambda:
            fresh = ParkState(hubs=tuple(
                replace(new, lambda_b=old.lambda_b, lambda_w=old.lambda_w)
                for new, old in zip(fresh.hubs, self.state.hubs)))
        self.state = fresh
        self.t = 0
        return self.state

    def observe(self, agent: int) -> np.ndarray:
        return observe(self.scenario, self.state, self.t, agent)

    def observe_all(self) -> list[np.ndarray]:
        return observe_all(self.scenario, self.state, self.t)

    def step(self, action: JointAction | np.ndarray) -> StepOutcome:
        if self.t >= self.horizon:
            raise EpisodeExhausted(f"episode of {self.horizon} slots is over")
        outcome = env_step(self.scenario, self.state, action, self.t, strict=self.strict)
        self.state = outcome.next_state
        self.t += 1
        return outcome

    @property
    def done(self) -> bool:
        return self.t >= self.horizon

    @property
    def n_agents(self) -> int:
        return self.scenario.n_agents
