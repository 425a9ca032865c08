"""Scenario ingestion and synthetic profile generation.

The CSV contract is one row per slot with header
``t,p_e,p_g,p_o,demand_e,demand_g,demand_h,pv`` (dot decimal separator).
Scenario and profile specs are YAML files with flat, documented keys; see
README for the schemas. The generator stands in for external tariff, load
and PV datasets: a two-peak time-of-use tariff (peaks 8:00-11:00 and
17:00-20:00), smooth demand bumps per carrier, and a daylight-window PV
curve with seeded cloud noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .env import ExogenousSeries, HubParams, MarketParams, Scenario

CSV_HEADER = "t,p_e,p_g,p_o,demand_e,demand_g,demand_h,pv"
_CSV_COLUMNS = CSV_HEADER.split(",")[1:]


class DataError(ValueError):
    """A series or scenario file failed validation."""


@dataclass(frozen=True)
class DemandShape:
    """Base level plus smooth half-sine bumps, per carrier."""

    base: float = 0.0
    peaks: tuple[tuple[int, int, float], ...] = ()  # (start_hour, end_hour, amplitude)

    def level(self, hour: int) -> float:
        v = self.base
        for start, end, amp in self.peaks:
            if start <= hour < end:
                v += amp * math.sin(math.pi * (hour - start + 0.5) / (end - start))
        return v


@dataclass(frozen=True)
class ProfileSpec:
    """Deterministic-given-seed synthetic day profiles."""

    horizon: int = 24
    seed: int = 0
    price_offpeak: float = 0.30
    price_shoulder: float = 0.60
    price_peak: float = 1.00
    peak_hours: tuple[tuple[int, int], ...] = ((8, 11), (17, 20))
    shoulder_hours: tuple[tuple[int, int], ...] = ((6, 8), (11, 17), (20, 23))
    sell_fraction: float = 0.5       # p_o as a fraction of p_e
    gas_price: float = 0.30
    demand_e: DemandShape = field(default_factory=lambda: DemandShape(
        base=1200.0, peaks=((7, 19, 1800.0),)))
    demand_h: DemandShape = field(default_factory=lambda: DemandShape(
        base=600.0, peaks=((6, 12, 900.0), (16, 22, 700.0))))
    demand_g: DemandShape = field(default_factory=lambda: DemandShape(base=300.0))
    pv_start: int = 6
    pv_end: int = 19
    pv_peak: float = 1500.0
    pv_noise: float = 0.10           # multiplicative cloud noise amplitude

    def __post_init__(self):
        if self.horizon <= 0:
            raise DataError("horizon must be positive")
        for start, end in (*self.peak_hours, *self.shoulder_hours):
            if not (0 <= start < end <= 24):
                raise DataError(f"tariff band [{start}, {end}) outside the day")
        if not (0.0 <= self.sell_fraction <= 1.0):
            raise DataError("sell_fraction must lie in [0, 1]")
        for shape in (self.demand_e, self.demand_h, self.demand_g):
            if shape.base < 0 or any(a < 0 for _, _, a in shape.peaks):
                raise DataError("demand amplitudes must be >= 0")
        if self.pv_peak < 0 or self.pv_noise < 0:
            raise DataError("pv parameters must be >= 0")


def _tariff(spec: ProfileSpec, hour: int) -> float:
    for start, end in spec.peak_hours:
        if start <= hour < end:
            return spec.price_peak
    for start, end in spec.shoulder_hours:
        if start <= hour < end:
            return spec.price_shoulder
    return spec.price_offpeak


def generate_series(spec: ProfileSpec) -> ExogenousSeries:
    """Synthesize an ExogenousSeries; identical seeds give identical series."""
    rng = np.random.default_rng(spec.seed)
    T = spec.horizon
    p_e = np.empty(T)
    pv = np.zeros(T)
    d_e = np.empty(T)
    d_g = np.empty(T)
    d_h = np.empty(T)
    for t in range(T):
        hour = t % 24
        p_e[t] = _tariff(spec, hour)
        d_e[t] = spec.demand_e.level(hour)
        d_g[t] = spec.demand_g.level(hour)
        d_h[t] = spec.demand_h.level(hour)
        if spec.pv_start <= hour < spec.pv_end:
            arc = math.sin(math.pi * (hour - spec.pv_start + 0.5)
                           / (spec.pv_end - spec.pv_start))
            cloud = 1.0 + spec.pv_noise * (2.0 * rng.random() - 1.0)
            pv[t] = max(spec.pv_peak * arc * cloud, 0.0)
        else:
            rng.random()  # keep the stream aligned across windows
    return ExogenousSeries(
        p_e=p_e,
        p_g=np.full(T, spec.gas_price),
        p_o=spec.sell_fraction * p_e,
        demand_e=d_e, demand_g=d_g, demand_h=d_h, pv=pv)


def write_series_csv(series: ExogenousSeries, path: str | Path) -> None:
    """Write the CSV contract; floats use repr so a reload is bit-exact."""
    lines = [CSV_HEADER]
    for t in range(series.horizon):
        row = [str(t)] + [repr(float(getattr(series, c)[t])) for c in _CSV_COLUMNS]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_series(path: str | Path) -> ExogenousSeries:
    """Load and validate a series CSV; errors name the offending row."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"series file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty series file")
    header = lines[0].strip()
    if header != CSV_HEADER:
        raise DataError(f"{path}: header {header!r} does not match {CSV_HEADER!r}")
    if len(lines) == 1:
        raise DataError(f"{path}: no data rows")
    columns: dict[str, list[float]] = {c: [] for c in _CSV_COLUMNS}
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != 8:
            raise DataError(f"{path}: row {i} has {len(parts)} fields, expected 8")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: {exc}") from exc
        if int(values[0]) != i:
            raise DataError(f"{path}: row {i} has slot index {parts[0]}")
        for c, v in zip(_CSV_COLUMNS, values[1:]):
            if v < 0.0:
                raise DataError(f"{path}: row {i}: negative {c}")
            columns[c].append(v)
        if columns["p_o"][-1] > columns["p_e"][-1]:
            raise DataError(f"{path}: row {i}: p_o exceeds p_e")
    return ExogenousSeries(**{c: np.array(v) for c, v in columns.items()})


def _as_tuple_peaks(raw) -> tuple[tuple[int, int, float], ...]:
    return tuple((int(p["start"]), int(p["end"]), float(p["amplitude"])) for p in raw or ())


def load_profile_spec(path: str | Path) -> ProfileSpec:
    """Read a ProfileSpec from its YAML key-value file."""
    doc = _read_yaml(path)
    price = doc.get("price", {})
    kwargs = dict(
        horizon=int(doc.get("horizon", 24)),
        seed=int(doc.get("seed", 0)),
        gas_price=float(doc.get("gas_price", 0.30)),
    )
    if price:
        kwargs.update(
            price_offpeak=float(price.get("offpeak", 0.30)),
            price_shoulder=float(price.get("shoulder", 0.60)),
            price_peak=float(price.get("peak", 1.00)),
            sell_fraction=float(price.get("sell_fraction", 0.5)),
        )
        if "peak_hours" in price:
            kwargs["peak_hours"] = tuple((int(a), int(b)) for a, b in price["peak_hours"])
        if "shoulder_hours" in price:
            kwargs["shoulder_hours"] = tuple((int(a), int(b)) for a, b in price["shoulder_hours"])
    for carrier in ("demand_e", "demand_h", "demand_g"):
        if carrier in doc:
            raw = doc[carrier]
            kwargs[carrier] = DemandShape(base=float(raw.get("base", 0.0)),
                                          peaks=_as_tuple_peaks(raw.get("peaks")))
    if "pv" in doc:
        pv = doc["pv"]
        kwargs.update(pv_start=int(pv.get("start", 6)), pv_end=int(pv.get("end", 19)),
                      pv_peak=float(pv.get("peak", 1500.0)),
                      pv_noise=float(pv.get("noise", 0.10)))
    return ProfileSpec(**kwargs)


_HUB_FIELDS = ("eta_ce", "eta_de", "eta_ch", "eta_dh", "eta_pg", "eta_hg", "eta_bg",
               "b_max", "w_max", "c_e_max", "d_e_max", "c_h_max", "d_h_max",
               "e_chp_max", "h_chp_max", "h_b_max")
_HUB_ENERGY_FIELDS = ("b_max", "w_max", "c_e_max", "d_e_max", "c_h_max", "d_h_max",
                      "e_chp_max", "h_chp_max", "h_b_max")
_MARKET_FIELDS = ("e_max", "g_max", "e_o_max", "b1", "b2")
_MARKET_ENERGY_FIELDS = ("e_max", "g_max", "e_o_max")


def _read_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: expected a key-value mapping")
    return doc


def load_scenario(path: str | Path, series: Optional[ExogenousSeries] = None) -> Scenario:
    """Build a Scenario from its YAML config.

    Energy-valued fields may be stated in MWh by setting ``units: mwh``;
    they are converted to the internal kWh on load (prices are always per
    kWh). The ``series`` key is resolved relative to the config file unless
    a pre-loaded series is passed in.
    """
    path = Path(path)
    doc = _read_yaml(path)
    units = str(doc.get("units", "kwh")).lower()
    if units not in ("kwh", "mwh"):
        raise DataError(f"{path}: unknown units {units!r}")
    scale = 1000.0 if units == "mwh" else 1.0

    hub_doc = dict(doc.get("hub", {}))
    unknown = set(hub_doc) - set(_HUB_FIELDS)
    if unknown:
        raise DataError(f"{path}: unknown hub keys {sorted(unknown)}")
    for key in _HUB_ENERGY_FIELDS:
        if key in hub_doc:
            hub_doc[key] = float(hub_doc[key]) * scale
    hub = HubParams(**{k: float(v) for k, v in hub_doc.items()})

    market_doc = dict(doc.get("market", {}))
    unknown = set(market_doc) - set(_MARKET_FIELDS)
    if unknown:
        raise DataError(f"{path}: unknown market keys {sorted(unknown)}")
    for key in _MARKET_ENERGY_FIELDS:
        if key in market_doc:
            market_doc[key] = float(market_doc[key]) * scale
    market = MarketParams(**{k: float(v) for k, v in market_doc.items()})

    if series is None:
        series_path = doc.get("series")
        if not series_path:
            raise DataError(f"{path}: missing 'series' file path")
        series_path = Path(series_path)
        if not series_path.is_absolute():
            series_path = path.parent / series_path
        series = load_series(series_path)

    n_hubs = int(doc.get("hubs", 1))
    if n_hubs < 1:
        raise DataError(f"{path}: hubs must be >= 1")
    return Scenario(
        hubs=(hub,) * n_hubs,
        market=market,
        series=series,
        zeta=float(doc.get("zeta", 1e-4)),
        init_soc_b=float(doc.get("init_soc_b", 0.5)),
        init_soc_w=float(doc.get("init_soc_w", 0.5)),
        lambda_init=float(doc.get("lambda_init", 0.5)),
    )


def scale_demand(series: ExogenousSeries, factor: float) -> ExogenousSeries:
    """Proportionally scale demands and PV, e.g. when adding hubs."""
    return ExogenousSeries(
        p_e=series.p_e, p_g=series.p_g, p_o=series.p_o,
        demand_e=series.demand_e * factor,
        demand_g=series.demand_g * factor,
        demand_h=series.demand_h * factor,
        pv=series.pv * factor)
