"""
Scenario ingestion, generation and validation.

A scenario file is a JSON document (schema ``v2x-stack/scenario@1``) that
references two CSV files by path relative to itself:

    v2g_prices.csv   header ``timestamp,price``; one row per hour, ISO-8601
                     timestamps, decimal point, $/kWh
    feeder.csv       header ``branch,from_node,to_node,r_ohm,x_ohm,q_load_kvar``;
                     branch k runs from node k-1 to node k. Files giving
                     impedances in per-unit use ``r_pu,x_pu`` instead.

Every field missing from the JSON document takes the default documented on
the corresponding type.
"""

from dataclasses import dataclass, fields
from datetime import datetime, timedelta
from importlib import resources
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging
import math
import os

import numpy as np
import pandas as pd
from dateutil.parser import isoparse
from scipy.stats import truncnorm

from v2x_stack.helper import (
    circular_hour_distance,
    clock_hours,
    hour_to_slot,
    slot_offset,
    stable_hash,
)
from v2x_stack.network import NetworkDataError, validate_grid
from v2x_stack.types import (
    BuildingSpec,
    CommunitySpec,
    DayHistory,
    EvSpec,
    GridModel,
    PeakScope,
    Scenario,
    Tariff,
    TariffKind,
    Violation,
    arrival_counts,
)

logger = logging.getLogger(__name__)

SCHEMA = "v2x-stack/scenario@1"
PRICE_FILE = "v2g_prices.csv"
FEEDER_FILE = "feeder.csv"
# Calendar date written into generated price files; keeps output byte-identical.
REFERENCE_DATE = datetime(2024, 1, 1)
DEFAULT_NODES = (7, 14, 16, 17, 24, 30)
REACTIVE_LOAD_SCALE = 0.05
FLOW_LIMIT_KW = 5000.0
REACTIVE_LIMIT_KVAR = 5000.0
BIG_M_FACTOR = 10.0


class PriceSeriesError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None, hour: Optional[int] = None):
        super().__init__(message)
        self.row = row
        self.hour = hour


class FleetParameterError(ValueError):
    pass


class ScenarioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PriceSeries:
    """Hourly prices with their timestamps, oldest first."""

    timestamps: Tuple[datetime, ...]
    prices: Tuple[float, ...]
    market: str = ""

    def __len__(self):
        return len(self.prices)

    def days(self) -> List[Tuple[float, ...]]:
        """Prices of every complete calendar day in the series."""
        out = []
        index = 0
        while index < len(self.timestamps):
            if self.timestamps[index].hour != 0:
                index += 1
                continue
            chunk = self.prices[index : index + 24]
            if len(chunk) < 24:
                break
            out.append(tuple(chunk))
            index += 24
        return out

    def window(self, start_hour: int, hours: int) -> Tuple[float, ...]:
        """hours consecutive prices starting at the first row at start_hour."""
        for index, stamp in enumerate(self.timestamps):
            if stamp.hour == start_hour:
                chunk = self.prices[index : index + hours]
                if len(chunk) == hours:
                    return tuple(chunk)
                break
        raise PriceSeriesError(
            f"{self.market or 'price series'} has no {hours}-hour window starting at {start_hour}:00",
            hour=start_hour,
        )


def load_price_series(path: str, market_label: str = "") -> PriceSeries:
    """
    Read an hourly ``timestamp,price`` CSV.

    Rows must be strictly increasing by exactly one hour.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["timestamp", "price"]:
        raise PriceSeriesError(
            f"{path}: expected header 'timestamp,price', found {','.join(frame.columns)}", row=0
        )
    timestamps = []
    prices = []
    for offset, (stamp, price) in enumerate(zip(frame["timestamp"], frame["price"])):
        row = offset + 1
        try:
            parsed = isoparse(stamp.strip())
            value = float(price)
        except ValueError as err:
            raise PriceSeriesError(f"{path}: cannot parse row {row}: {err}", row=row) from err
        if not math.isfinite(value):
            raise PriceSeriesError(f"{path}: row {row} has a non-finite price", row=row)
        if parsed.minute or parsed.second or parsed.microsecond:
            raise PriceSeriesError(f"{path}: row {row} is not on a whole hour", row=row)
        if timestamps:
            step = parsed - timestamps[-1]
            if step <= timedelta(0):
                raise PriceSeriesError(f"{path}: row {row} is not after the previous row", row=row)
            if step != timedelta(hours=1):
                missing = timestamps[-1] + timedelta(hours=1)
                raise PriceSeriesError(
                    f"{path}: gap before row {row}, hour {missing.hour} is missing",
                    row=row,
                    hour=missing.hour,
                )
        timestamps.append(parsed)
        prices.append(value)
    logger.debug("read %d prices from %s", len(prices), path)
    return PriceSeries(tuple(timestamps), tuple(prices), market_label)


def write_price_series(series: PriceSeries, path: str):
    frame = pd.DataFrame(
        {
            "timestamp": [stamp.isoformat() for stamp in series.timestamps],
            "price": [repr(float(price)) for price in series.prices],
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def price_series_for_day(prices: Sequence[float], start_hour: int = 0, market: str = "") -> PriceSeries:
    start = REFERENCE_DATE + timedelta(hours=start_hour)
    stamps = tuple(start + timedelta(hours=h) for h in range(len(prices)))
    return PriceSeries(stamps, tuple(float(p) for p in prices), market)


@dataclass(frozen=True)
class FleetParams:
    """
    Sampling parameters of a fleet. Times are clock hours; the operational
    day starts at start_hour so evening arrivals and morning departures fall
    in one session.
    """

    arrival_mean: float = 18.0
    arrival_sd: float = 2.0
    arrival_window: Tuple[float, float] = (14.0, 23.0)
    departure_mean: float = 7.5
    departure_sd: float = 1.5
    departure_window: Tuple[float, float] = (5.0, 11.0)
    capacity: float = 50.0
    capacity_lower: float = 10.0
    initial_range: Tuple[float, float] = (20.0, 30.0)
    desired_energy: float = 40.0
    charge_limit: float = 7.0
    discharge_limit: float = 7.0
    charge_eff: float = 0.95
    discharge_eff: float = 0.95
    horizon: int = 24
    start_hour: int = 12
    slot_duration: float = 1.0


def _slot_window(params: FleetParams, window: Tuple[float, float]) -> Tuple[int, int]:
    first = hour_to_slot(window[0], params.start_hour, params.slot_duration)
    # The upper end may sit exactly on the day boundary.
    last_offset = slot_offset(window[1], params.start_hour)
    if window[1] != window[0] and last_offset == 0:
        last_offset = 24.0
    last = min(int(math.floor(last_offset / params.slot_duration)) + 1, params.horizon)
    return first, last


def check_fleet_params(params: FleetParams):
    for name in ("arrival", "departure"):
        low, high = getattr(params, f"{name}_window")
        if not low < high:
            raise FleetParameterError(f"{name} window [{low}, {high}] has empty support")
        if getattr(params, f"{name}_sd") <= 0:
            raise FleetParameterError(f"{name} standard deviation must be positive")
    arrival = _slot_window(params, params.arrival_window)
    departure = _slot_window(params, params.departure_window)
    if not 1 <= arrival[0] <= arrival[1] <= params.horizon:
        raise FleetParameterError(f"arrival slots {arrival} fall outside 1..{params.horizon}")
    if not 1 <= departure[0] <= departure[1] <= params.horizon:
        raise FleetParameterError(f"departure slots {departure} fall outside 1..{params.horizon}")
    if departure[0] <= arrival[1]:
        raise FleetParameterError(
            f"departure slots {departure} do not follow arrival slots {arrival}"
        )
    low, high = params.initial_range
    if not params.capacity_lower <= low <= high <= params.capacity:
        raise FleetParameterError(
            f"initial range {params.initial_range} outside [{params.capacity_lower}, {params.capacity}]"
        )
    if params.desired_energy > params.capacity:
        raise FleetParameterError("desired energy exceeds capacity")
    if min(params.charge_limit, params.discharge_limit) < 0:
        raise FleetParameterError("power limits must be nonnegative")


def _truncated(rng, mean, sd, window, count) -> np.ndarray:
    low = (window[0] - mean) / sd
    high = (window[1] - mean) / sd
    return truncnorm.rvs(low, high, loc=mean, scale=sd, size=count, random_state=rng)


def generate_ev_fleet(
    count: int,
    params: Optional[FleetParams] = None,
    seed: int = 0,
    community_id: int = 0,
    id_prefix: str = "ev",
) -> Tuple[EvSpec, ...]:
    """Sample count parking sessions; a pure function of its arguments."""
    params = params or FleetParams()
    if count < 0:
        raise FleetParameterError(f"fleet size {count} is negative")
    check_fleet_params(params)
    rng = np.random.default_rng(seed)
    if count == 0:
        return ()
    arrivals = _truncated(rng, params.arrival_mean, params.arrival_sd, params.arrival_window, count)
    departures = _truncated(
        rng, params.departure_mean, params.departure_sd, params.departure_window, count
    )
    initial = rng.uniform(params.initial_range[0], params.initial_range[1], size=count)
    arrival_bounds = _slot_window(params, params.arrival_window)
    departure_bounds = _slot_window(params, params.departure_window)
    fleet = []
    for k in range(count):
        arrival = hour_to_slot(arrivals[k], params.start_hour, params.slot_duration)
        departure = hour_to_slot(departures[k], params.start_hour, params.slot_duration)
        fleet.append(
            EvSpec(
                id=f"{id_prefix}{k:03d}",
                community_id=community_id,
                arrival_slot=int(np.clip(arrival, *arrival_bounds)),
                departure_slot=int(np.clip(departure, *departure_bounds)),
                capacity_upper=params.capacity,
                capacity_lower=params.capacity_lower,
                initial_energy=float(initial[k]),
                desired_energy=params.desired_energy,
                charge_limit=params.charge_limit,
                discharge_limit=params.discharge_limit,
                charge_eff=params.charge_eff,
                discharge_eff=params.discharge_eff,
            )
        )
    return tuple(fleet)


def bundled_feeder_path() -> str:
    return str(resources.files("v2x_stack") / "data" / "ieee33.csv")


def load_feeder(
    path: str,
    horizon: int,
    *,
    reactive_load_scale: float = 1.0,
    voltage_bounds: Tuple[float, float] = (0.95, 1.05),
    flow_limit: float = FLOW_LIMIT_KW,
    reactive_limit: float = REACTIVE_LIMIT_KVAR,
    slack_voltage: float = 1.0,
    base_kva: float = 10_000.0,
    base_kv: float = 12.66,
) -> GridModel:
    """
    Build a GridModel from a feeder CSV.

    Reactive loads are held constant over the horizon; flow and voltage
    limits are uniform.
    """
    frame = pd.read_csv(path)
    if {"r_pu", "x_pu"} <= set(frame.columns):
        unit, r_col, x_col = "pu", "r_pu", "x_pu"
    else:
        unit, r_col, x_col = "ohm", "r_ohm", "x_ohm"
    required = {"branch", "from_node", "to_node", r_col, x_col, "q_load_kvar"}
    missing = required - set(frame.columns)
    if missing:
        raise NetworkDataError(f"{path}: missing columns {sorted(missing)}")
    frame = frame.sort_values("branch").reset_index(drop=True)
    for position, row in frame.iterrows():
        branch = position + 1
        if (int(row["branch"]), int(row["from_node"]), int(row["to_node"])) != (
            branch,
            branch - 1,
            branch,
        ):
            raise NetworkDataError(
                f"{path}: branch {row['branch']} must run from node {branch - 1} to node {branch}"
            )
    nodes = len(frame) + 1
    q_load = [0.0] + [float(v) * reactive_load_scale for v in frame["q_load_kvar"]]
    return GridModel(
        node_count=nodes,
        resistance=tuple(float(v) for v in frame[r_col]),
        reactance=tuple(float(v) for v in frame[x_col]),
        reactive_load=tuple(tuple(q for _ in range(horizon)) for q in q_load),
        voltage_min=_repeat(voltage_bounds[0], nodes),
        voltage_max=_repeat(voltage_bounds[1], nodes),
        flow_min=_repeat(-flow_limit, nodes - 1),
        flow_max=_repeat(flow_limit, nodes - 1),
        reactive_min=_repeat(-reactive_limit, nodes - 1),
        reactive_max=_repeat(reactive_limit, nodes - 1),
        slack_voltage=tuple(float(slack_voltage) for _ in range(horizon)),
        base_kva=base_kva,
        base_kv=base_kv,
        impedance_unit=unit,
    )


def _repeat(value: float, count: int) -> Tuple[float, ...]:
    return tuple(float(value) for _ in range(count))


def write_feeder(grid: GridModel, path: str):
    for node, row in enumerate(grid.reactive_load):
        if len(set(row)) > 1:
            raise ScenarioFormatError(f"node {node} has a time-varying reactive load")
    r_col, x_col = ("r_pu", "x_pu") if grid.impedance_unit == "pu" else ("r_ohm", "x_ohm")
    branches = range(1, grid.node_count)
    frame = pd.DataFrame(
        {
            "branch": list(branches),
            "from_node": [k - 1 for k in branches],
            "to_node": list(branches),
            r_col: [repr(float(v)) for v in grid.resistance],
            x_col: [repr(float(v)) for v in grid.reactance],
            "q_load_kvar": [repr(float(grid.reactive_load[k][0])) for k in branches],
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")


# Synthetic daily profiles, keyed by clock hour of the slot midpoint.


def tou_prices(hours: np.ndarray, peak: float = 0.32, off_peak: float = 0.20) -> np.ndarray:
    hours = np.floor(hours)
    return np.where((hours >= 14) & (hours < 20), peak, off_peak)


def outdoor_temperature(hours: np.ndarray) -> np.ndarray:
    return 27.0 + 5.0 * np.cos(2.0 * np.pi * (hours - 15.0) / 24.0)


def building_load(hours: np.ndarray, scale: float, rng) -> np.ndarray:
    shape = (
        0.35
        + 0.45 * np.exp(-((circular_hour_distance(hours, 19.0) / 3.0) ** 2))
        + 0.20 * np.exp(-((circular_hour_distance(hours, 8.0) / 2.0) ** 2))
    )
    noise = 1.0 + 0.05 * rng.standard_normal(hours.size)
    return np.round(np.maximum(shape * scale * noise, 0.0), 4)


def pv_output(hours: np.ndarray, peak: float, rng) -> np.ndarray:
    weather = rng.uniform(0.7, 1.0)
    shape = np.maximum(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0)
    shape = np.where((hours >= 6.0) & (hours <= 18.0), shape, 0.0)
    noise = 1.0 + 0.05 * rng.standard_normal(hours.size)
    return np.round(np.maximum(peak * weather * shape * noise, 0.0), 4)


def wholesale_prices(hours: np.ndarray, rng, ceiling: float = 0.18) -> np.ndarray:
    base = 0.06 + 0.08 * np.exp(-((circular_hour_distance(hours, 18.0) / 2.5) ** 2))
    noise = 0.01 * rng.standard_normal(hours.size)
    return np.round(np.clip(base + noise, 0.01, ceiling), 4)


def community_caps(
    fleet: Sequence[EvSpec], load: Sequence[float], hvac_max: float
) -> Dict[str, float]:
    discharge = float(sum(ev.discharge_limit for ev in fleet))
    charge = float(sum(ev.charge_limit for ev in fleet))
    grid_cap = float(math.ceil(1.2 * (max(load, default=0.0) + hvac_max + charge)))
    return {
        "grid_import_cap": grid_cap,
        "trade_buy_cap": grid_cap,
        "trade_sell_cap": discharge,
        "v2b_cap": discharge,
        "v2g_cap": discharge,
    }


def big_m_for(communities: Sequence[CommunitySpec], grid: GridModel) -> float:
    caps = [FLOW_LIMIT_KW]
    for c in communities:
        caps += [c.grid_import_cap, c.trade_buy_cap, c.trade_sell_cap, c.v2g_cap, c.v2b_cap]
    caps += [abs(v) for v in grid.flow_min + grid.flow_max]
    return BIG_M_FACTOR * max(caps)


def default_scenario(
    evs_per_community: int = 50,
    seed: int = 0,
    tariff_kind: TariffKind = TariffKind.tou,
    *,
    nodes: Sequence[int] = DEFAULT_NODES,
    horizon: int = 24,
    start_hour: int = 12,
    v2g_prices: Optional[Sequence[float]] = None,
    peak_scope: PeakScope = PeakScope.community,
    fleet: Optional[FleetParams] = None,
    name: Optional[str] = None,
) -> Scenario:
    """
    Six residential communities on the IEEE 33-bus feeder with summer
    cooling, TOU or two-part retail prices and wholesale-like V2G prices.
    """
    fleet = fleet or FleetParams(horizon=horizon, start_hour=start_hour)
    rng = np.random.default_rng(seed)
    hours = clock_hours(horizon, start_hour) + 0.5
    grid = load_feeder(
        bundled_feeder_path(), horizon, reactive_load_scale=REACTIVE_LOAD_SCALE
    )
    if v2g_prices is None:
        v2g_prices = wholesale_prices(hours, rng)
    scale = max(evs_per_community, 1)
    communities = []
    histories = []
    for node in nodes:
        fleet_seed, history_seed = (int(s) for s in rng.integers(0, 2**31, size=2))
        evs = generate_ev_fleet(
            evs_per_community, fleet, fleet_seed, community_id=node, id_prefix=f"c{node:02d}-ev"
        )
        load = building_load(hours, 0.5 * scale, rng)
        pv = pv_output(hours, 0.4 * scale, rng)
        building = BuildingSpec(
            inflexible_load=tuple(float(v) for v in load),
            outdoor_temp=tuple(float(v) for v in outdoor_temperature(hours)),
        )
        communities.append(
            CommunitySpec(
                node_id=node,
                building=building,
                fleet=evs,
                pv_available=tuple(float(v) for v in pv),
                **community_caps(evs, load, building.hvac_max),
            )
        )
        history_fleet = generate_ev_fleet(evs_per_community, fleet, history_seed, node)
        histories.append(
            DayHistory(
                load=tuple(float(v) for v in building_load(hours, 0.5 * scale, rng)),
                pv=tuple(float(v) for v in pv_output(hours, 0.4 * scale, rng)),
                arrivals=tuple(int(v) for v in arrival_counts(history_fleet, horizon)),
            )
        )
    tariff = Tariff(
        kind=tariff_kind,
        v2g_prices=tuple(float(p) for p in v2g_prices),
        tou_prices=tuple(float(p) for p in tou_prices(hours)),
        market="synthetic",
    )
    communities = tuple(communities)
    return Scenario(
        horizon=horizon,
        communities=communities,
        grid=grid,
        tariff=tariff,
        big_m=big_m_for(communities, grid),
        rng_seed=seed,
        start_hour=start_hour,
        peak_scope=peak_scope,
        name=name or f"ieee33-{evs_per_community}ev-{tariff_kind.name}-s{seed}",
        history=tuple(histories),
    )


def validate_scenario(s: Scenario) -> List[Violation]:
    """Every broken invariant of s as a Violation; empty when s is usable."""
    found: List[Violation] = []

    def fail(code, message, reference="", magnitude=0.0):
        found.append(Violation(code, message, reference, float(magnitude)))

    H = s.horizon
    if H < 1:
        fail("scenario.horizon", f"horizon {H} must be at least 1")
        return found
    if s.slot_duration <= 0:
        fail("scenario.slot_duration", "slot duration must be positive")
    if s.battery_degradation_coeff < 0:
        fail("scenario.degradation", "battery degradation coefficient must be nonnegative")
    if s.big_m <= 0:
        fail("scenario.big_m", "big M must be positive", "Big-M sizing")

    found.extend(validate_grid(s.grid, H))

    tariff = s.tariff
    if len(tariff.v2g_prices) < H:
        fail("tariff.v2g_prices", f"{len(tariff.v2g_prices)} V2G prices for {H} slots")
    if tariff.kind is TariffKind.tou and len(tariff.tou_prices) < H:
        fail("tariff.tou_prices", f"{len(tariff.tou_prices)} TOU prices for {H} slots")
    all_prices = list(tariff.v2g_prices) + list(tariff.tou_prices)
    all_prices += [tariff.tpt_energy_price, tariff.tpt_peak_price]
    if any(p < 0 for p in all_prices):
        fail("tariff.negative", "prices must be nonnegative")

    seen_nodes = set()
    seen_evs: Dict[str, int] = {}
    for c in s.communities:
        where = f"community {c.node_id}"
        if not 1 <= c.node_id < s.grid.node_count:
            fail("community.node", f"{where} is not a load node of the feeder")
        if c.node_id in seen_nodes:
            fail("community.node", f"{where} appears twice")
        seen_nodes.add(c.node_id)
        caps = {
            "grid_import_cap": c.grid_import_cap,
            "trade_buy_cap": c.trade_buy_cap,
            "trade_sell_cap": c.trade_sell_cap,
            "v2b_cap": c.v2b_cap,
            "v2g_cap": c.v2g_cap,
        }
        for cap_name, value in caps.items():
            if value < 0:
                fail("community.cap", f"{where} {cap_name} is negative")
        largest = max(caps.values())
        if s.big_m < largest:
            fail(
                "scenario.big_m",
                f"big M {s.big_m} is below the {where} cap {largest}",
                "Big-M sizing",
                largest - s.big_m,
            )
        b = c.building
        if len(b.inflexible_load) != H or len(b.outdoor_temp) != H or len(c.pv_available) != H:
            fail("community.series", f"{where} series do not cover {H} slots")
        if min(b.inflexible_load, default=0.0) < 0 or min(c.pv_available, default=0.0) < 0:
            fail("community.series", f"{where} has negative load or PV")
        if not b.temp_min <= b.preferred_temp <= b.temp_max:
            fail("building.temperature", f"{where} preferred temperature outside its bounds", "comfort band")
        if not b.temp_min <= b.initial_indoor_temp <= b.temp_max:
            fail("building.temperature", f"{where} initial temperature outside its bounds", "comfort band")
        if b.hvac_min > b.hvac_max or b.hvac_min < 0:
            fail("building.hvac", f"{where} HVAC limits are inconsistent", "HVAC power limits")
        if b.heat_capacity <= 0 or b.thermal_resistance <= 0:
            fail("building.thermal", f"{where} needs positive heat capacity and resistance", "thermal dynamics")
        if b.discomfort_coeff < 0:
            fail("building.discomfort", f"{where} discomfort coefficient is negative")
        for ev in c.fleet:
            if ev.id in seen_evs:
                fail("fleet.partition", f"EV {ev.id} belongs to communities {seen_evs[ev.id]} and {c.node_id}")
            seen_evs[ev.id] = c.node_id
            found.extend(_validate_ev(ev, c.node_id, H))

    if s.history is not None:
        if len(s.history) != len(s.communities):
            fail("history.count", f"{len(s.history)} history records for {len(s.communities)} communities")
        for c, h in zip(s.communities, s.history):
            if len(h.load) < H or len(h.pv) < H or len(h.arrivals) < H:
                fail("history.length", f"community {c.node_id} history is shorter than {H} slots")
    return found


def _validate_ev(ev: EvSpec, node_id: int, horizon: int) -> List[Violation]:
    found = []
    where = f"EV {ev.id}"
    if ev.community_id != node_id:
        found.append(Violation("ev.community", f"{where} names community {ev.community_id} but sits in {node_id}"))
    if not 1 <= ev.arrival_slot < ev.departure_slot <= horizon:
        found.append(
            Violation(
                "ev.session",
                f"{where} session {ev.arrival_slot}..{ev.departure_slot} is not inside 1..{horizon}",
                "parking session",
            )
        )
    if not ev.capacity_lower <= ev.initial_energy <= ev.capacity_upper:
        found.append(
            Violation("ev.initial_energy", f"{where} initial energy {ev.initial_energy} outside its bounds", "battery energy bounds")
        )
    if ev.desired_energy > ev.capacity_upper:
        found.append(
            Violation(
                "ev.desired_energy",
                f"{where} desired energy {ev.desired_energy} exceeds capacity {ev.capacity_upper}",
                "battery energy bounds",
                ev.desired_energy - ev.capacity_upper,
            )
        )
    if ev.desired_energy < ev.capacity_lower:
        found.append(
            Violation("ev.desired_energy", f"{where} desired energy below the lower bound", "battery energy bounds")
        )
    if ev.charge_limit < 0 or ev.discharge_limit < 0:
        found.append(Violation("ev.power_limit", f"{where} has a negative power limit"))
    if not 0 <= ev.charge_eff <= 1 or not 0 < ev.discharge_eff <= 1:
        found.append(Violation("ev.efficiency", f"{where} efficiencies outside their ranges"))
    return found


# JSON document.


def _record(obj, skip=()) -> Dict[str, Any]:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _uniform(values: Sequence[float]):
    values = list(values)
    if values and all(v == values[0] for v in values):
        return values[0]
    return values


def scenario_to_dict(
    s: Scenario, prices_ref: Optional[str] = PRICE_FILE, feeder_ref: Optional[str] = FEEDER_FILE
) -> Dict[str, Any]:
    """
    The JSON document of s. With a reference set to None the referenced
    data is embedded instead.
    """
    grid = s.grid
    tariff = {
        "kind": s.tariff.kind.name,
        "tou_prices": list(s.tariff.tou_prices),
        "tpt_energy_price": s.tariff.tpt_energy_price,
        "tpt_peak_price": s.tariff.tpt_peak_price,
        "market": s.tariff.market,
        "v2g_prices": prices_ref if prices_ref else list(s.tariff.v2g_prices),
    }
    grid_doc = {
        "feeder": feeder_ref
        if feeder_ref
        else {
            "resistance": list(grid.resistance),
            "reactance": list(grid.reactance),
            "reactive_load": [list(row) for row in grid.reactive_load],
        },
        "voltage_min": _uniform(grid.voltage_min),
        "voltage_max": _uniform(grid.voltage_max),
        "flow_min": _uniform(grid.flow_min),
        "flow_max": _uniform(grid.flow_max),
        "reactive_min": _uniform(grid.reactive_min),
        "reactive_max": _uniform(grid.reactive_max),
        "slack_voltage": _uniform(grid.slack_voltage),
        "base_kva": grid.base_kva,
        "base_kv": grid.base_kv,
        "impedance_unit": grid.impedance_unit,
    }
    communities = []
    for index, c in enumerate(s.communities):
        doc = _record(c, skip=("building", "fleet"))
        doc["building"] = _record(c.building)
        doc["fleet"] = [_record(ev) for ev in c.fleet]
        if s.history is not None:
            doc["history"] = _record(s.history[index])
        communities.append(doc)
    return {
        "schema": SCHEMA,
        "name": s.name,
        "horizon": s.horizon,
        "slot_duration": s.slot_duration,
        "start_hour": s.start_hour,
        "currency": s.currency,
        "rng_seed": s.rng_seed,
        "big_m": s.big_m,
        "battery_degradation_coeff": s.battery_degradation_coeff,
        "peak_scope": s.peak_scope.name,
        "tariff": tariff,
        "grid": grid_doc,
        "communities": communities,
    }


def scenario_hash(s: Scenario) -> str:
    """Stable 12-hex identifier over the full scenario content."""
    return stable_hash(scenario_to_dict(s, prices_ref=None, feeder_ref=None))


def dump_scenario(s: Scenario, path: str):
    """Write the JSON document plus its price and feeder CSVs next to it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    write_price_series(
        price_series_for_day(s.tariff.v2g_prices, s.start_hour, s.tariff.market),
        os.path.join(directory, PRICE_FILE),
    )
    write_feeder(s.grid, os.path.join(directory, FEEDER_FILE))
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(scenario_to_dict(s), stream, indent=2)
        stream.write("\n")
    logger.info("wrote scenario %s (%s)", path, scenario_hash(s))


def _take(doc: Dict[str, Any], key: str, where: str):
    try:
        return doc[key]
    except KeyError:
        raise ScenarioFormatError(f"{where} is missing '{key}'") from None


def _build(cls, doc: Dict[str, Any], where: str, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known - set(overrides)
    if unknown:
        raise ScenarioFormatError(f"{where} has unknown fields {sorted(unknown)}")
    values = {}
    for key, value in doc.items():
        if key in overrides:
            continue
        values[key] = tuple(value) if isinstance(value, list) else value
    values.update(overrides)
    try:
        return cls(**values)
    except TypeError as err:
        raise ScenarioFormatError(f"{where}: {err}") from err


def _expand(value, count: int) -> Tuple[float, ...]:
    if isinstance(value, list):
        if len(value) != count:
            raise ScenarioFormatError(f"expected {count} values, found {len(value)}")
        return tuple(float(v) for v in value)
    return tuple(float(value) for _ in range(count))


def _load_grid(doc: Dict[str, Any], horizon: int, directory: str) -> GridModel:
    feeder = _take(doc, "feeder", "grid")
    if isinstance(feeder, str):
        base = load_feeder(os.path.join(directory, feeder), horizon)
        resistance, reactance = base.resistance, base.reactance
        reactive_load = base.reactive_load
        unit = base.impedance_unit
    else:
        resistance = tuple(float(v) for v in _take(feeder, "resistance", "grid.feeder"))
        reactance = tuple(float(v) for v in _take(feeder, "reactance", "grid.feeder"))
        reactive_load = tuple(
            tuple(float(v) for v in row) for row in _take(feeder, "reactive_load", "grid.feeder")
        )
        unit = doc.get("impedance_unit", "ohm")
    nodes = len(resistance) + 1
    branches = nodes - 1
    return GridModel(
        node_count=nodes,
        resistance=resistance,
        reactance=reactance,
        reactive_load=reactive_load,
        voltage_min=_expand(doc.get("voltage_min", 0.95), nodes),
        voltage_max=_expand(doc.get("voltage_max", 1.05), nodes),
        flow_min=_expand(doc.get("flow_min", -FLOW_LIMIT_KW), branches),
        flow_max=_expand(doc.get("flow_max", FLOW_LIMIT_KW), branches),
        reactive_min=_expand(doc.get("reactive_min", -REACTIVE_LIMIT_KVAR), branches),
        reactive_max=_expand(doc.get("reactive_max", REACTIVE_LIMIT_KVAR), branches),
        slack_voltage=_expand(doc.get("slack_voltage", 1.0), horizon),
        base_kva=float(doc.get("base_kva", 10_000.0)),
        base_kv=float(doc.get("base_kv", 12.66)),
        impedance_unit=unit,
    )


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as stream:
        try:
            doc = json.load(stream)
        except json.JSONDecodeError as err:
            raise ScenarioFormatError(f"{path}: {err}") from err
    return scenario_from_dict(doc, os.path.dirname(os.path.abspath(path)))


def scenario_from_dict(doc: Dict[str, Any], directory: str = ".") -> Scenario:
    if doc.get("schema") != SCHEMA:
        raise ScenarioFormatError(f"unsupported schema {doc.get('schema')!r}, expected {SCHEMA}")
    horizon = int(_take(doc, "horizon", "scenario"))
    start_hour = int(doc.get("start_hour", 0))

    tariff_doc = dict(_take(doc, "tariff", "scenario"))
    v2g = _take(tariff_doc, "v2g_prices", "tariff")
    if isinstance(v2g, str):
        series = load_price_series(os.path.join(directory, v2g), tariff_doc.get("market", ""))
        v2g = series.window(start_hour, horizon)
    try:
        kind = TariffKind[tariff_doc.get("kind", "tou")]
        peak_scope = PeakScope[doc.get("peak_scope", "community")]
    except KeyError as err:
        raise ScenarioFormatError(f"unknown enumeration value {err}") from None
    tariff = _build(Tariff, tariff_doc, "tariff", kind=kind, v2g_prices=tuple(float(p) for p in v2g))

    grid = _load_grid(dict(_take(doc, "grid", "scenario")), horizon, directory)

    communities = []
    histories = []
    for index, c_doc in enumerate(_take(doc, "communities", "scenario")):
        where = f"communities[{index}]"
        c_doc = dict(c_doc)
        building = _build(BuildingSpec, _take(c_doc, "building", where), f"{where}.building")
        fleet = tuple(
            _build(EvSpec, ev, f"{where}.fleet[{k}]") for k, ev in enumerate(c_doc.get("fleet", []))
        )
        history = c_doc.pop("history", None)
        if history is not None:
            histories.append(_build(DayHistory, history, f"{where}.history"))
        communities.append(_build(CommunitySpec, c_doc, where, building=building, fleet=fleet))

    if histories and len(histories) != len(communities):
        raise ScenarioFormatError("history must be given for every community or none")
    return Scenario(
        horizon=horizon,
        communities=tuple(communities),
        grid=grid,
        tariff=tariff,
        big_m=float(_take(doc, "big_m", "scenario")),
        slot_duration=float(doc.get("slot_duration", 1.0)),
        battery_degradation_coeff=float(doc.get("battery_degradation_coeff", 0.01)),
        rng_seed=int(doc.get("rng_seed", 0)),
        start_hour=start_hour,
        currency=doc.get("currency", "AUD"),
        peak_scope=peak_scope,
        name=doc.get("name", "scenario"),
        history=tuple(histories) if histories else None,
    )
