"""
The value-stacking scheduling model.

build_model turns a scenario, the realized state and a window of slots into a
MixedIntegerQP. Every community c and window slot t carries

    grid      import from the retailer (kW)
    renew     local PV used (kW, at most the PV available)
    hvac      HVAC power (kW) and indoor_temp (degC at the end of the slot)
    v2b       EV power serving the building, min(ev_export+, demand)
    v2g       EV power sold to the wholesale market
    sell/buy  local trade with other communities
    ev_export net EV discharge of the parking lot
    export    community net export, ev_export - (load + hvac - renew)
    y         1 when the community exports, 0 when it imports

and every parked EV carries charge, discharge, a charge/discharge mode
binary and its stored energy. Exports go to v2g or sell, imports come from
grid or buy; y switches between the two regimes with big-M rows.

Disabled value streams have their variables bounded to zero, so each
restricted mode's feasible set is contained in full stacking's.
"""

from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from v2x_stack.forecast import ForecastBundle, truth_bundle
from v2x_stack.network import DistFlowBlock, FlowState, build_distflow_block, check_solution
from v2x_stack.solver.builder import ProblemBuilder
from v2x_stack.solver.miqp import BinaryInfo, MixedIntegerQP
from v2x_stack.types import (
    EvSpec,
    PeakScope,
    Scenario,
    StackingMode,
    Stream,
    Tariff,
    TariffKind,
    Violation,
)

logger = logging.getLogger(__name__)

SHORTFALL_PENALTY = 10.0
REGIME_TOLERANCE = 1e-6

# Recourse levels applied by the rolling loop when a slot cannot be solved.
RECOURSE_NONE = 0
RECOURSE_NO_EXPORT = 1
RECOURSE_BEST_EFFORT = 2


class ModelInfeasibleError(ValueError):
    """Terminal energy of the named EVs cannot be reached inside the window."""

    def __init__(self, message: str, ev_ids: Sequence[str]):
        super().__init__(message)
        self.ev_ids = tuple(ev_ids)


def battery_step(
    b_prev: float, p_c: float, p_d: float, mu: float, eta: float, dt: float = 1.0
) -> float:
    """Stored energy after one slot of charging at p_c and discharging at p_d."""
    if p_c < 0 or p_d < 0:
        raise ValueError(f"Charge and discharge power must be nonnegative, got {p_c} and {p_d}.")
    if eta <= 0:
        raise ValueError("Discharge efficiency must be positive.")
    return b_prev + mu * p_c * dt - p_d * dt / eta


def thermal_step(
    t_prev: float,
    t_out: float,
    p_ac: float,
    mode: float,
    heat_capacity: float,
    thermal_resistance: float,
    dt: float = 1.0,
) -> float:
    """Indoor temperature after one slot; mode is +1 for cooling, -1 for heating."""
    if heat_capacity <= 0 or thermal_resistance <= 0:
        raise ValueError("Heat capacity and thermal resistance must be positive.")
    a = 1.0 / (heat_capacity * thermal_resistance)
    return t_prev - a * (t_prev - t_out + mode * thermal_resistance * p_ac * dt)


def mid_market_price(buy: float, sell: float) -> float:
    if sell > buy:
        raise ValueError(f"Selling price {sell} exceeds buying price {buy}.")
    if sell < 0:
        raise ValueError("Prices must be nonnegative.")
    return (buy + sell) / 2.0


def tariff_cost(
    grid_profile,
    tariff: Tariff,
    realized_peak_so_far=0.0,
    slot_duration: float = 1.0,
    slots: Optional[Sequence[int]] = None,
) -> float:
    """
    Retail cost of an import profile (communities x slots, kWh per slot).

    Under the two-part tariff every community pays for its own peak, which is
    at least realized_peak_so_far (scalar or one value per community).
    """
    profile = np.atleast_2d(np.asarray(grid_profile, dtype=float))
    if np.any(profile < 0):
        raise ValueError("Import profile must be nonnegative.")
    if slots is None:
        slots = range(1, profile.shape[1] + 1)
    slots = list(slots)
    if len(slots) != profile.shape[1]:
        raise ValueError(f"{len(slots)} slots for a profile of {profile.shape[1]} columns.")
    if tariff.kind is TariffKind.tou:
        if max(slots, default=0) > len(tariff.tou_prices):
            raise ValueError("TOU prices do not cover every slot of the profile.")
        prices = np.array([tariff.tou_prices[t - 1] for t in slots])
        return float(np.sum(profile * prices))
    energy = tariff.tpt_energy_price * float(profile.sum())
    peaks = np.maximum(
        profile.max(axis=1, initial=0.0) / slot_duration,
        np.broadcast_to(np.asarray(realized_peak_so_far, dtype=float), profile.shape[:1]),
    )
    return energy + tariff.tpt_peak_price * float(peaks.sum())


def enabled_streams(mode: StackingMode, recourse: int = RECOURSE_NONE) -> frozenset:
    if recourse >= RECOURSE_NO_EXPORT:
        return mode.streams & frozenset((Stream.v2b,))
    return mode.streams


@dataclass(frozen=True)
class DayState:
    """
    Realized state at the start of a slot: EV energy of every EV that has
    already arrived, indoor temperature per community and the import peak
    so far (one entry per community, or a single system entry).
    """

    energy: Mapping[str, float]
    indoor_temp: Tuple[float, ...]
    peak: Tuple[float, ...]

    @classmethod
    def initial(cls, scenario: Scenario) -> "DayState":
        peaks = 1 if scenario.peak_scope is PeakScope.system else len(scenario.communities)
        return cls(
            energy={},
            indoor_temp=tuple(c.building.initial_indoor_temp for c in scenario.communities),
            peak=tuple(0.0 for _ in range(peaks)),
        )

    def energy_of(self, ev: EvSpec) -> float:
        return float(self.energy.get(ev.id, ev.initial_energy))


@dataclass(frozen=True, eq=False)
class ModelLayout:
    """Variable indices of one built model; -1 marks a slot without a variable."""

    window: Tuple[int, ...]
    node_ids: Tuple[int, ...]
    fleet: Tuple[EvSpec, ...]
    ev_nodes: Tuple[int, ...]
    mode: StackingMode
    recourse: int
    load: np.ndarray
    pv: np.ndarray
    charge: np.ndarray
    discharge: np.ndarray
    mode_binary: np.ndarray
    energy: np.ndarray
    shortfall: np.ndarray
    excess: np.ndarray
    grid: np.ndarray
    renew: np.ndarray
    hvac: np.ndarray
    indoor_temp: np.ndarray
    v2b: np.ndarray
    v2g: np.ndarray
    trade_sell: np.ndarray
    trade_buy: np.ndarray
    ev_export: np.ndarray
    community_export: np.ndarray
    direction: np.ndarray
    peak: np.ndarray
    network: DistFlowBlock


_EV_FIELDS = ("charge", "discharge", "mode", "energy")
_COMMUNITY_FIELDS = (
    "grid",
    "renew",
    "hvac",
    "indoor_temp",
    "v2b",
    "v2g",
    "trade_sell",
    "trade_buy",
    "ev_export",
    "community_export",
    "direction",
    "load",
    "pv",
)


@dataclass(frozen=True, eq=False)
class DecisionSet:
    """
    Numeric decisions over a window. EV arrays are (EVs x slots), community
    arrays (communities x slots). energy is NaN while an EV is absent.
    load and pv are the data the decisions were taken against.
    """

    window: Tuple[int, ...]
    node_ids: Tuple[int, ...]
    ev_ids: Tuple[str, ...]
    ev_nodes: Tuple[int, ...]
    charge: np.ndarray
    discharge: np.ndarray
    mode: np.ndarray
    energy: np.ndarray
    grid: np.ndarray
    renew: np.ndarray
    hvac: np.ndarray
    indoor_temp: np.ndarray
    v2b: np.ndarray
    v2g: np.ndarray
    trade_sell: np.ndarray
    trade_buy: np.ndarray
    ev_export: np.ndarray
    community_export: np.ndarray
    direction: np.ndarray
    load: np.ndarray
    pv: np.ndarray
    flows: Optional[FlowState] = None

    @property
    def building_demand(self) -> np.ndarray:
        """Building demand net of local PV."""
        return self.load + self.hvac - self.renew

    def column(self, slot: int) -> int:
        return self.window.index(slot)

    def take(self, slot: int) -> "DecisionSet":
        """Decisions of one slot."""
        j = self.column(slot)
        values = {name: getattr(self, name)[:, j : j + 1].copy() for name in _EV_FIELDS + _COMMUNITY_FIELDS}
        flows = None
        if self.flows is not None:
            flows = FlowState(
                self.flows.active_flow[:, j : j + 1],
                self.flows.reactive_flow[:, j : j + 1],
                self.flows.voltage[:, j : j + 1],
            )
        return DecisionSet(
            window=(slot,),
            node_ids=self.node_ids,
            ev_ids=self.ev_ids,
            ev_nodes=self.ev_nodes,
            flows=flows,
            **values,
        )

    @staticmethod
    def concat(
        parts: Sequence["DecisionSet"], ev_ids: Sequence[str], ev_nodes: Sequence[int]
    ) -> "DecisionSet":
        """Join consecutive decision sets over a common EV list."""
        if not parts:
            raise ValueError("Nothing to concatenate.")
        ev_ids = tuple(ev_ids)
        columns: Dict[str, list] = {name: [] for name in _EV_FIELDS + _COMMUNITY_FIELDS}
        for part in parts:
            rows = {ev_id: k for k, ev_id in enumerate(part.ev_ids)}
            width = len(part.window)
            for name in _EV_FIELDS:
                fill = np.nan if name == "energy" else 0.0
                block = np.full((len(ev_ids), width), fill)
                source = getattr(part, name)
                for u, ev_id in enumerate(ev_ids):
                    if ev_id in rows:
                        block[u] = source[rows[ev_id]]
                columns[name].append(block)
            for name in _COMMUNITY_FIELDS:
                columns[name].append(getattr(part, name))
        flows = None
        if all(part.flows is not None for part in parts):
            flows = FlowState(
                np.hstack([p.flows.active_flow for p in parts]),
                np.hstack([p.flows.reactive_flow for p in parts]),
                np.hstack([p.flows.voltage for p in parts]),
            )
        window = tuple(t for part in parts for t in part.window)
        return DecisionSet(
            window=window,
            node_ids=parts[0].node_ids,
            ev_ids=ev_ids,
            ev_nodes=tuple(ev_nodes),
            flows=flows,
            **{
                name: np.hstack(blocks)
                for name, blocks in columns.items()
            },
        )

    def to_frame(self) -> pd.DataFrame:
        """One row per entity per slot."""
        rows = []
        for j, slot in enumerate(self.window):
            for u, ev_id in enumerate(self.ev_ids):
                row = {"slot": slot, "entity": "ev", "id": ev_id, "node": self.ev_nodes[u]}
                row.update({name: float(getattr(self, name)[u, j]) for name in _EV_FIELDS})
                rows.append(row)
            for i, node in enumerate(self.node_ids):
                row = {"slot": slot, "entity": "community", "id": str(node), "node": node}
                row.update({name: float(getattr(self, name)[i, j]) for name in _COMMUNITY_FIELDS})
                rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class CostBreakdown:
    """
    Cost components in the scenario currency.

    total = grid + battery + discomfort - v2g_revenue. trade_settlement is
    the net payment for local trades at the mid-market price and sums to
    zero over all communities; it is reported but not part of total.
    """

    grid: float = 0.0
    battery: float = 0.0
    discomfort: float = 0.0
    v2g_revenue: float = 0.0
    total: float = 0.0
    trade_settlement: float = 0.0
    grid_energy: float = 0.0
    hvac_energy: float = 0.0

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            *(getattr(self, f.name) + getattr(other, f.name) for f in fields(self))
        )

    @classmethod
    def of(cls, grid, battery, discomfort, v2g_revenue, trade_settlement=0.0, grid_energy=0.0, hvac_energy=0.0):
        return cls(
            grid=grid,
            battery=battery,
            discomfort=discomfort,
            v2g_revenue=v2g_revenue,
            total=grid + battery + discomfort - v2g_revenue,
            trade_settlement=trade_settlement,
            grid_energy=grid_energy,
            hvac_energy=hvac_energy,
        )

    def identity_error(self) -> float:
        return abs(self.total - (self.grid + self.battery + self.discomfort - self.v2g_revenue))


def _check_window(scenario: Scenario, window: Sequence[int]) -> Tuple[int, ...]:
    window = tuple(int(t) for t in window)
    if not window:
        raise ValueError("The window contains no slots.")
    if window != tuple(range(window[0], window[0] + len(window))):
        raise ValueError(f"Window {window} is not a contiguous slot range.")
    if window[0] < 1 or window[-1] > scenario.horizon:
        raise ValueError(f"Window {window[0]}..{window[-1]} leaves 1..{scenario.horizon}.")
    return window


def planning_fleet(fleet: Iterable[EvSpec], window: Sequence[int]) -> Tuple[EvSpec, ...]:
    """EVs parked at some slot of window."""
    return tuple(ev for ev in fleet if ev.departure_slot >= window[0] and ev.arrival_slot <= window[-1])


def _present_slots(ev: EvSpec, window: Sequence[int]) -> List[int]:
    return [j for j, t in enumerate(window) if ev.present(t)]


def unreachable_evs(
    fleet: Sequence[EvSpec],
    state: DayState,
    window: Sequence[int],
    slot_duration: float,
    discharge_allowed: bool = True,
) -> List[str]:
    """EVs whose desired departure energy no schedule inside window can reach."""
    found = []
    for ev in fleet:
        if ev.departure_slot > window[-1]:
            continue
        start = state.energy_of(ev) if ev.arrival_slot < window[0] else ev.initial_energy
        slots = len(_present_slots(ev, window))
        highest = min(ev.capacity_upper, start + ev.charge_eff * ev.charge_limit * slot_duration * slots)
        lowest = start
        if discharge_allowed:
            lowest = start - ev.discharge_limit * slot_duration * slots / ev.discharge_eff
        lowest = max(ev.capacity_lower, lowest)
        if ev.desired_energy > highest + 1e-9 or ev.desired_energy < lowest - 1e-9:
            found.append(ev.id)
    return found


def _window_data(bundle: ForecastBundle, window: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    columns = [t - 1 for t in window]
    load = np.asarray(bundle.load, dtype=float)
    pv = np.asarray(bundle.pv, dtype=float)
    if load.shape[1] < window[-1] or pv.shape[1] < window[-1]:
        raise ValueError(f"Forecasts cover {load.shape[1]} slots, the window needs {window[-1]}.")
    return load[:, columns], pv[:, columns]


def build_model(
    scenario: Scenario,
    state: DayState,
    window: Sequence[int],
    mode: StackingMode,
    forecasts: Optional[ForecastBundle] = None,
    *,
    recourse: int = RECOURSE_NONE,
) -> MixedIntegerQP:
    """
    The scheduling MIQP of window given the realized state.

    forecasts supplies load, PV and the EV records to plan with; slot data
    the caller has already realized should be merged into it. With recourse
    level 1, V2G and trading are disabled; level 2 also turns every terminal
    energy requirement into a penalized target.
    """
    window = _check_window(scenario, window)
    bundle = forecasts if forecasts is not None else truth_bundle(scenario)
    load, pv = _window_data(bundle, window)
    dt = scenario.slot_duration
    W = len(window)
    N = len(scenario.communities)
    node_index = {node: i for i, node in enumerate(scenario.node_ids)}
    streams = enabled_streams(mode, recourse)
    soft_terminal = recourse >= RECOURSE_BEST_EFFORT
    fleet = planning_fleet(bundle.ev_records, window)
    for ev in fleet:
        if ev.community_id not in node_index:
            raise ValueError(f"EV {ev.id} belongs to unknown community {ev.community_id}.")
    if not soft_terminal:
        blocked = unreachable_evs(fleet, state, window, dt, mode.discharge_allowed)
        if blocked:
            raise ModelInfeasibleError(
                f"Departure energy unreachable for EVs {', '.join(blocked)} in slots {window[0]}..{window[-1]}",
                blocked,
            )

    b = ProblemBuilder()
    U = len(fleet)
    charge = np.full((U, W), -1, dtype=int)
    discharge = np.full((U, W), -1, dtype=int)
    x_mode = np.full((U, W), -1, dtype=int)
    energy = np.full((U, W), -1, dtype=int)
    shortfall = np.full(U, -1, dtype=int)
    excess = np.full(U, -1, dtype=int)
    alpha = scenario.battery_degradation_coeff

    for u, ev in enumerate(fleet):
        present = _present_slots(ev, window)
        discharge_cap = ev.discharge_limit if mode.discharge_allowed else 0.0
        for j in range(W):
            on = j in present
            charge[u, j] = b.add_variable(f"pc[{ev.id},{window[j]}]", 0.0, ev.charge_limit if on else 0.0)
            discharge[u, j] = b.add_variable(f"pd[{ev.id},{window[j]}]", 0.0, discharge_cap if on else 0.0)
        previous = None
        for j in present:
            slot = window[j]
            energy[u, j] = b.add_variable(f"b[{ev.id},{slot}]", ev.capacity_lower, ev.capacity_upper)
            x_mode[u, j] = b.add_variable(f"x[{ev.id},{slot}]", 0.0, 1.0)
            b.add_binary(
                x_mode[u, j],
                BinaryInfo(
                    b.names[x_mode[u, j]],
                    kind="mode",
                    community=ev.community_id,
                    ev=ev.id,
                    slot=slot,
                    guide=((int(charge[u, j]), 1.0), (int(discharge[u, j]), -1.0)),
                ),
            )
            terms = [
                (energy[u, j], 1.0),
                (charge[u, j], -ev.charge_eff * dt),
                (discharge[u, j], dt / ev.discharge_eff),
            ]
            if previous is None:
                start = state.energy_of(ev) if ev.arrival_slot < window[0] else ev.initial_energy
                b.add_equality(terms, start, f"battery[{ev.id},{slot}]")
            else:
                b.add_equality(terms + [(previous, -1.0)], 0.0, f"battery[{ev.id},{slot}]")
            previous = energy[u, j]
            b.add_range([(charge[u, j], 1.0), (x_mode[u, j], -ev.charge_limit)], upper=0.0, label=f"charge_mode[{ev.id},{slot}]")
            b.add_range(
                [(discharge[u, j], 1.0), (x_mode[u, j], discharge_cap)],
                upper=discharge_cap,
                label=f"discharge_mode[{ev.id},{slot}]",
            )
            b.add_square(charge[u, j], alpha * dt * dt)
            b.add_square(discharge[u, j], alpha * dt * dt)
            if slot == ev.departure_slot:
                if soft_terminal:
                    shortfall[u] = b.add_variable(f"short[{ev.id}]", 0.0)
                    excess[u] = b.add_variable(f"excess[{ev.id}]", 0.0)
                    b.add_equality(
                        [(energy[u, j], 1.0), (shortfall[u], 1.0), (excess[u], -1.0)],
                        ev.desired_energy,
                        f"terminal[{ev.id}]",
                    )
                    b.add_cost(shortfall[u], SHORTFALL_PENALTY)
                    b.add_cost(excess[u], SHORTFALL_PENALTY)
                else:
                    b.fix(energy[u, j], ev.desired_energy)

    shape = (N, W)
    grid = np.zeros(shape, dtype=int)
    renew = np.zeros(shape, dtype=int)
    hvac = np.zeros(shape, dtype=int)
    temp = np.zeros(shape, dtype=int)
    v2b = np.zeros(shape, dtype=int)
    v2g = np.zeros(shape, dtype=int)
    sell = np.zeros(shape, dtype=int)
    buy = np.zeros(shape, dtype=int)
    ev_export = np.zeros(shape, dtype=int)
    export = np.zeros(shape, dtype=int)
    direction = np.zeros(shape, dtype=int)
    trading = Stream.trading in streams
    tariff = scenario.tariff

    for i, c in enumerate(scenario.communities):
        bld = c.building
        a = 1.0 / (bld.heat_capacity * bld.thermal_resistance)
        members = [u for u, ev in enumerate(fleet) if ev.community_id == c.node_id]
        import_m = min(scenario.big_m, c.grid_import_cap + (c.trade_buy_cap if trading else 0.0))
        export_m = min(
            scenario.big_m,
            (c.v2g_cap if Stream.v2g in streams else 0.0) + (c.trade_sell_cap if trading else 0.0),
        )
        for j, slot in enumerate(window):
            tag = f"{c.node_id},{slot}"
            grid[i, j] = b.add_variable(f"grid[{tag}]", 0.0, c.grid_import_cap)
            renew[i, j] = b.add_variable(f"renew[{tag}]", 0.0, max(pv[i, j], 0.0))
            hvac[i, j] = b.add_variable(f"hvac[{tag}]", bld.hvac_min, bld.hvac_max)
            temp[i, j] = b.add_variable(f"temp[{tag}]", bld.temp_min, bld.temp_max)
            v2b[i, j] = b.add_variable(f"v2b[{tag}]", 0.0, c.v2b_cap if Stream.v2b in streams else 0.0)
            v2g[i, j] = b.add_variable(f"v2g[{tag}]", 0.0, c.v2g_cap if Stream.v2g in streams else 0.0)
            sell[i, j] = b.add_variable(f"sell[{tag}]", 0.0, c.trade_sell_cap if trading else 0.0)
            buy[i, j] = b.add_variable(f"buy[{tag}]", 0.0, c.trade_buy_cap if trading else 0.0)
            ev_export[i, j] = b.add_variable(f"ev_export[{tag}]")
            export[i, j] = b.add_variable(f"export[{tag}]")
            direction[i, j] = b.add_variable(f"y[{tag}]", 0.0, 1.0)
            b.add_binary(
                direction[i, j],
                BinaryInfo(
                    b.names[direction[i, j]],
                    kind="direction",
                    community=c.node_id,
                    slot=slot,
                    guide=(
                        (int(v2g[i, j]), 1.0),
                        (int(sell[i, j]), 1.0),
                        (int(grid[i, j]), -1.0),
                        (int(buy[i, j]), -1.0),
                    ),
                ),
            )
            demand = [(hvac[i, j], 1.0), (renew[i, j], -1.0)]

            ev_terms = [(ev_export[i, j], 1.0)]
            for u in members:
                ev_terms += [(discharge[u, j], -1.0), (charge[u, j], 1.0)]
            b.add_equality(ev_terms, 0.0, f"ev_export[{tag}]")

            thermal = [(temp[i, j], 1.0), (hvac[i, j], a * bld.hvac_mode * bld.thermal_resistance * dt)]
            rhs = a * bld.outdoor_temp[slot - 1]
            if j == 0:
                rhs += (1.0 - a) * state.indoor_temp[i]
            else:
                thermal.append((temp[i, j - 1], -(1.0 - a)))
            b.add_equality(thermal, rhs, f"thermal[{tag}]")

            b.add_range(demand, lower=-load[i, j], label=f"pv_local[{tag}]")
            b.add_equality(
                [(export[i, j], 1.0), (ev_export[i, j], -1.0)] + demand,
                -load[i, j],
                f"export[{tag}]",
            )
            b.add_equality(
                [
                    (export[i, j], 1.0),
                    (v2g[i, j], -1.0),
                    (sell[i, j], -1.0),
                    (grid[i, j], 1.0),
                    (buy[i, j], 1.0),
                ],
                0.0,
                f"supply[{tag}]",
            )
            b.add_range(
                [(grid[i, j], 1.0), (buy[i, j], 1.0), (direction[i, j], import_m)],
                upper=import_m,
                label=f"import_regime[{tag}]",
            )
            b.add_range(
                [(v2g[i, j], 1.0), (sell[i, j], 1.0), (direction[i, j], -export_m)],
                upper=0.0,
                label=f"export_regime[{tag}]",
            )

            demand_m = load[i, j] + bld.hvac_max
            ev_m = sum(fleet[u].discharge_limit for u in members if fleet[u].present(slot))
            b.add_range([(v2b[i, j], 1.0)] + [(k, -v) for k, v in demand], upper=load[i, j], label=f"v2b_demand[{tag}]")
            b.add_range(
                [(v2b[i, j], 1.0)] + [(discharge[u, j], -1.0) for u in members],
                upper=0.0,
                label=f"v2b_discharge[{tag}]",
            )
            b.add_range(
                [(v2b[i, j], 1.0), (direction[i, j], -demand_m)] + [(k, -v) for k, v in demand],
                lower=load[i, j] - demand_m,
                label=f"v2b_surplus[{tag}]",
            )
            b.add_range(
                [(v2b[i, j], 1.0), (ev_export[i, j], -1.0), (direction[i, j], ev_m)],
                lower=0.0,
                label=f"v2b_deficit[{tag}]",
            )

            price = tariff.energy_price(slot)
            b.add_cost(grid[i, j], price * dt)
            b.add_cost(v2g[i, j], -tariff.v2g_prices[slot - 1] * dt)
            b.add_square(temp[i, j], bld.discomfort_coeff, bld.preferred_temp)

    for j, slot in enumerate(window):
        b.add_equality(
            [(sell[i, j], 1.0) for i in range(N)] + [(buy[i, j], -1.0) for i in range(N)],
            0.0,
            f"trade_balance[{slot}]",
        )

    peak = np.zeros(0, dtype=int)
    if tariff.kind is TariffKind.tpt:
        if scenario.peak_scope is PeakScope.system:
            peak = np.array([b.add_variable("peak[system]", state.peak[0])])
            for j, slot in enumerate(window):
                b.add_range(
                    [(grid[i, j], 1.0) for i in range(N)] + [(peak[0], -1.0)],
                    upper=0.0,
                    label=f"peak[{slot}]",
                )
        else:
            peak = np.array(
                [b.add_variable(f"peak[{c.node_id}]", state.peak[i]) for i, c in enumerate(scenario.communities)]
            )
            for i in range(N):
                for j, slot in enumerate(window):
                    b.add_range([(grid[i, j], 1.0), (peak[i], -1.0)], upper=0.0, label=f"peak[{i},{slot}]")
        for index in peak:
            b.add_cost(index, tariff.tpt_peak_price)

    injections = {c.node_id: export[i] for i, c in enumerate(scenario.communities)}
    network = build_distflow_block(b, scenario.grid, injections, window)

    layout = ModelLayout(
        window=window,
        node_ids=scenario.node_ids,
        fleet=fleet,
        ev_nodes=tuple(ev.community_id for ev in fleet),
        mode=mode,
        recourse=recourse,
        load=load,
        pv=pv,
        charge=charge,
        discharge=discharge,
        mode_binary=x_mode,
        energy=energy,
        shortfall=shortfall,
        excess=excess,
        grid=grid,
        renew=renew,
        hvac=hvac,
        indoor_temp=temp,
        v2b=v2b,
        v2g=v2g,
        trade_sell=sell,
        trade_buy=buy,
        ev_export=ev_export,
        community_export=export,
        direction=direction,
        peak=peak,
        network=network,
    )
    model = b.build_mixed(layout)
    logger.debug(
        "model slots %d..%d: %d variables, %d binaries, %d EVs",
        window[0],
        window[-1],
        model.qp.n,
        model.binary_count,
        U,
    )
    return model


def _pick(x: np.ndarray, indices: np.ndarray, fill: float = 0.0) -> np.ndarray:
    out = np.full(indices.shape, fill, dtype=float)
    mask = indices >= 0
    out[mask] = x[indices[mask]]
    return out


def decode(model: MixedIntegerQP, x: np.ndarray) -> DecisionSet:
    """
    Numeric decisions of a solved model.

    Binaries are rounded; power left on the inactive side of a binary by
    solver tolerance is zeroed, and V2B is reported as
    min(ev_export+, demand+).
    """
    L: ModelLayout = model.layout
    x = np.asarray(x, dtype=float)
    charge = np.maximum(_pick(x, L.charge), 0.0)
    discharge = np.maximum(_pick(x, L.discharge), 0.0)
    mode = np.round(_pick(x, L.mode_binary))
    present = L.mode_binary >= 0
    charge[present & (mode == 0)] = 0.0
    discharge[present & (mode == 1)] = 0.0
    energy = _pick(x, L.energy, np.nan)

    direction = np.round(_pick(x, L.direction))
    grid = np.maximum(_pick(x, L.grid), 0.0)
    buy = np.maximum(_pick(x, L.trade_buy), 0.0)
    v2g = np.maximum(_pick(x, L.v2g), 0.0)
    sell = np.maximum(_pick(x, L.trade_sell), 0.0)
    grid[direction == 1] = 0.0
    buy[direction == 1] = 0.0
    v2g[direction == 0] = 0.0
    sell[direction == 0] = 0.0
    renew = np.clip(_pick(x, L.renew), 0.0, np.maximum(L.pv, 0.0))
    hvac = _pick(x, L.hvac)

    node_row = {node: i for i, node in enumerate(L.node_ids)}
    ev_export = np.zeros_like(grid)
    for u, node in enumerate(L.ev_nodes):
        ev_export[node_row[node]] += discharge[u] - charge[u]
    demand = L.load + hvac - renew
    export = ev_export - demand
    v2b = np.minimum(np.maximum(ev_export, 0.0), np.maximum(demand, 0.0))
    v2b = np.where(model.qp.ub[L.v2b] > 0, v2b, 0.0)

    return DecisionSet(
        window=L.window,
        node_ids=L.node_ids,
        ev_ids=tuple(ev.id for ev in L.fleet),
        ev_nodes=L.ev_nodes,
        charge=charge,
        discharge=discharge,
        mode=mode,
        energy=energy,
        grid=grid,
        renew=renew,
        hvac=hvac,
        indoor_temp=_pick(x, L.indoor_temp),
        v2b=v2b,
        v2g=v2g,
        trade_sell=sell,
        trade_buy=buy,
        ev_export=ev_export,
        community_export=export,
        direction=direction,
        load=L.load.copy(),
        pv=L.pv.copy(),
        flows=L.network.state(x),
    )


def terminal_shortfalls(model: MixedIntegerQP, x: np.ndarray) -> Dict[str, float]:
    """Signed kWh missing at departure per EV (soft terminal models only)."""
    L: ModelLayout = model.layout
    out = {}
    for u, ev in enumerate(L.fleet):
        if L.shortfall[u] >= 0:
            gap = float(x[L.shortfall[u]] - x[L.excess[u]])
            if abs(gap) > 1e-6:
                out[ev.id] = gap
    return out


def _peak_count(scenario: Scenario) -> int:
    return 1 if scenario.peak_scope is PeakScope.system else len(scenario.communities)


def _peak_charges(decisions: DecisionSet, scenario: Scenario, peak_so_far) -> Tuple[np.ndarray, np.ndarray]:
    """Peak charge per community and slot, charged when the peak grows."""
    tariff = scenario.tariff
    N, W = decisions.grid.shape
    charges = np.zeros((N, W))
    peak = np.array(peak_so_far if peak_so_far is not None else np.zeros(_peak_count(scenario)), dtype=float)
    if tariff.kind is not TariffKind.tpt:
        return charges, peak
    for j in range(W):
        if scenario.peak_scope is PeakScope.system:
            total = float(decisions.grid[:, j].sum())
            increase = max(0.0, total - peak[0])
            if increase > 0.0 and total > 0.0:
                charges[:, j] = tariff.tpt_peak_price * increase * decisions.grid[:, j] / total
            peak[0] = max(peak[0], total)
        else:
            increase = np.maximum(decisions.grid[:, j] - peak, 0.0)
            charges[:, j] = tariff.tpt_peak_price * increase
            peak = np.maximum(peak, decisions.grid[:, j])
    return charges, peak


def advance_peak(decisions: DecisionSet, scenario: Scenario, peak_so_far) -> Tuple[float, ...]:
    return tuple(float(p) for p in _peak_charges(decisions, scenario, peak_so_far)[1])


def evaluate_community_costs(
    decisions: DecisionSet, scenario: Scenario, peak_so_far=None
) -> List[CostBreakdown]:
    """
    Cost of each community over the decision window, recomputed from the
    decisions themselves. Peak charges are billed as increments above
    peak_so_far.
    """
    tariff = scenario.tariff
    dt = scenario.slot_duration
    alpha = scenario.battery_degradation_coeff
    peak_charges, _ = _peak_charges(decisions, scenario, peak_so_far)
    row = {node: i for i, node in enumerate(decisions.node_ids)}
    battery = np.zeros_like(decisions.grid)
    for u, node in enumerate(decisions.ev_nodes):
        battery[row[node]] += alpha * dt * dt * (decisions.charge[u] ** 2 + decisions.discharge[u] ** 2)
    out = []
    for i, c in enumerate(scenario.communities):
        bld = c.building
        grid_cost = v2g_revenue = discomfort = settlement = 0.0
        for j, slot in enumerate(decisions.window):
            energy_price = tariff.energy_price(slot)
            v2g_price = tariff.v2g_prices[slot - 1]
            grid_cost += energy_price * decisions.grid[i, j] * dt + peak_charges[i, j]
            v2g_revenue += v2g_price * decisions.v2g[i, j] * dt
            discomfort += bld.discomfort_coeff * (decisions.indoor_temp[i, j] - bld.preferred_temp) ** 2
            trade_price = mid_market_price(energy_price, min(v2g_price, energy_price))
            settlement += trade_price * dt * (decisions.trade_buy[i, j] - decisions.trade_sell[i, j])
        out.append(
            CostBreakdown.of(
                grid=float(grid_cost),
                battery=float(battery[i].sum()),
                discomfort=float(discomfort),
                v2g_revenue=float(v2g_revenue),
                trade_settlement=float(settlement),
                grid_energy=float(decisions.grid[i].sum() * dt),
                hvac_energy=float(decisions.hvac[i].sum() * dt),
            )
        )
    return out


def evaluate_costs(decisions: DecisionSet, scenario: Scenario, peak_so_far=None) -> CostBreakdown:
    total = CostBreakdown()
    for part in evaluate_community_costs(decisions, scenario, peak_so_far):
        total = total + part
    return total


def costs_frame(slot_costs: Sequence[Sequence[CostBreakdown]], window: Sequence[int], node_ids: Sequence[int]) -> pd.DataFrame:
    """One row per slot per community."""
    rows = []
    for slot, per_community in zip(window, slot_costs):
        for node, cost in zip(node_ids, per_community):
            row = {"slot": slot, "node": node}
            row.update({f.name: getattr(cost, f.name) for f in fields(cost)})
            rows.append(row)
    return pd.DataFrame(rows)


def audit_decisions(
    decisions: DecisionSet,
    scenario: Scenario,
    mode: StackingMode = StackingMode.full_stacking,
    *,
    fleet: Optional[Sequence[EvSpec]] = None,
    recourse: int = RECOURSE_NONE,
    tolerance: float = 1e-6,
) -> List[Violation]:
    """Numeric check of every model rule against a decision set."""
    found: List[Violation] = []

    def fail(code, message, reference, magnitude):
        found.append(Violation(code, message, reference, float(magnitude)))

    d = decisions
    specs = {ev.id: ev for ev in (fleet if fleet is not None else scenario.evs)}
    streams = enabled_streams(mode, recourse)

    product = d.charge * d.discharge
    for u, j in zip(*np.nonzero(product > 1e-9)):
        fail("ev.exclusive", f"EV {d.ev_ids[u]} charges and discharges in slot {d.window[j]}", "charge/discharge exclusivity", product[u, j])

    for u, ev_id in enumerate(d.ev_ids):
        ev = specs.get(ev_id)
        if ev is None:
            continue
        for j, slot in enumerate(d.window):
            if not ev.present(slot):
                if d.charge[u, j] > tolerance or d.discharge[u, j] > tolerance:
                    fail("ev.absent", f"EV {ev_id} is scheduled in slot {slot} while away", "parking session", max(d.charge[u, j], d.discharge[u, j]))
                continue
            if d.charge[u, j] > ev.charge_limit + tolerance:
                fail("ev.charge_limit", f"EV {ev_id} charges above its limit in slot {slot}", "charging limit", d.charge[u, j] - ev.charge_limit)
            if d.discharge[u, j] > ev.discharge_limit + tolerance:
                fail("ev.discharge_limit", f"EV {ev_id} discharges above its limit in slot {slot}", "discharging limit", d.discharge[u, j] - ev.discharge_limit)
            if not mode.discharge_allowed and d.discharge[u, j] > tolerance:
                fail("mode.discharge", f"EV {ev_id} discharges in {mode.name}", "stacking mode", d.discharge[u, j])
            energy = d.energy[u, j]
            if np.isfinite(energy):
                if energy < ev.capacity_lower - tolerance or energy > ev.capacity_upper + tolerance:
                    fail("ev.energy_bound", f"EV {ev_id} energy {energy:.4f} outside its bounds in slot {slot}", "battery energy bounds", max(ev.capacity_lower - energy, energy - ev.capacity_upper))
                if slot == ev.departure_slot and abs(energy - ev.desired_energy) > tolerance:
                    fail("ev.terminal", f"EV {ev_id} departs with {energy:.4f} kWh instead of {ev.desired_energy}", "departure energy", abs(energy - ev.desired_energy))

    row = {node: i for i, node in enumerate(d.node_ids)}
    ev_sum = np.zeros_like(d.grid)
    for u, node in enumerate(d.ev_nodes):
        ev_sum[row[node]] += d.discharge[u] - d.charge[u]
    demand = d.building_demand

    def check(code, message, reference, residual):
        for i, j in zip(*np.nonzero(np.abs(residual) > tolerance)):
            fail(code, f"community {d.node_ids[i]} slot {d.window[j]}: {message}", reference, abs(residual[i, j]))

    check("community.ev_export", "EV export differs from the fleet net discharge", "parking lot export", d.ev_export - ev_sum)
    check("community.export", "export identity broken", "community export", d.community_export - (d.ev_export - demand))
    check("community.supply", "export not matched by sales and purchases", "supply balance", d.community_export - (d.v2g + d.trade_sell - d.grid - d.trade_buy))
    check("community.pv_local", "local PV exceeds building demand", "local renewable use", np.minimum(demand, 0.0))

    exporting = d.community_export > REGIME_TOLERANCE
    importing = d.community_export < -REGIME_TOLERANCE
    check("regime.import", "buys while exporting", "export/import regime", np.where(exporting, d.grid + d.trade_buy, 0.0))
    check("regime.export", "sells while importing", "export/import regime", np.where(importing, d.v2g + d.trade_sell, 0.0))

    balance = d.trade_sell.sum(axis=0) - d.trade_buy.sum(axis=0)
    for j in np.flatnonzero(np.abs(balance) > tolerance):
        fail("trade.balance", f"slot {d.window[j]}: local sales and purchases differ", "trading balance", abs(balance[j]))

    disabled = {
        Stream.v2b: d.v2b,
        Stream.v2g: d.v2g,
        Stream.trading: d.trade_sell + d.trade_buy,
    }
    for stream, values in disabled.items():
        if stream not in streams:
            check(f"mode.{stream.name}", f"{stream.name} used in {mode.name}", "stacking mode", values)

    for i, c in enumerate(scenario.communities):
        if c.node_id not in row:
            continue
        i_d = row[c.node_id]
        bld = c.building
        caps = (
            ("cap.grid", d.grid[i_d] - c.grid_import_cap),
            ("cap.v2g", d.v2g[i_d] - c.v2g_cap),
            ("cap.v2b", d.v2b[i_d] - c.v2b_cap),
            ("cap.trade_sell", d.trade_sell[i_d] - c.trade_sell_cap),
            ("cap.trade_buy", d.trade_buy[i_d] - c.trade_buy_cap),
            ("cap.pv", d.renew[i_d] - d.pv[i_d]),
            ("building.temperature", np.maximum(d.indoor_temp[i_d] - bld.temp_max, bld.temp_min - d.indoor_temp[i_d])),
            ("building.hvac", np.maximum(d.hvac[i_d] - bld.hvac_max, bld.hvac_min - d.hvac[i_d])),
        )
        for code, excess_values in caps:
            for j in np.flatnonzero(excess_values > tolerance):
                fail(code, f"community {c.node_id} slot {d.window[j]} exceeds its limit", "operating limits", excess_values[j])

    if d.flows is not None:
        injections = np.zeros((scenario.grid.node_count, len(d.window)))
        for i, node in enumerate(d.node_ids):
            injections[node] = d.community_export[i]
        found.extend(check_solution(scenario.grid, d.flows, injections, d.window, tolerance))
    return found
