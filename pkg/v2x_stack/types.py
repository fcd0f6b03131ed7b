""" Foundational Types for the V2X Value-Stacking Scheduler. """

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np


class TariffKind(Enum):
    tou = 0
    tpt = 1


class PeakScope(Enum):
    """Which import peak the two-part tariff charges."""

    community = 0
    system = 1


class StackingMode(Enum):
    full_stacking = 0
    v2g_only = 1
    v2b_only = 2
    trading_only = 3
    charge_only = 4
    stacking_minus_v2g = 5
    stacking_minus_v2b = 6
    stacking_minus_trading = 7

    @property
    def streams(self) -> frozenset:
        """Value streams enabled in this mode."""
        return _MODE_STREAMS[self]

    @property
    def discharge_allowed(self) -> bool:
        return self is not StackingMode.charge_only


class Stream(Enum):
    v2b = 0
    v2g = 1
    trading = 2


_MODE_STREAMS = {
    StackingMode.full_stacking: frozenset((Stream.v2b, Stream.v2g, Stream.trading)),
    StackingMode.v2g_only: frozenset((Stream.v2g,)),
    StackingMode.v2b_only: frozenset((Stream.v2b,)),
    StackingMode.trading_only: frozenset((Stream.trading,)),
    StackingMode.charge_only: frozenset(),
    StackingMode.stacking_minus_v2g: frozenset((Stream.v2b, Stream.trading)),
    StackingMode.stacking_minus_v2b: frozenset((Stream.v2g, Stream.trading)),
    StackingMode.stacking_minus_trading: frozenset((Stream.v2b, Stream.v2g)),
}

# Leave-one-out mode for each stream, used for marginal contributions.
LEAVE_ONE_OUT = {
    Stream.v2b: StackingMode.stacking_minus_v2b,
    Stream.v2g: StackingMode.stacking_minus_v2g,
    Stream.trading: StackingMode.stacking_minus_trading,
}


class Channel(Enum):
    """Forecast channel subject to prediction error."""

    load = 0
    pv = 1
    ev = 2


class Provenance(Enum):
    truth = 0
    seasonal_naive = 1
    injected = 2


@dataclass(frozen=True)
class Violation:
    """
    One failed check.

    code is a dotted machine-readable key (``ev.desired_energy``),
    reference names the equation or rule that was broken.
    """

    code: str
    message: str
    reference: str = ""
    magnitude: float = 0.0

    def __str__(self) -> str:
        ref = f" [{self.reference}]" if self.reference else ""
        return f"{self.code}: {self.message}{ref}"


@dataclass(frozen=True)
class EvSpec:
    """One parking session of an EV. Slots are 1-based and inclusive."""

    id: str
    community_id: int
    arrival_slot: int
    departure_slot: int
    capacity_upper: float
    capacity_lower: float
    initial_energy: float
    desired_energy: float
    charge_limit: float
    discharge_limit: float
    charge_eff: float = 0.95
    discharge_eff: float = 0.95

    def present(self, slot: int) -> bool:
        return self.arrival_slot <= slot <= self.departure_slot

    @property
    def dwell(self) -> int:
        return self.departure_slot - self.arrival_slot + 1


@dataclass(frozen=True)
class BuildingSpec:
    inflexible_load: Tuple[float, ...]
    outdoor_temp: Tuple[float, ...]
    preferred_temp: float = 25.0
    temp_min: float = 22.0
    temp_max: float = 28.0
    hvac_min: float = 0.0
    hvac_max: float = 10.0
    heat_capacity: float = 3.3
    thermal_resistance: float = 1.35
    hvac_mode: float = 1.0
    discomfort_coeff: float = 0.1
    initial_indoor_temp: float = 25.0


@dataclass(frozen=True)
class CommunitySpec:
    node_id: int
    building: BuildingSpec
    fleet: Tuple[EvSpec, ...]
    pv_available: Tuple[float, ...]
    grid_import_cap: float
    trade_buy_cap: float
    trade_sell_cap: float
    v2b_cap: float
    v2g_cap: float


@dataclass(frozen=True)
class GridModel:
    """
    Radial feeder path 0..node_count-1 rooted at the slack node 0.

    Branch k (1-based) connects node k-1 to node k, so the per-branch
    sequences have node_count - 1 entries. Resistance and reactance are in
    ohms unless impedance_unit is "pu". Flow bounds are in kW/kVAr, voltage
    bounds and slack voltage in per-unit. reactive_load is kVAr per node per
    slot (node 0 included, never read).
    """

    node_count: int
    resistance: Tuple[float, ...]
    reactance: Tuple[float, ...]
    reactive_load: Tuple[Tuple[float, ...], ...]
    voltage_min: Tuple[float, ...]
    voltage_max: Tuple[float, ...]
    flow_min: Tuple[float, ...]
    flow_max: Tuple[float, ...]
    reactive_min: Tuple[float, ...]
    reactive_max: Tuple[float, ...]
    slack_voltage: Tuple[float, ...]
    base_kva: float = 10_000.0
    base_kv: float = 12.66
    impedance_unit: str = "ohm"

    @property
    def branch_count(self) -> int:
        return self.node_count - 1

    @property
    def impedance_base(self) -> float:
        """Base impedance in ohms."""
        return self.base_kv**2 * 1000.0 / self.base_kva

    def resistance_pu(self) -> np.ndarray:
        values = np.asarray(self.resistance, dtype=float)
        if self.impedance_unit == "pu":
            return values
        return values / self.impedance_base

    def reactance_pu(self) -> np.ndarray:
        values = np.asarray(self.reactance, dtype=float)
        if self.impedance_unit == "pu":
            return values
        return values / self.impedance_base


@dataclass(frozen=True)
class Tariff:
    kind: TariffKind
    v2g_prices: Tuple[float, ...]
    tou_prices: Tuple[float, ...] = ()
    tpt_energy_price: float = 0.20
    tpt_peak_price: float = 0.80
    market: str = ""

    def energy_price(self, slot: int) -> float:
        """Retail energy price of the 1-based slot."""
        if self.kind is TariffKind.tou:
            return float(self.tou_prices[slot - 1])
        return float(self.tpt_energy_price)


@dataclass(frozen=True)
class DayHistory:
    """Previous-day realized series of one community, oldest first."""

    load: Tuple[float, ...]
    pv: Tuple[float, ...]
    arrivals: Tuple[int, ...]


@dataclass(frozen=True)
class Scenario:
    horizon: int
    communities: Tuple[CommunitySpec, ...]
    grid: GridModel
    tariff: Tariff
    big_m: float
    slot_duration: float = 1.0
    battery_degradation_coeff: float = 0.01
    rng_seed: int = 0
    start_hour: int = 0
    currency: str = "AUD"
    peak_scope: PeakScope = PeakScope.community
    name: str = "scenario"
    history: Optional[Tuple[DayHistory, ...]] = field(default=None)

    @property
    def node_ids(self) -> Tuple[int, ...]:
        return tuple(c.node_id for c in self.communities)

    @property
    def evs(self) -> Tuple[EvSpec, ...]:
        return tuple(ev for c in self.communities for ev in c.fleet)

    def load_matrix(self) -> np.ndarray:
        """Realized building load, communities x slots."""
        return np.array(
            [c.building.inflexible_load for c in self.communities], dtype=float
        ).reshape(len(self.communities), self.horizon)

    def pv_matrix(self) -> np.ndarray:
        return np.array(
            [c.pv_available for c in self.communities], dtype=float
        ).reshape(len(self.communities), self.horizon)

    def arrival_matrix(self) -> np.ndarray:
        """Realized EV arrival counts, communities x slots."""
        return np.array(
            [arrival_counts(c.fleet, self.horizon) for c in self.communities], dtype=int
        ).reshape(len(self.communities), self.horizon)


def arrival_counts(fleet: Sequence[EvSpec], horizon: int) -> np.ndarray:
    counts = np.zeros(horizon, dtype=int)
    for ev in fleet:
        counts[ev.arrival_slot - 1] += 1
    return counts
