"""
Forecasts consumed by the rolling-horizon loop.

A ForecastBundle holds a whole day of predicted building load, PV and EV
arrival counts for every community, plus the EV records the scheduler plans
with. Predicted arrivals become synthetic EV records shaped after the
community's own fleet; on actual arrival the realized record replaces them.
"""

from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from v2x_stack.helper import HOURS_PER_DAY, hour_to_slot
from v2x_stack.scenario import FleetParams
from v2x_stack.types import Channel, EvSpec, Provenance, Scenario

logger = logging.getLogger(__name__)

MIN_HISTORY = HOURS_PER_DAY
RE_BAND = 0.02
SYNTHETIC_MARK = "~"


class InsufficientHistoryError(ValueError):
    pass


class ZeroReferenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ForecastBundle:
    """
    Predicted series, communities x slots. arrivals are integer counts.
    ev_records are the EVs to plan with, realized or synthetic.
    """

    load: np.ndarray
    pv: np.ndarray
    arrivals: np.ndarray
    ev_records: Tuple[EvSpec, ...]
    provenance: Provenance = Provenance.truth
    channel: Optional[Channel] = None
    target_re: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        shapes = {np.shape(self.load), np.shape(self.pv), np.shape(self.arrivals)}
        if len(shapes) != 1 or len(np.shape(self.load)) != 2:
            raise ValueError(f"Forecast series have mismatched shapes {sorted(shapes)}.")
        for name in ("load", "pv", "arrivals"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"Forecast {name} has negative values.")

    @property
    def horizon(self) -> int:
        return int(np.shape(self.load)[1])

    def describe(self) -> Dict[str, Any]:
        return {
            "provenance": self.provenance.name,
            "channel": self.channel.name if self.channel else None,
            "target_re": self.target_re,
            "seed": self.seed,
        }

    def to_frame(self, node_ids: Sequence[int]) -> pd.DataFrame:
        rows = []
        for i, node in enumerate(node_ids):
            for j in range(self.horizon):
                rows.append(
                    {
                        "slot": j + 1,
                        "node": node,
                        "load": float(self.load[i, j]),
                        "pv": float(self.pv[i, j]),
                        "arrivals": int(self.arrivals[i, j]),
                    }
                )
        return pd.DataFrame(rows)


def truth_bundle(scenario: Scenario) -> ForecastBundle:
    """Perfect foresight: the realized series and fleet."""
    return ForecastBundle(
        load=scenario.load_matrix(),
        pv=scenario.pv_matrix(),
        arrivals=scenario.arrival_matrix(),
        ev_records=scenario.evs,
    )


def merge_realized(bundle: ForecastBundle, scenario: Scenario, slot: int) -> ForecastBundle:
    """
    Overwrite slots 1..slot with realized data. EVs that have arrived by slot
    are taken from the scenario, later arrivals from the bundle.
    """
    load = np.array(bundle.load, dtype=float)
    pv = np.array(bundle.pv, dtype=float)
    arrivals = np.array(bundle.arrivals, dtype=int)
    load[:, :slot] = scenario.load_matrix()[:, :slot]
    pv[:, :slot] = scenario.pv_matrix()[:, :slot]
    arrivals[:, :slot] = scenario.arrival_matrix()[:, :slot]
    arrived = tuple(ev for ev in scenario.evs if ev.arrival_slot <= slot)
    expected = tuple(ev for ev in bundle.ev_records if ev.arrival_slot > slot)
    return replace(bundle, load=load, pv=pv, arrivals=arrivals, ev_records=arrived + expected)


def seasonal_naive(history: Sequence[float], horizon: int) -> np.ndarray:
    """Same hour of the previous day."""
    values = np.asarray(history, dtype=float)
    if values.ndim != 1 or len(values) < MIN_HISTORY:
        raise InsufficientHistoryError(
            f"Seasonal naive needs at least {MIN_HISTORY} values, got {values.size}."
        )
    if horizon < 0:
        raise ValueError("Horizon must be nonnegative.")
    last_day = values[-HOURS_PER_DAY:]
    return np.array([last_day[t % HOURS_PER_DAY] for t in range(horizon)])


def relative_error(kind, predicted, actual) -> float:
    """
    Norm of the prediction error over the norm of the actual series,
    summed over every community and slot.
    """
    kind = Channel[kind] if isinstance(kind, str) else Channel(kind)
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError(f"Predicted shape {predicted.shape} does not match actual {actual.shape}.")
    reference = np.linalg.norm(actual)
    if reference == 0.0:
        raise ZeroReferenceError(f"Actual {kind.name} series is all zero.")
    return float(np.linalg.norm(predicted - actual) / reference)


def inject_error(truth, target_re: float, seed: int, *, integer: bool = False) -> np.ndarray:
    """
    Perturb truth with zero-mean Gaussian noise scaled so the relative error
    lands on target_re. Negative values are clipped and the noise rescaled
    once; when clipping or rounding still leaves the error outside the band
    the scale is found by bisection.
    """
    actual = np.asarray(truth, dtype=float)
    if not 0.0 <= target_re <= 1.0:
        raise ValueError(f"Target relative error {target_re} is outside [0, 1].")
    if target_re == 0.0:
        return actual.astype(int) if integer else actual.copy()
    reference = np.linalg.norm(actual)
    if reference == 0.0:
        raise ZeroReferenceError("Cannot reach a positive relative error on an all-zero series.")

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(actual.shape)
    noise -= noise.mean()
    spread = np.linalg.norm(noise)
    if spread == 0.0:
        noise = np.ones_like(actual)
        spread = np.linalg.norm(noise)

    def perturb(scale: float) -> np.ndarray:
        out = np.maximum(actual + scale * noise, 0.0)
        return np.round(out) if integer else out

    def realized(scale: float) -> float:
        return float(np.linalg.norm(perturb(scale) - actual) / reference)

    scale = target_re * reference / spread
    first = realized(scale)
    if first > 0.0:
        scale *= target_re / first
    if abs(realized(scale) - target_re) > RE_BAND:
        scale = _bisect_scale(realized, target_re, scale)
    result = perturb(scale)
    achieved = realized(scale)
    if abs(achieved - target_re) > RE_BAND:
        logger.warning(
            "relative error %.4f misses target %.4f (seed %s)", achieved, target_re, seed
        )
    return result.astype(int) if integer else result


def _bisect_scale(realized, target: float, scale: float, iterations: int = 60) -> float:
    """Smallest-error scale; realized error is nondecreasing in scale."""
    low, high = 0.0, max(scale, 1e-12)
    for _ in range(iterations):
        if realized(high) >= target:
            break
        low, high = high, high * 2.0
    for _ in range(iterations):
        middle = 0.5 * (low + high)
        if realized(middle) < target:
            low = middle
        else:
            high = middle
    return min((low, high), key=lambda s: abs(realized(s) - target))


def _fleet_template(scenario: Scenario, index: int) -> EvSpec:
    community = scenario.communities[index]
    if community.fleet:
        first = community.fleet[0]
        return replace(
            first,
            departure_slot=int(np.median([ev.departure_slot for ev in community.fleet])),
            initial_energy=float(np.mean([ev.initial_energy for ev in community.fleet])),
            desired_energy=float(np.mean([ev.desired_energy for ev in community.fleet])),
        )
    params = FleetParams()
    departure = hour_to_slot(params.departure_mean, scenario.start_hour, scenario.slot_duration)
    return EvSpec(
        id="template",
        community_id=community.node_id,
        arrival_slot=1,
        departure_slot=min(departure, scenario.horizon),
        capacity_upper=params.capacity,
        capacity_lower=params.capacity_lower,
        initial_energy=float(np.mean(params.initial_range)),
        desired_energy=params.desired_energy,
        charge_limit=params.charge_limit,
        discharge_limit=params.discharge_limit,
        charge_eff=params.charge_eff,
        discharge_eff=params.discharge_eff,
    )


def synthesize_fleet(scenario: Scenario, arrivals) -> Tuple[EvSpec, ...]:
    """
    EV records for predicted arrival counts (communities x slots). Departure
    and energies follow the community's own fleet; the desired energy is
    capped at what the stay allows.
    """
    arrivals = np.asarray(arrivals, dtype=int)
    records = []
    for i, community in enumerate(scenario.communities):
        template = _fleet_template(scenario, i)
        for j in np.flatnonzero(arrivals[i] > 0):
            slot = int(j) + 1
            departure = max(template.departure_slot, slot)
            dwell = departure - slot + 1
            reachable = template.initial_energy + (
                template.charge_eff * template.charge_limit * scenario.slot_duration * dwell
            )
            desired = min(template.desired_energy, reachable, template.capacity_upper)
            for k in range(int(arrivals[i, j])):
                records.append(
                    replace(
                        template,
                        id=f"{SYNTHETIC_MARK}{community.node_id}-{slot}-{k}",
                        community_id=community.node_id,
                        arrival_slot=slot,
                        departure_slot=departure,
                        desired_energy=max(desired, template.capacity_lower),
                    )
                )
    return tuple(records)


class Forecaster:
    """Supplies a day-long ForecastBundle for a window starting at slot."""

    provenance = Provenance.truth

    def forecast(self, scenario: Scenario, slot: int) -> ForecastBundle:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"provenance": self.provenance.name}


class TruthForecaster(Forecaster):
    def forecast(self, scenario: Scenario, slot: int) -> ForecastBundle:
        return truth_bundle(scenario)


class SeasonalNaiveForecaster(Forecaster):
    """Predicts every channel from the previous day."""

    provenance = Provenance.seasonal_naive

    def forecast(self, scenario: Scenario, slot: int) -> ForecastBundle:
        if not scenario.history or len(scenario.history) != len(scenario.communities):
            raise InsufficientHistoryError(f"Scenario {scenario.name} carries no previous-day history.")
        H = scenario.horizon
        arrivals = np.array(
            [np.round(seasonal_naive(h.arrivals, H)) for h in scenario.history], dtype=int
        )
        return ForecastBundle(
            load=np.array([seasonal_naive(h.load, H) for h in scenario.history]),
            pv=np.array([seasonal_naive(h.pv, H) for h in scenario.history]),
            arrivals=arrivals,
            ev_records=synthesize_fleet(scenario, arrivals),
            provenance=self.provenance,
        )


class InjectedErrorForecaster(Forecaster):
    """Truth on every channel except one, perturbed to a target relative error."""

    provenance = Provenance.injected

    def __init__(self, channel: Channel, target_re: float, seed: int):
        if not 0.0 <= target_re <= 1.0:
            raise ValueError(f"Target relative error {target_re} is outside [0, 1].")
        self.channel = channel
        self.target_re = target_re
        self.seed = seed
        self._cache: Dict[str, ForecastBundle] = {}

    def describe(self) -> Dict[str, Any]:
        return {
            "provenance": self.provenance.name,
            "channel": self.channel.name,
            "target_re": self.target_re,
            "seed": self.seed,
        }

    def forecast(self, scenario: Scenario, slot: int) -> ForecastBundle:
        # One draw per day so that every window sees the same prediction.
        key = f"{scenario.name}:{id(scenario)}"
        if key not in self._cache:
            self._cache[key] = self._draw(scenario)
        return self._cache[key]

    def _draw(self, scenario: Scenario) -> ForecastBundle:
        truth = truth_bundle(scenario)
        load, pv, arrivals, records = truth.load, truth.pv, truth.arrivals, truth.ev_records
        if self.channel is Channel.load:
            load = inject_error(truth.load, self.target_re, self.seed)
        elif self.channel is Channel.pv:
            pv = inject_error(truth.pv, self.target_re, self.seed)
        elif self.target_re > 0.0:
            arrivals = inject_error(truth.arrivals, self.target_re, self.seed, integer=True)
            records = synthesize_fleet(scenario, arrivals)
        logger.debug(
            "injected %s error %.3f with seed %d", self.channel.name, self.target_re, self.seed
        )
        return ForecastBundle(
            load=load,
            pv=pv,
            arrivals=arrivals,
            ev_records=records,
            provenance=self.provenance,
            channel=self.channel,
            target_re=self.target_re,
            seed=self.seed,
        )


def make_forecaster(
    name: str, channel: Optional[Channel] = None, target_re: float = 0.0, seed: int = 0
) -> Forecaster:
    if name == "truth":
        return TruthForecaster()
    if name == "seasonal_naive":
        return SeasonalNaiveForecaster()
    if name == "injected":
        if channel is None:
            raise ValueError("An injected forecaster needs a channel.")
        return InjectedErrorForecaster(channel, target_re, seed)
    raise ValueError(f"Unknown forecaster {name!r}.")


def bundle_errors(bundle: ForecastBundle, scenario: Scenario) -> Dict[str, float]:
    """Relative error of each channel of bundle against the realized day."""
    truth = truth_bundle(scenario)
    out = {}
    for channel, predicted, actual in (
        (Channel.load, bundle.load, truth.load),
        (Channel.pv, bundle.pv, truth.pv),
        (Channel.ev, bundle.arrivals, truth.arrivals),
    ):
        try:
            out[channel.name] = relative_error(channel, predicted, actual)
        except ZeroReferenceError:
            out[channel.name] = 0.0
    return out
