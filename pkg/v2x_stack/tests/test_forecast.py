import numpy as np
import pytest

from v2x_stack.forecast import (
    SYNTHETIC_MARK,
    ForecastBundle,
    InjectedErrorForecaster,
    InsufficientHistoryError,
    SeasonalNaiveForecaster,
    TruthForecaster,
    ZeroReferenceError,
    bundle_errors,
    inject_error,
    make_forecaster,
    merge_realized,
    relative_error,
    seasonal_naive,
    synthesize_fleet,
    truth_bundle,
)
from v2x_stack.types import Channel, Provenance
from v2x_stack.tests.util import community, ev, scenario


def daily_load(days=2):
    hours = np.arange(24 * days)
    return 2.0 + np.sin(2 * np.pi * hours / 24)


@pytest.fixture
def fleet_day():
    return scenario(
        [
            community(1, 6, [ev("a", 1, 1, 5), ev("b", 1, 3, 6)], load=[1, 2, 3, 3, 2, 1], pv=[0, 1, 2, 2, 1, 0]),
            community(2, 6, [ev("c", 2, 2, 6, initial=10.0, desired=20.0)], load=2.0),
        ],
        6,
        with_history=True,
    )


def test_seasonal_constant():
    assert seasonal_naive([3.5] * 24, 24) == pytest.approx([3.5] * 24)


def test_seasonal_periodic():
    history = daily_load(3)
    prediction = seasonal_naive(history, 24)
    assert relative_error("load", prediction, daily_load(1)) == pytest.approx(0.0, abs=1e-12)


def test_seasonal_yesterday():
    yesterday = np.arange(1.0, 25.0)
    assert list(seasonal_naive(yesterday, 24)) == list(yesterday)
    assert list(seasonal_naive(yesterday, 6)) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_seasonal_short_history():
    with pytest.raises(InsufficientHistoryError):
        seasonal_naive([1.0] * 23, 24)


def test_relative_error_values():
    actual = np.array([[1.0, 2.0, 3.0]])
    assert relative_error(Channel.load, actual, actual) == 0.0
    assert relative_error(Channel.pv, 1.3 * actual, actual) == pytest.approx(0.3)
    assert relative_error("ev", [[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(1.0)


def test_relative_error_scale_invariant():
    actual = np.array([[1.0, 4.0], [2.0, 0.5]])
    predicted = np.array([[1.5, 3.0], [2.0, 1.0]])
    assert relative_error("load", 7 * predicted, 7 * actual) == pytest.approx(
        relative_error("load", predicted, actual)
    )


def test_relative_error_errors():
    with pytest.raises(ZeroReferenceError):
        relative_error("pv", [[1.0, 0.0]], [[0.0, 0.0]])
    with pytest.raises(ValueError):
        relative_error("load", [[1.0]], [[1.0, 2.0]])


def test_inject_zero_target():
    truth = daily_load(1).reshape(2, 12)
    assert np.array_equal(inject_error(truth, 0.0, seed=5), truth)


def test_inject_hits_band():
    truth = daily_load(1).reshape(2, 12)
    for seed in range(5):
        perturbed = inject_error(truth, 0.30, seed)
        assert np.all(perturbed >= 0)
        assert 0.28 <= relative_error("load", perturbed, truth) <= 0.32


def test_inject_deterministic():
    truth = daily_load(1)
    assert np.array_equal(inject_error(truth, 0.2, 11), inject_error(truth, 0.2, 11))
    assert not np.array_equal(inject_error(truth, 0.2, 11), inject_error(truth, 0.2, 12))


def test_inject_integer_counts():
    truth = np.array([[0, 3, 5, 2, 0, 0, 4, 6, 1, 0, 2, 3]])
    perturbed = inject_error(truth, 0.3, seed=2, integer=True)
    assert perturbed.dtype.kind == "i"
    assert np.all(perturbed >= 0)
    assert relative_error("ev", perturbed, truth) > 0.0


def test_inject_rejects():
    with pytest.raises(ValueError):
        inject_error([1.0, 2.0], 1.5, 0)
    with pytest.raises(ZeroReferenceError):
        inject_error([0.0, 0.0], 0.1, 0)


def test_bundle_shapes_checked():
    with pytest.raises(ValueError):
        ForecastBundle(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 3), dtype=int), ())
    with pytest.raises(ValueError):
        ForecastBundle(-np.ones((1, 3)), np.zeros((1, 3)), np.zeros((1, 3), dtype=int), ())


def test_truth_bundle(fleet_day):
    bundle = TruthForecaster().forecast(fleet_day, 1)
    assert bundle.horizon == 6
    assert bundle.arrivals.tolist() == [[1, 0, 1, 0, 0, 0], [0, 1, 0, 0, 0, 0]]
    assert bundle_errors(bundle, fleet_day) == {"load": 0.0, "pv": 0.0, "ev": 0.0}
    frame = bundle.to_frame(fleet_day.node_ids)
    assert len(frame) == 12
    assert frame["load"].sum() == pytest.approx(12.0 + 12.0)


def test_synthetic_fleet(fleet_day):
    arrivals = np.array([[0, 2, 0, 0, 0, 0], [0, 0, 0, 0, 1, 0]])
    records = synthesize_fleet(fleet_day, arrivals)
    assert len(records) == 3
    assert all(r.id.startswith(SYNTHETIC_MARK) for r in records)
    assert len({r.id for r in records}) == 3
    late = [r for r in records if r.community_id == 2][0]
    assert late.arrival_slot == 5
    assert late.departure_slot == 6
    # Two slots at 7 kW from 10 kWh reach 24 kWh, above the fleet's 20.
    assert late.desired_energy == pytest.approx(20.0)
    for r in records:
        assert r.arrival_slot <= r.departure_slot


def test_synthetic_desired_capped(fleet_day):
    records = synthesize_fleet(fleet_day, np.array([[0, 0, 0, 0, 0, 1], [0] * 6]))
    # Fleet 1 departs at median slot 5, so the template stays for one slot.
    (only,) = records
    assert only.departure_slot == 6
    assert only.desired_energy <= only.initial_energy + only.charge_limit + 1e-9


def test_merge_realized(fleet_day):
    forecast = InjectedErrorForecaster(Channel.ev, 0.5, seed=1).forecast(fleet_day, 1)
    merged = merge_realized(forecast, fleet_day, 3)
    truth = truth_bundle(fleet_day)
    assert np.array_equal(merged.arrivals[:, :3], truth.arrivals[:, :3])
    assert np.array_equal(merged.arrivals[:, 3:], forecast.arrivals[:, 3:])
    ids = {r.id for r in merged.ev_records}
    assert {"a", "b", "c"} <= ids
    assert all(r.arrival_slot > 3 for r in merged.ev_records if r.id.startswith(SYNTHETIC_MARK))


def test_injected_forecaster_channels(fleet_day):
    for channel in (Channel.load, Channel.pv):
        forecaster = InjectedErrorForecaster(channel, 0.3, seed=4)
        bundle = forecaster.forecast(fleet_day, 1)
        errors = bundle_errors(bundle, fleet_day)
        assert 0.28 <= errors[channel.name] <= 0.32
        others = [name for name in errors if name != channel.name]
        assert all(errors[name] == 0.0 for name in others)
        assert forecaster.forecast(fleet_day, 4) is bundle
        assert bundle.provenance is Provenance.injected


def test_injected_zero_is_truth(fleet_day):
    bundle = InjectedErrorForecaster(Channel.ev, 0.0, seed=4).forecast(fleet_day, 1)
    assert bundle.ev_records == fleet_day.evs


def test_seasonal_forecaster(fleet_day):
    bundle = SeasonalNaiveForecaster().forecast(fleet_day, 1)
    assert bundle.provenance is Provenance.seasonal_naive
    assert bundle.load.shape == (2, 6)
    assert bundle.arrivals.sum() == 0
    assert bundle.ev_records == ()


def test_seasonal_needs_history():
    bare = scenario([community(1, 4)], 4)
    with pytest.raises(InsufficientHistoryError):
        SeasonalNaiveForecaster().forecast(bare, 1)


def test_make_forecaster():
    assert isinstance(make_forecaster("truth"), TruthForecaster)
    assert isinstance(make_forecaster("seasonal_naive"), SeasonalNaiveForecaster)
    injected = make_forecaster("injected", Channel.pv, 0.1, 3)
    assert injected.describe() == {
        "provenance": "injected",
        "channel": "pv",
        "target_re": 0.1,
        "seed": 3,
    }
    with pytest.raises(ValueError):
        make_forecaster("injected")
    with pytest.raises(ValueError):
        make_forecaster("oracle")
