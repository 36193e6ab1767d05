import math

import numpy as np
import pandas as pd
import pytest
import yaml
from structlog.testing import capture_logs

from feeder_microgrid.exceptions import ScenarioError
from feeder_microgrid.harness.synthetic import load_replica
from feeder_microgrid.scenario import (
    EsRole,
    SeriesKind,
    TimeSeriesFrame,
    build_scenario,
    load_scenario,
    parse_config,
    reactive_from_pf,
    read_series_csv,
    resample,
    validate_scenario,
    write_series_csv,
)


def _frame(step, values, nodes=("1",)):
    arr = np.zeros((len(values), len(nodes), 3))
    arr[:, :, 0] = np.asarray(values, dtype=float)[:, None]
    return TimeSeriesFrame(SeriesKind.TRUTH, pd.Timestamp("2021-07-01"), step, tuple(nodes),
                           arr, np.zeros_like(arr), np.zeros_like(arr))


def _write_scenario_files(tmp_path, config, frames):
    names = {"truth": "truth.csv", "stage1_forecast": "s1.csv", "stage2_forecast": "s2.csv"}
    for kind, frame in frames.items():
        write_series_csv(frame, tmp_path / names[kind.value])
    config = dict(config, series=names)
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


def test_load_scenario_minimal_day(tmp_path, config_factory, frame_factory):
    """
    A one-group, one-storage config over 24 h loads into 48 stage-1 slots.
    """
    config = config_factory(
        hours=24,
        groups=[{"id": "g1", "weight": 1.0, "nodes": ["1"]}],
        dg=[],
    )
    frames = {kind: frame_factory(kind, {"1": 100.0}, minutes=24 * 60) for kind in SeriesKind}
    path = _write_scenario_files(tmp_path, config, frames)

    scenario = load_scenario(path)

    # Assertions
    assert scenario.grids.n_sched_slots == 48
    assert scenario.grids.n_disp_slots == 288
    assert scenario.series[SeriesKind.STAGE1].step_minutes == 30
    assert scenario.series[SeriesKind.STAGE2].step_minutes == 5
    assert scenario.series[SeriesKind.TRUTH].n_steps == 24 * 60
    assert scenario.dg_units == ()
    assert scenario.source == path
    assert validate_scenario(scenario) == []


def test_replica_resources():
    """
    The bundled replica carries the 2000 kVA / 8000 kWh battery, the
    4000 kVA / 10000 L diesel unit and five load groups.
    """
    config, shape = load_replica()

    es, dg = config.resources.es[0], config.resources.dg[0]

    # Assertions
    assert len(config.groups) == 5
    assert (es.kva_rating, es.energy_rating) == (2000, 8000)
    assert es.role is EsRole.GRID_FORMING
    assert (dg.kva_rating, dg.fuel_init, dg.fuel_final) == (4000, 10000, 500)
    assert (dg.idle_coeff, dg.prop_coeff, dg.startup_cost, dg.min_up) == (84.87, 0.20, 6, 2)
    assert config.policy.msd_slots == 4
    assert sorted(shape.critical_peak_kw.values()) == [140, 210, 245]


def test_series_gap_names_the_node(tmp_path, frame_factory):
    """
    A node whose rows stop early is reported as a coverage gap on that node.
    """
    frame = frame_factory(SeriesKind.TRUTH, {"1": 100.0, "4": 50.0}, minutes=120)
    long = frame.to_long_frame()
    stamps = pd.to_datetime(long["timestamp"])
    long = long[~((long["node"] == "4") & (stamps >= pd.Timestamp("2021-07-01 01:00")))]
    path = tmp_path / "truth.csv"
    long.to_csv(path, index=False)

    with pytest.raises(ScenarioError) as exc_info:
        read_series_csv(path, SeriesKind.TRUTH)

    # Assertions
    assert exc_info.value.code == "coverage_gap"
    assert exc_info.value.key == "truth:4"


def test_short_series_rejected_by_scenario_builder(config_factory, frame_factory):
    """
    A series ending before the restoration window is a coverage error.
    """
    config = parse_config(config_factory(hours=2))
    frames = {kind: frame_factory(kind, {"1": 1.0, "2": 1.0, "3": 1.0, "4": 1.0}, minutes=120)
              for kind in SeriesKind}
    frames[SeriesKind.TRUTH] = frame_factory(
        SeriesKind.TRUTH, {"1": 1.0, "2": 1.0, "3": 1.0, "4": 1.0}, minutes=90
    )

    with pytest.raises(ScenarioError) as exc_info:
        build_scenario(config, frames)

    # Assertions
    assert exc_info.value.code == "coverage_gap"
    assert exc_info.value.key.startswith("truth:")


def test_missing_config_file(tmp_path):
    with pytest.raises(ScenarioError) as exc_info:
        load_scenario(tmp_path / "nope.yaml")
    assert exc_info.value.code == "missing_file"


def test_resample_constant_and_mean():
    """
    Downsampling averages contained minutes; constants are preserved.
    """
    constant = resample(_frame(1, [100.0] * 30), 30)
    steps = resample(_frame(1, [60.0] * 15 + [120.0] * 15), 30)

    # Assertions
    assert constant.n_steps == 1
    assert constant.load_kw[0, 0, 0] == pytest.approx(100.0)
    assert steps.load_kw[0, 0, 0] == pytest.approx(90.0)


def test_resample_upsample_holds_values():
    up = resample(_frame(30, [80.0]), 5)

    # Assertions
    assert up.n_steps == 6
    assert np.allclose(up.load_kw[:, 0, 0], 80.0)
    assert up.timestamps[-1] == pd.Timestamp("2021-07-01 00:25")


def test_resample_round_trip():
    """
    Constant-hold up then mean down returns the original frame.
    """
    rng = np.random.default_rng(3)
    original = _frame(30, rng.uniform(0, 500, size=8))

    back = resample(resample(original, 5), 30)

    # Assertions
    assert back.step_minutes == 30
    assert np.allclose(back.load_kw, original.load_kw)


def test_resample_reports_dropped_partial_block():
    """
    A trailing block shorter than the target step is dropped with a warning.
    """
    with capture_logs() as logs:
        down = resample(_frame(1, [50.0] * 35), 30)

    # Assertions
    assert down.n_steps == 1
    assert down.load_kw[0, 0, 0] == pytest.approx(50.0)
    dropped = [e for e in logs if e["event"] == "resample_dropped_partial_block"]
    assert len(dropped) == 1
    assert dropped[0]["dropped_steps"] == 5
    assert dropped[0]["log_level"] == "warning"


def test_resample_incompatible_steps():
    with pytest.raises(ScenarioError) as exc_info:
        resample(_frame(5, [1.0] * 12), 7)
    assert exc_info.value.code == "grid_incompatible"


def test_reactive_demand_from_power_factor():
    q = reactive_from_pf(np.array([100.0]), 0.95)
    assert q[0] == pytest.approx(100.0 * math.tan(math.acos(0.95)))
    assert q[0] == pytest.approx(32.868, abs=1e-3)


def test_series_without_reactive_column(tmp_path, frame_factory):
    """
    Reading a CSV without ``q_kvar`` derives it at the given power factor.
    """
    frame = frame_factory(SeriesKind.STAGE1, {"1": 300.0}, minutes=30)
    path = tmp_path / "s1.csv"
    frame.to_long_frame().drop(columns=["q_kvar"]).to_csv(path, index=False)

    loaded = read_series_csv(path, SeriesKind.STAGE1, power_factor=0.9)

    # Assertions
    assert loaded.step_minutes == 1
    assert np.allclose(loaded.q_kvar, loaded.load_kw * math.tan(math.acos(0.9)))


def test_negative_series_rejected():
    with pytest.raises(ScenarioError) as exc_info:
        _frame(1, [-1.0])
    assert exc_info.value.code == "negative_series"


@pytest.mark.parametrize(
    "mutate, code",
    [
        (lambda c: c["groups"][0].update(parent="g2"), "group_cycle"),
        (lambda c: c["groups"][1].update(parent="ghost"), "unknown_parent"),
        (lambda c: c["groups"][2].update(nodes=["3"]), "duplicate_id"),
        (lambda c: c["resources"]["es"].append(
            {"id": "mes2", "kva_rating": 100, "energy_rating": 100, "role": "grid_forming"}),
         "role_violation"),
        (lambda c: c["grids"].update(dt_disp=7), "grid_incompatible"),
        (lambda c: c["grids"].update(horizon_sched=40), "grid_incompatible"),
        (lambda c: c["resources"]["es"][0].update(soc_init=0.99), "schema_violation"),
    ],
)
def test_config_reason_codes(config_factory, mutate, code):
    """
    Each invariant violation surfaces its machine-readable reason code.
    """
    config = config_factory()
    config["groups"] = [dict(g) for g in config["groups"]]
    config["resources"]["es"] = [dict(u) for u in config["resources"]["es"]]
    mutate(config)

    with pytest.raises(ScenarioError) as exc_info:
        parse_config(config)

    # Assertions
    assert exc_info.value.code == code


def test_critical_nodes_must_be_members(config_factory):
    config = config_factory()
    config["groups"] = [dict(g) for g in config["groups"]]
    config["groups"][1]["critical_nodes"] = ["9"]

    with pytest.raises(ScenarioError) as exc_info:
        parse_config(config)

    # Assertions
    assert exc_info.value.code == "schema_violation"
    assert exc_info.value.key.startswith("groups.1")


def test_group_profiles_and_weights(small_scenario):
    """
    Group profiles sum member nodes; critical load only counts critical nodes.
    """
    truth = small_scenario.profile(SeriesKind.TRUTH)

    # Assertions
    assert truth.load_kw.shape == (120, 3, 3)
    assert truth.load_kw[0, 0].sum() == pytest.approx(210.0)
    assert truth.critical_load_kw[0, 0].sum() == pytest.approx(120.0)
    assert truth.critical_load_kw[0, 1:].sum() == 0.0
    assert small_scenario.parent_index == (-1, 0, 0)
    assert list(small_scenario.critical_node_counts) == [1, 0, 0]
    assert list(small_scenario.noncritical_node_counts) == [1, 1, 1]
    assert small_scenario.switch_weights[1] == pytest.approx(0.2 * 150.0 * 1.001)


def test_with_overrides_shortens_window(scenario_factory):
    scenario = scenario_factory(hours=2)

    short = scenario.with_overrides(horizon_days=1 / 24)

    # Assertions
    assert short.grids.n_sched_slots == 2
    assert short.series[SeriesKind.TRUTH].n_steps == 60
    assert short.series[SeriesKind.STAGE2].n_steps == 12
    assert validate_scenario(short) == []
    assert scenario.grids.n_sched_slots == 4
