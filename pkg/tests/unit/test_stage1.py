from datetime import datetime, timedelta

import numpy as np
import pandas as pd
import pytest

from feeder_microgrid.exceptions import InfeasibleModelError, ScenarioError
from feeder_microgrid.harness.synthetic import load_replica
from feeder_microgrid.scenario import (
    SeriesKind,
    TimeGrids,
    TimeSeriesFrame,
    build_scenario,
    reactive_from_pf,
)
from feeder_microgrid.stage1 import (
    RESIDUAL_TOL,
    Stage1Instance,
    build_stage1,
    commitment_violations,
    forced_on_steps,
    rolling_window,
    schedule_frame,
    solve_stage1,
)

SINGLE_GROUP = [{"id": "g1", "weight": 1.0, "nodes": ["1"]}]


def _assert_replay_clean(schedule):
    for key, value in schedule.residuals.items():
        assert value < RESIDUAL_TOL, key


def test_single_group_served_by_storage(scenario_factory):
    """
    One 300 kW group and ample storage: the group is energised and the
    battery covers the whole load.
    """
    scenario = scenario_factory(hours=0.5, groups=SINGLE_GROUP, load={"1": 300.0}, dg=[])
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert schedule.length == 1
    assert schedule.x[0, 0] == 1
    assert schedule.p_es[0, 0].sum() == pytest.approx(300.0, abs=1e-6)
    assert schedule.objective == pytest.approx(300.0 * 0.5)
    _assert_replay_clean(schedule)


def test_group_dropped_when_reserve_leaves_no_capacity(scenario_factory):
    """
    A 50 kVA usable polygon cannot carry 300 kW, so the group stays off.
    """
    scenario = scenario_factory(hours=0.5, groups=SINGLE_GROUP, load={"1": 300.0}, dg=[])
    instance = Stage1Instance.from_scenario(scenario, gamma=[50.0 / 2000.0])

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert schedule.x[0, 0] == 0
    assert schedule.objective == pytest.approx(0.0, abs=1e-9)


def test_zero_demand_starts_nothing(scenario_factory):
    scenario = scenario_factory(load={"1": 0.0, "2": 0.0, "3": 0.0, "4": 0.0})
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert schedule.objective == pytest.approx(0.0, abs=1e-9)
    assert schedule.y.sum() == 0
    assert schedule.startup_cost.sum() == pytest.approx(0.0, abs=1e-9)


def test_empty_tank_keeps_diesel_off(scenario_factory):
    """
    With fuel already at its minimum the diesel unit never runs.
    """
    dg = [{"id": "dg1", "kva_rating": 1000, "kva_min": 100, "fuel_init": 0, "fuel_max": 1000,
           "fuel_final": 0}]
    scenario = scenario_factory(dg=dg, es=[{"id": "mes", "kva_rating": 2000,
                                            "energy_rating": 400, "soc_init": 0.5}])
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert schedule.y.sum() == 0
    assert np.allclose(schedule.fuel, 0.0)
    _assert_replay_clean(schedule)


def test_pv_rich_group_with_full_battery(scenario_factory):
    """
    A PV-exporting group stays energised next to loads that absorb its
    surplus while the battery sits at its ceiling.
    """
    scenario = scenario_factory(
        load={"1": 200.0, "2": 100.0, "3": 100.0, "4": 60.0},
        pv={"3": 300.0},
        es=[{"id": "mes", "kva_rating": 2000, "energy_rating": 8000, "soc_init": 0.95}],
    )
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert schedule.x.all()
    assert np.all(schedule.soc <= 0.95 + 1e-9)
    assert np.all(schedule.p_es.sum(axis=2) > 0.0)
    _assert_replay_clean(schedule)


def test_replica_flat_load_serves_every_group():
    """
    500 kW of flat net load on the replica feeder is fully served for the
    whole window and the first window keeps the rationed fuel floor.
    """
    config, _ = load_replica()
    config = config.model_copy(update={"solver": config.solver.model_copy(update={"mip_gap": 1e-6})})
    nodes = [n for g in config.groups for n in g.nodes]
    minutes = config.grids.total_minutes
    per_node = np.full((minutes, len(nodes), 3), 500.0 / len(nodes) / 3.0)
    frames = {
        kind: TimeSeriesFrame(kind, pd.Timestamp(config.grids.restoration_start), 1, tuple(nodes),
                              per_node, np.zeros_like(per_node), reactive_from_pf(per_node, 0.95))
        for kind in SeriesKind
    }
    scenario = build_scenario(config, frames)
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    assert instance.fuel_targets == (pytest.approx(5250.0),)
    assert schedule.length == 48
    assert schedule.x.all()
    assert schedule.fuel[-1, 0] >= 5250.0 - 1e-6
    _assert_replay_clean(schedule)


def test_rolling_window_fixed_and_receding():
    """
    Windows span 24 h except on the last day, where they end with the
    restoration.
    """
    start = datetime(2021, 7, 1)
    grids = TimeGrids(restoration_start=start, restoration_end=start + timedelta(days=2))

    # Assertions
    first = rolling_window(10, grids)
    assert (first.start, first.length, first.day, first.stop) == (10, 48, 1, 58)
    last = rolling_window(84, grids)
    assert (last.length, last.day) == (12, 2)
    with pytest.raises(ScenarioError) as exc_info:
        rolling_window(96, grids)
    assert exc_info.value.code == "empty_window"


def test_forced_on_steps():
    assert forced_on_steps(None, 120, 30) == 0
    assert forced_on_steps(0, 120, 30) == 4
    assert forced_on_steps(45, 120, 30) == 3
    assert forced_on_steps(45, 120, 5) == 15
    assert forced_on_steps(200, 120, 30) == 0


def test_soc_out_of_bounds_detected_before_solve(scenario_factory):
    scenario = scenario_factory()
    instance = Stage1Instance.from_scenario(scenario, soc=[0.05])

    with pytest.raises(InfeasibleModelError) as exc_info:
        build_stage1(scenario, instance)

    # Assertions
    assert "initial SoC" in exc_info.value.diagnosis[0]


def test_infeasible_memory_is_diagnosed(scenario_factory):
    """
    A group that must stay on but cannot be balanced names commitment
    memory as the binding resource.
    """
    scenario = scenario_factory(hours=0.5, groups=SINGLE_GROUP, load={"1": 300.0}, dg=[])
    instance = Stage1Instance.from_scenario(
        scenario, group_on=[True], group_on_minutes=[0], gamma=[0.025]
    )

    with pytest.raises(InfeasibleModelError) as exc_info:
        solve_stage1(scenario, instance)

    # Assertions
    assert instance.group_forced == (4,)
    assert any("commitment memory" in d for d in exc_info.value.diagnosis)
    relaxed = solve_stage1(scenario, instance.relaxed(memory=True))
    assert relaxed.x[0, 0] == 0


@pytest.mark.parametrize(
    "seed", [s if s < 8 else pytest.param(s, marks=pytest.mark.slow) for s in range(100)]
)
def test_random_schedules_replay_cleanly(scenario_factory, seed):
    """
    Randomised small feeders: balance, recursions, capacity, radiality and
    the commitment patterns all hold on the extracted schedule.
    """
    rng = np.random.default_rng(seed)
    load = {n: rng.uniform(50.0, 500.0, size=240) for n in ("1", "2", "3", "4")}
    pv = {n: rng.uniform(0.0, 150.0, size=240) for n in ("2", "3")}
    scenario = scenario_factory(
        hours=4, load=load, pv=pv,
        es=[{"id": "mes", "kva_rating": 1000, "energy_rating": 600, "soc_init": 0.5}],
    )
    instance = Stage1Instance.from_scenario(scenario)

    schedule = solve_stage1(scenario, instance)

    # Assertions
    _assert_replay_clean(schedule)
    assert schedule.length == 8
    for n in range(len(scenario.groups)):
        assert commitment_violations(schedule.x[:, n], False, scenario.policy.msd_slots) == 0
    for d, dg in enumerate(scenario.dg_units):
        assert commitment_violations(schedule.y[:, d], False, dg.min_up) == 0
    assert np.all(schedule.x[:, 1:] <= schedule.x[:, [0]])
    assert np.all(schedule.soc >= 0.1 - 1e-9)


def test_reserve_relaxation_dominance(scenario_factory):
    """
    Removing the reserve never lowers the optimum.
    """
    load = {"1": 700.0, "2": 500.0, "3": 600.0, "4": 400.0}
    scenario = scenario_factory(load=load, dg=[])
    tight = Stage1Instance.from_scenario(scenario, gamma=np.full(4, 0.8))
    loose = Stage1Instance.from_scenario(scenario, gamma=np.full(4, 1.0))

    obj_tight = solve_stage1(scenario, tight).objective
    obj_loose = solve_stage1(scenario, loose).objective

    # Assertions
    assert obj_loose >= obj_tight - 1e-5 * max(1.0, abs(obj_tight))


def test_raising_priority_never_reduces_service(scenario_factory):
    """
    Raising one group's weight cannot lower its served slots.
    """
    load = {"1": 300.0, "2": 200.0, "3": 900.0, "4": 900.0}
    groups = [
        {"id": "g1", "weight": 0.4, "nodes": ["1", "2"]},
        {"id": "g2", "weight": 0.2, "parent": "g1", "nodes": ["3"]},
        {"id": "g3", "weight": 0.25, "parent": "g1", "nodes": ["4"]},
    ]
    served = []
    for weight in (0.2, 0.3):
        groups[1]["weight"] = weight
        scenario = scenario_factory(load=load, groups=groups, dg=[],
                                    solver={"backend": "highs", "mip_gap": 0.0})
        schedule = solve_stage1(scenario, Stage1Instance.from_scenario(scenario))
        served.append(schedule.x[:, 1].sum())

    # Assertions
    assert served[1] >= served[0]


def test_schedule_frame_layout(small_scenario):
    schedule = solve_stage1(small_scenario, Stage1Instance.from_scenario(small_scenario))

    frame = schedule_frame(small_scenario, schedule)

    # Assertions
    assert list(frame.columns) == ["slot", "timestamp", "asset", "kind", "status", "p_kw",
                                   "q_kvar", "soc", "fuel_l", "startup_cost"]
    assert len(frame) == schedule.length * (3 + 1 + 1)
    assert set(frame["kind"]) == {"group", "es", "dg"}
    assert frame["timestamp"].iloc[0] == pd.Timestamp("2021-07-01 00:00")
