import numpy as np
import pytest

from feeder_microgrid.exceptions import InfeasibleModelError, ScenarioError
from feeder_microgrid.optim import SolveStatus
from feeder_microgrid.stage1 import Stage1Instance, solve_stage1
from feeder_microgrid.stage2 import (
    CorrectionInput,
    DispatchCommand,
    Stage2Instance,
    allocate_lambda,
    build_stage2,
    prorated_fuel_floor,
    solve_stage2,
)


def _dispatch(scenario, step=0, correction=None, **kwargs):
    schedule = solve_stage1(scenario, Stage1Instance.from_scenario(scenario))
    n_g, n_d = len(scenario.groups), len(scenario.dg_units)
    instance = Stage2Instance.from_schedule(
        scenario, step, schedule,
        soc=kwargs.pop("soc", [u.soc_init for u in scenario.es_units]),
        fuel=kwargs.pop("fuel", [u.fuel_init for u in scenario.dg_units]),
        group_on=kwargs.pop("group_on", (False,) * n_g),
        dg_on=kwargs.pop("dg_on", (False,) * n_d),
        correction=correction,
        **kwargs,
    )
    return schedule, instance


def test_lambda_proportional_to_forecast_load(scenario_factory):
    """
    Two energised groups at 300 kW and 100 kW share the correction 3:1.
    """
    scenario = scenario_factory(load={"1": 200.0, "2": 100.0, "3": 100.0, "4": 60.0})

    lam = allocate_lambda(scenario, [True, True, False], slot=0)

    # Assertions
    assert lam == pytest.approx([0.75, 0.25, 0.0])
    assert lam.sum() == pytest.approx(1.0)


def test_lambda_single_and_empty(scenario_factory):
    scenario = scenario_factory(load={"1": 200.0, "2": 100.0, "3": 0.0, "4": 60.0})

    # Assertions
    assert allocate_lambda(scenario, [True, False, False], 0) == pytest.approx([1.0, 0.0, 0.0])
    assert allocate_lambda(scenario, [True, True, False], 0)[1] == 0.0
    assert np.all(allocate_lambda(scenario, [False, False, False], 0) == 0.0)


def test_correction_input_validation():
    """
    Shares must be non-negative and sum to one unless all zero.
    """
    ok = CorrectionInput(90.0, np.array([0.5, 0.5]))

    # Assertions
    assert ok.per_group_kw == pytest.approx([45.0, 45.0])
    assert CorrectionInput.none(3).per_group_kw.sum() == 0.0
    with pytest.raises(ValueError):
        CorrectionInput(10.0, np.array([-0.5, 1.5]))
    with pytest.raises(ValueError):
        CorrectionInput(10.0, np.array([0.3, 0.3]))


def test_tracks_schedule_without_correction(small_scenario):
    """
    Equal forecasts and no correction reproduce the stage-1 commitment.
    """
    schedule, instance = _dispatch(small_scenario)

    plan = solve_stage2(small_scenario, instance)

    # Assertions
    assert plan.status is SolveStatus.OPTIMAL
    assert schedule.x[0].all()
    assert plan.switch_deviation == 0
    assert plan.dg_deviation_kw == pytest.approx(0.0, abs=1e-6)
    assert plan.command.p_es.sum() == pytest.approx(420.0, abs=1e-6)


def test_correction_reduces_balanced_load(small_scenario):
    """
    A 90 kW over-forecast on the root group lowers the storage setpoint by
    90 kW.
    """
    lam = allocate_lambda(small_scenario, [True, False, False], 0)
    _, instance = _dispatch(small_scenario, correction=CorrectionInput(90.0, lam))

    plan = solve_stage2(small_scenario, instance)

    # Assertions
    assert plan.command.x.all()
    assert plan.command.p_es.sum() == pytest.approx(330.0, abs=1e-6)
    assert plan.correction.epsilon == 90.0


def test_command_shapes(small_scenario):
    _, instance = _dispatch(small_scenario)

    command = solve_stage2(small_scenario, instance).command
    idle = DispatchCommand.idle(small_scenario)

    # Assertions
    assert command.x.shape == (3,)
    assert command.y.shape == command.p_dg.shape == (1,)
    assert command.p_es.shape == command.q_es.shape == (1,)
    assert idle.x.sum() == 0 and idle.p_es.shape == (1,)


def test_horizon_shrinks_at_the_end(small_scenario):
    """
    The dispatch window is cut at the restoration end and vanishes past it.
    """
    _, tail = _dispatch(small_scenario, step=20)

    # Assertions
    assert tail.steps == 4
    assert build_stage2(small_scenario, tail).n_vars > 0
    with pytest.raises(ScenarioError) as exc_info:
        _dispatch(small_scenario, step=24)
    assert exc_info.value.code == "empty_window"


def test_forced_group_without_capacity_is_diagnosed(scenario_factory):
    """
    A group held on by commitment memory with a 50 kVA usable polygon
    cannot be balanced; relaxing memory makes the model feasible.
    """
    scenario = scenario_factory(dg=[])
    _, instance = _dispatch(
        scenario, group_on=(True, False, False), group_on_minutes=(0, None, None), gamma=0.025
    )

    with pytest.raises(InfeasibleModelError) as exc_info:
        solve_stage2(scenario, instance)

    # Assertions
    assert instance.group_forced[0] > 0
    assert any("commitment memory" in d for d in exc_info.value.diagnosis)
    assert solve_stage2(scenario, instance.relaxed()).command.x[0] == 0


def test_prorated_fuel_floor():
    """
    The allowed burn is the larger of the planned burn and an even share of
    the fuel above the target; the floor never undercuts the target.
    """
    # Assertions
    assert prorated_fuel_floor(900.0, None, 10.0, 30, 120) is None
    assert prorated_fuel_floor(900.0, 500.0, 10.0, 30, 120) == pytest.approx(800.0)
    assert prorated_fuel_floor(900.0, 500.0, 150.0, 30, 120) == pytest.approx(750.0)
    assert prorated_fuel_floor(900.0, 500.0, 10.0, 30, 30) == pytest.approx(500.0)
    assert prorated_fuel_floor(900.0, 500.0, 600.0, 30, 120) == pytest.approx(500.0)
    assert prorated_fuel_floor(450.0, 500.0, 10.0, 30, 120) == pytest.approx(450.0)


def test_fuel_floor_caps_extra_diesel_burn(scenario_factory):
    """
    With storage unable to deliver energy, a 50 kW under-forecast has to
    come from the diesel; the horizon floor holds the burn to the plan and
    a group is shed instead.
    """
    scenario = scenario_factory(es=[{
        "id": "mes", "kva_rating": 250, "energy_rating": 1, "soc_init": 0.5,
        "role": "grid_forming",
    }])
    lam = allocate_lambda(scenario, [True, False, False], 0)
    _, instance = _dispatch(scenario, correction=CorrectionInput(-50.0, lam),
                            fuel_targets=[900.0])
    floor = instance.fuel_floor[0]

    capped = solve_stage2(scenario, instance)
    loose = solve_stage2(scenario, instance.relaxed(memory=False, fuel=True))

    # Assertions
    assert 900.0 < floor < 1000.0
    assert capped.fuel[-1, 0] >= floor - 1e-6
    assert loose.fuel[-1, 0] < floor - 1.0
    assert capped.x.sum() < loose.x.sum()
    assert loose.switch_deviation == 0


def test_fuel_floor_absent_without_targets(small_scenario):
    _, instance = _dispatch(small_scenario)

    # Assertions
    assert instance.fuel_floor == (None,)
    assert instance.relaxed(fuel=True).fuel_floor == (None,)
