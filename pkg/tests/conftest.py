"""
Shared fixtures: small in-memory scenarios with per-node series that are
constant unless a test passes arrays.
"""

import copy
from datetime import datetime, timedelta
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd
import pytest
import structlog

from feeder_microgrid.harness.runner import RunLog, resolve_case
from feeder_microgrid.plant import SHUTDOWN_SCHEDULED, PlantEvent
from feeder_microgrid.scenario import (
    PHASES,
    Scenario,
    SeriesKind,
    TimeSeriesFrame,
    build_scenario,
    parse_config,
    reactive_from_pf,
)

START = datetime(2021, 7, 1)

DEFAULT_GROUPS: List[Dict[str, Any]] = [
    {"id": "g1", "weight": 0.4, "nodes": ["1", "2"], "critical_nodes": ["1"]},
    {"id": "g2", "weight": 0.2, "parent": "g1", "nodes": ["3"]},
    {"id": "g3", "weight": 0.01, "parent": "g1", "nodes": ["4"]},
]
DEFAULT_LOAD: Dict[str, float] = {"1": 120.0, "2": 90.0, "3": 150.0, "4": 60.0}
DEFAULT_ES: Dict[str, Any] = {
    "id": "mes", "kva_rating": 2000, "energy_rating": 8000, "soc_init": 0.5,
    "role": "grid_forming",
}
DEFAULT_DG: Dict[str, Any] = {
    "id": "dg1", "kva_rating": 1000, "kva_min": 100, "fuel_init": 1000, "fuel_max": 1000,
    "fuel_final": 0, "min_up": 2,
}


def series_frame(
    kind: SeriesKind,
    load: Mapping[str, Any],
    pv: Optional[Mapping[str, Any]] = None,
    minutes: int = 120,
    start: datetime = START,
    power_factor: float = 0.95,
) -> TimeSeriesFrame:
    """One-minute frame; each node's total kW is split evenly over the phases."""
    nodes = tuple(load)
    pv = pv or {}
    load_arr = np.zeros((minutes, len(nodes), len(PHASES)))
    pv_arr = np.zeros_like(load_arr)
    for j, node in enumerate(nodes):
        load_arr[:, j, :] = np.broadcast_to(np.asarray(load[node], dtype=float), (minutes,))[:, None] / 3.0
        pv_arr[:, j, :] = np.broadcast_to(np.asarray(pv.get(node, 0.0), dtype=float), (minutes,))[:, None] / 3.0
    return TimeSeriesFrame(kind, pd.Timestamp(start), 1, nodes, load_arr, pv_arr,
                           reactive_from_pf(load_arr, power_factor))


def scenario_config(
    hours: float = 2.0,
    groups: Optional[List[Dict[str, Any]]] = None,
    es: Optional[List[Dict[str, Any]]] = None,
    dg: Optional[List[Dict[str, Any]]] = None,
    policy: Optional[Dict[str, Any]] = None,
    solver: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Raw config key tree as a scenario file would hold it."""
    return {
        "grids": {
            "dt_sched": 30, "dt_disp": 5, "dt_rt": 1, "horizon_sched": 48, "horizon_disp": 6,
            "restoration_start": START.isoformat(),
            "restoration_end": (START + timedelta(minutes=int(round(hours * 60)))).isoformat(),
        },
        "groups": copy.deepcopy(groups if groups is not None else DEFAULT_GROUPS),
        "resources": {
            "es": es if es is not None else [dict(DEFAULT_ES)],
            "dg": dg if dg is not None else [dict(DEFAULT_DG)],
        },
        "policy": policy or {},
        "solver": solver or {"backend": "highs", "mip_gap": 1e-6},
    }


def make_scenario(
    hours: float = 2.0,
    load: Optional[Mapping[str, Any]] = None,
    pv: Optional[Mapping[str, Any]] = None,
    truth_load: Optional[Mapping[str, Any]] = None,
    truth_pv: Optional[Mapping[str, Any]] = None,
    **config: Any,
) -> Scenario:
    """Scenario whose forecasts equal ``load``/``pv`` and whose truth may differ."""
    minutes = int(round(hours * 60))
    load = load or DEFAULT_LOAD
    frames = {
        SeriesKind.TRUTH: series_frame(
            SeriesKind.TRUTH, truth_load or load, truth_pv if truth_pv is not None else pv, minutes
        ),
        SeriesKind.STAGE1: series_frame(SeriesKind.STAGE1, load, pv, minutes),
        SeriesKind.STAGE2: series_frame(SeriesKind.STAGE2, load, pv, minutes),
    }
    return build_scenario(parse_config(scenario_config(hours=hours, **config)), frames)


@pytest.fixture
def scenario_factory():
    return make_scenario


@pytest.fixture
def small_scenario() -> Scenario:
    return make_scenario()


@pytest.fixture
def config_factory():
    return scenario_config


@pytest.fixture
def frame_factory():
    return series_frame


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep structlog output at warnings during tests."""
    structlog.configure(wrapper_class=structlog.make_filtering_bound_logger(30))
    yield
    structlog.reset_defaults()


@pytest.fixture
def toy_log():
    """Four hand-written trace minutes over the default groups, ending in a scheduled shutdown."""
    stamps = pd.date_range(START, periods=4, freq="min")
    trace = pd.DataFrame({
        "minute": [0, 1, 2, 3],
        "timestamp": stamps,
        "shutdown": ["none", "none", "none", "scheduled"],
        "sched_shutdown": [0.0, 0.0, 0.0, 1.0],
        "unsched_shutdown": [0.0, 0.0, 0.0, 0.0],
        "demand_kw": [100.0] * 4,
        "critical_demand_kw": [40.0] * 4,
        "served_load_kw": [100.0, 100.0, 60.0, 0.0],
        "served_critical_kw": [40.0, 40.0, 40.0, 0.0],
        "available_pv_kw": [10.0] * 4,
        "served_pv_kw": [10.0, 10.0, 5.0, 0.0],
        "on_g1": [1.0, 1.0, 1.0, 0.0],
        "on_g2": [1.0, 1.0, 0.0, 0.0],
        "on_g3": [1.0, 0.0, 0.0, 0.0],
    })
    return RunLog(
        case=resolve_case("base"),
        trace=trace,
        dispatch=pd.DataFrame(),
        diagnostics=pd.DataFrame(),
        schedule=pd.DataFrame(),
        events=[PlantEvent(3, SHUTDOWN_SCHEDULED, "all groups commanded off")],
        group_ids=["g1", "g2", "g3"],
        interruptions={"g1": 1, "g2": 1, "g3": 1},
    )
