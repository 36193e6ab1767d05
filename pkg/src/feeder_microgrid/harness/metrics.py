"""
Restoration performance metrics computed from a run's minute trace and
event log.
"""

from __future__ import annotations

from typing import Annotated, Dict, List, Optional

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field

from feeder_microgrid.plant import SHUTDOWN_SCHEDULED, SHUTDOWN_UNSCHEDULED
from feeder_microgrid.scenario import Scenario

logger = structlog.get_logger(__name__)

Percent = Annotated[float, Field(ge=0.0, le=100.0)]


class Metrics(BaseModel):
    """Service, PV and shutdown indicators for one case."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    p_cl: Percent
    p_ncl: Percent
    p_pv: Percent
    p_total: Percent
    t_cl_min: float = Field(ge=0.0)
    t_ncl_min: float = Field(ge=0.0)
    n_cl: int = Field(ge=0)
    n_sch: int = Field(ge=0)
    n_unsch: int = Field(ge=0)
    t_sch_min: float = Field(ge=0.0)
    t_unsch_min: float = Field(ge=0.0)
    t_total_min: float = Field(ge=0.0)
    served_energy_kwh: float = Field(0.0, ge=0.0)
    demand_energy_kwh: float = Field(0.0, ge=0.0)

    @classmethod
    def zero(cls) -> "Metrics":
        return cls(p_cl=0.0, p_ncl=0.0, p_pv=0.0, p_total=0.0, t_cl_min=0.0, t_ncl_min=0.0,
                   n_cl=0, n_sch=0, n_unsch=0, t_sch_min=0.0, t_unsch_min=0.0, t_total_min=0.0)


# display label, attribute, kind ("pct", "duration", "count")
METRIC_ROWS: List[tuple] = [
    ("P_CL (%)", "p_cl", "pct"),
    ("P_NCL (%)", "p_ncl", "pct"),
    ("P_PV (%)", "p_pv", "pct"),
    ("P_Total (%)", "p_total", "pct"),
    ("T_CL", "t_cl_min", "duration"),
    ("T_NCL", "t_ncl_min", "duration"),
    ("N_CL", "n_cl", "count"),
    ("N_uG_Sch", "n_sch", "count"),
    ("N_uG_UnSch", "n_unsch", "count"),
    ("T_uG_Sch", "t_sch_min", "duration"),
    ("T_uG_UnSch", "t_unsch_min", "duration"),
    ("T_uG_Total", "t_total_min", "duration"),
]

_ENERGY_COLUMNS = ["demand_kw", "critical_demand_kw", "served_load_kw", "served_critical_kw",
                   "available_pv_kw", "served_pv_kw"]


def aggregate_trace(trace: pd.DataFrame, factor: int) -> pd.DataFrame:
    """Average a trace over blocks of ``factor`` rows.

    Power columns become block means and 0/1 flags become the served or
    shut-down fraction, so energies and durations are preserved exactly.
    """
    if factor < 1:
        raise ValueError("factor must be at least 1")
    if trace.empty or factor == 1:
        return trace.copy()
    if len(trace) % factor:
        raise ValueError(f"trace of {len(trace)} rows does not split into blocks of {factor}")
    numeric = trace.select_dtypes(include=[np.number]).drop(columns=["minute"], errors="ignore")
    block = np.arange(len(trace)) // factor
    out = numeric.groupby(block).mean()
    out.insert(0, "minute", trace["minute"].to_numpy()[::factor])
    return out.reset_index(drop=True)


def _pct(num: float, den: float) -> float:
    if den <= 1e-12:
        return 0.0
    return float(min(max(100.0 * num / den, 0.0), 100.0))


def _weighted_duration(trace: pd.DataFrame, group_ids: List[str], counts: np.ndarray,
                       step_minutes: int) -> float:
    """Node-weighted mean of per-group energised minutes."""
    total = counts.sum()
    if total == 0:
        return 0.0
    minutes = np.array([
        trace[f"on_{g}"].sum() * step_minutes if f"on_{g}" in trace else 0.0 for g in group_ids
    ])
    return float((minutes * counts).sum() / total)


def compute_metrics(
    log, scenario: Scenario, trace: Optional[pd.DataFrame] = None, step_minutes: Optional[int] = None
) -> Metrics:
    """Indicators for a finished run.

    ``trace``/``step_minutes`` default to the run's own minute trace; pass an
    aggregated trace to evaluate on a coarser grid.
    """
    trace = log.trace if trace is None else trace
    step = log.trace_step_minutes if step_minutes is None else step_minutes
    if trace.empty:
        return Metrics.zero()

    h = step / 60.0
    energy: Dict[str, float] = {c: float(trace[c].sum()) * h for c in _ENERGY_COLUMNS}
    noncrit_demand = energy["demand_kw"] - energy["critical_demand_kw"]
    noncrit_served = energy["served_load_kw"] - energy["served_critical_kw"]

    critical = set(
        g.id for g, n in zip(scenario.groups, scenario.critical_node_counts) if n > 0
    )
    n_cl = sum(count for gid, count in log.interruptions.items() if gid in critical)
    n_sch = sum(1 for e in log.events if e.kind == SHUTDOWN_SCHEDULED)
    n_unsch = sum(1 for e in log.events if e.kind == SHUTDOWN_UNSCHEDULED)
    t_sch = float(trace["sched_shutdown"].sum()) * step
    t_unsch = float(trace["unsched_shutdown"].sum()) * step
    group_ids = [g.id for g in scenario.groups]

    metrics = Metrics(
        p_cl=_pct(energy["served_critical_kw"], energy["critical_demand_kw"]),
        p_ncl=_pct(noncrit_served, noncrit_demand),
        p_pv=_pct(energy["served_pv_kw"], energy["available_pv_kw"]),
        p_total=_pct(energy["served_load_kw"], energy["demand_kw"]),
        t_cl_min=_weighted_duration(trace, group_ids, scenario.critical_node_counts, step),
        t_ncl_min=_weighted_duration(trace, group_ids, scenario.noncritical_node_counts, step),
        n_cl=int(n_cl),
        n_sch=n_sch,
        n_unsch=n_unsch,
        t_sch_min=t_sch,
        t_unsch_min=t_unsch,
        t_total_min=t_sch + t_unsch,
        served_energy_kwh=max(energy["served_load_kw"], 0.0),
        demand_energy_kwh=max(energy["demand_kw"], 0.0),
    )
    logger.info("metrics_computed", case=log.case.name, p_cl=round(metrics.p_cl, 2),
                p_total=round(metrics.p_total, 2), unscheduled=metrics.n_unsch)
    return metrics


def format_duration(minutes: float) -> str:
    """``XXh YYm`` rendering used in comparison tables."""
    total = int(round(minutes))
    return f"{total // 60:02d}h {total % 60:02d}m"
