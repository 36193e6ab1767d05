"""
Scenario data model: time grids, load groups, resources, policy and the
truth / forecast time series, plus the loaders and validators that build an
immutable :class:`Scenario` from a config file and CSV series.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveFloat,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_core import PydanticCustomError

from feeder_microgrid.exceptions import ScenarioError

logger = structlog.get_logger(__name__)

PHASES: Tuple[str, ...] = ("a", "b", "c")
_PHASE_ALIASES = {"a": 0, "b": 1, "c": 2, "1": 0, "2": 1, "3": 2}
MINUTES_PER_DAY = 24 * 60
DEFAULT_POWER_FACTOR = 0.95

# error types raised inside validators that keep their own reason code
_PASS_THROUGH_CODES = {
    "grid_incompatible",
    "group_cycle",
    "unknown_parent",
    "duplicate_id",
    "role_violation",
}


class SeriesKind(str, Enum):
    TRUTH = "truth"
    STAGE1 = "stage1_forecast"
    STAGE2 = "stage2_forecast"


class EsRole(str, Enum):
    GRID_FORMING = "grid_forming"
    GRID_FOLLOWING = "grid_following"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# =============================================================================
# Configuration models
# =============================================================================


class TimeGrids(_Frozen):
    """Scheduler (Δt), dispatcher (Δk) and real-time (Δh) grids in minutes."""

    dt_sched: int = Field(30, gt=0)
    dt_disp: int = Field(5, gt=0)
    dt_rt: int = Field(1, gt=0)
    horizon_sched: int = Field(48, gt=0)
    horizon_disp: int = Field(6, gt=0)
    restoration_start: datetime
    restoration_end: datetime

    @model_validator(mode="after")
    def _check_grids(self) -> "TimeGrids":
        if self.dt_sched % self.dt_disp:
            raise PydanticCustomError(
                "grid_incompatible", "dt_sched must be a multiple of dt_disp"
            )
        if self.dt_disp % self.dt_rt:
            raise PydanticCustomError(
                "grid_incompatible", "dt_disp must be a multiple of dt_rt"
            )
        if self.horizon_sched * self.dt_sched != MINUTES_PER_DAY:
            raise PydanticCustomError(
                "grid_incompatible", "horizon_sched * dt_sched must span 24 h"
            )
        if self.restoration_end < self.restoration_start:
            raise PydanticCustomError(
                "grid_incompatible", "restoration_end precedes restoration_start"
            )
        if self.total_minutes % self.dt_sched:
            raise PydanticCustomError(
                "grid_incompatible",
                "restoration window must be a whole number of dt_sched slots",
            )
        return self

    @property
    def total_minutes(self) -> int:
        return int((self.restoration_end - self.restoration_start) / timedelta(minutes=1))

    @property
    def n_sched_slots(self) -> int:
        return self.total_minutes // self.dt_sched

    @property
    def n_disp_slots(self) -> int:
        return self.total_minutes // self.dt_disp

    @property
    def disp_per_sched(self) -> int:
        return self.dt_sched // self.dt_disp

    @property
    def rt_per_disp(self) -> int:
        return self.dt_disp // self.dt_rt

    @property
    def days(self) -> int:
        """|D|: restoration days, the last one possibly partial."""
        return max(1, math.ceil(self.n_sched_slots / self.horizon_sched))

    def day_of_slot(self, slot: int) -> Tuple[int, int]:
        """1-based (day d, slot-in-day t) for an absolute stage-1 slot."""
        return slot // self.horizon_sched + 1, slot % self.horizon_sched + 1

    def timestamp(self, minute: int) -> pd.Timestamp:
        return pd.Timestamp(self.restoration_start) + pd.Timedelta(minutes=minute)


class LoadGroupSpec(_Frozen):
    id: str
    weight: PositiveFloat
    switch_weight: Optional[PositiveFloat] = None
    parent: Optional[str] = None
    nodes: Tuple[str, ...] = Field(min_length=1)
    critical_nodes: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _critical_subset(self) -> "LoadGroupSpec":
        stray = set(self.critical_nodes) - set(self.nodes)
        if stray:
            raise ValueError(f"critical nodes {sorted(stray)} are not group members")
        return self


class EsSpec(_Frozen):
    id: str
    kva_rating: PositiveFloat
    energy_rating: PositiveFloat
    soc_min: float = Field(0.1, ge=0.0, le=1.0)
    soc_max: float = Field(0.95, ge=0.0, le=1.0)
    soc_init: float = Field(0.9, ge=0.0, le=1.0)
    efficiency: float = Field(0.95, gt=0.0, le=1.0)
    role: EsRole = EsRole.GRID_FORMING
    # P̲ (charge), P̄ (discharge) and Q̄ default to the kVA rating
    p_charge_max: Optional[PositiveFloat] = None
    p_discharge_max: Optional[PositiveFloat] = None
    q_max: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def _soc_window(self) -> "EsSpec":
        if not self.soc_min < self.soc_max:
            raise ValueError("soc_min must be below soc_max")
        if not self.soc_min <= self.soc_init <= self.soc_max:
            raise ValueError("soc_init must lie within [soc_min, soc_max]")
        return self

    @property
    def p_lower(self) -> float:
        return self.p_charge_max if self.p_charge_max is not None else self.kva_rating

    @property
    def p_upper(self) -> float:
        return self.p_discharge_max if self.p_discharge_max is not None else self.kva_rating

    @property
    def q_upper(self) -> float:
        return self.q_max if self.q_max is not None else self.kva_rating

    @property
    def kappa_hours(self) -> float:
        """Ē·η in kWh; divide by Δt (h) to get κ."""
        return self.energy_rating * self.efficiency


class DgSpec(_Frozen):
    id: str
    kva_rating: PositiveFloat
    kva_min: float = Field(0.0, ge=0.0)
    pf_angle: float = Field(0.0, ge=0.0, lt=math.pi / 2)
    fuel_init: float = Field(ge=0.0)
    fuel_min: float = Field(0.0, ge=0.0)
    fuel_max: float = Field(gt=0.0)
    fuel_final: float = Field(0.0, ge=0.0)
    idle_coeff: float = Field(84.87, ge=0.0)
    prop_coeff: float = Field(0.20, ge=0.0)
    startup_cost: float = Field(6.0, ge=0.0)
    min_up: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _fuel_window(self) -> "DgSpec":
        if not self.fuel_min <= self.fuel_init <= self.fuel_max:
            raise ValueError("fuel_init must lie within [fuel_min, fuel_max]")
        if not self.fuel_min <= self.fuel_final <= self.fuel_max:
            raise ValueError("fuel_final must lie within [fuel_min, fuel_max]")
        if self.kva_min > self.kva_rating:
            raise ValueError("kva_min exceeds kva_rating")
        return self

    @property
    def p_max(self) -> float:
        return self.kva_rating * math.cos(self.pf_angle)

    @property
    def p_min(self) -> float:
        return self.kva_min * math.cos(self.pf_angle)

    @property
    def tan_phi(self) -> float:
        return math.tan(self.pf_angle)


class PolicyConfig(_Frozen):
    reserve_mode: Literal["fixed", "netload_fraction", "dynamic"] = "dynamic"
    fixed_gamma: float = Field(0.8, gt=0.0, le=1.0)
    netload_reserve_fraction: float = Field(0.2, ge=0.0, le=1.0)
    correction: bool = True
    fuel_mode: Literal["fixed", "rationed", "equal"] = "rationed"
    fixed_fuel_reserve: float = Field(500.0, ge=0.0)
    correction_window: int = Field(10, ge=1)
    pv_scale_correction: bool = True
    pv_scale_bounds: Tuple[float, float] = (-0.5, 0.5)
    pv_scale_min_spread_kw: float = Field(25.0, ge=0.0)
    ma_order: int = Field(3, ge=0)
    ma_window: int = Field(12, ge=2)
    min_reserve: float = Field(0.05, ge=0.0, lt=1.0)
    gamma_bounds: Tuple[float, float] = (0.5, 0.95)
    msd_slots: int = Field(4, ge=1)
    polygon_sides: int = Field(6, ge=3)
    dg_deviation_weight: float = Field(1.0, ge=0.0)
    switch_weight_margin: float = Field(1e-3, ge=0.0)
    soc_rationing: bool = False
    default_power_factor: float = Field(DEFAULT_POWER_FACTOR, gt=0.0, le=1.0)
    shutdown_minutes: int = Field(30, ge=1)

    @field_validator("gamma_bounds")
    @classmethod
    def _ordered_bounds(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError("gamma bounds must satisfy 0 <= low <= high <= 1")
        return value

    @field_validator("pv_scale_bounds")
    @classmethod
    def _scale_bounds(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not -1.0 < low <= 0.0 <= high:
            raise ValueError("pv scale bounds must satisfy -1 < low <= 0 <= high")
        return value


class SolverConfig(_Frozen):
    backend: Literal["highs", "bnb"] = "highs"
    mip_gap: float = Field(1e-4, ge=0.0)
    node_limit: int = Field(100_000, ge=1)
    time_limit: Optional[float] = Field(None, gt=0.0)


class SeriesPaths(_Frozen):
    truth: str
    stage1_forecast: str
    stage2_forecast: str


class LoggingConfig(_Frozen):
    level: str = "INFO"
    format: Literal["console", "json"] = "console"


class ResourcesConfig(_Frozen):
    es: Tuple[EsSpec, ...] = Field(min_length=1)
    dg: Tuple[DgSpec, ...] = ()


class ScenarioConfig(_Frozen):
    """Raw key tree of a scenario config file."""

    grids: TimeGrids
    groups: Tuple[LoadGroupSpec, ...] = Field(min_length=1)
    resources: ResourcesConfig
    policy: PolicyConfig = PolicyConfig()
    solver: SolverConfig = SolverConfig()
    series: Optional[SeriesPaths] = None
    logging: LoggingConfig = LoggingConfig()

    @model_validator(mode="after")
    def _check_topology(self) -> "ScenarioConfig":
        ids = [g.id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise PydanticCustomError("duplicate_id", "load group ids must be unique")
        asset_ids = [u.id for u in self.resources.es] + [u.id for u in self.resources.dg]
        if len(set(asset_ids)) != len(asset_ids):
            raise PydanticCustomError("duplicate_id", "resource ids must be unique")
        seen_nodes: Dict[str, str] = {}
        for group in self.groups:
            for node in group.nodes:
                if node in seen_nodes:
                    raise PydanticCustomError(
                        "duplicate_id",
                        "node {node} belongs to groups {a} and {b}",
                        {"node": node, "a": seen_nodes[node], "b": group.id},
                    )
                seen_nodes[node] = group.id
        check_group_tree(self.groups)
        forming = [u for u in self.resources.es if u.role is EsRole.GRID_FORMING]
        if len(forming) != 1:
            raise PydanticCustomError(
                "role_violation", "exactly one grid-forming storage unit is required"
            )
        return self


def check_group_tree(groups: Sequence[LoadGroupSpec]) -> None:
    """Reject unknown parents and cycles in the group precedence graph."""
    parents = {g.id: g.parent for g in groups}
    for gid, parent in parents.items():
        if parent is not None and parent not in parents:
            raise PydanticCustomError(
                "unknown_parent", "group {gid} names unknown parent {parent}",
                {"gid": gid, "parent": parent},
            )
    for start in parents:
        seen = {start}
        cursor = parents[start]
        while cursor is not None:
            if cursor in seen:
                raise PydanticCustomError(
                    "group_cycle", "group precedence cycle through {gid}", {"gid": start}
                )
            seen.add(cursor)
            cursor = parents[cursor]


# =============================================================================
# Time series
# =============================================================================


@dataclass(frozen=True, eq=False)
class TimeSeriesFrame:
    """Per node, per phase power series on a uniform grid.

    Arrays are shaped ``(steps, nodes, 3)``; single-phase nodes carry zeros on
    the unused phases.
    """

    kind: SeriesKind
    start: pd.Timestamp
    step_minutes: int
    nodes: Tuple[str, ...]
    load_kw: np.ndarray
    pv_kw: np.ndarray
    q_kvar: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.load_kw.shape[0], len(self.nodes), len(PHASES))
        for name in ("load_kw", "pv_kw", "q_kvar"):
            arr = getattr(self, name)
            if arr.shape != expected:
                raise ScenarioError(
                    "schema_violation", f"{self.kind.value}.{name}",
                    f"shape {arr.shape} != {expected}",
                )
            if not np.all(np.isfinite(arr)):
                raise ScenarioError(
                    "coverage_gap", f"{self.kind.value}.{name}", "series contains gaps"
                )
            arr.setflags(write=False)
        if np.any(self.load_kw < 0.0):
            raise ScenarioError("negative_series", f"{self.kind.value}.load_kw", "load_kw < 0")
        if np.any(self.pv_kw < 0.0):
            raise ScenarioError("negative_series", f"{self.kind.value}.pv_kw", "pv_kw < 0")

    @property
    def n_steps(self) -> int:
        return int(self.load_kw.shape[0])

    @property
    def end(self) -> pd.Timestamp:
        return self.start + pd.Timedelta(minutes=self.step_minutes * self.n_steps)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_steps, freq=f"{self.step_minutes}min")

    def slice_window(self, start: pd.Timestamp, n_steps: int) -> "TimeSeriesFrame":
        offset_min = (start - self.start) / pd.Timedelta(minutes=1)
        if offset_min % self.step_minutes:
            raise ScenarioError(
                "grid_incompatible", self.kind.value,
                f"window start {start} is off the {self.step_minutes}-min grid",
            )
        first = int(offset_min // self.step_minutes)
        return dataclasses.replace(
            self,
            start=start,
            load_kw=self.load_kw[first:first + n_steps].copy(),
            pv_kw=self.pv_kw[first:first + n_steps].copy(),
            q_kvar=self.q_kvar[first:first + n_steps].copy(),
        )

    def to_long_frame(self) -> pd.DataFrame:
        """Long table with the CSV interchange columns."""
        steps, nodes, phases = self.load_kw.shape
        ts = np.repeat(self.timestamps.strftime("%Y-%m-%dT%H:%M:%S").to_numpy(), nodes * phases)
        return pd.DataFrame({
            "timestamp": ts,
            "node": np.tile(np.repeat(np.array(self.nodes, dtype=object), phases), steps),
            "phase": np.tile(np.array(PHASES, dtype=object), steps * nodes),
            "load_kw": self.load_kw.reshape(-1),
            "pv_kw": self.pv_kw.reshape(-1),
            "q_kvar": self.q_kvar.reshape(-1),
        })


def resample(frame: TimeSeriesFrame, target_step: int) -> TimeSeriesFrame:
    """Mean-downsample or constant-hold upsample ``frame`` to ``target_step``."""
    step = frame.step_minutes
    if target_step == step:
        return frame
    if target_step > step:
        if target_step % step:
            raise ScenarioError(
                "grid_incompatible", frame.kind.value,
                f"cannot resample {step}-min series to {target_step} min",
            )
        ratio = target_step // step
        usable = (frame.n_steps // ratio) * ratio
        if usable < frame.n_steps:
            logger.warning(
                "resample_dropped_partial_block", kind=frame.kind.value,
                step=step, target_step=target_step, dropped_steps=frame.n_steps - usable,
            )

        def reduce(arr: np.ndarray) -> np.ndarray:
            return arr[:usable].reshape(usable // ratio, ratio, *arr.shape[1:]).mean(axis=1)
    else:
        if step % target_step:
            raise ScenarioError(
                "grid_incompatible", frame.kind.value,
                f"cannot resample {step}-min series to {target_step} min",
            )
        ratio = step // target_step

        def reduce(arr: np.ndarray) -> np.ndarray:
            return np.repeat(arr, ratio, axis=0)

    return dataclasses.replace(
        frame,
        step_minutes=target_step,
        load_kw=reduce(frame.load_kw),
        pv_kw=reduce(frame.pv_kw),
        q_kvar=reduce(frame.q_kvar),
    )


def reactive_from_pf(load_kw: np.ndarray, power_factor: float) -> np.ndarray:
    return load_kw * math.tan(math.acos(power_factor))


def read_series_csv(
    path: Path, kind: SeriesKind, power_factor: float = DEFAULT_POWER_FACTOR
) -> TimeSeriesFrame:
    """Read ``timestamp,node,phase,load_kw,pv_kw[,q_kvar]`` into a frame."""
    if not path.exists():
        raise ScenarioError("missing_file", f"series.{kind.value}", f"{path} does not exist")
    df = pd.read_csv(path, dtype={"node": str, "phase": str})
    missing = {"timestamp", "node", "phase", "load_kw", "pv_kw"} - set(df.columns)
    if missing:
        raise ScenarioError(
            "schema_violation", f"series.{kind.value}", f"missing columns {sorted(missing)}"
        )
    if df.empty:
        raise ScenarioError("coverage_gap", f"series.{kind.value}", "series file is empty")

    stamps = pd.to_datetime(df["timestamp"])
    unique = np.sort(stamps.unique())
    if len(unique) > 1:
        deltas = np.diff(unique) / np.timedelta64(1, "m")
        step = float(deltas.min())
    else:
        step = 1.0
    if step <= 0 or step != int(step):
        raise ScenarioError(
            "grid_incompatible", f"series.{kind.value}", "timestamps are not on a whole-minute grid"
        )
    step = int(step)
    start = pd.Timestamp(unique[0])
    offsets = (stamps - start) / pd.Timedelta(minutes=step)
    if np.any(offsets % 1):
        raise ScenarioError(
            "grid_incompatible", f"series.{kind.value}", "timestamps are not uniformly spaced"
        )
    t_idx = offsets.astype(int).to_numpy()
    n_steps = int(t_idx.max()) + 1

    phase_idx = df["phase"].str.lower().map(_PHASE_ALIASES)
    if phase_idx.isna().any():
        bad = df.loc[phase_idx.isna(), "phase"].iloc[0]
        raise ScenarioError("schema_violation", f"series.{kind.value}.phase", f"unknown phase {bad!r}")
    node_cat = pd.Categorical(df["node"])
    nodes = tuple(str(n) for n in node_cat.categories)
    n_idx = node_cat.codes

    if pd.MultiIndex.from_arrays([t_idx, n_idx, phase_idx]).has_duplicates:
        raise ScenarioError("schema_violation", f"series.{kind.value}", "duplicate rows")

    def scatter(values: np.ndarray) -> np.ndarray:
        arr = np.full((n_steps, len(nodes), len(PHASES)), np.nan)
        arr[t_idx, n_idx, phase_idx.to_numpy(dtype=int)] = values
        return arr

    load = scatter(df["load_kw"].to_numpy(dtype=float))
    pv = scatter(df["pv_kw"].to_numpy(dtype=float))
    if "q_kvar" in df.columns:
        q = scatter(df["q_kvar"].to_numpy(dtype=float))
    else:
        q = reactive_from_pf(load, power_factor)

    # phases a node never reports are absent (zero); partial holes are gaps
    absent = np.all(np.isnan(load), axis=0)
    for arr in (load, pv, q):
        arr[:, absent] = 0.0
    holes = np.isnan(load) | np.isnan(pv) | np.isnan(q)
    if holes.any():
        node = nodes[int(np.argwhere(holes)[0][1])]
        raise ScenarioError(
            "coverage_gap", f"{kind.value}:{node}", f"series for node {node} has gaps"
        )
    return TimeSeriesFrame(kind, start, step, nodes, load, pv, q)


def write_series_csv(frame: TimeSeriesFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_long_frame().to_csv(path, index=False, float_format="%.6f")


# =============================================================================
# Scenario
# =============================================================================


@dataclass(frozen=True, eq=False)
class GroupProfile:
    """Group-level sums of a series, shaped ``(steps, groups, 3)``."""

    step_minutes: int
    load_kw: np.ndarray
    pv_kw: np.ndarray
    q_kvar: np.ndarray
    critical_load_kw: np.ndarray

    @property
    def net_kw(self) -> np.ndarray:
        return self.load_kw - self.pv_kw


_GRID_OF_KIND = {
    SeriesKind.TRUTH: "dt_rt",
    SeriesKind.STAGE1: "dt_sched",
    SeriesKind.STAGE2: "dt_disp",
}


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated, immutable description of one restoration study."""

    grids: TimeGrids
    groups: Tuple[LoadGroupSpec, ...]
    es_units: Tuple[EsSpec, ...]
    dg_units: Tuple[DgSpec, ...]
    series: Mapping[SeriesKind, TimeSeriesFrame]
    policy: PolicyConfig = PolicyConfig()
    solver: SolverConfig = SolverConfig()
    logging: LoggingConfig = LoggingConfig()
    source: Optional[Path] = field(default=None, compare=False)

    @cached_property
    def group_ids(self) -> Tuple[str, ...]:
        return tuple(g.id for g in self.groups)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([g.weight for g in self.groups], dtype=float)

    @cached_property
    def parent_index(self) -> Tuple[int, ...]:
        lookup = {gid: i for i, gid in enumerate(self.group_ids)}
        return tuple(-1 if g.parent is None else lookup[g.parent] for g in self.groups)

    @cached_property
    def gfm_index(self) -> int:
        return next(i for i, u in enumerate(self.es_units) if u.role is EsRole.GRID_FORMING)

    @property
    def gfm(self) -> EsSpec:
        return self.es_units[self.gfm_index]

    @cached_property
    def critical_node_counts(self) -> np.ndarray:
        return np.array([len(g.critical_nodes) for g in self.groups], dtype=int)

    @cached_property
    def noncritical_node_counts(self) -> np.ndarray:
        return np.array([len(g.nodes) - len(g.critical_nodes) for g in self.groups], dtype=int)

    def profile(self, kind: SeriesKind) -> GroupProfile:
        cache = self.__dict__.setdefault("_profiles", {})
        if kind not in cache:
            cache[kind] = self._build_profile(self.series[kind])
        return cache[kind]

    def _build_profile(self, frame: TimeSeriesFrame) -> GroupProfile:
        node_pos = {n: i for i, n in enumerate(frame.nodes)}
        shape = (frame.n_steps, len(self.groups), len(PHASES))
        load, pv, q, crit = (np.zeros(shape) for _ in range(4))
        for g, group in enumerate(self.groups):
            idx = [node_pos[n] for n in group.nodes]
            load[:, g] = frame.load_kw[:, idx].sum(axis=1)
            pv[:, g] = frame.pv_kw[:, idx].sum(axis=1)
            q[:, g] = frame.q_kvar[:, idx].sum(axis=1)
            if group.critical_nodes:
                cidx = [node_pos[n] for n in group.critical_nodes]
                crit[:, g] = frame.load_kw[:, cidx].sum(axis=1)
        return GroupProfile(frame.step_minutes, load, pv, q, crit)

    @cached_property
    def group_peak_kw(self) -> np.ndarray:
        """Peak three-phase stage-1 forecast demand per group."""
        load = self.profile(SeriesKind.STAGE1).load_kw.sum(axis=2)
        return load.max(axis=0) if load.size else np.zeros(len(self.groups))

    @cached_property
    def switch_weights(self) -> np.ndarray:
        default = self.weights * self.group_peak_kw * (1.0 + self.policy.switch_weight_margin)
        return np.array([
            g.switch_weight if g.switch_weight is not None else default[i]
            for i, g in enumerate(self.groups)
        ])

    def with_overrides(
        self,
        policy: Optional[PolicyConfig] = None,
        solver: Optional[SolverConfig] = None,
        horizon_days: Optional[float] = None,
    ) -> "Scenario":
        """Copy with a different policy/solver or a shortened restoration."""
        grids = self.grids
        series = self.series
        if horizon_days is not None:
            minutes = int(round(horizon_days * MINUTES_PER_DAY))
            minutes -= minutes % grids.dt_sched
            minutes = min(minutes, grids.total_minutes)
            end = grids.restoration_start + timedelta(minutes=minutes)
            grids = grids.model_copy(update={"restoration_end": end})
            series = {
                kind: frame.slice_window(frame.start, minutes // frame.step_minutes)
                for kind, frame in series.items()
            }
        return dataclasses.replace(
            self,
            grids=grids,
            series=series,
            policy=policy or self.policy,
            solver=solver or self.solver,
        )


@dataclass(frozen=True)
class ScenarioIssue:
    code: str
    key: str
    message: str


def validate_scenario(scenario: Scenario) -> List[ScenarioIssue]:
    """Invariant checks that need both the config and the series."""
    issues: List[ScenarioIssue] = []
    grids = scenario.grids
    start = pd.Timestamp(grids.restoration_start)
    end = pd.Timestamp(grids.restoration_end)
    wanted_nodes = [n for g in scenario.groups for n in g.nodes]
    for kind in SeriesKind:
        frame = scenario.series.get(kind)
        if frame is None:
            issues.append(ScenarioIssue("missing_file", f"series.{kind.value}", "series not provided"))
            continue
        expected_step = getattr(grids, _GRID_OF_KIND[kind])
        if frame.step_minutes != expected_step:
            issues.append(ScenarioIssue(
                "grid_incompatible", f"series.{kind.value}",
                f"step {frame.step_minutes} min, expected {expected_step} min",
            ))
        missing = [n for n in wanted_nodes if n not in frame.nodes]
        if missing:
            issues.append(ScenarioIssue(
                "coverage_gap", f"{kind.value}:{missing[0]}",
                f"no series for node {missing[0]}",
            ))
        if frame.start > start or frame.end < end:
            node = wanted_nodes[0]
            issues.append(ScenarioIssue(
                "coverage_gap", f"{kind.value}:{node}",
                f"series covers {frame.start}..{frame.end}, restoration needs {start}..{end}",
            ))
    try:
        check_group_tree(scenario.groups)
    except PydanticCustomError as exc:
        issues.append(ScenarioIssue(exc.type, "groups", exc.message()))
    return issues


def _config_error(exc: ValidationError) -> ScenarioError:
    err = exc.errors()[0]
    key = ".".join(str(part) for part in err["loc"]) or "<root>"
    code = err["type"] if err["type"] in _PASS_THROUGH_CODES else "schema_violation"
    return ScenarioError(code, key, err["msg"])


def parse_config(raw: Mapping[str, Any]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise _config_error(exc) from exc


def build_scenario(
    config: ScenarioConfig,
    frames: Mapping[SeriesKind, TimeSeriesFrame],
    source: Optional[Path] = None,
) -> Scenario:
    """Align frames to their grids and the restoration window, then validate."""
    grids = config.grids
    aligned: Dict[SeriesKind, TimeSeriesFrame] = {}
    start = pd.Timestamp(grids.restoration_start)
    for kind, frame in frames.items():
        step = getattr(grids, _GRID_OF_KIND[kind])
        frame = resample(frame, step)
        if frame.start > start or frame.end < pd.Timestamp(grids.restoration_end):
            node = config.groups[0].nodes[0]
            raise ScenarioError(
                "coverage_gap", f"{kind.value}:{node}",
                f"series covers {frame.start}..{frame.end}, restoration needs "
                f"{start}..{grids.restoration_end}",
            )
        for group in config.groups:
            for node in group.nodes:
                if node not in frame.nodes:
                    raise ScenarioError(
                        "coverage_gap", f"{kind.value}:{node}", f"no series for node {node}"
                    )
        aligned[kind] = frame.slice_window(start, grids.total_minutes // step)

    scenario = Scenario(
        grids=grids,
        groups=config.groups,
        es_units=config.resources.es,
        dg_units=config.resources.dg,
        series=aligned,
        policy=config.policy,
        solver=config.solver,
        logging=config.logging,
        source=source,
    )
    issues = validate_scenario(scenario)
    if issues:
        first = issues[0]
        raise ScenarioError(first.code, first.key, first.message)
    return scenario


def read_config_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ScenarioError("missing_file", str(path), "config file does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ScenarioError("schema_violation", str(path), f"unparseable config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("schema_violation", str(path), "config root must be a mapping")
    return raw


def load_scenario(config_path: Path | str) -> Scenario:
    """Load, resample and validate a scenario config and its CSV series."""
    path = Path(config_path)
    config = parse_config(read_config_file(path))
    if config.series is None:
        raise ScenarioError("schema_violation", "series", "series paths are required")
    pf = config.policy.default_power_factor
    frames = {}
    for kind in SeriesKind:
        series_path = Path(getattr(config.series, kind.value))
        if not series_path.is_absolute():
            series_path = path.parent / series_path
        frames[kind] = read_series_csv(series_path, kind, pf)
    scenario = build_scenario(config, frames, source=path)
    logger.info(
        "scenario_loaded",
        path=str(path),
        groups=len(scenario.groups),
        es=len(scenario.es_units),
        dg=len(scenario.dg_units),
        slots=scenario.grids.n_sched_slots,
    )
    return scenario


def scenario_to_config(scenario: Scenario, series: Optional[SeriesPaths] = None) -> Dict[str, Any]:
    """Plain-data key tree suitable for ``yaml.safe_dump``."""
    config = ScenarioConfig(
        grids=scenario.grids,
        groups=scenario.groups,
        resources=ResourcesConfig(es=scenario.es_units, dg=scenario.dg_units),
        policy=scenario.policy,
        solver=scenario.solver,
        series=series,
        logging=scenario.logging,
    )
    return config.model_dump(mode="json", exclude_none=True)
