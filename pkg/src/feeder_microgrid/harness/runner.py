"""
Closed-loop restoration: stage-1 every Δt, stage-2 every Δk, plant every Δh,
with measured SoC and fuel fed back as the next solves' initial conditions.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field

from feeder_microgrid import robust
from feeder_microgrid.exceptions import InfeasibleModelError, ReportError
from feeder_microgrid.plant import MicrogridPlant, PlantEvent, PlantState
from feeder_microgrid.scenario import PolicyConfig, Scenario, SeriesKind
from feeder_microgrid.stage1 import (
    Stage1Instance,
    Stage1Schedule,
    rolling_window,
    schedule_frame,
    solve_stage1,
)
from feeder_microgrid.stage2 import (
    CorrectionInput,
    DispatchCommand,
    DispatchPlan,
    Stage2Instance,
    allocate_lambda,
    solve_stage2,
)

logger = structlog.get_logger(__name__)


class CaseConfig(BaseModel):
    """The three policy axes a case study varies."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    correction: bool = True
    fuel_mode: Literal["fixed", "rationed", "equal"] = "rationed"
    reserve_mode: Literal["fixed", "netload_fraction", "dynamic"] = "dynamic"
    fixed_gamma: float = Field(0.8, gt=0.0, le=1.0)
    netload_reserve_fraction: float = Field(0.2, ge=0.0, le=1.0)
    fixed_fuel_reserve: float = Field(500.0, ge=0.0)

    def apply(self, policy: PolicyConfig) -> PolicyConfig:
        return policy.model_copy(update=self.model_dump(exclude={"name"}))


BUILTIN_CASES: Dict[str, CaseConfig] = {
    "base": CaseConfig(name="base", correction=False, fuel_mode="fixed", reserve_mode="fixed"),
    "case1": CaseConfig(name="case1", correction=True, fuel_mode="rationed", reserve_mode="fixed"),
    "case2": CaseConfig(name="case2", correction=False, fuel_mode="rationed",
                        reserve_mode="netload_fraction"),
    "case3": CaseConfig(name="case3", correction=True, fuel_mode="rationed",
                        reserve_mode="dynamic"),
}


def resolve_case(name_or_case: "str | CaseConfig") -> CaseConfig:
    if isinstance(name_or_case, CaseConfig):
        return name_or_case
    try:
        return BUILTIN_CASES[name_or_case]
    except KeyError:
        raise ValueError(
            f"unknown case {name_or_case!r}; expected one of {sorted(BUILTIN_CASES)}"
        ) from None


@dataclass
class RunLog:
    """Everything a closed-loop run produced."""

    case: CaseConfig
    trace: pd.DataFrame
    dispatch: pd.DataFrame
    diagnostics: pd.DataFrame
    schedule: pd.DataFrame
    events: List[PlantEvent]
    group_ids: List[str]
    interruptions: Dict[str, int]
    trace_step_minutes: int = 1
    final_state: Optional[PlantState] = None
    wall_seconds: float = 0.0
    schedules: List[Stage1Schedule] = field(default_factory=list, repr=False)

    @property
    def empty(self) -> bool:
        return self.trace.empty


TRACE_COLUMNS = [
    "minute", "timestamp", "shutdown", "sched_shutdown", "unsched_shutdown",
    "demand_kw", "critical_demand_kw", "served_load_kw", "served_critical_kw",
    "available_pv_kw", "served_pv_kw", "p_dg_kw", "p_gfm_kw", "q_gfm_kvar", "p_gfl_kw",
    "gamma", "residual_kw",
]


class RestorationRunner:
    """Drives one case through the whole restoration window."""

    def __init__(
        self,
        scenario: Scenario,
        case: "str | CaseConfig",
        checkpoint_dir: Optional[Path] = None,
        keep_schedules: bool = False,
    ):
        self.case = resolve_case(case)
        self.scenario = scenario.with_overrides(policy=self.case.apply(scenario.policy))
        self.checkpoint_dir = checkpoint_dir
        self.keep_schedules = keep_schedules
        self.plant = MicrogridPlant(self.scenario)
        self.log = logger.bind(case=self.case.name)

        policy = self.scenario.policy
        self.state = PlantState.initial(self.scenario)
        self.history = robust.ErrorHistory.for_policy(policy)
        self.reserve = robust.ReserveState.for_policy(
            policy, policy.fixed_gamma if policy.reserve_mode == "fixed" else None
        )
        self.schedule: Optional[Stage1Schedule] = None
        self.epsilon = 0.0
        self.correction = robust.ForecastCorrection.none()
        self.fuel_targets: tuple = (None,) * len(self.scenario.dg_units)
        self.interruptions = {g.id: 0 for g in self.scenario.groups}

        self._trace: List[dict] = []
        self._dispatch: List[dict] = []
        self._diagnostics: List[dict] = []
        self._schedule_rows: List[pd.DataFrame] = []
        self._schedules: List[Stage1Schedule] = []
        # per-interval accumulators for the SoC estimator and reserve rule
        self._interval_soc_start = self.state.soc[self.scenario.gfm_index]
        self._interval_sched_kwh = 0.0
        self._interval_fc_pv = 0.0
        self._interval_fc_net = 0.0
        self._interval_meas_net = 0.0
        self._interval_minutes = 0

    # -- stage-1 cycle ------------------------------------------------------

    def _close_interval(self, slot: int) -> Dict[str, float]:
        """Turn the finished interval's accumulators into error estimates."""
        scen = self.scenario
        gfm = scen.gfm
        dt_h = scen.grids.dt_sched / 60.0
        soc_meas = self.state.soc[scen.gfm_index]
        soc_sched = self._interval_soc_start - self._interval_sched_kwh / gfm.kappa_hours
        delta_p = robust.estimate_interval_error(
            soc_meas, soc_sched, gfm.energy_rating, gfm.efficiency, dt_h
        )
        minutes = max(self._interval_minutes, 1)
        self.history.append(slot - 1, delta_p, self._interval_fc_pv / minutes)
        out = {
            "soc_sched": soc_sched,
            "soc_meas": soc_meas,
            "delta_p_kw": delta_p,
            "meas_net_kw": self._interval_meas_net / minutes,
            "forecast_net_kw": self._interval_fc_net / minutes,
        }
        self._interval_soc_start = soc_meas
        self._interval_sched_kwh = 0.0
        self._interval_fc_pv = 0.0
        self._interval_fc_net = 0.0
        self._interval_meas_net = 0.0
        self._interval_minutes = 0
        return out

    def run_stage1_cycle(self, slot: int) -> Stage1Schedule:
        scen, policy = self.scenario, self.scenario.policy
        feedback = {"soc_sched": np.nan, "soc_meas": np.nan, "delta_p_kw": np.nan}
        if slot > 0:
            feedback = self._close_interval(slot)

        self.epsilon = (
            robust.correction_factor(self.history, policy.correction_window)
            if policy.correction else 0.0
        )
        if not policy.correction:
            self.correction = robust.ForecastCorrection.none()
        elif policy.pv_scale_correction:
            self.correction = robust.split_correction(
                self.history, policy.correction_window, policy.pv_scale_bounds,
                policy.pv_scale_min_spread_kw, previous_scale=self.correction.pv_scale,
            )
        else:
            self.correction = robust.ForecastCorrection(1.0, self.epsilon)
        model = robust.fit_ma(self.history, policy.ma_order, policy.ma_window)
        predicted = robust.predict_error(model, self.history) if len(self.history) else 0.0
        if policy.reserve_mode == "dynamic" and slot > 0:
            # predictions are forecast - actual; the reserve covers shortfalls
            gamma = robust.dynamic_reserve(
                feedback["meas_net_kw"], feedback["forecast_net_kw"], max(0.0, -predicted),
                scen.gfm.kva_rating, self.reserve,
            )
            self.reserve = self.reserve.with_gamma(gamma)
        elif policy.reserve_mode == "netload_fraction":
            self.reserve = self.reserve.with_gamma(self._netload_gamma(slot))

        window = rolling_window(slot, scen.grids)
        current = self.reserve.gamma if policy.reserve_mode != "fixed" else policy.fixed_gamma
        instance = Stage1Instance.from_scenario(
            scen, slot,
            soc=self.state.soc, fuel=self.state.fuel,
            group_on=self.state.group_on, dg_on=self.state.dg_on,
            group_on_minutes=self.state.group_on_minutes,
            dg_on_minutes=self.state.dg_on_minutes,
            gamma=robust.nominal_gamma_profile(scen, window, current=current),
            pv_scale=self.correction.pv_scale,
        )
        try:
            schedule = solve_stage1(scen, instance)
        except InfeasibleModelError as exc:
            self.log.warning("stage1_relaxed", slot=slot, diagnosis=exc.diagnosis)
            try:
                schedule = solve_stage1(scen, instance.relaxed(memory=True))
            except InfeasibleModelError:
                self._checkpoint(slot)
                raise

        self.schedule = schedule
        self.fuel_targets = instance.fuel_targets
        if self.keep_schedules:
            self._schedules.append(schedule)
        self._schedule_rows.append(_first_slot_rows(scen, schedule))
        diag = {
            "slot": slot,
            "timestamp": scen.grids.timestamp(slot * scen.grids.dt_sched),
            "soc_sched": feedback["soc_sched"],
            "soc_meas": feedback["soc_meas"],
            "delta_p_kw": feedback["delta_p_kw"],
            "epsilon_kw": self.epsilon,
            "pv_scale": self.correction.pv_scale,
            "offset_kw": self.correction.offset_kw,
            "ma_mu": model.mu,
            "predicted_error_kw": predicted,
            "gamma": current,
            "objective": schedule.objective,
            "nodes": schedule.nodes,
        }
        for d, dg in enumerate(scen.dg_units):
            diag[f"fuel_target_{dg.id}"] = instance.fuel_targets[d]
            diag[f"scheduled_fuel_end_{dg.id}"] = float(schedule.fuel[-1, d])
        self._diagnostics.append(diag)
        return schedule

    def _netload_gamma(self, slot: int) -> float:
        policy = self.scenario.policy
        net = robust.forecast_net_load(self.scenario.profile(SeriesKind.STAGE1), slot)
        return robust.netload_fraction_gamma(
            net, policy.netload_reserve_fraction, self.scenario.gfm.kva_rating, policy.gamma_bounds
        )

    # -- stage-2 tick -------------------------------------------------------

    def run_dispatch_tick(self, step: int) -> DispatchPlan:
        scen, policy = self.scenario, self.scenario.policy
        slot = step // scen.grids.disp_per_sched
        if policy.reserve_mode == "fixed":
            gamma = policy.fixed_gamma
        elif policy.reserve_mode == "netload_fraction":
            gamma = self._netload_gamma(slot)
        else:
            gamma = self.reserve.gamma

        correction = CorrectionInput.none(len(scen.groups))
        if policy.correction and self.correction.offset_kw != 0.0:
            row = slot - self.schedule.window.start
            lam = allocate_lambda(scen, self.schedule.x[row] > 0.5, slot)
            correction = CorrectionInput(self.correction.offset_kw, lam)

        instance = Stage2Instance.from_schedule(
            scen, step, self.schedule,
            soc=self.state.soc, fuel=self.state.fuel,
            group_on=self.state.group_on, dg_on=self.state.dg_on,
            group_on_minutes=self.state.group_on_minutes,
            dg_on_minutes=self.state.dg_on_minutes,
            gamma=gamma, correction=correction,
            pv_scale=self.correction.pv_scale, fuel_targets=self.fuel_targets,
        )
        try:
            plan = solve_stage2(scen, instance)
        except InfeasibleModelError as exc:
            self.log.warning("stage2_relaxed", step=step, diagnosis=exc.diagnosis)
            last = exc
            # memory first, then the fuel floor as well
            for relaxed in (instance.relaxed(), instance.relaxed(fuel=True)):
                try:
                    plan = solve_stage2(scen, relaxed)
                    break
                except InfeasibleModelError as err:
                    last = err
            else:
                self._checkpoint(slot)
                raise last

        self._dispatch.append({
            "step": step,
            "timestamp": scen.grids.timestamp(step * scen.grids.dt_disp),
            "gamma": gamma,
            "epsilon_kw": correction.epsilon,
            "pv_scale": self.correction.pv_scale,
            "groups_on": "".join("1" if v > 0.5 else "0" for v in plan.x[0]),
            "p_dg_kw": float(plan.p_dg[0].sum()),
            "p_es_kw": float(plan.p_es[0].sum()),
            "switch_deviation": plan.switch_deviation,
            "dg_deviation_kw": plan.dg_deviation_kw,
            "objective": plan.objective,
        })
        return plan

    # -- plant --------------------------------------------------------------

    def _run_minutes(self, command: DispatchCommand, first_minute: int, gamma: float) -> None:
        scen = self.scenario
        grids = scen.grids
        gfm = scen.gfm_index
        gfl = [i for i in range(len(scen.es_units)) if i != gfm]
        fc_net = scen.profile(SeriesKind.STAGE1).net_kw.sum(axis=2)
        fc_pv = scen.profile(SeriesKind.STAGE1).pv_kw.sum(axis=2)
        dt_h = grids.dt_rt / 60.0
        for offset in range(0, grids.dt_disp, grids.dt_rt):
            minute = first_minute + offset
            before = self.state.group_on
            sample = self.plant.sample(minute)
            result = self.plant.step(self.state, command, sample, boundary=offset == 0)
            self.state = result.state
            flows = result.flows
            for n, group in enumerate(scen.groups):
                if before[n] and not self.state.group_on[n]:
                    self.interruptions[group.id] += 1

            served = np.array(self.state.group_on, dtype=float)
            slot = minute // grids.dt_sched
            forecast_net = float((fc_net[slot] * served).sum())
            actual_net = float(((sample.load_kw - sample.pv_kw).sum(axis=1) * served).sum())
            controllable = float(flows.p_dg.sum() + flows.p_es[gfl].sum())
            self._interval_sched_kwh += (forecast_net - controllable) * dt_h
            self._interval_fc_net += forecast_net
            self._interval_fc_pv += float((fc_pv[slot] * served).sum())
            self._interval_meas_net += actual_net
            self._interval_minutes += 1

            shutdown = self.state.shutdown.kind if self.state.shutdown else "none"
            row = {
                "minute": minute,
                "timestamp": grids.timestamp(minute),
                "shutdown": shutdown,
                "sched_shutdown": 1.0 if shutdown == "scheduled" else 0.0,
                "unsched_shutdown": 1.0 if shutdown == "unscheduled" else 0.0,
                "demand_kw": flows.demand_kw,
                "critical_demand_kw": flows.critical_demand_kw,
                "served_load_kw": flows.served_load_kw,
                "served_critical_kw": flows.served_critical_kw,
                "available_pv_kw": flows.available_pv_kw,
                "served_pv_kw": flows.served_pv_kw,
                "p_dg_kw": float(flows.p_dg.sum()),
                "p_gfm_kw": float(flows.p_es[gfm]),
                "q_gfm_kvar": float(flows.q_es[gfm]),
                "p_gfl_kw": float(flows.p_es[gfl].sum()) if gfl else 0.0,
                "gamma": gamma,
                "residual_kw": flows.residual_kw,
            }
            for i, es in enumerate(scen.es_units):
                row[f"soc_{es.id}"] = self.state.soc[i]
            for d, dg in enumerate(scen.dg_units):
                row[f"fuel_{dg.id}"] = self.state.fuel[d]
            for n, group in enumerate(scen.groups):
                row[f"on_{group.id}"] = 1.0 if self.state.group_on[n] else 0.0
            self._trace.append(row)

    # -- loop ---------------------------------------------------------------

    def run(self) -> RunLog:
        scen = self.scenario
        grids = scen.grids
        started = time.perf_counter()
        self.log.info("restoration_started", slots=grids.n_sched_slots,
                      start=str(grids.restoration_start))
        for slot in range(grids.n_sched_slots):
            self.run_stage1_cycle(slot)
            for j in range(grids.disp_per_sched):
                step = slot * grids.disp_per_sched + j
                plan = self.run_dispatch_tick(step)
                self._run_minutes(plan.command, step * grids.dt_disp, plan.gamma)
        wall = time.perf_counter() - started
        self.log.info("restoration_finished", seconds=round(wall, 2),
                      events=len(self.state.events))
        return self._build_log(wall)

    def _build_log(self, wall: float) -> RunLog:
        scen = self.scenario
        trace_cols = list(TRACE_COLUMNS)
        trace_cols += [f"soc_{u.id}" for u in scen.es_units]
        trace_cols += [f"fuel_{u.id}" for u in scen.dg_units]
        trace_cols += [f"on_{g.id}" for g in scen.groups]
        schedule = (
            pd.concat(self._schedule_rows, ignore_index=True) if self._schedule_rows
            else _first_slot_rows(scen, None)
        )
        return RunLog(
            case=self.case,
            trace=pd.DataFrame(self._trace, columns=trace_cols),
            dispatch=pd.DataFrame(self._dispatch, columns=DISPATCH_COLUMNS),
            diagnostics=pd.DataFrame(self._diagnostics, columns=self._diagnostic_columns()),
            schedule=schedule,
            events=list(self.state.events),
            group_ids=[g.id for g in scen.groups],
            interruptions=dict(self.interruptions),
            trace_step_minutes=scen.grids.dt_rt,
            final_state=self.state,
            wall_seconds=wall,
            schedules=self._schedules,
        )

    def _diagnostic_columns(self) -> List[str]:
        cols = ["slot", "timestamp", "soc_sched", "soc_meas", "delta_p_kw", "epsilon_kw",
                "pv_scale", "offset_kw", "ma_mu", "predicted_error_kw", "gamma", "objective",
                "nodes"]
        for dg in self.scenario.dg_units:
            cols += [f"fuel_target_{dg.id}", f"scheduled_fuel_end_{dg.id}"]
        return cols

    def _checkpoint(self, slot: int) -> None:
        if self.checkpoint_dir is None:
            return
        path = Path(self.checkpoint_dir) / "checkpoint.json"
        payload = {
            "case": self.case.model_dump(),
            "slot": slot,
            "state": dataclasses.asdict(self.state),
            "minutes_simulated": len(self._trace),
            "diagnostics": [
                {k: (v.isoformat() if hasattr(v, "isoformat") else v) for k, v in row.items()}
                for row in self._diagnostics
            ],
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
        except OSError as exc:
            raise ReportError(f"could not write checkpoint {path}: {exc}") from exc
        self.log.error("run_aborted", slot=slot, checkpoint=str(path))


DISPATCH_COLUMNS = ["step", "timestamp", "gamma", "epsilon_kw", "pv_scale", "groups_on",
                    "p_dg_kw", "p_es_kw", "switch_deviation", "dg_deviation_kw", "objective"]

SCHEDULE_COLUMNS = ["slot", "timestamp", "asset", "kind", "status", "p_kw", "q_kvar", "soc",
                    "fuel_l", "startup_cost"]


def _first_slot_rows(scenario: Scenario, schedule: Optional[Stage1Schedule]) -> pd.DataFrame:
    if schedule is None:
        return pd.DataFrame(columns=SCHEDULE_COLUMNS)
    frame = schedule_frame(scenario, schedule)
    return frame[frame["slot"] == schedule.window.start].reset_index(drop=True)


def run_restoration(
    scenario: Scenario,
    case: "str | CaseConfig",
    checkpoint_dir: Optional[Path] = None,
    keep_schedules: bool = False,
) -> RunLog:
    """Run one case of the closed loop over the scenario's restoration window."""
    return RestorationRunner(scenario, case, checkpoint_dir, keep_schedules).run()
