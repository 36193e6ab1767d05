"""
Ground-truth microgrid at Δh resolution.

The grid-forming battery is the slack: it supplies whatever the energised
groups draw beyond diesel and grid-following storage output. Protection
sheds groups in ascending priority when the slack would exceed the inverter
rating or push the SoC out of bounds, and falls back to a timed
unscheduled shutdown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from feeder_microgrid.scenario import EsRole, EsSpec, Scenario, SeriesKind
from feeder_microgrid.stage2 import DispatchCommand

logger = structlog.get_logger(__name__)

GROUP_SHED = "group_shed"
SHUTDOWN_UNSCHEDULED = "microgrid_shutdown_unscheduled"
SHUTDOWN_SCHEDULED = "microgrid_shutdown_scheduled"
DG_START = "dg_start"
DG_STOP = "dg_stop"
RESTART = "restart"

EVENT_KINDS = (GROUP_SHED, SHUTDOWN_UNSCHEDULED, SHUTDOWN_SCHEDULED, DG_START, DG_STOP, RESTART)

_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class PlantEvent:
    minute: int
    kind: str
    cause: str = ""
    asset: str = ""


@dataclass(frozen=True)
class Shutdown:
    kind: str                 # "scheduled" | "unscheduled"
    remaining: int = 0        # minutes left on the unscheduled timer
    started: int = 0


@dataclass(frozen=True)
class PlantState:
    minute: int
    soc: Tuple[float, ...]
    fuel: Tuple[float, ...]
    group_on: Tuple[bool, ...]
    dg_on: Tuple[bool, ...]
    group_on_minutes: Tuple[Optional[int], ...]
    dg_on_minutes: Tuple[Optional[int], ...]
    locked_out: Tuple[bool, ...]
    shutdown: Optional[Shutdown] = None
    events: Tuple[PlantEvent, ...] = ()

    @classmethod
    def initial(cls, scenario: Scenario, minute: int = 0) -> "PlantState":
        g, d = len(scenario.groups), len(scenario.dg_units)
        return cls(
            minute=minute,
            soc=tuple(u.soc_init for u in scenario.es_units),
            fuel=tuple(u.fuel_init for u in scenario.dg_units),
            group_on=(False,) * g,
            dg_on=(False,) * d,
            group_on_minutes=(None,) * g,
            dg_on_minutes=(None,) * d,
            locked_out=(False,) * g,
        )

    @property
    def dark(self) -> bool:
        return self.shutdown is not None and self.shutdown.kind == "unscheduled"


@dataclass(frozen=True, eq=False)
class PlantFlows:
    """Power flows of one simulated minute (kW / kvar)."""

    demand_kw: float
    critical_demand_kw: float
    served_load_kw: float
    served_critical_kw: float
    served_q_kvar: float
    available_pv_kw: float
    served_pv_kw: float
    group_demand_kw: np.ndarray
    p_dg: np.ndarray
    q_dg: np.ndarray
    p_es: np.ndarray
    q_es: np.ndarray

    @property
    def residual_kw(self) -> float:
        """Generation + absorbed PV minus served load."""
        return float(self.p_dg.sum() + self.p_es.sum() + self.served_pv_kw - self.served_load_kw)


@dataclass(frozen=True)
class StepResult:
    state: PlantState
    events: Tuple[PlantEvent, ...]
    flows: PlantFlows


@dataclass(frozen=True, eq=False)
class TruthSample:
    load_kw: np.ndarray      # (G, 3)
    pv_kw: np.ndarray
    q_kvar: np.ndarray
    critical_kw: np.ndarray  # (G, 3)


def protection_check(
    slack_kva: float, es_rating: float, next_soc: float, soc_bounds: Tuple[float, float]
) -> Optional[str]:
    """Reason the grid-forming unit cannot carry the slack, or ``None``."""
    if slack_kva > es_rating + 1e-9:
        return "rating"
    low, high = soc_bounds
    if next_soc < low - _BOUND_TOL:
        return "soc_low"
    if next_soc > high + _BOUND_TOL:
        return "soc_high"
    return None


def shed_candidate(scenario: Scenario, group_on: Sequence[bool]) -> Optional[int]:
    """Lowest-priority energised group, ties by id."""
    live = [n for n, on in enumerate(group_on) if on]
    if not live:
        return None
    return min(live, key=lambda n: (scenario.groups[n].weight, scenario.groups[n].id))


def descendants(scenario: Scenario, root: int) -> List[int]:
    children: List[int] = []
    frontier = [root]
    while frontier:
        node = frontier.pop()
        for n, parent in enumerate(scenario.parent_index):
            if parent == node:
                children.append(n)
                frontier.append(n)
    return sorted(children)


class MicrogridPlant:
    """Minute stepper over the truth series of a scenario."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.grids = scenario.grids
        self.dt_minutes = scenario.grids.dt_rt
        self.gfm = scenario.gfm_index
        self._truth = scenario.profile(SeriesKind.TRUTH)

    def sample(self, minute: int) -> TruthSample:
        idx = minute // self.dt_minutes
        prof = self._truth
        return TruthSample(prof.load_kw[idx], prof.pv_kw[idx], prof.q_kvar[idx],
                           prof.critical_load_kw[idx])

    # -- helpers ------------------------------------------------------------

    def _radial(self, requested: np.ndarray) -> np.ndarray:
        on = requested.copy()
        for n in range(len(on)):
            cursor = self.scenario.parent_index[n]
            while on[n] and cursor >= 0:
                if not on[cursor]:
                    on[n] = False
                cursor = self.scenario.parent_index[cursor]
        return on

    def _slack(self, on: np.ndarray, sample: TruthSample, p_dg, q_dg, p_es, q_es) -> Tuple[float, float]:
        served_net = float(((sample.load_kw - sample.pv_kw).sum(axis=1) * on).sum())
        served_q = float((sample.q_kvar.sum(axis=1) * on).sum())
        mask = np.ones(len(p_es), dtype=bool)
        mask[self.gfm] = False
        p = served_net - p_dg.sum() - p_es[mask].sum()
        q = served_q - q_dg.sum() - q_es[mask].sum()
        return p, q

    def _next_soc(self, soc: float, es: EsSpec, p_kw: float) -> float:
        return soc - p_kw * (self.dt_minutes / 60.0) / es.kappa_hours

    def _dark_flows(self, sample: TruthSample) -> PlantFlows:
        e, d = len(self.scenario.es_units), len(self.scenario.dg_units)
        return PlantFlows(
            demand_kw=float(sample.load_kw.sum()),
            critical_demand_kw=float(sample.critical_kw.sum()),
            served_load_kw=0.0,
            served_critical_kw=0.0,
            served_q_kvar=0.0,
            available_pv_kw=float(sample.pv_kw.sum()),
            served_pv_kw=0.0,
            group_demand_kw=sample.load_kw.sum(axis=1),
            p_dg=np.zeros(d), q_dg=np.zeros(d), p_es=np.zeros(e), q_es=np.zeros(e),
        )

    # -- stepping -----------------------------------------------------------

    def restart_due(self, state: PlantState) -> bool:
        return state.dark and state.shutdown.remaining <= 0

    def step(
        self,
        state: PlantState,
        command: DispatchCommand,
        sample: Optional[TruthSample] = None,
        boundary: bool = False,
    ) -> StepResult:
        """Advance one Δh.

        ``boundary`` marks the first minute of a fresh dispatch command:
        protection lockouts clear and an expired shutdown restarts.
        """
        scen = self.scenario
        minute = state.minute
        sample = sample or self.sample(minute)
        events: List[PlantEvent] = []
        locked = np.array(state.locked_out, dtype=bool)
        shutdown = state.shutdown

        if boundary:
            locked[:] = False
            if shutdown is not None and shutdown.kind == "unscheduled" and shutdown.remaining <= 0:
                events.append(PlantEvent(minute, RESTART, "unscheduled"))
                shutdown = None

        if shutdown is not None and shutdown.kind == "unscheduled":
            remaining = max(0, shutdown.remaining - self.dt_minutes)
            new_state = replace(
                state,
                minute=minute + self.dt_minutes,
                group_on=(False,) * len(scen.groups),
                dg_on=(False,) * len(scen.dg_units),
                group_on_minutes=(None,) * len(scen.groups),
                dg_on_minutes=(None,) * len(scen.dg_units),
                locked_out=tuple(locked),
                shutdown=replace(shutdown, remaining=remaining),
                events=state.events + tuple(events),
            )
            return StepResult(new_state, tuple(events), self._dark_flows(sample))

        requested = np.asarray(command.x, dtype=float) > 0.5
        if not requested.any():
            if shutdown is None:
                events.append(PlantEvent(minute, SHUTDOWN_SCHEDULED, "all groups commanded off"))
                shutdown = Shutdown("scheduled", started=minute)
        elif shutdown is not None:
            events.append(PlantEvent(minute, RESTART, "scheduled"))
            shutdown = None
        on = self._radial(requested & ~locked)

        # diesel units: follow commands unless fuel runs out this minute
        dt_h = self.dt_minutes / 60.0
        dg_on = np.asarray(command.y, dtype=float) > 0.5
        p_dg = np.where(dg_on, np.asarray(command.p_dg, dtype=float), 0.0)
        fuel = np.array(state.fuel, dtype=float)
        for d, dg in enumerate(scen.dg_units):
            if dg_on[d] and fuel[d] - (dg.idle_coeff + dg.prop_coeff * p_dg[d]) * dt_h < dg.fuel_min - 1e-9:
                dg_on[d] = False
                p_dg[d] = 0.0
                events.append(PlantEvent(minute, DG_STOP, "fuel exhausted", dg.id))
        if shutdown is not None:
            # scheduled shutdown: generation idles with the feeder
            dg_on[:] = False
            p_dg[:] = 0.0
        q_dg = p_dg * np.array([dg.tan_phi for dg in scen.dg_units])

        # grid-following storage tracks its setpoint within its SoC window
        soc = np.array(state.soc, dtype=float)
        p_es = np.zeros(len(scen.es_units))
        q_es = np.zeros(len(scen.es_units))
        for i, es in enumerate(scen.es_units):
            if es.role is EsRole.GRID_FORMING or shutdown is not None:
                continue
            p = float(np.clip(command.p_es[i], -es.p_lower, es.p_upper))
            lo = (soc[i] - es.soc_max) * es.kappa_hours / dt_h
            hi = (soc[i] - es.soc_min) * es.kappa_hours / dt_h
            p_es[i] = min(max(p, lo), hi)
            q_es[i] = float(command.q_es[i])

        gfm = scen.es_units[self.gfm]
        cause = None
        while True:
            p_slack, q_slack = self._slack(on, sample, p_dg, q_dg, p_es, q_es)
            next_soc = self._next_soc(soc[self.gfm], gfm, p_slack)
            cause = protection_check(math.hypot(p_slack, q_slack), gfm.kva_rating, next_soc,
                                     (gfm.soc_min, gfm.soc_max))
            if cause is None:
                break
            if cause == "soc_high" and p_dg.sum() > 0:
                # over-charge: back the diesel output off first
                excess = (gfm.soc_max - next_soc) * gfm.kappa_hours / dt_h
                scale = max(0.0, (p_dg.sum() + excess) / p_dg.sum())
                p_dg = p_dg * min(scale, 1.0)
                q_dg = p_dg * np.array([dg.tan_phi for dg in scen.dg_units])
                continue
            if int(on.sum()) <= 1:
                break
            victim = shed_candidate(scen, on)
            for n in [victim] + descendants(scen, victim):
                if on[n]:
                    on[n] = False
                    locked[n] = True
                    events.append(PlantEvent(minute, GROUP_SHED, cause, scen.groups[n].id))

        if cause is not None:
            events.append(PlantEvent(minute, SHUTDOWN_UNSCHEDULED, cause))
            for d, dg in enumerate(scen.dg_units):
                if state.dg_on[d]:
                    events.append(PlantEvent(minute, DG_STOP, "shutdown", dg.id))
            logger.warning("unscheduled_shutdown", minute=minute, cause=cause)
            if shutdown is not None and shutdown.kind == "scheduled":
                shutdown = None
            new_state = replace(
                state,
                minute=minute + self.dt_minutes,
                group_on=(False,) * len(scen.groups),
                dg_on=(False,) * len(scen.dg_units),
                group_on_minutes=(None,) * len(scen.groups),
                dg_on_minutes=(None,) * len(scen.dg_units),
                locked_out=(False,) * len(scen.groups),
                shutdown=Shutdown("unscheduled", self.scenario.policy.shutdown_minutes - self.dt_minutes,
                                  started=minute),
                events=state.events + tuple(events),
            )
            return StepResult(new_state, tuple(events), self._dark_flows(sample))

        for d, dg in enumerate(scen.dg_units):
            if dg_on[d] and not state.dg_on[d]:
                events.append(PlantEvent(minute, DG_START, "commanded", dg.id))
            elif state.dg_on[d] and not dg_on[d] and not any(
                    e.kind == DG_STOP and e.asset == dg.id for e in events):
                events.append(PlantEvent(minute, DG_STOP, "commanded", dg.id))

        p_es[self.gfm], q_es[self.gfm] = p_slack, q_slack
        for i, es in enumerate(scen.es_units):
            soc[i] = min(max(self._next_soc(soc[i], es, p_es[i]), es.soc_min), es.soc_max)
        for d, dg in enumerate(scen.dg_units):
            if dg_on[d]:
                fuel[d] = max(fuel[d] - (dg.idle_coeff + dg.prop_coeff * p_dg[d]) * dt_h, 0.0)

        load = sample.load_kw.sum(axis=1)
        pv = sample.pv_kw.sum(axis=1)
        flows = PlantFlows(
            demand_kw=float(load.sum()),
            critical_demand_kw=float(sample.critical_kw.sum()),
            served_load_kw=float((load * on).sum()),
            served_critical_kw=float((sample.critical_kw.sum(axis=1) * on).sum()),
            served_q_kvar=float((sample.q_kvar.sum(axis=1) * on).sum()),
            available_pv_kw=float(pv.sum()),
            served_pv_kw=float((pv * on).sum()),
            group_demand_kw=load,
            p_dg=p_dg,
            q_dg=q_dg,
            p_es=p_es,
            q_es=q_es,
        )
        for event in events:
            if event.kind == GROUP_SHED:
                logger.info("group_shed", minute=minute, group=event.asset, cause=event.cause)

        def advance(flags: np.ndarray, counters: Sequence[Optional[int]]) -> Tuple[Optional[int], ...]:
            return tuple(
                ((c or 0) + self.dt_minutes) if f else None for f, c in zip(flags, counters)
            )

        new_state = PlantState(
            minute=minute + self.dt_minutes,
            soc=tuple(float(v) for v in soc),
            fuel=tuple(float(v) for v in fuel),
            group_on=tuple(bool(v) for v in on),
            dg_on=tuple(bool(v) for v in dg_on),
            group_on_minutes=advance(on, state.group_on_minutes),
            dg_on_minutes=advance(dg_on, state.dg_on_minutes),
            locked_out=tuple(bool(v) for v in locked),
            shutdown=shutdown,
            events=state.events + tuple(events),
        )
        return StepResult(new_state, tuple(events), flows)
