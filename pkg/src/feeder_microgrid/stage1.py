"""
Stage-1 scheduler: rolling 24 h mixed-integer schedule on the Δt grid,
receding on the final restoration day.

The constraint blocks for storage, diesel units, load-group switching and
per-phase balance are grid-agnostic and shared with the stage-2 dispatcher.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from feeder_microgrid import robust
from feeder_microgrid.exceptions import InfeasibleModelError, ScenarioError, SolverError
from feeder_microgrid.optim import (
    LinExpr,
    LinearModel,
    MilpSolution,
    SolveStatus,
    Var,
    polygon_ball,
    quicksum,
    solve_milp,
)
from feeder_microgrid.scenario import EsRole, Scenario, SeriesKind, TimeGrids

logger = structlog.get_logger(__name__)

RESIDUAL_TOL = 1e-6
_SOC_SLACK = 1e-9


# =============================================================================
# Windows and commitment memory
# =============================================================================


@dataclass(frozen=True)
class Window:
    start: int
    length: int
    day: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def rolling_window(slot: int, grids: TimeGrids) -> Window:
    """Stage-1 window starting at absolute slot ``slot``.

    Fixed 24 h on every day but the last, where it recedes to the
    restoration end.
    """
    total = grids.n_sched_slots
    if slot < 0 or slot >= total:
        raise ScenarioError(
            "empty_window", f"slot {slot}",
            f"restoration ends at slot {total}, no window left",
        )
    day, _ = grids.day_of_slot(slot)
    return Window(slot, min(grids.horizon_sched, total - slot), day)


def forced_on_steps(on_minutes: Optional[int], commit_minutes: int, step_minutes: int) -> int:
    """Leading steps a unit energised ``on_minutes`` ago must stay on."""
    if on_minutes is None:
        return 0
    remaining = commit_minutes - on_minutes
    return max(0, math.ceil(remaining / step_minutes))


# =============================================================================
# Shared constraint blocks
# =============================================================================


@dataclass
class ResourceVars:
    """Storage and diesel decision variables indexed ``[step][unit]``."""

    pes: List[List[List[Var]]]
    qes: List[List[List[Var]]]
    soc: List[List[Var]]
    y: List[List[Var]]
    pdg: List[List[Var]]
    fuel: List[List[Var]]
    cost: List[List[Var]]
    tan_phi: Tuple[float, ...]

    def es_p(self, t: int, i: int) -> LinExpr:
        return quicksum(self.pes[t][i])

    def es_q(self, t: int, i: int) -> LinExpr:
        return quicksum(self.qes[t][i])

    def dg_q(self, t: int, d: int) -> LinExpr:
        return self.pdg[t][d] * self.tan_phi[d]


def add_resource_block(
    model: LinearModel,
    scenario: Scenario,
    steps: int,
    step_minutes: int,
    gamma: Sequence[float],
    soc_init: Sequence[float],
    fuel_init: Sequence[float],
    dg_on: Sequence[bool],
    dg_forced: Sequence[int],
    min_up_steps: Sequence[int],
    fuel_floor: Optional[Sequence[Optional[float]]] = None,
    soc_floor: Optional[Sequence[Optional[float]]] = None,
) -> ResourceVars:
    """Storage limits, polygon capacity, SoC/fuel recursions, DG commitment."""
    dt_h = step_minutes / 60.0
    m = scenario.policy.polygon_sides
    es_units, dg_units = scenario.es_units, scenario.dg_units

    pes, qes, soc = [], [], []
    y, pdg, fuel, cost = [], [], [], []
    for t in range(steps):
        pes_t, qes_t, soc_t = [], [], []
        for i, es in enumerate(es_units):
            bound = max(es.p_lower, es.p_upper)
            p_ph = [model.add_var(f"pes[{es.id},{t},{ph}]", -bound, bound) for ph in "abc"]
            q_ph = [model.add_var(f"qes[{es.id},{t},{ph}]", 0.0, es.q_upper) for ph in "abc"]
            s = model.add_var(f"soc[{es.id},{t}]", es.soc_min, es.soc_max)
            p_sum, q_sum = quicksum(p_ph), quicksum(q_ph)
            model.add_constraint(p_sum, ">=", -es.p_lower, f"es_pmin[{es.id},{t}]")
            model.add_constraint(p_sum, "<=", es.p_upper, f"es_pmax[{es.id},{t}]")
            model.add_constraint(q_sum, "<=", es.q_upper, f"es_qmax[{es.id},{t}]")
            radius = es.kva_rating * (gamma[t] if es.role is EsRole.GRID_FORMING else 1.0)
            model.add_constraints(polygon_ball(p_sum, q_sum, radius, m), f"es_cap[{es.id},{t}]")
            previous = soc_init[i] if t == 0 else soc[t - 1][i]
            model.add_constraint(
                s - previous + p_sum * (dt_h / es.kappa_hours), "==", 0.0, f"soc[{es.id},{t}]"
            )
            pes_t.append(p_ph)
            qes_t.append(q_ph)
            soc_t.append(s)
        pes.append(pes_t)
        qes.append(qes_t)
        soc.append(soc_t)

        y_t, p_t, f_t, c_t = [], [], [], []
        for d, dg in enumerate(dg_units):
            status = model.add_var(f"y[{dg.id},{t}]", binary=True)
            if t < dg_forced[d]:
                model.set_bounds(status, lb=1.0)
            p = model.add_var(f"pdg[{dg.id},{t}]", 0.0, dg.p_max)
            f = model.add_var(f"fuel[{dg.id},{t}]", dg.fuel_min, dg.fuel_max)
            c = model.add_var(f"cost[{dg.id},{t}]", 0.0)
            model.add_constraint(p - status * dg.p_min, ">=", 0.0, f"dg_pmin[{dg.id},{t}]")
            model.add_constraint(p - status * dg.p_max, "<=", 0.0, f"dg_pmax[{dg.id},{t}]")
            prev_f = fuel_init[d] if t == 0 else fuel[t - 1][d]
            model.add_constraint(
                f - prev_f + (status * dg.idle_coeff + p * dg.prop_coeff) * dt_h,
                "==", 0.0, f"fuel[{dg.id},{t}]",
            )
            prev_y: LinExpr = LinExpr.of(1.0 if dg_on[d] else 0.0) if t == 0 else y[t - 1][d]
            model.add_constraint(c - (status - prev_y) * dg.startup_cost, ">=", 0.0,
                                 f"startup[{dg.id},{t}]")
            y_t.append(status)
            p_t.append(p)
            f_t.append(f)
            c_t.append(c)
        y.append(y_t)
        pdg.append(p_t)
        fuel.append(f_t)
        cost.append(c_t)

    for d, dg in enumerate(dg_units):
        _add_commitment(model, [y[t][d] for t in range(steps)], bool(dg_on[d]),
                        min_up_steps[d], f"min_up[{dg.id}]")

    if steps:
        for d, floor in enumerate(fuel_floor or ()):
            if floor is not None:
                # a target above the fuel on hand is met by leaving the unit off
                model.add_constraint(fuel[steps - 1][d], ">=", min(floor, fuel_init[d]),
                                     f"fuel_reserve[{dg_units[d].id}]")
        for i, floor in enumerate(soc_floor or ()):
            if floor is not None:
                model.add_constraint(soc[steps - 1][i], ">=", min(floor, soc_init[i]),
                                     f"soc_reserve[{es_units[i].id}]")

    return ResourceVars(pes, qes, soc, y, pdg, fuel, cost, tuple(dg.tan_phi for dg in dg_units))


def _add_commitment(
    model: LinearModel, status: List[Var], initially_on: bool, span: int, name: str
) -> None:
    """Once switched on, stay on ``span`` steps (truncated at the window edge)."""
    steps = len(status)
    if span <= 1:
        return
    for t in range(steps):
        if t == 0 and initially_on:
            continue
        prev: LinExpr = LinExpr.of(0.0) if t == 0 else status[t - 1]
        window = status[t:min(t + span, steps)]
        model.add_constraint(
            quicksum(window) - (status[t] - prev) * len(window), ">=", 0.0, f"{name}[{t}]"
        )


def add_group_block(
    model: LinearModel,
    scenario: Scenario,
    steps: int,
    group_on: Sequence[bool],
    group_forced: Sequence[int],
    msd_steps: int,
    prefix: str = "x",
) -> List[List[Var]]:
    """Group switch binaries with MSD, memory and radiality precedence."""
    x: List[List[Var]] = []
    for t in range(steps):
        row = []
        for n, group in enumerate(scenario.groups):
            var = model.add_var(f"{prefix}[{group.id},{t}]", binary=True)
            if t < group_forced[n]:
                model.set_bounds(var, lb=1.0)
            row.append(var)
        x.append(row)
        for n, parent in enumerate(scenario.parent_index):
            if parent >= 0:
                model.add_constraint(row[n] - row[parent], "<=", 0.0,
                                     f"radial[{scenario.groups[n].id},{t}]")
    for n, group in enumerate(scenario.groups):
        _add_commitment(model, [x[t][n] for t in range(steps)], bool(group_on[n]),
                        msd_steps, f"msd[{group.id}]")
    return x


def add_balance(
    model: LinearModel,
    res: ResourceVars,
    x: List[List[Var]],
    net_kw: np.ndarray,
    q_kvar: np.ndarray,
) -> None:
    """Per-phase P and Q balance; ``net_kw``/``q_kvar`` are (steps, groups, 3)."""
    steps, groups, phases = net_kw.shape
    n_es = len(res.pes[0]) if steps else 0
    n_dg = len(res.pdg[0]) if steps else 0
    for t in range(steps):
        for ph in range(phases):
            supply_p = quicksum(res.pes[t][i][ph] for i in range(n_es)) + quicksum(
                res.pdg[t][d] * (1.0 / 3.0) for d in range(n_dg))
            supply_q = quicksum(res.qes[t][i][ph] for i in range(n_es)) + quicksum(
                res.dg_q(t, d) * (1.0 / 3.0) for d in range(n_dg))
            demand_p = quicksum(x[t][n] * float(net_kw[t, n, ph]) for n in range(groups))
            demand_q = quicksum(x[t][n] * float(q_kvar[t, n, ph]) for n in range(groups))
            model.add_constraint(supply_p - demand_p, "==", 0.0, f"pbal[{t},{ph}]")
            model.add_constraint(supply_q - demand_q, "==", 0.0, f"qbal[{t},{ph}]")


# =============================================================================
# Instance and schedule
# =============================================================================


@dataclass(frozen=True, eq=False)
class Stage1Instance:
    """Everything one stage-1 solve needs besides the scenario."""

    window: Window
    soc_init: Tuple[float, ...]
    fuel_init: Tuple[float, ...]
    group_on: Tuple[bool, ...]
    dg_on: Tuple[bool, ...]
    group_forced: Tuple[int, ...]
    dg_forced: Tuple[int, ...]
    fuel_targets: Tuple[Optional[float], ...]
    soc_targets: Tuple[Optional[float], ...]
    gamma: np.ndarray
    load_kw: np.ndarray
    pv_kw: np.ndarray
    q_kvar: np.ndarray

    @property
    def net_kw(self) -> np.ndarray:
        return self.load_kw - self.pv_kw

    @classmethod
    def from_scenario(
        cls,
        scenario: Scenario,
        slot: int = 0,
        soc: Optional[Sequence[float]] = None,
        fuel: Optional[Sequence[float]] = None,
        group_on: Optional[Sequence[bool]] = None,
        dg_on: Optional[Sequence[bool]] = None,
        group_on_minutes: Optional[Sequence[Optional[int]]] = None,
        dg_on_minutes: Optional[Sequence[Optional[int]]] = None,
        gamma: Optional[Sequence[float]] = None,
        fuel_targets: Optional[Sequence[Optional[float]]] = None,
        soc_targets: Optional[Sequence[Optional[float]]] = None,
        pv_scale: float = 1.0,
    ) -> "Stage1Instance":
        """Instance for ``slot`` with defaults drawn from the scenario policy.

        ``pv_scale`` multiplies the PV forecast, as learned by the forecast
        correction.
        """
        grids, policy = scenario.grids, scenario.policy
        window = rolling_window(slot, grids)
        soc = tuple(soc if soc is not None else (u.soc_init for u in scenario.es_units))
        fuel = tuple(fuel if fuel is not None else (u.fuel_init for u in scenario.dg_units))
        n_g, n_d = len(scenario.groups), len(scenario.dg_units)
        group_on = tuple(group_on if group_on is not None else (False,) * n_g)
        dg_on = tuple(dg_on if dg_on is not None else (False,) * n_d)
        group_on_minutes = group_on_minutes or (None,) * n_g
        dg_on_minutes = dg_on_minutes or (None,) * n_d
        msd_minutes = policy.msd_slots * grids.dt_sched
        group_forced = tuple(
            forced_on_steps(m, msd_minutes, grids.dt_sched) if on else 0
            for on, m in zip(group_on, group_on_minutes)
        )
        dg_forced = tuple(
            forced_on_steps(m, dg.min_up * grids.dt_sched, grids.dt_sched) if on else 0
            for on, m, dg in zip(dg_on, dg_on_minutes, scenario.dg_units)
        )
        if fuel_targets is None:
            fuel_targets = tuple(
                robust.fuel_target_for_policy(policy, f, dg, window, grids)
                for f, dg in zip(fuel, scenario.dg_units)
            )
        if soc_targets is None:
            soc_targets = robust.soc_targets_for_policy(scenario, soc, window)
        if gamma is None:
            gamma = robust.nominal_gamma_profile(scenario, window)
        prof = scenario.profile(SeriesKind.STAGE1)
        sl = slice(window.start, window.stop)
        return cls(
            window=window,
            soc_init=soc,
            fuel_init=fuel,
            group_on=group_on,
            dg_on=dg_on,
            group_forced=group_forced,
            dg_forced=dg_forced,
            fuel_targets=tuple(fuel_targets),
            soc_targets=tuple(soc_targets),
            gamma=np.asarray(gamma, dtype=float),
            load_kw=prof.load_kw[sl],
            pv_kw=prof.pv_kw[sl] * pv_scale,
            q_kvar=prof.q_kvar[sl],
        )

    def relaxed(self, memory: bool = True, fuel: bool = False, soc: bool = False) -> "Stage1Instance":
        """Copy with commitment memory and/or reserve floors dropped."""
        changes: Dict[str, object] = {}
        if memory:
            changes["group_forced"] = (0,) * len(self.group_forced)
            changes["dg_forced"] = (0,) * len(self.dg_forced)
        if fuel:
            changes["fuel_targets"] = (None,) * len(self.fuel_targets)
        if soc:
            changes["soc_targets"] = (None,) * len(self.soc_targets)
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Stage1Schedule:
    """Extracted stage-1 solution, arrays indexed by window slot first."""

    window: Window
    x: np.ndarray          # (L, G)
    y: np.ndarray          # (L, D)
    p_dg: np.ndarray       # (L, D)
    q_dg: np.ndarray       # (L, D)
    p_es: np.ndarray       # (L, E, 3)
    q_es: np.ndarray       # (L, E, 3)
    soc: np.ndarray        # (L, E)
    fuel: np.ndarray       # (L, D)
    startup_cost: np.ndarray  # (L, D)
    gamma: np.ndarray      # (L,)
    objective: float
    status: SolveStatus
    nodes: int = 0
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.window.length

    def served_kw(self, load_kw: np.ndarray) -> np.ndarray:
        return (self.x[:, :, None] * load_kw).sum(axis=(1, 2))


def _diag_soc_fuel(scenario: Scenario, instance: Stage1Instance) -> List[str]:
    problems = []
    for es, soc in zip(scenario.es_units, instance.soc_init):
        if not es.soc_min - _SOC_SLACK <= soc <= es.soc_max + _SOC_SLACK:
            problems.append(f"storage {es.id}: initial SoC {soc:.6f} outside "
                            f"[{es.soc_min}, {es.soc_max}]")
    for dg, fuel in zip(scenario.dg_units, instance.fuel_init):
        if not dg.fuel_min - 1e-9 <= fuel <= dg.fuel_max + 1e-9:
            problems.append(f"diesel {dg.id}: initial fuel {fuel:.3f} outside "
                            f"[{dg.fuel_min}, {dg.fuel_max}]")
    return problems


@dataclass
class Stage1Build:
    model: LinearModel
    x: List[List[Var]]
    res: ResourceVars


def _clamp_init(values: Sequence[float], lows: Sequence[float], highs: Sequence[float]) -> List[float]:
    return [min(max(v, lo), hi) for v, lo, hi in zip(values, lows, highs)]


def build_stage1_vars(scenario: Scenario, instance: Stage1Instance) -> Stage1Build:
    problems = _diag_soc_fuel(scenario, instance)
    if problems:
        raise InfeasibleModelError("stage-1 instance infeasible by construction", problems)
    grids = scenario.grids
    steps = instance.window.length
    if instance.load_kw.shape[0] != steps or len(instance.gamma) != steps:
        raise ScenarioError("grid_incompatible", "stage1",
                            f"forecast slice does not cover {steps} slots")
    model = LinearModel(f"stage1_slot{instance.window.start}")
    soc_init = _clamp_init(instance.soc_init, [u.soc_min for u in scenario.es_units],
                           [u.soc_max for u in scenario.es_units])
    fuel_init = _clamp_init(instance.fuel_init, [u.fuel_min for u in scenario.dg_units],
                            [u.fuel_max for u in scenario.dg_units])
    res = add_resource_block(
        model, scenario, steps, grids.dt_sched, instance.gamma, soc_init, fuel_init,
        instance.dg_on, instance.dg_forced, [dg.min_up for dg in scenario.dg_units],
        fuel_floor=instance.fuel_targets, soc_floor=instance.soc_targets,
    )
    x = add_group_block(model, scenario, steps, instance.group_on, instance.group_forced,
                        scenario.policy.msd_slots)
    add_balance(model, res, x, instance.net_kw, instance.q_kvar)

    dt_h = grids.dt_sched / 60.0
    demand = instance.load_kw.sum(axis=2)  # (L, G)
    served = quicksum(
        x[t][n] * float(scenario.weights[n] * demand[t, n] * dt_h)
        for t in range(steps) for n in range(len(scenario.groups))
    )
    startup = quicksum(c for row in res.cost for c in row)
    model.set_objective(served - startup, "max")
    return Stage1Build(model, x, res)


def build_stage1(scenario: Scenario, instance: Stage1Instance) -> LinearModel:
    """Stage-1 scheduling model for one window."""
    return build_stage1_vars(scenario, instance).model


def _extract(build: Stage1Build, solution: MilpSolution, instance: Stage1Instance) -> Stage1Schedule:
    res, x = build.res, build.x
    steps = instance.window.length

    def grid(vars_2d: List[List[Var]], rnd: bool = False) -> np.ndarray:
        if not vars_2d or not vars_2d[0]:
            return np.zeros((len(vars_2d), 0))
        arr = np.array([[solution.value(v) for v in row] for row in vars_2d])
        return np.round(arr) if rnd else arr

    def phased(vars_3d: List[List[List[Var]]]) -> np.ndarray:
        return np.array([[[solution.value(v) for v in unit] for unit in row] for row in vars_3d])

    tan = np.array(res.tan_phi)
    p_dg = grid(res.pdg)
    return Stage1Schedule(
        window=instance.window,
        x=grid(x, rnd=True),
        y=grid(res.y, rnd=True),
        p_dg=p_dg,
        q_dg=p_dg * tan[None, :] if tan.size else p_dg.copy(),
        p_es=phased(res.pes),
        q_es=phased(res.qes),
        soc=grid(res.soc),
        fuel=grid(res.fuel),
        startup_cost=grid(res.cost),
        gamma=np.asarray(instance.gamma, dtype=float),
        objective=solution.objective,
        status=solution.status,
        nodes=solution.nodes,
    )


def _diagnose(scenario: Scenario, instance: Stage1Instance, backend: str) -> List[str]:
    """Name the resource whose removal restores feasibility."""
    relaxations = (
        ("commitment memory", instance.relaxed(memory=True)),
        ("fuel reserve target", instance.relaxed(memory=False, fuel=True)),
        ("storage SoC target", instance.relaxed(memory=False, soc=True)),
    )
    findings = []
    for label, candidate in relaxations:
        model = build_stage1(scenario, candidate)
        sol = solve_milp(model, gap=scenario.solver.mip_gap,
                         node_limit=scenario.solver.node_limit, backend=backend)
        if sol.status is SolveStatus.OPTIMAL:
            findings.append(f"{label} is binding against served load")
    if not findings:
        findings.append("storage and diesel limits cannot balance the committed load")
    return findings


def solve_stage1(
    scenario: Scenario, instance: Stage1Instance, backend: Optional[str] = None
) -> Stage1Schedule:
    """Build, solve and replay-check one stage-1 window."""
    solver = scenario.solver
    backend = backend or solver.backend
    build = build_stage1_vars(scenario, instance)
    started = time.perf_counter()
    solution = solve_milp(build.model, gap=solver.mip_gap, node_limit=solver.node_limit,
                          backend=backend, time_limit=solver.time_limit)
    elapsed = time.perf_counter() - started
    logger.info(
        "stage1_solved",
        slot=instance.window.start,
        length=instance.window.length,
        status=solution.status.value,
        objective=round(solution.objective, 6) if solution.has_point else None,
        nodes=solution.nodes,
        seconds=round(elapsed, 3),
    )
    if solution.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED) or not solution.has_point:
        if solution.status is SolveStatus.ITERATION_LIMIT:
            raise SolverError(f"stage-1 slot {instance.window.start}: no incumbent within limits")
        raise InfeasibleModelError(
            f"stage-1 slot {instance.window.start} is {solution.status.value}",
            _diagnose(scenario, instance, backend),
        )
    schedule = _extract(build, solution, instance)
    residuals = replay_residuals(scenario, schedule, instance)
    worst = max(residuals.values(), default=0.0)
    if worst > RESIDUAL_TOL:
        logger.warning("stage1_replay_residual", slot=instance.window.start, **residuals)
    return replace(schedule, residuals=residuals)


# =============================================================================
# Replay checks and export
# =============================================================================


def replay_residuals(
    scenario: Scenario,
    schedule: Stage1Schedule,
    instance: Stage1Instance,
    step_minutes: Optional[int] = None,
) -> Dict[str, float]:
    """Slot-by-slot residuals of balance, recursions and polygon capacity."""
    step_minutes = step_minutes or scenario.grids.dt_sched
    dt_h = step_minutes / 60.0
    x = schedule.x
    steps = x.shape[0]
    if steps == 0:
        return {}

    served_net = np.einsum("tg,tgp->tp", x, instance.net_kw)
    served_q = np.einsum("tg,tgp->tp", x, instance.q_kvar)
    supply_p = schedule.p_es.sum(axis=1) + schedule.p_dg.sum(axis=1)[:, None] / 3.0
    supply_q = schedule.q_es.sum(axis=1) + schedule.q_dg.sum(axis=1)[:, None] / 3.0
    out = {
        "p_balance": float(np.abs(supply_p - served_net).max()),
        "q_balance": float(np.abs(supply_q - served_q).max()),
    }

    soc_prev = np.vstack([np.array(instance.soc_init)[None, :], schedule.soc[:-1]])
    kappa = np.array([u.kappa_hours for u in scenario.es_units])
    soc_res = schedule.soc - soc_prev + schedule.p_es.sum(axis=2) * dt_h / kappa[None, :]
    out["soc_recursion"] = float(np.abs(soc_res).max()) if soc_res.size else 0.0

    if scenario.dg_units:
        alpha = np.array([u.idle_coeff for u in scenario.dg_units])
        beta = np.array([u.prop_coeff for u in scenario.dg_units])
        fuel_prev = np.vstack([np.array(instance.fuel_init)[None, :], schedule.fuel[:-1]])
        burn = (schedule.y * alpha + beta * schedule.p_dg) * dt_h
        out["fuel_recursion"] = float(np.abs(schedule.fuel - fuel_prev + burn).max())
        y_prev = np.vstack([np.array(instance.dg_on, dtype=float)[None, :], schedule.y[:-1]])
        cup = np.array([u.startup_cost for u in scenario.dg_units])
        out["startup_cost"] = float(np.max(cup * (schedule.y - y_prev) - schedule.startup_cost,
                                           initial=0.0))

    worst_cap = 0.0
    p_tot = schedule.p_es.sum(axis=2)
    q_tot = schedule.q_es.sum(axis=2)
    m = scenario.policy.polygon_sides
    angles = (2 * np.arange(m) + 1) * math.pi / m
    for i, es in enumerate(scenario.es_units):
        radius = es.kva_rating * (schedule.gamma if es.role is EsRole.GRID_FORMING else 1.0)
        proj = np.cos(angles)[None, :] * p_tot[:, i:i + 1] + np.sin(angles)[None, :] * q_tot[:, i:i + 1]
        excess = proj - (np.asarray(radius) * math.cos(math.pi / m)).reshape(-1, 1)
        worst_cap = max(worst_cap, float(excess.max(initial=0.0)))
    out["es_capacity"] = worst_cap

    radial = 0.0
    for n, parent in enumerate(scenario.parent_index):
        if parent >= 0:
            radial = max(radial, float(np.max(x[:, n] - x[:, parent], initial=0.0)))
    out["radiality"] = radial
    return out


def commitment_violations(status: np.ndarray, initially_on: bool, span: int) -> int:
    """Count switch-on steps that are not followed by ``span`` on-steps
    (truncated at the array end)."""
    count = 0
    steps = len(status)
    prev = 1 if initially_on else 0
    for t in range(steps):
        if status[t] - prev == 1:
            window = status[t:min(t + span, steps)]
            if window.sum() < len(window):
                count += 1
        prev = status[t]
    return count


def schedule_frame(scenario: Scenario, schedule: Stage1Schedule) -> pd.DataFrame:
    """One row per (slot, asset) with setpoints and statuses."""
    grids = scenario.grids
    records = []
    for t in range(schedule.length):
        slot = schedule.window.start + t
        stamp = grids.timestamp(slot * grids.dt_sched)
        for n, group in enumerate(scenario.groups):
            records.append({"slot": slot, "timestamp": stamp, "asset": group.id, "kind": "group",
                            "status": int(schedule.x[t, n]), "p_kw": np.nan, "q_kvar": np.nan,
                            "soc": np.nan, "fuel_l": np.nan, "startup_cost": np.nan})
        for i, es in enumerate(scenario.es_units):
            records.append({"slot": slot, "timestamp": stamp, "asset": es.id, "kind": "es",
                            "status": 1, "p_kw": schedule.p_es[t, i].sum(),
                            "q_kvar": schedule.q_es[t, i].sum(), "soc": schedule.soc[t, i],
                            "fuel_l": np.nan, "startup_cost": np.nan})
        for d, dg in enumerate(scenario.dg_units):
            records.append({"slot": slot, "timestamp": stamp, "asset": dg.id, "kind": "dg",
                            "status": int(schedule.y[t, d]), "p_kw": schedule.p_dg[t, d],
                            "q_kvar": schedule.q_dg[t, d], "soc": np.nan,
                            "fuel_l": schedule.fuel[t, d],
                            "startup_cost": schedule.startup_cost[t, d]})
    columns = ["slot", "timestamp", "asset", "kind", "status", "p_kw", "q_kvar", "soc",
               "fuel_l", "startup_cost"]
    return pd.DataFrame.from_records(records, columns=columns)
