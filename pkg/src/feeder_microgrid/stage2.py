"""
Stage-2 dispatcher: short-horizon model on the Δk grid that tracks the
stage-1 schedule and subtracts the forecast-correction term from the
energised groups' net load.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from feeder_microgrid.exceptions import InfeasibleModelError, ScenarioError, SolverError
from feeder_microgrid.optim import LinearModel, MilpSolution, SolveStatus, quicksum, solve_milp
from feeder_microgrid.scenario import EsRole, Scenario, SeriesKind
from feeder_microgrid.stage1 import (
    ResourceVars,
    Stage1Schedule,
    add_balance,
    add_group_block,
    add_resource_block,
    forced_on_steps,
)

logger = structlog.get_logger(__name__)


def allocate_lambda(scenario: Scenario, energized: Sequence[bool], slot: int) -> np.ndarray:
    """Share of the correction per group, proportional to forecast load.

    Zero for de-energised groups; an all-zero map when nothing is on.
    """
    energized = np.asarray(energized, dtype=bool)
    load = scenario.profile(SeriesKind.STAGE1).load_kw[slot].sum(axis=1)
    connected = np.where(energized, load, 0.0)
    total = connected.sum()
    if total <= 0.0:
        return np.zeros(len(scenario.groups))
    return connected / total


@dataclass(frozen=True, eq=False)
class CorrectionInput:
    epsilon: float
    lam: np.ndarray

    def __post_init__(self) -> None:
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam < 0):
            raise ValueError("lambda shares must be non-negative")
        total = lam.sum()
        if total > 0 and abs(total - 1.0) > 1e-9:
            raise ValueError(f"lambda shares sum to {total}, expected 1")

    @classmethod
    def none(cls, groups: int) -> "CorrectionInput":
        return cls(0.0, np.zeros(groups))

    @property
    def per_group_kw(self) -> np.ndarray:
        return np.asarray(self.lam, dtype=float) * self.epsilon


@dataclass(frozen=True, eq=False)
class Stage2Instance:
    step: int
    soc_init: Tuple[float, ...]
    fuel_init: Tuple[float, ...]
    group_on: Tuple[bool, ...]
    dg_on: Tuple[bool, ...]
    group_forced: Tuple[int, ...]
    dg_forced: Tuple[int, ...]
    gamma: float
    load_kw: np.ndarray     # (K, G, 3)
    pv_kw: np.ndarray
    q_kvar: np.ndarray
    x_ref: np.ndarray       # (K, G)
    p_dg_ref: np.ndarray    # (K, D)
    p_es_ref: np.ndarray    # (K, E)
    correction: CorrectionInput
    fuel_floor: Tuple[Optional[float], ...] = ()

    @property
    def steps(self) -> int:
        return int(self.x_ref.shape[0])

    @property
    def net_kw(self) -> np.ndarray:
        return self.load_kw - self.pv_kw

    @classmethod
    def from_schedule(
        cls,
        scenario: Scenario,
        step: int,
        schedule: Stage1Schedule,
        soc: Sequence[float],
        fuel: Sequence[float],
        group_on: Sequence[bool],
        dg_on: Sequence[bool],
        group_on_minutes: Optional[Sequence[Optional[int]]] = None,
        dg_on_minutes: Optional[Sequence[Optional[int]]] = None,
        gamma: Optional[float] = None,
        correction: Optional[CorrectionInput] = None,
        pv_scale: float = 1.0,
        fuel_targets: Optional[Sequence[Optional[float]]] = None,
    ) -> "Stage2Instance":
        """Dispatch instance at Δk step ``step`` referencing ``schedule``.

        ``fuel_targets`` are the stage-1 window-end fuel floors; each becomes
        a floor at the end of this horizon, prorated over the time left in
        the window.
        """
        grids = scenario.grids
        steps = min(grids.horizon_disp, grids.n_disp_slots - step)
        if steps <= 0:
            raise ScenarioError("empty_window", f"step {step}", "no dispatch horizon left")
        ratio = grids.disp_per_sched
        rows = np.clip(
            (np.arange(step, step + steps) // ratio) - schedule.window.start,
            0, schedule.length - 1,
        )
        prof = scenario.profile(SeriesKind.STAGE2)
        sl = slice(step, step + steps)
        n_g, n_d = len(scenario.groups), len(scenario.dg_units)
        group_on_minutes = group_on_minutes or (None,) * n_g
        dg_on_minutes = dg_on_minutes or (None,) * n_d
        msd_minutes = scenario.policy.msd_slots * grids.dt_sched
        planned_burn = np.array([
            (schedule.y[rows, d] * dg.idle_coeff + schedule.p_dg[rows, d] * dg.prop_coeff).sum()
            for d, dg in enumerate(scenario.dg_units)
        ]) * (grids.dt_disp / 60.0)
        return cls(
            step=step,
            soc_init=tuple(soc),
            fuel_init=tuple(fuel),
            group_on=tuple(bool(v) for v in group_on),
            dg_on=tuple(bool(v) for v in dg_on),
            group_forced=tuple(
                forced_on_steps(m, msd_minutes, grids.dt_disp) if on else 0
                for on, m in zip(group_on, group_on_minutes)
            ),
            dg_forced=tuple(
                forced_on_steps(m, dg.min_up * grids.dt_sched, grids.dt_disp) if on else 0
                for on, m, dg in zip(dg_on, dg_on_minutes, scenario.dg_units)
            ),
            gamma=float(schedule.gamma[rows[0]] if gamma is None else gamma),
            load_kw=prof.load_kw[sl],
            pv_kw=prof.pv_kw[sl] * pv_scale,
            q_kvar=prof.q_kvar[sl],
            x_ref=schedule.x[rows],
            p_dg_ref=schedule.p_dg[rows],
            p_es_ref=schedule.p_es.sum(axis=2)[rows],
            correction=correction or CorrectionInput.none(n_g),
            fuel_floor=tuple(
                prorated_fuel_floor(
                    f, target, float(planned_burn[d]), steps * grids.dt_disp,
                    schedule.window.stop * grids.dt_sched - step * grids.dt_disp,
                )
                for d, (f, target) in enumerate(zip(fuel, fuel_targets or (None,) * n_d))
            ),
        )

    def relaxed(self, memory: bool = True, fuel: bool = False) -> "Stage2Instance":
        """Copy with commitment memory and/or the fuel floor dropped."""
        changes: Dict[str, object] = {}
        if memory:
            changes["group_forced"] = (0,) * len(self.group_forced)
            changes["dg_forced"] = (0,) * len(self.dg_forced)
        if fuel:
            changes["fuel_floor"] = (None,) * len(self.fuel_floor)
        return replace(self, **changes)


def prorated_fuel_floor(
    fuel: float, target: Optional[float], planned_burn: float, horizon_minutes: int,
    remaining_minutes: int,
) -> Optional[float]:
    """Fuel to keep at the end of a dispatch horizon.

    The burn allowed is the larger of the stage-1 plan over the horizon and
    an even share of the fuel above the window-end ``target`` over the
    minutes left in the window. The floor never drops below the target, so
    the last horizon of a window lands on it.
    """
    if target is None:
        return None
    if fuel <= target:
        return fuel
    share = 1.0 if remaining_minutes <= horizon_minutes else horizon_minutes / remaining_minutes
    allowed = max((fuel - target) * share, planned_burn)
    return float(max(target, fuel - allowed))


@dataclass(frozen=True, eq=False)
class DispatchCommand:
    """First-step setpoints handed to the plant."""

    x: np.ndarray       # (G,)
    y: np.ndarray       # (D,)
    p_dg: np.ndarray    # (D,)
    q_dg: np.ndarray    # (D,)
    p_es: np.ndarray    # (E,) three-phase totals
    q_es: np.ndarray    # (E,)

    @classmethod
    def idle(cls, scenario: Scenario) -> "DispatchCommand":
        g, d, e = len(scenario.groups), len(scenario.dg_units), len(scenario.es_units)
        return cls(np.zeros(g), np.zeros(d), np.zeros(d), np.zeros(d), np.zeros(e), np.zeros(e))


@dataclass(frozen=True, eq=False)
class DispatchPlan:
    step: int
    x: np.ndarray
    y: np.ndarray
    p_dg: np.ndarray
    q_dg: np.ndarray
    p_es: np.ndarray    # (K, E, 3)
    q_es: np.ndarray
    soc: np.ndarray
    fuel: np.ndarray
    gamma: float
    correction: CorrectionInput
    objective: float
    status: SolveStatus
    switch_deviation: int
    dg_deviation_kw: float

    @property
    def command(self) -> DispatchCommand:
        return DispatchCommand(
            x=self.x[0].copy(),
            y=self.y[0].copy(),
            p_dg=self.p_dg[0].copy(),
            q_dg=self.q_dg[0].copy(),
            p_es=self.p_es[0].sum(axis=1),
            q_es=self.q_es[0].sum(axis=1),
        )


@dataclass
class _Stage2Build:
    model: LinearModel
    x: list
    res: ResourceVars


def _build(scenario: Scenario, instance: Stage2Instance) -> _Stage2Build:
    grids, policy = scenario.grids, scenario.policy
    steps = instance.steps
    if instance.load_kw.shape[0] != steps:
        raise ScenarioError("grid_incompatible", "stage2",
                            f"forecast covers {instance.load_kw.shape[0]} of {steps} steps")
    ratio = grids.disp_per_sched
    model = LinearModel(f"stage2_step{instance.step}")
    res = add_resource_block(
        model, scenario, steps, grids.dt_disp, [instance.gamma] * steps,
        instance.soc_init, instance.fuel_init, instance.dg_on, instance.dg_forced,
        [dg.min_up * ratio for dg in scenario.dg_units],
        fuel_floor=instance.fuel_floor or None,
    )
    x = add_group_block(model, scenario, steps, instance.group_on, instance.group_forced,
                        policy.msd_slots * ratio)
    adjusted = instance.net_kw - (instance.correction.per_group_kw / 3.0)[None, :, None]
    add_balance(model, res, x, adjusted, instance.q_kvar)

    demand = instance.load_kw.sum(axis=2)
    served = quicksum(
        x[k][n] * float(scenario.weights[n] * demand[k, n])
        for k in range(steps) for n in range(len(scenario.groups))
    )
    # |x̂ - x| on binaries: x when x̂ = 0, 1 - x when x̂ = 1
    switching = quicksum(
        (1 - x[k][n] if instance.x_ref[k, n] > 0.5 else x[k][n]) * float(scenario.switch_weights[n])
        for k in range(steps) for n in range(len(scenario.groups))
    )
    tracking = []
    for k in range(steps):
        for d, dg in enumerate(scenario.dg_units):
            dev = model.add_var(f"dg_dev[{dg.id},{k}]", 0.0)
            ref = float(instance.p_dg_ref[k, d])
            model.add_constraint(dev - res.pdg[k][d], ">=", -ref, f"dg_dev_hi[{dg.id},{k}]")
            model.add_constraint(dev + res.pdg[k][d], ">=", ref, f"dg_dev_lo[{dg.id},{k}]")
            tracking.append(dev)
        for i, es in enumerate(scenario.es_units):
            if es.role is EsRole.GRID_FORMING:
                continue
            dev = model.add_var(f"es_dev[{es.id},{k}]", 0.0)
            ref = float(instance.p_es_ref[k, i])
            model.add_constraint(dev - res.es_p(k, i), ">=", -ref, f"es_dev_hi[{es.id},{k}]")
            model.add_constraint(dev + res.es_p(k, i), ">=", ref, f"es_dev_lo[{es.id},{k}]")
            tracking.append(dev)
    model.set_objective(served - switching - quicksum(tracking) * policy.dg_deviation_weight, "max")
    return _Stage2Build(model, x, res)


def build_stage2(scenario: Scenario, instance: Stage2Instance) -> LinearModel:
    """Stage-2 dispatch model for one Δk tick."""
    return _build(scenario, instance).model


def _extract(build: _Stage2Build, solution: MilpSolution, instance: Stage2Instance) -> DispatchPlan:
    res = build.res
    steps = instance.steps

    def grid(rows: list, rnd: bool = False) -> np.ndarray:
        arr = np.array([[solution.value(v) for v in row] for row in rows], dtype=float)
        arr = arr.reshape(steps, len(rows[0]) if rows and rows[0] else 0)
        return np.round(arr) if rnd else arr

    x = grid(build.x, rnd=True)
    p_dg = grid(res.pdg)
    tan = np.array(res.tan_phi, dtype=float)
    return DispatchPlan(
        step=instance.step,
        x=x,
        y=grid(res.y, rnd=True),
        p_dg=p_dg,
        q_dg=p_dg * tan[None, :],
        p_es=np.array([[[solution.value(v) for v in u] for u in row] for row in res.pes]),
        q_es=np.array([[[solution.value(v) for v in u] for u in row] for row in res.qes]),
        soc=grid(res.soc),
        fuel=grid(res.fuel),
        gamma=instance.gamma,
        correction=instance.correction,
        objective=solution.objective,
        status=solution.status,
        switch_deviation=int(np.abs(x - instance.x_ref).sum()),
        dg_deviation_kw=float(np.abs(p_dg - instance.p_dg_ref).sum()),
    )


def solve_stage2(
    scenario: Scenario, instance: Stage2Instance, backend: Optional[str] = None
) -> DispatchPlan:
    solver = scenario.solver
    backend = backend or solver.backend
    build = _build(scenario, instance)
    started = time.perf_counter()
    solution = solve_milp(build.model, gap=solver.mip_gap, node_limit=solver.node_limit,
                          backend=backend, time_limit=solver.time_limit)
    logger.debug(
        "stage2_solved",
        step=instance.step,
        status=solution.status.value,
        objective=round(solution.objective, 6) if solution.has_point else None,
        nodes=solution.nodes,
        seconds=round(time.perf_counter() - started, 3),
    )
    if not solution.has_point:
        if solution.status is SolveStatus.ITERATION_LIMIT:
            raise SolverError(f"stage-2 step {instance.step}: no incumbent within limits")
        diagnosis: List[str] = []
        if any(instance.group_forced) or any(instance.dg_forced):
            retry = solve_milp(build_stage2(scenario, instance.relaxed()), gap=solver.mip_gap,
                               node_limit=solver.node_limit, backend=backend)
            if retry.has_point:
                diagnosis.append("commitment memory is binding against the corrected load")
        if not diagnosis and any(f is not None for f in instance.fuel_floor):
            retry = solve_milp(build_stage2(scenario, instance.relaxed(memory=False, fuel=True)),
                               gap=solver.mip_gap, node_limit=solver.node_limit, backend=backend)
            if retry.has_point:
                diagnosis.append("the prorated fuel floor cannot be kept over this horizon")
        if not diagnosis:
            diagnosis.append("storage capacity under the reserve factor cannot balance the load")
        raise InfeasibleModelError(
            f"stage-2 step {instance.step} is {solution.status.value}", diagnosis
        )
    return _extract(build, solution, instance)
