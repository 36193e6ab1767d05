"""Scenario quality checks behind ``feeder-mg validate``."""

from __future__ import annotations

from typing import Callable, Dict, List

import numpy as np
import structlog

from feeder_microgrid.scenario import Scenario, SeriesKind, resample, validate_scenario

logger = structlog.get_logger(__name__)

PASS, WARN, FAIL, ERROR = "PASS", "WARN", "FAIL", "ERROR"

# relative stage-1 net-load bias above which the forecast is flagged
BIAS_WARN_FRACTION = 0.10

CheckResult = Dict[str, str]


def _result(check: str, status: str, message: str) -> CheckResult:
    return {"check": check, "status": status, "message": message}


def check_grids(scenario: Scenario) -> CheckResult:
    grids = scenario.grids
    return _result(
        "grids", PASS,
        f"{grids.n_sched_slots} stage-1 slots of {grids.dt_sched} min, "
        f"{grids.disp_per_sched} dispatch steps per slot, {grids.days} day(s).",
    )


def check_group_tree(scenario: Scenario) -> CheckResult:
    issues = [i for i in validate_scenario(scenario) if i.key == "groups"]
    if issues:
        return _result("group_tree", FAIL, "; ".join(f"[{i.code}] {i.message}" for i in issues))
    roots = [g.id for g in scenario.groups if g.parent is None]
    return _result("group_tree", PASS, f"{len(scenario.groups)} groups, roots {roots}.")


def check_series_coverage(scenario: Scenario) -> CheckResult:
    issues = [i for i in validate_scenario(scenario) if i.key != "groups"]
    if issues:
        return _result("series_coverage", FAIL,
                       "; ".join(f"[{i.code}] {i.key}: {i.message}" for i in issues))
    return _result("series_coverage", PASS, "All series cover the restoration window.")


def check_resource_adequacy(scenario: Scenario) -> CheckResult:
    """Critical demand against the grid-forming rating at the lowest reserve factor."""
    truth = scenario.profile(SeriesKind.TRUTH)
    critical_peak = float(truth.critical_load_kw.sum(axis=(1, 2)).max(initial=0.0))
    total_peak = float(truth.load_kw.sum(axis=(1, 2)).max(initial=0.0))
    low, _ = scenario.policy.gamma_bounds
    gfm_headroom = low * scenario.gfm.kva_rating
    capacity = scenario.gfm.kva_rating + sum(dg.p_max for dg in scenario.dg_units)
    message = (
        f"critical peak {critical_peak:.0f} kW, total peak {total_peak:.0f} kW, "
        f"grid-forming headroom {gfm_headroom:.0f} kVA, firm capacity {capacity:.0f} kW."
    )
    if critical_peak > capacity:
        return _result("resource_adequacy", FAIL, message)
    status = PASS if critical_peak <= gfm_headroom and total_peak <= capacity else WARN
    return _result("resource_adequacy", status, message)


def check_forecast_bias(scenario: Scenario) -> CheckResult:
    """Mean stage-1 net-load forecast minus truth on the stage-1 grid."""
    truth = resample(scenario.series[SeriesKind.TRUTH], scenario.grids.dt_sched)
    stage1 = scenario.series[SeriesKind.STAGE1]
    steps = min(truth.n_steps, stage1.n_steps)
    if steps == 0:
        return _result("forecast_bias", WARN, "No overlapping samples.")
    actual = (truth.load_kw[:steps] - truth.pv_kw[:steps]).sum(axis=(1, 2))
    forecast = (stage1.load_kw[:steps] - stage1.pv_kw[:steps]).sum(axis=(1, 2))
    bias = float(np.mean(forecast - actual))
    scale = float(np.mean(truth.load_kw[:steps].sum(axis=(1, 2))))
    status = WARN if scale > 0 and abs(bias) > BIAS_WARN_FRACTION * scale else PASS
    return _result("forecast_bias", status,
                   f"Stage-1 net-load forecast exceeds truth by {bias:.1f} kW on average.")


def check_fuel_endurance(scenario: Scenario) -> CheckResult:
    """Hours each generator can run at minimum output on its usable fuel."""
    if not scenario.dg_units:
        return _result("fuel_endurance", PASS, "No generators.")
    hours = scenario.grids.total_minutes / 60.0
    parts: List[str] = []
    status = PASS
    for dg in scenario.dg_units:
        usable = max(dg.fuel_init - dg.fuel_final, 0.0)
        burn = dg.idle_coeff + dg.prop_coeff * dg.p_min
        endurance = usable / burn if burn > 0 else float("inf")
        parts.append(f"{dg.id}: {endurance:.1f} h at minimum output")
        if endurance < hours:
            status = WARN
    return _result("fuel_endurance", status,
                   f"{'; '.join(parts)} over a {hours:.0f} h restoration.")


CHECKS: List[Callable[[Scenario], CheckResult]] = [
    check_grids,
    check_group_tree,
    check_series_coverage,
    check_resource_adequacy,
    check_forecast_bias,
    check_fuel_endurance,
]


def run_quality_checks(scenario: Scenario) -> List[CheckResult]:
    """Execute all scenario quality checks."""
    logger.info("quality_checks_started", checks=len(CHECKS))
    results = []
    for check in CHECKS:
        try:
            results.append(check(scenario))
        except Exception as exc:
            logger.error("quality_check_failed", check=check.__name__, error=str(exc))
            results.append(_result(check.__name__.removeprefix("check_"), ERROR, str(exc)))
    failed = [r["check"] for r in results if r["status"] in (FAIL, ERROR)]
    logger.info("quality_checks_finished", failed=failed)
    return results
