"""
Robustness policies: multi-day fuel (and optional SoC) rationing, the
SoC-feedback estimate of average net-load forecast error, the moving-average
error predictor and the reserve factor rules.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Deque, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from feeder_microgrid.scenario import (
    MINUTES_PER_DAY,
    DgSpec,
    EsRole,
    GroupProfile,
    PolicyConfig,
    Scenario,
    SeriesKind,
    TimeGrids,
)

if TYPE_CHECKING:
    from feeder_microgrid.stage1 import Window

logger = structlog.get_logger(__name__)


# =============================================================================
# Fuel and SoC rationing
# =============================================================================


def fuel_reserve_target(
    f_prev: float, f_final: float, t: int, d: int, t_len: int, d_len: int
) -> float:
    """End-of-window fuel floor for a window starting at slot ``t`` of day ``d``.

    Linear interpolation from the fuel on hand down to ``f_final`` over the
    whole restoration; the last day targets ``f_final`` itself. ``t`` and
    ``d`` are 1-based.
    """
    if not 1 <= d <= d_len:
        raise ValueError(f"day {d} outside 1..{d_len}")
    if not 1 <= t <= t_len:
        raise ValueError(f"slot {t} outside 1..{t_len}")
    if f_prev < f_final:
        logger.warning("fuel_below_final_reserve", fuel=f_prev, final=f_final)
        return f_final
    if d == d_len:
        return f_final
    return f_prev - (f_prev - f_final) * (t_len * d + t - 1) / (t_len * d_len)


def equal_share_fuel_target(
    f_initial: float, f_final: float, window_end_minute: int, days: int
) -> float:
    """Usable fuel split evenly per day, evaluated at the window end."""
    elapsed = min(window_end_minute / MINUTES_PER_DAY, float(days))
    return f_final + (f_initial - f_final) * (1.0 - elapsed / days)


def fuel_target_for_policy(
    policy: PolicyConfig, fuel_prev: float, dg: DgSpec, window: "Window", grids: TimeGrids
) -> float:
    if policy.fuel_mode == "fixed":
        return policy.fixed_fuel_reserve
    if policy.fuel_mode == "equal":
        return equal_share_fuel_target(
            dg.fuel_init, dg.fuel_final, window.stop * grids.dt_sched, grids.days
        )
    d, t = grids.day_of_slot(window.start)
    return fuel_reserve_target(fuel_prev, dg.fuel_final, t, d, grids.horizon_sched, grids.days)


def soc_targets_for_policy(
    scenario: Scenario, soc: Sequence[float], window: "Window"
) -> Tuple[Optional[float], ...]:
    """Rationing floors for grid-following storage, ``None`` elsewhere."""
    if not scenario.policy.soc_rationing:
        return (None,) * len(scenario.es_units)
    grids = scenario.grids
    d, t = grids.day_of_slot(window.start)
    targets: List[Optional[float]] = []
    for es, value in zip(scenario.es_units, soc):
        if es.role is EsRole.GRID_FORMING:
            targets.append(None)
            continue
        targets.append(
            fuel_reserve_target(max(value, es.soc_min), es.soc_min, t, d,
                                grids.horizon_sched, grids.days)
        )
    return tuple(targets)


# =============================================================================
# SoC-feedback error estimation
# =============================================================================


def estimate_interval_error(
    soc_meas: float, soc_sched: float, energy_kwh: float, efficiency: float, dt_hours: float
) -> float:
    """Average net-load forecast error (forecast − actual, kW) over one interval.

    ``κ = Ē·η / Δt`` maps the SoC gap between measurement and schedule to
    power.
    """
    if dt_hours <= 0:
        raise ValueError("interval length must be positive")
    return energy_kwh * efficiency / dt_hours * (soc_meas - soc_sched)


class ErrorHistory:
    """Chronological ring of per-slot error estimates.

    Each entry also keeps the mean PV forecast of the served groups over the
    same interval, which the PV scale split regresses on.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self._entries: Deque[Tuple[int, float, float]] = deque(maxlen=capacity)

    @classmethod
    def for_policy(cls, policy: PolicyConfig) -> "ErrorHistory":
        return cls(max(policy.correction_window, policy.ma_order + 1, policy.ma_window))

    @property
    def capacity(self) -> int:
        return self._entries.maxlen or 0

    def append(self, slot: int, value: float, pv_forecast_kw: float = 0.0) -> None:
        if self._entries and slot <= self._entries[-1][0]:
            raise ValueError(f"slot {slot} is not after {self._entries[-1][0]}")
        self._entries.append((slot, float(value), float(pv_forecast_kw)))

    def values(self) -> np.ndarray:
        return np.array([v for _, v, _ in self._entries], dtype=float)

    def pv_forecasts(self) -> np.ndarray:
        return np.array([p for _, _, p in self._entries], dtype=float)

    def slots(self) -> List[int]:
        return [s for s, _, _ in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


def _values(history: "ErrorHistory | Iterable[float]") -> np.ndarray:
    if isinstance(history, ErrorHistory):
        return history.values()
    return np.asarray(list(history), dtype=float)


def correction_factor(history: "ErrorHistory | Iterable[float]", window: int) -> float:
    """ε̂: mean of the latest ``window`` estimates, 0 without history."""
    values = _values(history)
    if values.size == 0 or window < 1:
        return 0.0
    return float(values[-window:].mean())


@dataclass(frozen=True)
class ForecastCorrection:
    """Correction split into a PV forecast multiplier and an additive offset."""

    pv_scale: float
    offset_kw: float
    fitted: bool = False

    @classmethod
    def none(cls) -> "ForecastCorrection":
        return cls(1.0, 0.0)


def split_correction(
    history: ErrorHistory,
    window: int,
    scale_bounds: Tuple[float, float],
    min_pv_spread_kw: float,
    previous_scale: float = 1.0,
) -> ForecastCorrection:
    """Regress the latest estimates on the served PV forecast.

    ``ΔP ≈ a + ρ·PV`` over the last ``window`` entries: the PV forecast is
    then scaled by ``1 + ρ`` and ``a`` stays additive. Without enough spread
    in the PV forecast (nights, overcast runs) the previous scale is kept
    and the offset absorbs the rest, so a PV-free feeder gets ``a = ε̂``.
    """
    values = history.values()[-window:] if window >= 1 else np.zeros(0)
    if values.size == 0:
        return ForecastCorrection(previous_scale, 0.0)
    pv = history.pv_forecasts()[-window:]
    if values.size >= 2 and float(pv.max() - pv.min()) >= min_pv_spread_kw:
        design = np.column_stack([np.ones_like(pv), pv])
        coef, *_ = np.linalg.lstsq(design, values, rcond=None)
        rho = float(coef[1])
        if np.isfinite(rho):
            low, high = scale_bounds
            rho = min(max(rho, low), high)
            return ForecastCorrection(1.0 + rho, float((values - rho * pv).mean()), True)
    rho = previous_scale - 1.0
    return ForecastCorrection(previous_scale, float((values - rho * pv).mean()))


# =============================================================================
# Moving-average predictor
# =============================================================================


@dataclass(frozen=True)
class MaModel:
    mu: float
    theta: Tuple[float, ...]

    @property
    def order(self) -> int:
        return len(self.theta)


def fit_ma(history: "ErrorHistory | Iterable[float]", q: int, window: int) -> MaModel:
    """Fit μ and θ₁..θ_q on the last ``window`` estimates.

    θ comes from a least-squares regression of each deviation from μ on its
    ``q`` predecessors; short histories give θ = 0.
    """
    if q < 0:
        raise ValueError("order must be non-negative")
    if window < q + 2:
        raise ValueError(f"fit window {window} too short for order {q}")
    values = _values(history)[-window:]
    if values.size == 0:
        return MaModel(0.0, (0.0,) * q)
    mu = float(values.mean())
    if q == 0 or values.size < q + 2:
        return MaModel(mu, (0.0,) * q)
    dev = values - mu
    rows = np.array([dev[j - q:j][::-1] for j in range(q, dev.size)])
    target = dev[q:]
    theta, *_ = np.linalg.lstsq(rows, target, rcond=None)
    if not np.all(np.isfinite(theta)):
        theta = np.zeros(q)
    return MaModel(mu, tuple(float(v) for v in theta))


def predict_error(model: MaModel, history: "ErrorHistory | Iterable[float]") -> float:
    """One-step-ahead error, newest estimate as the first lag."""
    values = _values(history)
    pred = model.mu
    for lag, theta in enumerate(model.theta, start=1):
        if lag > values.size:
            break
        pred += theta * (values[-lag] - model.mu)
    return float(pred)


# =============================================================================
# Reserve
# =============================================================================


def forecast_net_load(
    profile: GroupProfile, slot: int, groups: Optional[Sequence[bool]] = None
) -> float:
    """Total forecast net load (load − PV, all phases) at ``slot``."""
    net = profile.net_kw[slot].sum(axis=1)
    if groups is not None:
        net = net[np.asarray(groups, dtype=bool)]
    return float(net.sum())


@dataclass(frozen=True)
class ReserveState:
    gamma: float
    low: float = 0.5
    high: float = 0.95
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError("reserve bounds must satisfy 0 <= low <= high <= 1")
        if not self.low - 1e-12 <= self.gamma <= self.high + 1e-12:
            raise ValueError(f"gamma {self.gamma} outside [{self.low}, {self.high}]")

    @classmethod
    def for_policy(cls, policy: PolicyConfig, gamma: Optional[float] = None) -> "ReserveState":
        low, high = policy.gamma_bounds
        nominal = clamp_gamma(1.0 - policy.min_reserve, low, high)
        return cls(nominal if gamma is None else gamma, low, high, policy.min_reserve)

    def with_gamma(self, gamma: float) -> "ReserveState":
        return ReserveState(clamp_gamma(gamma, self.low, self.high), self.low, self.high, self.alpha)


def clamp_gamma(value: float, low: float, high: float) -> float:
    return float(min(max(value, low), high))


def dynamic_reserve(
    p_net_meas: float,
    p_net_forecast: float,
    predicted_error: float,
    es_rating: float,
    state: ReserveState,
) -> float:
    """Reserve factor for the next cycle.

    When the last cycle's measured net load exceeded its forecast the
    reserve covers the predicted error, otherwise only the minimum reserve.
    """
    if es_rating <= 0:
        raise ValueError("storage rating must be positive")
    if p_net_meas > p_net_forecast:
        gamma = 1.0 - max(predicted_error, 0.0) / es_rating
    else:
        gamma = 1.0 - state.alpha
    return clamp_gamma(gamma, state.low, state.high)


def netload_fraction_gamma(
    net_forecast_kw: float, fraction: float, es_rating: float, bounds: Tuple[float, float]
) -> float:
    """Reserve sized as a fraction of the forecast net load."""
    reserve = fraction * max(net_forecast_kw, 0.0)
    return clamp_gamma(1.0 - reserve / es_rating, *bounds)


def nominal_gamma_profile(
    scenario: Scenario, window: "Window", current: Optional[float] = None
) -> np.ndarray:
    """Reserve factor per stage-1 slot; ``current`` overrides the first slot."""
    policy = scenario.policy
    low, high = policy.gamma_bounds
    rating = scenario.gfm.kva_rating
    if policy.reserve_mode == "fixed":
        profile = np.full(window.length, policy.fixed_gamma)
    elif policy.reserve_mode == "netload_fraction":
        prof = scenario.profile(SeriesKind.STAGE1)
        profile = np.array([
            netload_fraction_gamma(forecast_net_load(prof, s), policy.netload_reserve_fraction,
                                   rating, (low, high))
            for s in range(window.start, window.stop)
        ])
    else:
        profile = np.full(window.length, clamp_gamma(1.0 - policy.min_reserve, low, high))
    if current is not None and window.length:
        profile[0] = current
    return profile
