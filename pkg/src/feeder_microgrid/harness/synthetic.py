"""
Deterministic synthetic feeder scenarios.

Truth series are generated at one-minute resolution from a residential load
shape and a clear-sky PV shape; forecasts are the same shapes with a
configurable PV over-forecast bias, a constant net-load bias and optional
multiplicative load noise. Cloud dips only ever appear in the truth.

Phase allocation: ordinary nodes are single-phase, assigned round-robin to
phases a, b, c in group order; critical nodes are balanced three-phase.
"""

from __future__ import annotations

import math
from datetime import timedelta
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, model_validator

from feeder_microgrid.exceptions import ReportError, ScenarioError
from feeder_microgrid.scenario import (
    MINUTES_PER_DAY,
    PHASES,
    Scenario,
    ScenarioConfig,
    SeriesKind,
    SeriesPaths,
    TimeSeriesFrame,
    build_scenario,
    parse_config,
    reactive_from_pf,
    scenario_to_config,
    write_series_csv,
)

logger = structlog.get_logger(__name__)

REPLICA_RESOURCE = "ieee123_replica.yaml"


class SyntheticShape(BaseModel):
    """Shape parameters of a generated scenario."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    days: PositiveFloat = 2.0
    pv_rating_kw: Tuple[float, float] = (19.0, 111.0)
    peak_load_kw: PositiveFloat = 3500.0
    pv_penetration: float = Field(0.9, ge=0.0, le=3.0)
    critical_peak_kw: Dict[str, PositiveFloat] = Field(default_factory=dict)
    # PV forecast = clear-sky truth * (1 + pv_bias)
    pv_bias: float = Field(0.0, ge=-1.0, le=2.0)
    # forecast minus actual net load, kW, spread over ordinary nodes
    load_bias_kw: float = 0.0
    load_noise: float = Field(0.0, ge=0.0, le=0.5)
    spikes_per_day: float = Field(0.0, ge=0.0)
    spike_depth: float = Field(0.5, ge=0.0, le=1.0)
    spike_minutes: int = Field(20, ge=1)
    start_day_offset: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _rating_range(self) -> "SyntheticShape":
        low, high = self.pv_rating_kw
        if not 0.0 < low <= high:
            raise ValueError("pv_rating_kw must satisfy 0 < low <= high")
        if sum(self.critical_peak_kw.values()) >= self.peak_load_kw:
            raise ValueError("critical peaks exceed peak_load_kw")
        return self


def parse_shape(raw: Dict[str, Any]) -> SyntheticShape:
    try:
        return SyntheticShape.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = "synthetic." + ".".join(str(p) for p in err["loc"]) if err["loc"] else "synthetic"
        raise ScenarioError("schema_violation", key, err["msg"]) from exc


def load_replica() -> Tuple[ScenarioConfig, SyntheticShape]:
    """The bundled resource replica and its default shape."""
    text = resources.files("feeder_microgrid").joinpath("config", REPLICA_RESOURCE).read_text(
        encoding="utf-8"
    )
    raw = yaml.safe_load(text)
    return parse_config(raw["scenario"]), parse_shape(raw.get("synthetic", {}))


# =============================================================================
# Shapes
# =============================================================================


def _residential(hours: np.ndarray) -> np.ndarray:
    return (
        0.45
        + 0.20 * np.exp(-(((hours - 8.0) / 1.8) ** 2))
        + 0.55 * np.exp(-(((hours - 19.0) / 2.6) ** 2))
    )


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Residential demand per unit of daily peak: night base, morning and evening peaks."""
    day = np.arange(MINUTES_PER_DAY) / 60.0
    return _residential(hours) / _residential(day).max()


def clear_sky(hours: np.ndarray, sunrise: float = 6.0, sunset: float = 20.0) -> np.ndarray:
    return np.clip(np.sin(math.pi * (hours - sunrise) / (sunset - sunrise)), 0.0, None) * (
        (hours >= sunrise) & (hours <= sunset)
    )


def cloud_factor(
    hours: np.ndarray, rng: np.random.Generator, shape: SyntheticShape
) -> np.ndarray:
    """Multiplicative truth-PV dips; Poisson count per day at daylight minutes."""
    factor = np.ones(hours.size)
    if shape.spikes_per_day <= 0.0 or shape.spike_depth <= 0.0:
        return factor
    daylight = np.flatnonzero(clear_sky(hours) > 0.05)
    if daylight.size == 0:
        return factor
    days = math.ceil(hours.size / MINUTES_PER_DAY)
    for day in range(days):
        lo, hi = day * MINUTES_PER_DAY, (day + 1) * MINUTES_PER_DAY
        candidates = daylight[(daylight >= lo) & (daylight < hi)]
        if candidates.size == 0:
            continue
        for start in rng.choice(candidates, size=rng.poisson(shape.spikes_per_day)):
            factor[start:start + shape.spike_minutes] = 1.0 - shape.spike_depth
    return factor


# =============================================================================
# Generator
# =============================================================================


def _phase_spread(values: np.ndarray, phase: Optional[int]) -> np.ndarray:
    out = np.zeros((values.size, len(PHASES)))
    if phase is None:
        out[:] = values[:, None] / len(PHASES)
    else:
        out[:, phase] = values
    return out


def _block_noise(rng: np.random.Generator, steps: int, nodes: int, block: int, scale: float) -> np.ndarray:
    if scale <= 0.0:
        return np.zeros((steps, nodes))
    blocks = math.ceil(steps / block)
    return np.repeat(rng.normal(0.0, scale, size=(blocks, nodes)), block, axis=0)[:steps]


def generate_synthetic_scenario(
    shape: Optional[SyntheticShape] = None,
    seed: int = 0,
    config: Optional[ScenarioConfig] = None,
) -> Scenario:
    """Build a scenario with generated truth and forecast series.

    ``config`` supplies groups, resources, policy and grids (the bundled
    replica by default); its restoration window is replaced by
    ``shape.days`` starting ``shape.start_day_offset`` days later.
    """
    replica_config, replica_shape = load_replica()
    config = config or replica_config
    shape = shape or replica_shape
    grids = config.grids

    minutes = int(round(shape.days * MINUTES_PER_DAY))
    minutes -= minutes % grids.dt_sched
    if minutes <= 0:
        raise ScenarioError("grid_incompatible", "synthetic.days",
                            f"{shape.days} days is shorter than one stage-1 slot")
    start = grids.restoration_start + timedelta(days=shape.start_day_offset)
    grids = grids.model_copy(update={
        "restoration_start": start,
        "restoration_end": start + timedelta(minutes=minutes),
    })
    config = config.model_copy(update={"grids": grids, "series": None})

    rng = np.random.default_rng(seed)
    critical = {n for g in config.groups for n in g.critical_nodes}
    nodes: List[str] = [n for g in config.groups for n in g.nodes]
    crit_peaks = {n: shape.critical_peak_kw.get(n) for n in nodes if n in critical}
    ordinary = [n for n in nodes if crit_peaks.get(n) is None]

    offset_min = start.hour * 60 + start.minute
    hours = ((np.arange(minutes) + offset_min) % MINUTES_PER_DAY) / 60.0
    day_index = (np.arange(minutes) + offset_min) // MINUTES_PER_DAY
    base_load = load_shape(hours)
    base_pv = clear_sky(hours)

    # draws happen in a fixed order so one seed maps to one scenario
    share = rng.uniform(0.5, 1.5, size=len(ordinary))
    share /= share.sum()
    day_factor = rng.uniform(0.95, 1.05, size=(int(day_index.max()) + 1, len(nodes)))
    ratings = rng.uniform(*shape.pv_rating_kw, size=len(nodes))
    if ratings.sum() > 0:
        ratings *= shape.pv_penetration * shape.peak_load_kw / ratings.sum()
    clouds = cloud_factor(hours, rng, shape)
    noise1 = _block_noise(rng, minutes, len(nodes), grids.dt_sched, shape.load_noise)
    noise2 = _block_noise(rng, minutes, len(nodes), grids.dt_disp, 0.5 * shape.load_noise)

    ordinary_peak = shape.peak_load_kw - sum(v for v in crit_peaks.values() if v)
    ord_pos = {n: i for i, n in enumerate(ordinary)}
    shape_tuple = (minutes, len(nodes), len(PHASES))
    truth_load, f1_load, f2_load = (np.zeros(shape_tuple) for _ in range(3))
    truth_pv, fc_pv = np.zeros(shape_tuple), np.zeros(shape_tuple)

    phase_cursor = 0
    for j, node in enumerate(nodes):
        if crit_peaks.get(node):
            peak, phase, bias_share = crit_peaks[node], None, 0.0
        else:
            peak = ordinary_peak * share[ord_pos[node]]
            phase = phase_cursor % len(PHASES)
            phase_cursor += 1
            bias_share = share[ord_pos[node]]
        load = peak * base_load * day_factor[day_index, j]
        bias = shape.load_bias_kw * bias_share
        actual = load + max(-bias, 0.0)
        forecast = load + max(bias, 0.0)
        truth_load[:, j] = _phase_spread(actual, phase)
        f1_load[:, j] = _phase_spread(np.clip(forecast * (1.0 + noise1[:, j]), 0.0, None), phase)
        f2_load[:, j] = _phase_spread(np.clip(forecast * (1.0 + noise2[:, j]), 0.0, None), phase)
        pv = ratings[j] * base_pv
        truth_pv[:, j] = _phase_spread(pv * clouds, phase)
        fc_pv[:, j] = _phase_spread(pv * (1.0 + shape.pv_bias), phase)

    pf = config.policy.default_power_factor
    stamp = pd.Timestamp(start)

    def frame(kind: SeriesKind, load: np.ndarray, pv: np.ndarray) -> TimeSeriesFrame:
        return TimeSeriesFrame(kind, stamp, 1, tuple(nodes), load, pv, reactive_from_pf(load, pf))

    frames = {
        SeriesKind.TRUTH: frame(SeriesKind.TRUTH, truth_load, truth_pv),
        SeriesKind.STAGE1: frame(SeriesKind.STAGE1, f1_load, fc_pv.copy()),
        SeriesKind.STAGE2: frame(SeriesKind.STAGE2, f2_load, fc_pv.copy()),
    }
    scenario = build_scenario(config, frames)
    logger.info("synthetic_scenario_generated", seed=seed, days=shape.days,
                nodes=len(nodes), pv_bias=shape.pv_bias, spikes_per_day=shape.spikes_per_day)
    return scenario


def write_scenario(scenario: Scenario, out_dir: Path, name: str = "scenario") -> Path:
    """Write config YAML plus the three series CSVs; returns the config path."""
    out_dir = Path(out_dir)
    paths = SeriesPaths(
        truth=f"{name}_truth.csv",
        stage1_forecast=f"{name}_stage1_forecast.csv",
        stage2_forecast=f"{name}_stage2_forecast.csv",
    )
    config_path = out_dir / f"{name}.yaml"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for kind in SeriesKind:
            write_series_csv(scenario.series[kind], out_dir / getattr(paths, kind.value))
        config_path.write_text(
            yaml.safe_dump(scenario_to_config(scenario, paths), sort_keys=False),
            encoding="utf-8",
        )
    except OSError as exc:
        raise ReportError(f"could not write scenario to {out_dir}: {exc}") from exc
    logger.info("scenario_written", path=str(config_path))
    return config_path
