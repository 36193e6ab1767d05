"""Closed-loop orchestration, metrics, reports, synthetic scenarios and the CLI."""

from feeder_microgrid.harness.metrics import Metrics, aggregate_trace, compute_metrics
from feeder_microgrid.harness.report import export_comparison, export_report
from feeder_microgrid.harness.runner import (
    BUILTIN_CASES,
    CaseConfig,
    RestorationRunner,
    RunLog,
    run_restoration,
)
from feeder_microgrid.harness.synthetic import (
    SyntheticShape,
    generate_synthetic_scenario,
    write_scenario,
)

__all__ = [
    "BUILTIN_CASES",
    "CaseConfig",
    "Metrics",
    "RestorationRunner",
    "RunLog",
    "SyntheticShape",
    "aggregate_trace",
    "compute_metrics",
    "export_comparison",
    "export_report",
    "generate_synthetic_scenario",
    "run_restoration",
    "write_scenario",
]
