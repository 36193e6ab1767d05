"""
CSV artifacts for a run and the case-comparison table.

Layout of a report directory::

    <out>/<case>/metrics.csv       metric,value
    <out>/<case>/trace.csv         one row per plant step
    <out>/<case>/dispatch.csv      one row per stage-2 solve
    <out>/<case>/diagnostics.csv   one row per stage-1 solve
    <out>/<case>/schedule.csv      first slot of every stage-1 schedule
    <out>/<case>/events.csv        plant event log
    <out>/comparison.csv           metrics as rows, cases as columns
    <out>/comparison.md            same table, durations as XXh YYm
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping

import pandas as pd
import structlog

from feeder_microgrid.exceptions import ReportError
from feeder_microgrid.harness.metrics import METRIC_ROWS, Metrics, format_duration

logger = structlog.get_logger(__name__)

FLOAT_FORMAT = "%.6f"
EVENT_COLUMNS = ["minute", "timestamp", "kind", "cause", "asset"]


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise ReportError(f"could not write {path}: {exc}") from exc
    return path


def _prepare(out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"could not create {out_dir}: {exc}") from exc
    return out_dir


def metrics_frame(metrics: Metrics) -> pd.DataFrame:
    return pd.DataFrame(
        [(label, getattr(metrics, attr)) for label, attr, _ in METRIC_ROWS],
        columns=["metric", "value"],
    )


def events_frame(log) -> pd.DataFrame:
    """Event log with wall-clock stamps; minutes count from the restoration start."""
    start = None
    if not log.trace.empty:
        first = int(log.trace["minute"].iloc[0])
        start = log.trace["timestamp"].iloc[0] - pd.Timedelta(minutes=first)
    rows = [
        {"minute": e.minute,
         "timestamp": start + pd.Timedelta(minutes=e.minute) if start is not None else "",
         "kind": e.kind, "cause": e.cause, "asset": e.asset}
        for e in log.events
    ]
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def export_report(log, metrics: Metrics, out_dir: Path) -> List[Path]:
    """Write one case's artifacts under ``out_dir/<case name>``."""
    case_dir = _prepare(Path(out_dir) / log.case.name)
    written = [
        _write_csv(metrics_frame(metrics), case_dir / "metrics.csv"),
        _write_csv(log.trace, case_dir / "trace.csv"),
        _write_csv(log.dispatch, case_dir / "dispatch.csv"),
        _write_csv(log.diagnostics, case_dir / "diagnostics.csv"),
        _write_csv(log.schedule, case_dir / "schedule.csv"),
        _write_csv(events_frame(log), case_dir / "events.csv"),
    ]
    logger.info("report_written", case=log.case.name, directory=str(case_dir),
                files=len(written))
    return written


def comparison_table(results: Mapping[str, Metrics], human: bool = False) -> pd.DataFrame:
    """Metrics as rows and cases as columns, in the given case order."""
    table: Dict[str, List[object]] = {"metric": [label for label, _, _ in METRIC_ROWS]}
    for name, metrics in results.items():
        column: List[object] = []
        for _, attr, kind in METRIC_ROWS:
            value = getattr(metrics, attr)
            if human and kind == "duration":
                column.append(format_duration(value))
            elif human and kind == "pct":
                column.append(f"{value:.2f}")
            else:
                column.append(value)
        table[name] = column
    return pd.DataFrame(table)


def _markdown(frame: pd.DataFrame) -> str:
    # plain pipe table; DataFrame.to_markdown would pull in tabulate
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body]) + "\n"


def export_comparison(results: Mapping[str, Metrics], out_dir: Path) -> List[Path]:
    out_dir = _prepare(out_dir)
    csv_path = _write_csv(comparison_table(results), out_dir / "comparison.csv")
    md_path = out_dir / "comparison.md"
    try:
        md_path.write_text(_markdown(comparison_table(results, human=True)), encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"could not write {md_path}: {exc}") from exc
    logger.info("comparison_written", cases=list(results), directory=str(out_dir))
    return [csv_path, md_path]
