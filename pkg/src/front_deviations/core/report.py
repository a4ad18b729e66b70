"""Comparison reports: theory against measurement with z-scores."""

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from openpyxl import Workbook
from openpyxl.styles import Font

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .analysis import DeviationEstimate
from .errors import AnalysisError

logger = logging.getLogger(__name__)

COLUMNS = ["check", "source", "c", "regime", "quantity", "theory", "measured", "error",
           "systematic", "z", "status", "note"]


@dataclass
class ComparisonRow:
    """One theory-versus-measurement comparison.

    ``error`` is the statistical error of ``measured``; ``systematic`` is an
    absolute allowance added in quadrature. Rows without a theory or a
    measured value are incomparable.
    """
    check: str
    quantity: str
    theory: float | None
    measured: float | None
    error: float = 0.0
    systematic: float = 0.0
    source: str = ""
    c: float | None = None
    regime: str = ""
    note: str = ""

    @property
    def comparable(self) -> bool:
        return (self.theory is not None and self.measured is not None
                and math.isfinite(self.theory) and math.isfinite(self.measured))

    @property
    def z(self) -> float | None:
        if not self.comparable:
            return None
        scale = math.hypot(self.error, self.systematic)
        diff = abs(self.measured - self.theory)
        if scale == 0.0:
            return 0.0 if diff == 0.0 else math.inf
        return diff / scale

    def status(self, threshold: float) -> str:
        z = self.z
        if z is None:
            return "incomparable"
        return "pass" if z <= threshold else "fail"

    def to_dict(self, threshold: float) -> dict:
        data = asdict(self)
        data["z"] = self.z
        data["status"] = self.status(threshold)
        return data


def tolerance_row(check: str, quantity: str, theory: float | None, measured: float | None,
                  tolerance: float, relative: bool = False, threshold: float = 4.0, **extra) -> ComparisonRow:
    """Row that fails exactly when |measured - theory| exceeds ``tolerance``."""
    scale = tolerance * abs(theory) if relative and theory is not None else tolerance
    return ComparisonRow(check, quantity, theory, measured, error=0.0,
                         systematic=scale / threshold, **extra)


def estimate_rows(estimate: DeviationEstimate, tolerances: Tolerances | None = None) -> list[ComparisonRow]:
    """Expand a deviation estimate into psi, theta and amplitude rows."""
    tol = tolerances or get_settings().tolerances
    common = {"source": estimate.source, "c": estimate.c, "regime": estimate.regime.value}
    window = estimate.t_window
    note = f"mode={estimate.mode} t=[{window[0]:g},{window[1]:g}]" if window else ""

    def systematic(rel: float, theory: float | None) -> float:
        return rel * abs(theory) if theory is not None else 0.0

    return [
        ComparisonRow("tail", "psi", estimate.psi_theory, estimate.psi_fit, estimate.psi_err,
                      systematic(tol.psi_systematic, estimate.psi_theory), note=note, **common),
        ComparisonRow("tail", "theta", estimate.theta_theory, estimate.theta_fit, estimate.theta_err,
                      systematic(tol.theta_systematic, estimate.theta_theory), note=note, **common),
        ComparisonRow("tail", "amplitude", estimate.amp_theory, estimate.amp_fit, estimate.amp_err,
                      systematic(tol.amp_systematic, estimate.amp_theory), note=note, **common),
    ]


@dataclass
class ReportSummary:
    """Outcome of :func:`report`."""
    rows: list[ComparisonRow]
    threshold: float
    exit_status: int
    max_z: float | None
    failures: int
    incomparable: int
    coverage: dict[str, int] = field(default_factory=dict)
    paths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "exit_status": self.exit_status,
            "threshold": self.threshold,
            "max_z": self.max_z,
            "failures": self.failures,
            "incomparable": self.incomparable,
            "coverage": self.coverage,
            "rows": [row.to_dict(self.threshold) for row in self.rows],
        }


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(summary: ReportSummary, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(COLUMNS)
        for row in summary.rows:
            data = row.to_dict(summary.threshold)
            writer.writerow([_cell(data[name]) for name in COLUMNS])


def write_json(summary: ReportSummary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary.to_dict(), f, indent=2, default=str)


def write_workbook(summary: ReportSummary, path: str | Path) -> None:
    """Workbook with a summary sheet and one sheet per data source."""
    wb = Workbook()
    overview = wb.active
    overview.title = "summary"
    for key in ("exit_status", "threshold", "max_z", "failures", "incomparable"):
        overview.append([key, getattr(summary, key)])
    overview.append([])
    overview.append(["regime", "rows"])
    for name, count in sorted(summary.coverage.items()):
        overview.append([name, count])
    overview["A1"].font = Font(bold=True)

    by_source: dict[str, list[ComparisonRow]] = {}
    for row in summary.rows:
        by_source.setdefault(row.source or "general", []).append(row)
    for source, rows in by_source.items():
        sheet = wb.create_sheet(title=source[:31])
        sheet.append(COLUMNS)
        for cell in sheet[1]:
            cell.font = Font(bold=True)
        for row in rows:
            data = row.to_dict(summary.threshold)
            sheet.append([data[name] if not (isinstance(data[name], float) and math.isinf(data[name]))
                          else "inf" for name in COLUMNS])
    wb.save(path)


def report(items: Iterable[DeviationEstimate | ComparisonRow], out_dir: str | Path | None = None,
           stem: str = "report", xlsx: bool = False, tolerances: Tolerances | None = None) -> ReportSummary:
    """Build the comparison report and optionally write it.

    Args:
        items: Deviation estimates and/or ready comparison rows.
        out_dir: Directory for ``<stem>.csv`` and ``<stem>.json``; nothing is
            written when None.
        stem: Base file name.
        xlsx: Also write ``<stem>.xlsx``.

    Returns:
        Summary whose ``exit_status`` is 1 when any comparable row has
        |z| above the threshold, else 0.
    """
    tol = tolerances or get_settings().tolerances
    rows: list[ComparisonRow] = []
    for item in items:
        if isinstance(item, DeviationEstimate):
            rows.extend(estimate_rows(item, tol))
        else:
            rows.append(item)
    if not rows:
        raise AnalysisError("report needs at least one estimate")

    zs = [row.z for row in rows if row.comparable]
    failures = sum(1 for row in rows if row.status(tol.zscore) == "fail")
    coverage = Counter(row.regime for row in rows if row.regime)
    summary = ReportSummary(
        rows=rows, threshold=tol.zscore, exit_status=1 if failures else 0,
        max_z=max(zs) if zs else None, failures=failures,
        incomparable=len(rows) - len(zs), coverage=dict(coverage),
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(summary, out / f"{stem}.csv")
        write_json(summary, out / f"{stem}.json")
        summary.paths = [str(out / f"{stem}.csv"), str(out / f"{stem}.json")]
        if xlsx:
            write_workbook(summary, out / f"{stem}.xlsx")
            summary.paths.append(str(out / f"{stem}.xlsx"))

    logger.info("report", extra=fields(rows=len(rows), failures=failures,
                                       incomparable=summary.incomparable, max_z=summary.max_z))
    return summary


def write_table(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Plain CSV of dict rows; None is written as an empty cell."""
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row.get(key)) for key in columns})


def write_series(path: str | Path, data, header: tuple[str, ...]) -> None:
    """Two-or-more column numeric series as plot-ready CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for values in data:
            writer.writerow([repr(float(v)) for v in values])
