"""
Reporting Module
Versioned JSON run and fault reports, plus corpus-level text summaries.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from src import __version__
from src.core_types import (
    ComparisonRecord, Evidence, FaultReport, InferenceRecord, ModelDescriptor, Outcome, OutcomeClass,
    WarningFlag,
)
from src.errors import ReportError
from src.localizer import Evaluation
from src.optimizer_backend import OptimizeMode

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
RUN_REPORT = "run_report.json"
FAULT_REPORT = "fault_report.json"
RULE = "=" * 70
SUBRULE = "-" * 70


@dataclass(frozen=True)
class RunReport:
    """One model's differential run: original vs. optimized records and verdict"""
    model: ModelDescriptor
    optimizer_backend: str
    runner_backend: str
    mode: str
    applied_passes: Tuple[str, ...]
    original_records: Tuple[InferenceRecord, ...]
    optimized_records: Tuple[InferenceRecord, ...]
    comparisons: Tuple[ComparisonRecord, ...]
    aggregate: Dict[str, Any]
    warnings: Tuple[str, ...]
    outcome: Outcome
    evidence: Evidence = field(default_factory=Evidence)
    run_id: str = ""
    created_at: str = ""
    schema_version: str = SCHEMA_VERSION
    tool_version: str = __version__

    def __post_init__(self):
        for name in ("applied_passes", "original_records", "optimized_records", "comparisons", "warnings"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        original_ids = [r.input_id for r in self.original_records]
        if self.optimized_records:
            if sorted(original_ids) != sorted(r.input_id for r in self.optimized_records):
                raise ReportError("original and optimized records cover different input ids")
            if sorted(original_ids) != sorted(c.input_id for c in self.comparisons):
                raise ReportError("comparisons do not cover the recorded input ids")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "kind": "run",
            "run_id": self.run_id,
            "created_at": self.created_at,
            "model": self.model.to_dict(),
            "backends": {"optimizer": self.optimizer_backend, "runner": self.runner_backend},
            "mode": self.mode,
            "applied_passes": list(self.applied_passes),
            "outcome": self.outcome.to_dict(),
            "evidence": self.evidence.to_dict(),
            "warnings": list(self.warnings),
            "aggregate": self.aggregate,
            "comparisons": [c.to_dict() for c in self.comparisons],
            "original_records": [r.to_dict() for r in self.original_records],
            "optimized_records": [r.to_dict() for r in self.optimized_records],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        return cls(
            model=ModelDescriptor.from_dict(data["model"]),
            optimizer_backend=data["backends"]["optimizer"],
            runner_backend=data["backends"]["runner"],
            mode=data["mode"],
            applied_passes=tuple(data.get("applied_passes", ())),
            original_records=tuple(InferenceRecord.from_dict(r) for r in data.get("original_records", ())),
            optimized_records=tuple(InferenceRecord.from_dict(r) for r in data.get("optimized_records", ())),
            comparisons=tuple(ComparisonRecord.from_dict(c) for c in data.get("comparisons", ())),
            aggregate=data.get("aggregate", {}),
            warnings=tuple(data.get("warnings", ())),
            outcome=Outcome.from_dict(data["outcome"]),
            evidence=Evidence.from_dict(data.get("evidence", {})),
            run_id=data.get("run_id", ""),
            created_at=data.get("created_at", ""),
            schema_version=data["schema_version"],
            tool_version=data.get("tool_version", ""),
        )


def _check_schema(data: Dict[str, Any]):
    version = str(data.get("schema_version", ""))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ReportError(f"unsupported report schema version {version!r} (expected {SCHEMA_VERSION})")


def _encode(data: Dict[str, Any]) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def new_run_id(seed_text: str = "") -> str:
    """UTC timestamp plus a short digest"""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    digest = hashlib.sha256(f"{stamp}|{seed_text}".encode("utf-8")).hexdigest()[:8]
    return f"{stamp}-{digest}"


def report_dir(output_dir: str, model_id: str, run_id: str) -> Path:
    return Path(output_dir) / model_id / run_id


def _write_new(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "x", encoding="utf-8") as f:
            f.write(text)
    except FileExistsError:
        raise ReportError(f"report already exists, refusing to overwrite: {path}")


def emit_run_report(report: RunReport, output_dir: str) -> Path:
    """
    Write a run report to <output_dir>/<model_id>/<run_id>/run_report.json

    Returns:
        Written path; a run id is assigned when the report has none
    """
    if not report.run_id:
        report = RunReport(**{**report.__dict__, "run_id": new_run_id(report.model.id),
                              "created_at": datetime.now(timezone.utc).isoformat()})
    path = report_dir(output_dir, report.model.id, report.run_id) / RUN_REPORT
    _write_new(path, _encode(report.to_dict()))
    logger.info(f"Run report written: {path}")
    return path


def _per_pass_table(report: FaultReport) -> List[Dict[str, Any]]:
    return [
        {
            "pass": name,
            "category": entry.category.value,
            "outcome": entry.outcome.effective.value,
            "evidence": entry.evidence.summary(),
        }
        for name, entry in report.per_pass.items()
    ]


def emit_fault_report(report: FaultReport, output_dir: str, run_id: Optional[str] = None) -> Path:
    """Write a fault report next to the run report of the same run id"""
    run_id = run_id or new_run_id(report.model_id)
    data = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "kind": "fault",
        "run_id": run_id,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "fault": report.to_dict(),
        "per_pass_table": _per_pass_table(report),
    }
    if not report.attributed_passes:
        data["note"] = "no pass attributed"
    if report.incomplete:
        data["note"] = f"sweep incomplete: backend unavailable at pass index {report.failed_pass_index}"
    path = report_dir(output_dir, report.model_id, run_id) / FAULT_REPORT
    _write_new(path, _encode(data))
    logger.info(f"Fault report written: {path}")
    return path


def parse_run_report(text: str) -> RunReport:
    data = json.loads(text)
    _check_schema(data)
    if data.get("kind") != "run":
        raise ReportError(f"not a run report (kind={data.get('kind')!r})")
    return RunReport.from_dict(data)


def parse_fault_report(text: str) -> FaultReport:
    data = json.loads(text)
    _check_schema(data)
    if data.get("kind") != "fault":
        raise ReportError(f"not a fault report (kind={data.get('kind')!r})")
    return FaultReport.from_dict(data["fault"])


def load_report(path: Union[str, Path]) -> Union[RunReport, FaultReport]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        kind = json.loads(text).get("kind")
    except ValueError as e:
        raise ReportError(f"unreadable report {path}: {e}")
    return parse_run_report(text) if kind == "run" else parse_fault_report(text)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _ratio(count: int, total: int) -> str:
    return f"{count}/{total} ({100.0 * count / total:.1f}%)" if total else "0/0"


def summarize(reports: Sequence[Union[RunReport, FaultReport]]) -> str:
    """
    Corpus-level summary as aligned text tables

    Args:
        reports: Parsed run and fault reports

    Returns:
        Summary text: per-task crash/divergence/warning counts and per-pass
        fault frequency. Crash ratios cover default-bundle runs only; the
        other columns count runs in every mode.
    """
    if not reports:
        raise ReportError("nothing to summarize")
    runs = [r for r in reports if isinstance(r, RunReport)]
    bundle = OptimizeMode.default_bundle().label
    faults = [r for r in reports if isinstance(r, FaultReport)]

    lines = [RULE, "   DIFFERENTIAL TESTING SUMMARY", RULE]
    lines.append(f"\n1. RUNS ({len(runs)} report(s))")
    lines.append(SUBRULE)
    if runs:
        rows = []
        for task in sorted({r.model.task.value for r in runs}):
            group = [r for r in runs if r.model.task.value == task]
            effective = [r.outcome.effective for r in group]
            bundle_runs = [r.outcome.effective for r in group if r.mode == bundle]
            rows.append({
                "task": task,
                "models": len(group),
                "bundle_crashed": _ratio(sum(1 for e in bundle_runs if e.is_crash), len(bundle_runs)),
                "divergent": _ratio(sum(1 for e in effective if e is OutcomeClass.DIVERGENT), len(group)),
                "clean": _ratio(sum(1 for e in effective if e is OutcomeClass.CLEAN), len(group)),
                "ir_changes": sum(1 for r in group if WarningFlag.VERSION_CHANGE in r.outcome.flags),
                "unused_init": sum(1 for r in group if WarningFlag.UNUSED_INITIALIZER in r.outcome.flags),
            })
        lines.append(pd.DataFrame(rows).to_string(index=False))
        for task in sorted({r.model.task.value for r in runs}):
            group = [r for r in runs if r.model.task.value == task]
            divergent = sum(1 for r in group if r.outcome.primary is OutcomeClass.DIVERGENT)
            lines.append(f"   {task}: {_ratio(divergent, len(group))} exhibited discrepancies")
    else:
        lines.append("   no run reports")

    lines.append(f"\n2. PER-PASS FAULT FREQUENCY ({len(faults)} fault report(s))")
    lines.append(SUBRULE)
    if faults:
        names: List[str] = []
        for report in faults:
            names.extend(n for n in report.per_pass if n not in names)
        table = pd.DataFrame(
            [{
                "pass": name,
                "attributed": sum(1 for r in faults if name in r.attributed_passes),
                "excluded": sum(1 for r in faults if name in r.excluded_passes),
            } for name in names],
            columns=["pass", "attributed", "excluded"],
        )
        lines.append(table.to_string(index=False))
        incomplete = sum(1 for r in faults if r.incomplete)
        if incomplete:
            lines.append(f"   incomplete sweeps: {incomplete}")
    else:
        lines.append("   no fault reports")
    lines.append("\n" + RULE)
    return "\n".join(lines)


def collect_reports(directory: Union[str, Path]) -> List[Union[RunReport, FaultReport]]:
    """Every parsable report under a directory, in path order"""
    reports = []
    for path in sorted(Path(directory).rglob("*_report.json")):
        try:
            reports.append(load_report(path))
        except (ReportError, ValueError, KeyError) as e:
            logger.warning(f"⚠️ Skipping {path}: {e}")
    return reports


def write_summary(directory: Union[str, Path]) -> str:
    """Summarize every report under directory into <directory>/summary.txt"""
    reports = collect_reports(directory)
    if not reports:
        raise ReportError(f"no reports found under {directory}")
    text = summarize(reports)
    (Path(directory) / "summary.txt").write_text(text + "\n", encoding="utf-8")
    return text


def build_run_report(model: ModelDescriptor, evaluation: Evaluation, optimizer_backend: str,
                     runner_backend: str) -> RunReport:
    """Run report of one evaluation; crashed stages leave their sections empty"""
    optimized = evaluation.run.records if evaluation.run is not None and not evaluation.run.crashed else ()
    return RunReport(
        model=model,
        optimizer_backend=optimizer_backend,
        runner_backend=runner_backend,
        mode=evaluation.mode.label,
        applied_passes=evaluation.optimization.applied_passes,
        original_records=evaluation.reference.records if evaluation.reference is not None else (),
        optimized_records=optimized,
        comparisons=evaluation.comparisons or (),
        aggregate=evaluation.aggregate,
        warnings=tuple(evaluation.warning_texts()),
        outcome=evaluation.outcome,
        evidence=evaluation.evidence,
    )
