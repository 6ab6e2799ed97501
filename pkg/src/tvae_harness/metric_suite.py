"""Evaluation metrics over step predictions, episode traces, and failure
probes, with deterministic report emission.

Step level: type match (TM), grounding rate (GR, pooled over spatial and
text steps with a kind-agnostic denominator, plus GR|TM for comparability),
and step success (SR).  Task level: first-try success (TSR), progress before
first error (PG), success allowing recovery (Sim-TSR), and average step
overhead of completed tasks (ASO, infinite when nothing completed).
Robustness: loop rate (LR) and recovery success rate (RSR).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from .errors import EmptySetError, InvariantViolationError
from .reward_engine import RewardConfig, match_action, point_in_bbox, euclidean, texts_match
from .sim_engine import CaseResult, Outcome, SimTrace
from .trajectory_store import ActionRecord, StepRecord


@dataclass(frozen=True)
class StepPrediction:
    source: tuple[str, int]
    predicted: ActionRecord | None
    gt: StepRecord


@dataclass(frozen=True)
class StepMetrics:
    tm: float
    gr: float | None
    sr: float
    gr_given_tm: float | None
    counts: dict[str, int]


@dataclass(frozen=True)
class TaskMetrics:
    tsr: float
    pg: float
    sim_tsr: float
    aso: float  # math.inf when no task completed
    counts: dict[str, int]


@dataclass(frozen=True)
class RobustnessMetrics:
    lr: float
    rsr: float
    counts: dict[str, int]


def _grounded(pred: ActionRecord | None, gt: StepRecord, cfg: RewardConfig) -> bool:
    """Parameter-level correctness ignoring the predicted kind."""
    action = gt.gt_action
    if action.is_spatial():
        if pred is None or pred.coordinate is None:
            return False
        if gt.gt_bbox is not None:
            return point_in_bbox(pred.coordinate, gt.gt_bbox)
        assert action.coordinate is not None
        return euclidean(pred.coordinate, action.coordinate) <= cfg.delta
    if action.is_textual():
        if pred is None or pred.text is None:
            return False
        return texts_match(pred.text, action.text or "", cfg)
    raise AssertionError("grounding undefined for this kind")


def step_metrics(
    preds: Sequence[StepPrediction], cfg: RewardConfig | None = None
) -> StepMetrics:
    """Compute TM / GR / SR over a prediction set."""
    if not preds:
        raise EmptySetError("no step predictions")
    cfg = cfg or RewardConfig()
    tm_hits = 0
    sr_hits = 0
    gr_eligible = 0
    gr_hits = 0
    grtm_eligible = 0
    grtm_hits = 0
    for p in preds:
        gt_action = p.gt.gt_action
        kind_ok = p.predicted is not None and p.predicted.kind is gt_action.kind
        tm_hits += kind_ok
        sr_hits += match_action(p.predicted, gt_action, p.gt.gt_bbox, cfg)
        if gt_action.is_spatial() or gt_action.is_textual():
            grounded = _grounded(p.predicted, p.gt, cfg)
            gr_eligible += 1
            gr_hits += grounded
            if kind_ok:
                grtm_eligible += 1
                grtm_hits += grounded
    n = len(preds)
    return StepMetrics(
        tm=tm_hits / n,
        gr=gr_hits / gr_eligible if gr_eligible else None,
        sr=sr_hits / n,
        gr_given_tm=grtm_hits / grtm_eligible if grtm_eligible else None,
        counts={
            "step_predictions": n,
            "grounding_eligible": gr_eligible,
            "grounding_type_matched": grtm_eligible,
        },
    )


def progress_fraction(trace: SimTrace) -> float:
    """Ground-truth steps cleared before the first failed attempt, over T."""
    prefix = 0
    for attempt in trace.attempts:
        if not attempt.matched:
            break
        prefix += 1
    return prefix / trace.t_gt


def task_metrics(traces: Sequence[SimTrace]) -> TaskMetrics:
    """Compute TSR / PG / Sim-TSR / ASO over episode traces."""
    if not traces:
        raise EmptySetError("no traces")
    n = len(traces)
    tsr = sum(t.outcome is Outcome.COMPLETED_FIRST_TRY for t in traces) / n
    pg = sum(progress_fraction(t) for t in traces) / n
    completed = [t for t in traces if t.outcome is not Outcome.BUDGET_EXHAUSTED]
    sim_tsr = len(completed) / n
    if completed:
        aso = sum(t.steps_used - t.t_gt for t in completed) / len(completed)
    else:
        aso = math.inf
    return TaskMetrics(
        tsr=tsr,
        pg=pg,
        sim_tsr=sim_tsr,
        aso=aso,
        counts={"tasks": n, "completed_tasks": len(completed)},
    )


def robustness_metrics(
    results: Sequence[CaseResult] | Sequence[tuple[bool, bool]]
) -> RobustnessMetrics:
    """Compute LR / RSR over failure-case results."""
    if not results:
        raise EmptySetError("no failure-case results")
    flags = [
        (r.repeated, r.recovered) if isinstance(r, CaseResult) else (bool(r[0]), bool(r[1]))
        for r in results
    ]
    n = len(flags)
    return RobustnessMetrics(
        lr=sum(rep for rep, _ in flags) / n,
        rsr=sum(rec for _, rec in flags) / n,
        counts={"failure_cases": n},
    )


# -- combined report -----------------------------------------------------------------

METRIC_COLUMNS = ("tm", "gr", "sr", "tsr", "pg", "sim_tsr", "aso", "lr", "rsr")


@dataclass(frozen=True)
class MetricsReport:
    tm: float | None = None
    gr: float | None = None
    sr: float | None = None
    tsr: float | None = None
    pg: float | None = None
    sim_tsr: float | None = None
    aso: float | None = None
    lr: float | None = None
    rsr: float | None = None
    gr_given_tm: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.tsr is not None and self.sim_tsr is not None and self.tsr > self.sim_tsr + 1e-12:
            raise InvariantViolationError("report", "tsr", "recovery can only add completions")
        if self.sr is not None and self.tm is not None and self.sr > self.tm + 1e-12:
            raise InvariantViolationError("report", "sr", "joint correctness implies type match")
        if self.aso is not None and self.sim_tsr is not None:
            if (self.sim_tsr > 0) == math.isinf(self.aso):
                raise InvariantViolationError("report", "aso", "finite iff sim_tsr > 0")

    @classmethod
    def build(
        cls,
        step: StepMetrics | None = None,
        task: TaskMetrics | None = None,
        robust: RobustnessMetrics | None = None,
    ) -> "MetricsReport":
        counts: dict[str, int] = {}
        kwargs: dict[str, Any] = {}
        if step is not None:
            kwargs.update(tm=step.tm, gr=step.gr, sr=step.sr, gr_given_tm=step.gr_given_tm)
            counts.update(step.counts)
        if task is not None:
            kwargs.update(tsr=task.tsr, pg=task.pg, sim_tsr=task.sim_tsr, aso=task.aso)
            counts.update(task.counts)
        if robust is not None:
            kwargs.update(lr=robust.lr, rsr=robust.rsr)
            counts.update(robust.counts)
        return cls(counts=counts, **kwargs)


class ReportFormat(str, Enum):
    JSON = "json"
    CSV = "csv"
    MARKDOWN = "markdown"


def _json_value(value: float | None) -> Any:
    if value is None:
        return None
    if math.isinf(value):
        return "inf"
    return value


def report_to_json_dict(report: MetricsReport) -> dict[str, Any]:
    out: dict[str, Any] = {col: _json_value(getattr(report, col)) for col in METRIC_COLUMNS}
    out["gr_given_tm"] = _json_value(report.gr_given_tm)
    out["counts"] = dict(sorted(report.counts.items()))
    return out


def report_from_json_dict(obj: Mapping[str, Any]) -> MetricsReport:
    def val(raw: Any) -> float | None:
        if raw is None:
            return None
        if raw == "inf":
            return math.inf
        return float(raw)

    return MetricsReport(
        **{col: val(obj.get(col)) for col in METRIC_COLUMNS},
        gr_given_tm=val(obj.get("gr_given_tm")),
        counts={k: int(v) for k, v in obj.get("counts", {}).items()},
    )


def _csv_cell(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return repr(value)


def _md_cell(value: float | None, percent: bool) -> str:
    if value is None:
        return "--"
    if math.isinf(value):
        return "inf"
    return f"{value * 100:.1f}" if percent else f"{value:.2f}"


def emit_report(report: MetricsReport, fmt: ReportFormat | str = ReportFormat.JSON) -> bytes:
    """Serialize a report deterministically.

    JSON keeps raw fractions (infinity as the string "inf"); CSV uses the
    fixed column order tm,gr,sr,tsr,pg,sim_tsr,aso,lr,rsr; markdown renders
    percentages in a results-table shape.
    """
    fmt = ReportFormat(fmt)
    if fmt is ReportFormat.JSON:
        return (json.dumps(report_to_json_dict(report), indent=2) + "\n").encode("utf-8")
    if fmt is ReportFormat.CSV:
        header = ",".join(METRIC_COLUMNS)
        row = ",".join(_csv_cell(getattr(report, col)) for col in METRIC_COLUMNS)
        return (header + "\n" + row + "\n").encode("utf-8")
    names = ("TM", "GR", "SR", "TSR", "PG", "Sim-TSR", "ASO", "LR", "RSR")
    cells = [
        _md_cell(getattr(report, col), percent=col != "aso") for col in METRIC_COLUMNS
    ]
    lines = [
        "| " + " | ".join(names) + " |",
        "|" + "---|" * len(names),
        "| " + " | ".join(cells) + " |",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")
