"""Offline GUI trajectory records: loading, validation, and normalization.

A trajectory is an instruction plus ordered ground-truth steps.  Screens are
opaque string references; the harness never inspects pixels.  All spatial
values are stored relative in [0, 1] with 6-decimal canonical rounding so
that save -> load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    InvariantViolationError,
    MalformedLineError,
    MissingDimsError,
    NegativeCoordinateError,
)

log = logging.getLogger(__name__)

COORD_DECIMALS = 6


class ActionKind(str, Enum):
    CLICK = "click"
    LONG_PRESS = "long_press"
    SCROLL = "scroll"
    INPUT_TEXT = "input_text"
    NAVIGATE_BACK = "navigate_back"
    OPEN_APP = "open_app"
    WAIT = "wait"


class ScrollDirection(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


class CoordinateSpace(str, Enum):
    RELATIVE = "relative"
    PIXEL = "pixel"
    UNKNOWN = "unknown"


SPATIAL_KINDS = frozenset({ActionKind.CLICK, ActionKind.LONG_PRESS})
TEXT_KINDS = frozenset({ActionKind.INPUT_TEXT, ActionKind.OPEN_APP})


def round_coord(value: float) -> float:
    return round(float(value), COORD_DECIMALS)


@dataclass(frozen=True)
class ActionRecord:
    """A single executable GUI action.

    Exactly the parameters demanded by `kind` are present; all others are
    None.  `coordinate_space` tracks whether spatial values are relative,
    raw pixels (agent output before normalization), or undetermined.
    """

    kind: ActionKind
    coordinate: tuple[float, float] | None = None
    direction: ScrollDirection | None = None
    text: str | None = None
    seconds: float | None = None
    coordinate_space: CoordinateSpace = CoordinateSpace.RELATIVE

    def __post_init__(self) -> None:
        k = self.kind
        want_coord = k in SPATIAL_KINDS
        want_dir = k is ActionKind.SCROLL
        want_text = k in TEXT_KINDS
        want_secs = k is ActionKind.WAIT
        if want_coord != (self.coordinate is not None):
            raise InvariantViolationError(k.value, "coordinate", "required iff spatial")
        if want_dir != (self.direction is not None):
            raise InvariantViolationError(k.value, "direction", "required iff scroll")
        if want_text != (self.text is not None):
            raise InvariantViolationError(k.value, "text", "required iff textual")
        if want_secs != (self.seconds is not None):
            raise InvariantViolationError(k.value, "seconds", "required iff wait")
        if self.text is not None and not self.text:
            raise InvariantViolationError(k.value, "text", "must be non-empty")
        if self.seconds is not None and self.seconds < 0:
            raise InvariantViolationError(k.value, "seconds", "must be >= 0")
        if self.coordinate is not None:
            x, y = self.coordinate
            if x < 0 or y < 0:
                raise NegativeCoordinateError((x, y))
            if self.coordinate_space is CoordinateSpace.RELATIVE and (x > 1 or y > 1):
                raise InvariantViolationError(
                    k.value, "coordinate", f"({x}, {y}) outside [0,1] in relative space"
                )

    def is_spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def is_textual(self) -> bool:
        return self.kind in TEXT_KINDS


@dataclass(frozen=True)
class StepRecord:
    """One ground-truth step: pre-action screen, action, and reference effect."""

    index: int
    screen_ref: str
    gt_action: ActionRecord
    reference_effect: str
    screen_dims: tuple[int, int] | None = None
    gt_bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise InvariantViolationError("step", "index", "must be >= 0")
        if not self.screen_ref:
            raise InvariantViolationError("step", "screen_ref", "must be non-empty")
        if not self.reference_effect:
            raise InvariantViolationError("step", "reference_effect", "must be non-empty")
        if self.screen_dims is not None:
            w, h = self.screen_dims
            if w <= 0 or h <= 0:
                raise InvariantViolationError("step", "screen_dims", "must be positive")
        if self.gt_bbox is not None:
            x0, y0, x1, y1 = self.gt_bbox
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise InvariantViolationError("step", "gt_bbox", f"bad box {self.gt_bbox}")


@dataclass(frozen=True)
class TrajectoryRecord:
    id: str
    instruction: str
    steps: tuple[StepRecord, ...]
    terminal_screen_ref: str
    allows_revisits: bool = False

    def __post_init__(self) -> None:
        if not self.steps:
            raise InvariantViolationError(self.id, "steps", "must be non-empty")
        for t, step in enumerate(self.steps):
            if step.index != t:
                raise InvariantViolationError(
                    self.id, "steps", f"index {step.index} at position {t}; want contiguous 0..T-1"
                )
        if not self.allows_revisits:
            refs = [s.screen_ref for s in self.steps] + [self.terminal_screen_ref]
            if len(set(refs)) != len(refs):
                raise InvariantViolationError(
                    self.id, "screen_ref", "repeated screen without allows_revisits flag"
                )

    def __len__(self) -> int:
        return len(self.steps)

    def screen_after(self, step_index: int) -> str:
        """Screen reached once the step at `step_index` executes correctly."""
        nxt = step_index + 1
        if nxt < len(self.steps):
            return self.steps[nxt].screen_ref
        return self.terminal_screen_ref


def normalize_action(action: ActionRecord, dims: tuple[int, int] | None = None) -> ActionRecord:
    """Convert pixel coordinates to relative [0,1] space.

    Non-spatial actions and coordinates already within [0,1] pass through
    unchanged (space flag forced to relative).  Conversion requires `dims`
    and rounds to the canonical 6 decimals.

    Raises:
        NegativeCoordinateError: any component < 0.
        MissingDimsError: components > 1.0 but no dims supplied.
        InvariantViolationError: converted coordinate falls outside [0,1].
    """
    if action.coordinate is None:
        return action
    x, y = action.coordinate
    if x < 0 or y < 0:
        raise NegativeCoordinateError((x, y))
    if x <= 1.0 and y <= 1.0:
        if action.coordinate_space is CoordinateSpace.RELATIVE:
            return action
        return replace(action, coordinate_space=CoordinateSpace.RELATIVE)
    if dims is None:
        raise MissingDimsError(action.kind.value)
    w, h = dims
    rel = (round_coord(x / w), round_coord(y / h))
    if rel[0] > 1 or rel[1] > 1:
        raise InvariantViolationError(
            action.kind.value, "coordinate", f"({rel[0]}, {rel[1]}) outside [0,1] after conversion"
        )
    return replace(action, coordinate=rel, coordinate_space=CoordinateSpace.RELATIVE)


# -- JSON (dataset form: "kind" discriminator, ActionRecord field names) ----


def action_to_json(action: ActionRecord) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": action.kind.value}
    if action.coordinate is not None:
        out["coordinate"] = [round_coord(action.coordinate[0]), round_coord(action.coordinate[1])]
    if action.direction is not None:
        out["direction"] = action.direction.value
    if action.text is not None:
        out["text"] = action.text
    if action.seconds is not None:
        out["seconds"] = action.seconds
    return out


_ACTION_FIELDS = {"kind", "coordinate", "direction", "text", "seconds"}


def action_from_json(obj: Mapping[str, Any]) -> ActionRecord:
    if not isinstance(obj, Mapping):
        raise InvariantViolationError("action", "object", "must be a JSON object")
    unknown = set(obj) - _ACTION_FIELDS
    if unknown:
        raise InvariantViolationError("action", "fields", f"unknown keys {sorted(unknown)}")
    try:
        kind = ActionKind(obj["kind"])
    except (KeyError, ValueError) as exc:
        raise InvariantViolationError("action", "kind", str(exc)) from exc
    coord = obj.get("coordinate")
    direction = obj.get("direction")
    space = CoordinateSpace.RELATIVE
    if coord is not None and (float(coord[0]) > 1.0 or float(coord[1]) > 1.0):
        space = CoordinateSpace.PIXEL  # absolute input; normalized downstream
    return ActionRecord(
        kind=kind,
        coordinate=(float(coord[0]), float(coord[1])) if coord is not None else None,
        direction=ScrollDirection(direction) if direction is not None else None,
        text=obj.get("text"),
        seconds=float(obj["seconds"]) if obj.get("seconds") is not None else None,
        coordinate_space=space,
    )


def step_to_json(step: StepRecord) -> dict[str, Any]:
    out: dict[str, Any] = {"index": step.index, "screen_ref": step.screen_ref}
    if step.screen_dims is not None:
        out["screen_dims"] = list(step.screen_dims)
    out["gt_action"] = action_to_json(step.gt_action)
    if step.gt_bbox is not None:
        out["gt_bbox"] = [round_coord(v) for v in step.gt_bbox]
    out["reference_effect"] = step.reference_effect
    return out


def trajectory_to_json(traj: TrajectoryRecord) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": traj.id,
        "instruction": traj.instruction,
        "terminal_screen_ref": traj.terminal_screen_ref,
    }
    if traj.allows_revisits:
        out["allows_revisits"] = True
    out["steps"] = [step_to_json(s) for s in traj.steps]
    return out


def _normalize_bbox(
    raw: list[float], dims: tuple[int, int] | None, subject: str
) -> tuple[float, float, float, float]:
    if len(raw) != 4:
        raise InvariantViolationError(subject, "gt_bbox", "must have 4 components")
    vals = [float(v) for v in raw]
    if any(v > 1.0 for v in vals):
        if dims is None:
            raise MissingDimsError(subject, "absolute gt_bbox without screen_dims")
        w, h = dims
        vals = [vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h]
    return (round_coord(vals[0]), round_coord(vals[1]), round_coord(vals[2]), round_coord(vals[3]))


def _step_from_json(obj: Mapping[str, Any], traj_id: str) -> StepRecord:
    for key in ("index", "screen_ref", "gt_action", "reference_effect"):
        if key not in obj:
            raise InvariantViolationError(traj_id, key, "missing step field")
    dims_raw = obj.get("screen_dims")
    dims = (int(dims_raw[0]), int(dims_raw[1])) if dims_raw is not None else None
    subject = f"{traj_id}[{obj['index']}]"
    action = action_from_json(obj["gt_action"])
    if action.coordinate is not None and max(action.coordinate) > 1.0 and dims is None:
        raise MissingDimsError(subject)
    action = normalize_action(action, dims)
    bbox_raw = obj.get("gt_bbox")
    bbox = _normalize_bbox(bbox_raw, dims, subject) if bbox_raw is not None else None
    return StepRecord(
        index=int(obj["index"]),
        screen_ref=str(obj["screen_ref"]),
        gt_action=action,
        reference_effect=str(obj["reference_effect"]),
        screen_dims=dims,
        gt_bbox=bbox,
    )


def trajectory_from_json(obj: Mapping[str, Any]) -> TrajectoryRecord:
    for key in ("id", "instruction", "terminal_screen_ref", "steps"):
        if key not in obj:
            raise InvariantViolationError(str(obj.get("id", "?")), key, "missing field")
    traj_id = str(obj["id"])
    steps = tuple(_step_from_json(s, traj_id) for s in obj["steps"])
    return TrajectoryRecord(
        id=traj_id,
        instruction=str(obj["instruction"]),
        steps=steps,
        terminal_screen_ref=str(obj["terminal_screen_ref"]),
        allows_revisits=bool(obj.get("allows_revisits", False)),
    )


def load_dataset(
    path: str | Path, limit: int | None = None, skip_invalid: bool = False
) -> list[TrajectoryRecord]:
    """Load trajectories from a JSONL file, one object per line.

    Absolute pixel coordinates are converted to relative form via per-step
    screen_dims.  Validation is fail-fast; with `skip_invalid` offending
    lines are logged and dropped instead.
    """
    records: list[TrajectoryRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if limit is not None and len(records) >= limit:
                break
            stripped = line.strip()
            if not stripped:
                continue
            try:
                try:
                    obj = json.loads(stripped)
                except json.JSONDecodeError as exc:
                    raise MalformedLineError(line_no, f"invalid JSON: {exc}") from exc
                if not isinstance(obj, dict):
                    raise MalformedLineError(line_no, "line is not a JSON object")
                records.append(trajectory_from_json(obj))
            except (MalformedLineError, InvariantViolationError, MissingDimsError,
                    NegativeCoordinateError):
                if not skip_invalid:
                    raise
                log.warning("dropping invalid trajectory at %s:%d", path, line_no)
    return records


def save_dataset(trajs: Iterable[TrajectoryRecord], path: str | Path) -> None:
    """Write trajectories as canonical JSONL (compact, fixed key order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajs:
            fh.write(json.dumps(trajectory_to_json(traj), separators=(",", ":")) + "\n")


def describe_action(action: ActionRecord) -> str:
    """Short human-readable rendering, used in synthesized effect text."""
    k = action.kind
    if k in SPATIAL_KINDS:
        x, y = action.coordinate  # type: ignore[misc]
        return f"{k.value} at ({x:g}, {y:g})"
    if k is ActionKind.SCROLL:
        return f"scroll {action.direction.value}"  # type: ignore[union-attr]
    if k in TEXT_KINDS:
        return f"{k.value} '{action.text}'"
    if k is ActionKind.WAIT:
        return f"wait {action.seconds:g}s"
    return k.value
