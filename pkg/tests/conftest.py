from __future__ import annotations

import random

import pytest

from tvae_harness.trajectory_store import (
    ActionKind,
    ActionRecord,
    CoordinateSpace,
    ScrollDirection,
    StepRecord,
    TrajectoryRecord,
    round_coord,
)
from tvae_harness.tvae_codec import (
    ThinkSegment,
    ThinkTag,
    TvaeOutput,
    Verification,
)

WORDS = (
    "screen button list search result panel opens loads appears updates "
    "confirm target menu view page item row field toggles refreshes"
).split()


def make_click_step(
    index: int = 0,
    coord: tuple[float, float] = (0.5, 0.5),
    bbox: tuple[float, float, float, float] | None = (0.45, 0.45, 0.55, 0.55),
    screen: str | None = None,
) -> StepRecord:
    return StepRecord(
        index=index,
        screen_ref=screen or f"s{index}",
        gt_action=ActionRecord(kind=ActionKind.CLICK, coordinate=coord),
        reference_effect=f"The panel for step {index} appears.",
        gt_bbox=bbox,
    )


def make_traj(actions: list[ActionRecord], traj_id: str = "t0") -> TrajectoryRecord:
    steps = tuple(
        StepRecord(
            index=i,
            screen_ref=f"{traj_id}/s{i}",
            gt_action=a,
            reference_effect=f"Screen {i + 1} of the flow appears.",
            gt_bbox=None,
        )
        for i, a in enumerate(actions)
    )
    return TrajectoryRecord(
        id=traj_id,
        instruction="Finish the flow.",
        steps=steps,
        terminal_screen_ref=f"{traj_id}/done",
    )


def random_valid_action(rng: random.Random) -> ActionRecord:
    kind = rng.choice(list(ActionKind))
    if kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        if rng.random() < 0.5:
            # raw pixels; >= 2 so the magnitude heuristic round-trips the space flag
            coord = (float(rng.randint(2, 2000)), float(rng.randint(2, 2000)))
            return ActionRecord(kind=kind, coordinate=coord, coordinate_space=CoordinateSpace.PIXEL)
        coord = (round_coord(rng.random()), round_coord(rng.random()))
        return ActionRecord(kind=kind, coordinate=coord)
    if kind is ActionKind.SCROLL:
        return ActionRecord(kind=kind, direction=rng.choice(list(ScrollDirection)))
    if kind in (ActionKind.INPUT_TEXT, ActionKind.OPEN_APP):
        return ActionRecord(kind=kind, text=" ".join(rng.sample(WORDS, rng.randint(1, 4))))
    if kind is ActionKind.WAIT:
        return ActionRecord(kind=kind, seconds=float(rng.choice((1, 2, 5))))
    return ActionRecord(kind=kind)


def _body(rng: random.Random) -> str:
    return " ".join(rng.sample(WORDS, rng.randint(2, 6))) + "."


def random_valid_turn(rng: random.Random) -> TvaeOutput:
    """Generate a structurally valid turn for round-trip fuzzing."""
    verification = rng.choice(list(Verification))
    segments: list[ThinkSegment] = []
    if rng.random() < 0.9:
        segments.append(ThinkSegment(ThinkTag.VERIFY, _body(rng)))
    pool = [ThinkTag.RECALL, ThinkTag.GROUNDING, ThinkTag.COORDINATE,
            ThinkTag.DIRECTION, ThinkTag.TEXT, ThinkTag.ACTION]
    for tag in rng.sample(pool, rng.randint(0, 3)):
        segments.append(ThinkSegment(tag, _body(rng)))
    if verification is Verification.NO_CHANGE:
        segments.append(ThinkSegment(rng.choice((ThinkTag.DIAGNOSE, ThinkTag.RECOVERY)), _body(rng)))
    if not segments:
        segments.append(ThinkSegment(ThinkTag.ACTION, _body(rng)))
    return TvaeOutput(
        think=tuple(segments),
        verification=verification,
        action=random_valid_action(rng),
        expected_effect=_body(rng),
    )


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
