"""Pseudo-online episode loop built on failure idempotency.

A matching action advances the simulated screen to the recorded next one; a
mismatch (including an unparseable turn) returns the unchanged screen and
burns one attempt.  Episodes stop on completion or when the attempt budget
(ceil of budget_multiplier times ground-truth length) runs out.  Because
wrong actions never mutate state, recorded offline trajectories stand in for
a live environment.
"""

from __future__ import annotations

import json
import math
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Any, Iterable, Mapping, Sequence

from .agent_bus import AgentHandle, Capability, Observation
from .errors import BudgetExceededError, CodecError, DataError, InvariantViolationError
from .failure_forge import FailureCase
from .reward_engine import RewardConfig, actions_approx_equal, match_action
from .seeding import stable_seed
from .trajectory_store import (
    ActionRecord,
    CoordinateSpace,
    StepRecord,
    TrajectoryRecord,
    action_from_json,
    action_to_json,
    normalize_action,
)
from .tvae_codec import HistoryEntry, TvaeOutput, Verification, parse_tvae


@dataclass(frozen=True)
class SimConfig:
    budget_multiplier: float = 2.0
    delta: float = 0.14
    repeat_epsilon: float = 0.04
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget_multiplier < 1:
            raise InvariantViolationError("sim_config", "budget_multiplier", "must be >= 1")
        if not 0 < self.delta < 1:
            raise InvariantViolationError("sim_config", "delta", "must be in (0,1)")
        if not 0 <= self.repeat_epsilon < self.delta:
            raise InvariantViolationError(
                "sim_config", "repeat_epsilon", "must be in [0, delta)"
            )

    def reward_config(self) -> RewardConfig:
        return _reward_config_for(self.delta)


@lru_cache(maxsize=64)
def _reward_config_for(delta: float) -> RewardConfig:
    return RewardConfig(delta=delta)


def episode_budget(cfg: SimConfig, t_gt: int) -> int:
    return math.ceil(cfg.budget_multiplier * t_gt)


@dataclass(frozen=True)
class SimState:
    cursor: int
    screen_ref: str
    history: tuple[HistoryEntry, ...]
    attempts_used: int


@dataclass(frozen=True)
class AttemptLog:
    attempt: int
    gt_step: int
    issued: ActionRecord | None
    matched: bool
    advanced: bool
    predicted_verification: Verification | None
    target_verification: Verification
    parse_warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.advanced and not self.matched:
            raise InvariantViolationError("attempt", "advanced", "cannot advance on a mismatch")


class Outcome(str, Enum):
    COMPLETED_FIRST_TRY = "completed_first_try"
    COMPLETED_WITH_RECOVERY = "completed_with_recovery"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class SimTrace:
    trajectory_id: str
    attempts: tuple[AttemptLog, ...]
    outcome: Outcome
    steps_used: int
    t_gt: int
    final_cursor: int


def transition(
    state: SimState,
    issued: ActionRecord | None,
    gt: StepRecord,
    next_screen_ref: str,
    cfg: SimConfig,
    budget: int,
    turn: TvaeOutput | None = None,
    target_verification: Verification = Verification.SUCCESS,
    parse_warnings: tuple[str, ...] = (),
) -> tuple[SimState, AttemptLog]:
    """Apply one attempt under the idempotent transition rule.

    Match: cursor and screen advance.  Mismatch: state unchanged apart from
    the consumed attempt and the appended history entry.  `turn` supplies the
    effect text and verification recorded into history; a None `issued`
    (unparseable turn) consumes the attempt without a history entry.
    """
    if state.attempts_used >= budget:
        raise BudgetExceededError(
            f"attempt {state.attempts_used} with budget {budget}"
        )
    if state.cursor != gt.index:
        raise InvariantViolationError("transition", "cursor", "state/step mismatch")
    matched = issued is not None and match_action(
        issued, gt.gt_action, gt.gt_bbox, cfg.reward_config()
    )
    history = state.history
    if turn is not None and issued is not None:
        history = history + (
            HistoryEntry(issued, turn.expected_effect or "(no effect stated)", turn.verification),
        )
    new_state = SimState(
        cursor=state.cursor + 1 if matched else state.cursor,
        screen_ref=next_screen_ref if matched else state.screen_ref,
        history=history,
        attempts_used=state.attempts_used + 1,
    )
    log = AttemptLog(
        attempt=state.attempts_used,
        gt_step=gt.index,
        issued=issued,
        matched=matched,
        advanced=matched,
        predicted_verification=turn.verification if turn is not None else None,
        target_verification=target_verification,
        parse_warnings=parse_warnings,
    )
    return new_state, log


def _interpret(
    raw: str, dims: tuple[int, int] | None
) -> tuple[TvaeOutput | None, ActionRecord | None, tuple[str, ...]]:
    """Lenient parse plus coordinate normalization; never raises."""
    try:
        turn = parse_tvae(raw, strict=False)
    except CodecError as exc:
        return None, None, (f"unparseable turn: {exc}",)
    except Exception as exc:  # defensive: arbitrary bytes must not crash
        return None, None, (f"unparseable turn: {exc}",)
    action = turn.action
    warnings = list(turn.warnings)
    if action.coordinate is not None and action.coordinate_space is not CoordinateSpace.RELATIVE:
        try:
            action = normalize_action(action, dims)
        except DataError as exc:
            # Keep the raw-space action; it cannot match a relative target.
            warnings.append(f"ungroundable coordinates: {exc}")
    return turn, action, tuple(warnings)


def run_episode(traj: TrajectoryRecord, agent: AgentHandle, cfg: SimConfig) -> SimTrace:
    """Drive one agent through one trajectory under the transition rule.

    The verification target for each attempt comes from the simulator's own
    last transition (first attempt counts as SUCCESS), so honesty can be
    audited without dataset labels.
    """
    t_gt = len(traj.steps)
    budget = episode_budget(cfg, t_gt)
    state = SimState(
        cursor=0, screen_ref=traj.steps[0].screen_ref, history=(), attempts_used=0
    )
    rng = random.Random(stable_seed(cfg.seed, "episode", traj.id))
    logs: list[AttemptLog] = []
    prev_advanced: bool | None = None
    while state.cursor < t_gt and state.attempts_used < budget:
        gt = traj.steps[state.cursor]
        target = (
            Verification.SUCCESS
            if prev_advanced is None or prev_advanced
            else Verification.NO_CHANGE
        )
        obs = Observation(
            instruction=traj.instruction,
            screen_ref=state.screen_ref,
            history=state.history,
            step_budget_remaining=budget - state.attempts_used,
            last_expected_effect=state.history[-1].expected_effect if state.history else None,
        )
        raw = agent.turn(obs, gt if agent.white_box else None, rng)
        turn, action, warnings = _interpret(raw, gt.screen_dims)
        state, log = transition(
            state,
            action,
            gt,
            traj.screen_after(gt.index),
            cfg,
            budget,
            turn=turn,
            target_verification=target,
            parse_warnings=warnings,
        )
        logs.append(log)
        prev_advanced = log.advanced
    if state.cursor >= t_gt:
        if state.attempts_used == t_gt and all(a.matched for a in logs):
            outcome = Outcome.COMPLETED_FIRST_TRY
        else:
            outcome = Outcome.COMPLETED_WITH_RECOVERY
    else:
        outcome = Outcome.BUDGET_EXHAUSTED
    return SimTrace(
        trajectory_id=traj.id,
        attempts=tuple(logs),
        outcome=outcome,
        steps_used=state.attempts_used,
        t_gt=t_gt,
        final_cursor=state.cursor,
    )


@dataclass(frozen=True)
class CaseResult:
    repeated: bool
    recovered: bool
    issued: ActionRecord | None


def run_failure_case(case: FailureCase, agent: AgentHandle, cfg: SimConfig) -> CaseResult:
    """Probe one failure slice with a single-turn query.

    `repeated` flags a near-identical re-issue of the erroneous action;
    `recovered` flags a match against the ground-truth recovery.  A valid
    case makes these mutually exclusive.
    """
    obs = Observation(
        instruction=case.instruction,
        screen_ref=case.screen_ref,
        history=case.history,
        step_budget_remaining=1,
        last_expected_effect=case.history[-1].expected_effect,
    )
    gt_step = StepRecord(
        index=case.source[1],
        screen_ref=case.screen_ref,
        gt_action=case.gt_recovery,
        reference_effect="The correct target responds and the screen moves on.",
        screen_dims=case.screen_dims,
        gt_bbox=case.gt_bbox,
    )
    rng = random.Random(stable_seed(cfg.seed, "case", case.source[0], case.source[1]))
    raw = agent.turn(obs, gt_step if agent.white_box else None, rng)
    _, action, _ = _interpret(raw, case.screen_dims)
    repeated = actions_approx_equal(action, case.erroneous, cfg.repeat_epsilon)
    recovered = match_action(action, case.gt_recovery, case.gt_bbox, cfg.reward_config())
    return CaseResult(repeated=repeated, recovered=recovered, issued=action)


class _LockedAgent:
    """Serializes turn calls for handles that declare themselves Serialized."""

    def __init__(self, inner: AgentHandle):
        self._inner = inner
        self._lock = threading.Lock()
        self.identity = inner.identity
        self.capability = Capability.SERIALIZED
        self.white_box = inner.white_box

    def turn(self, obs: Observation, gt: StepRecord | None, rng: random.Random) -> str:
        with self._lock:
            return self._inner.turn(obs, gt, rng)


def _pooled(agent: AgentHandle, workers: int) -> AgentHandle:
    if workers > 1 and agent.capability is Capability.SERIALIZED:
        return _LockedAgent(agent)
    return agent


def run_episodes(
    trajs: Sequence[TrajectoryRecord],
    agent: AgentHandle,
    cfg: SimConfig,
    workers: int = 1,
) -> list[SimTrace]:
    """Run every trajectory; results keep input order regardless of schedule."""
    if workers <= 1 or len(trajs) <= 1:
        return [run_episode(t, agent, cfg) for t in trajs]
    safe_agent = _pooled(agent, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: run_episode(t, safe_agent, cfg), trajs))


def run_failure_cases(
    cases: Sequence[FailureCase],
    agent: AgentHandle,
    cfg: SimConfig,
    workers: int = 1,
) -> list[CaseResult]:
    if workers <= 1 or len(cases) <= 1:
        return [run_failure_case(c, agent, cfg) for c in cases]
    safe_agent = _pooled(agent, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_failure_case(c, safe_agent, cfg), cases))


# -- serialization ---------------------------------------------------------------


def _issued_to_json(action: ActionRecord | None) -> dict[str, Any] | None:
    if action is None:
        return None
    obj = action_to_json(action)
    if action.coordinate_space is not CoordinateSpace.RELATIVE:
        obj["coordinate_space"] = action.coordinate_space.value
    return obj


def _issued_from_json(obj: Mapping[str, Any] | None) -> ActionRecord | None:
    if obj is None:
        return None
    obj = dict(obj)
    space = obj.pop("coordinate_space", CoordinateSpace.RELATIVE.value)
    action = action_from_json(obj)
    if space != CoordinateSpace.RELATIVE.value:
        action = replace(action, coordinate_space=CoordinateSpace(space))
    return action


def trace_to_json(trace: SimTrace) -> dict[str, Any]:
    return {
        "trajectory_id": trace.trajectory_id,
        "outcome": trace.outcome.value,
        "steps_used": trace.steps_used,
        "t_gt": trace.t_gt,
        "final_cursor": trace.final_cursor,
        "attempts": [
            {
                "attempt": a.attempt,
                "gt_step": a.gt_step,
                "issued": _issued_to_json(a.issued),
                "matched": a.matched,
                "advanced": a.advanced,
                "predicted_verification": (
                    a.predicted_verification.value if a.predicted_verification else None
                ),
                "target_verification": a.target_verification.value,
                "parse_warnings": list(a.parse_warnings),
            }
            for a in trace.attempts
        ],
    }


def trace_from_json(obj: Mapping[str, Any]) -> SimTrace:
    return SimTrace(
        trajectory_id=str(obj["trajectory_id"]),
        outcome=Outcome(obj["outcome"]),
        steps_used=int(obj["steps_used"]),
        t_gt=int(obj["t_gt"]),
        final_cursor=int(obj["final_cursor"]),
        attempts=tuple(
            AttemptLog(
                attempt=int(a["attempt"]),
                gt_step=int(a["gt_step"]),
                issued=_issued_from_json(a.get("issued")),
                matched=bool(a["matched"]),
                advanced=bool(a["advanced"]),
                predicted_verification=(
                    Verification(a["predicted_verification"])
                    if a.get("predicted_verification")
                    else None
                ),
                target_verification=Verification(a["target_verification"]),
                parse_warnings=tuple(a.get("parse_warnings", ())),
            )
            for a in obj["attempts"]
        ),
    )


def write_traces(traces: Iterable[SimTrace], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace_to_json(trace), separators=(",", ":")) + "\n")


def read_traces(path: str) -> list[SimTrace]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trace_from_json(json.loads(line)))
    return out
