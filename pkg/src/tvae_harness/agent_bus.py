"""Reference agents and transport clients.

Scripted agents are white-box measurement instruments: they see the current
ground-truth step and emit deterministic turn text, which makes analytic
end-to-end tests possible.  Remote agents speak a stateless single-turn wire
protocol (HTTP JSON in, raw turn text out) and never receive ground truth.
"""

from __future__ import annotations

import json
import random
import shlex
import subprocess
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Any, Protocol, Sequence

import requests

from .errors import AgentTimeoutError, AgentUnavailableError, InvariantViolationError
from .failure_forge import FailureMode, corrupt_action, mismatched_effect, sample_corruption
from .trajectory_store import (
    ActionRecord,
    StepRecord,
    action_to_json,
    describe_action,
)
from .tvae_codec import (
    HistoryEntry,
    ThinkSegment,
    ThinkTag,
    TvaeOutput,
    Verification,
    emit_tvae,
    history_entry_to_json,
)

WIRE_SCHEMA_VERSION = 1
STDIO_SENTINEL = "<<<END_TURN>>>"


class Capability(str, Enum):
    CONCURRENT_SAFE = "concurrent_safe"
    SERIALIZED = "serialized"


@dataclass(frozen=True)
class Observation:
    """Everything an agent is shown for one turn."""

    instruction: str
    screen_ref: str
    history: tuple[HistoryEntry, ...]
    step_budget_remaining: int
    last_expected_effect: str | None = None
    screen_asset_path: str | None = None

    def __post_init__(self) -> None:
        if self.step_budget_remaining < 0:
            raise InvariantViolationError("observation", "step_budget_remaining", "must be >= 0")


class AgentHandle(Protocol):
    """A turn function plus identity and concurrency metadata."""

    identity: str
    capability: Capability
    white_box: bool

    def turn(self, obs: Observation, gt: StepRecord | None, rng: random.Random) -> str: ...


# -- scripted agents -----------------------------------------------------------


class VariantName(str, Enum):
    ORACLE = "oracle"
    LOOPY = "loopy"
    FAIL_K = "failk"
    BERNOULLI = "bernoulli"
    OFFSET_THEN_CORRECT = "offset_then_correct"


@dataclass(frozen=True)
class Variant:
    name: VariantName
    k: int = 1
    p: float = 0.5


def _clean(text: str) -> str:
    # Think bodies must not embed grammar tokens.
    return text.replace("[", "(").replace("]", ")").replace("</", "(/") or "the task"


def _effect_safe(text: str) -> str:
    return text.replace("</", "(/") or "The screen will update."


def _param_segment(action: ActionRecord) -> ThinkSegment | None:
    if action.coordinate is not None:
        x, y = action.coordinate
        return ThinkSegment(ThinkTag.COORDINATE, f"Element position: ({x:g}, {y:g}).")
    if action.direction is not None:
        return ThinkSegment(ThinkTag.DIRECTION, f"Scroll direction: {action.direction.value}.")
    if action.text is not None:
        return ThinkSegment(ThinkTag.TEXT, f"The exact text needed is '{_clean(action.text)}'.")
    return None


# Static segments are interned; only instruction- and action-dependent ones
# are built per turn (the emit path is the simulation hot loop).
_SEG_VERIFY_OK = ThinkSegment(ThinkTag.VERIFY, "The previous action produced the expected screen.")
_SEG_VERIFY_STUCK = ThinkSegment(
    ThinkTag.VERIFY, "The screen remains unchanged after the last action."
)
_SEG_DIAGNOSE = ThinkSegment(ThinkTag.DIAGNOSE, "The previous action did not reach its target.")
_SEG_GROUNDING_OK = ThinkSegment(
    ThinkTag.GROUNDING, "The target element is visible on the current screen."
)
_SEG_GROUNDING_FIX = ThinkSegment(
    ThinkTag.GROUNDING, "The correct target element is visible on this screen."
)


def _success_think(instruction: str, action: ActionRecord) -> tuple[ThinkSegment, ...]:
    segments = [
        _SEG_VERIFY_OK,
        ThinkSegment(ThinkTag.RECALL, f"The task is: {_clean(instruction)}."),
        _SEG_GROUNDING_OK,
    ]
    param = _param_segment(action)
    if param:
        segments.append(param)
    segments.append(ThinkSegment(ThinkTag.ACTION, _clean(describe_action(action)) + "."))
    return tuple(segments)


def _recovery_think(instruction: str, action: ActionRecord) -> tuple[ThinkSegment, ...]:
    segments = [
        _SEG_VERIFY_STUCK,
        _SEG_DIAGNOSE,
        ThinkSegment(ThinkTag.RECALL, f"The task is: {_clean(instruction)}."),
        _SEG_GROUNDING_FIX,
    ]
    param = _param_segment(action)
    if param:
        segments.append(param)
    segments.append(
        ThinkSegment(ThinkTag.RECOVERY, "Retry with " + _clean(describe_action(action)) + ".")
    )
    return tuple(segments)


def _emit(
    instruction: str,
    action: ActionRecord,
    verification: Verification,
    effect: str,
) -> str:
    think = (
        _success_think(instruction, action)
        if verification is Verification.SUCCESS
        else _recovery_think(instruction, action)
    )
    return emit_tvae(
        TvaeOutput(
            think=think,
            verification=verification,
            action=action,
            expected_effect=_effect_safe(effect),
        )
    )


def scripted_turn(
    variant: Variant, obs: Observation, gt: StepRecord, rng: random.Random
) -> str:
    """Produce one deterministic turn for a scripted behavior.

    Pure in (variant, obs, gt, rng state): the per-step attempt position is
    reconstructed from history length and the step index, never from hidden
    state, so identical inputs yield identical text.
    """
    instruction = obs.instruction
    gt_action = gt.gt_action
    name = variant.name

    if name is VariantName.ORACLE:
        failed_before = len(obs.history) - gt.index > 0
        if failed_before:
            return _emit(instruction, gt_action, Verification.NO_CHANGE, gt.reference_effect)
        return _emit(instruction, gt_action, Verification.SUCCESS, gt.reference_effect)

    if name is VariantName.LOOPY:
        if obs.history:
            action = obs.history[-1].action
        else:
            _, action = sample_corruption(gt_action, gt.gt_bbox, rng)
        return _emit(instruction, action, Verification.SUCCESS, mismatched_effect(action))

    if name is VariantName.FAIL_K:
        attempts_here = max(0, len(obs.history) - gt.index * (variant.k + 1))
        if attempts_here < variant.k:
            _, bad = sample_corruption(gt_action, gt.gt_bbox, rng)
            verification = (
                Verification.SUCCESS if attempts_here == 0 else Verification.NO_CHANGE
            )
            return _emit(instruction, bad, verification, mismatched_effect(bad))
        verification = (
            Verification.NO_CHANGE if attempts_here > 0 else Verification.SUCCESS
        )
        return _emit(instruction, gt_action, verification, gt.reference_effect)

    if name is VariantName.BERNOULLI:
        if rng.random() < variant.p:
            return _emit(instruction, gt_action, Verification.SUCCESS, gt.reference_effect)
        _, bad = sample_corruption(gt_action, gt.gt_bbox, rng)
        return _emit(instruction, bad, Verification.SUCCESS, mismatched_effect(bad))

    if name is VariantName.OFFSET_THEN_CORRECT:
        attempts_here = max(0, len(obs.history) - gt.index * 2)
        if attempts_here == 0:
            mode = (
                FailureMode.COORDINATE_OFFSET if gt_action.is_spatial() else FailureMode.NULL_CLICK
            )
            bad = corrupt_action(gt_action, gt.gt_bbox, mode, rng)
            return _emit(instruction, bad, Verification.SUCCESS, mismatched_effect(bad))
        return _emit(instruction, gt_action, Verification.NO_CHANGE, gt.reference_effect)

    raise InvariantViolationError("scripted", "variant", str(name))


class ScriptedAgent:
    """White-box reference agent wrapping `scripted_turn`."""

    white_box = True
    capability = Capability.CONCURRENT_SAFE

    def __init__(self, variant: Variant):
        self.variant = variant
        self.identity = f"scripted:{variant.name.value}"
        if variant.name is VariantName.FAIL_K:
            self.identity += f":{variant.k}"
        elif variant.name is VariantName.BERNOULLI:
            self.identity += f":{variant.p:g}"

    def turn(self, obs: Observation, gt: StepRecord | None, rng: random.Random) -> str:
        if gt is None:
            raise InvariantViolationError("scripted", "gt", "scripted agents need ground truth")
        return scripted_turn(self.variant, obs, gt, rng)


# -- remote agents ---------------------------------------------------------------


def observation_to_wire(obs: Observation) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "schema_version": WIRE_SCHEMA_VERSION,
        "instruction": obs.instruction,
        "screen_ref": obs.screen_ref,
        "history": [history_entry_to_json(h) for h in obs.history],
        "budget_remaining": obs.step_budget_remaining,
    }
    if obs.screen_asset_path is not None:
        payload["screen_asset_path"] = obs.screen_asset_path
    return payload


def remote_turn(
    endpoint: str,
    obs: Observation,
    timeout: float = 30.0,
    token: str | None = None,
    session: requests.Session | None = None,
) -> str:
    """POST one observation to a turn server and return the raw body verbatim.

    Retries once on transport errors, then raises AgentUnavailableError (or
    AgentTimeoutError when the deadline was the cause).  The body is never
    interpreted here; parsing happens downstream.
    """
    url = endpoint.rstrip("/")
    if not url.endswith("/turn"):
        url += "/turn"
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    payload = observation_to_wire(obs)
    post = (session or requests).post
    last: Exception | None = None
    for _ in range(2):
        try:
            resp = post(url, json=payload, headers=headers, timeout=timeout)
            resp.raise_for_status()
            return resp.text
        except requests.Timeout as exc:
            last = exc
        except requests.RequestException as exc:
            last = exc
    if isinstance(last, requests.Timeout):
        raise AgentTimeoutError(f"{url}: {last}") from last
    raise AgentUnavailableError(f"{url}: {last}") from last


class RemoteAgent:
    """Client handle for an HTTP turn server.

    Serialized by default; passing `max_inflight` declares the server safe
    for that many concurrent single-turn requests, enforced client-side.
    """

    white_box = False

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        token: str | None = None,
        max_inflight: int | None = None,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.token = token
        self.identity = f"remote:{endpoint}"
        if max_inflight is not None and max_inflight < 1:
            raise InvariantViolationError("remote", "max_inflight", "must be >= 1")
        self.capability = (
            Capability.CONCURRENT_SAFE if max_inflight else Capability.SERIALIZED
        )
        self._gate = threading.BoundedSemaphore(max_inflight) if max_inflight else None
        self._session = requests.Session()

    def turn(self, obs: Observation, gt: StepRecord | None, rng: random.Random) -> str:
        if self._gate is None:
            return remote_turn(
                self.endpoint, obs, timeout=self.timeout, token=self.token, session=self._session
            )
        with self._gate:
            return remote_turn(
                self.endpoint, obs, timeout=self.timeout, token=self.token, session=self._session
            )


class StdioAgent:
    """Subprocess agent: one JSON request line in, text until a sentinel line out."""

    white_box = False
    capability = Capability.SERIALIZED

    def __init__(self, command: Sequence[str] | str):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.identity = f"stdio:{' '.join(argv)}"
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise AgentUnavailableError(f"cannot spawn {argv}: {exc}") from exc

    def turn(self, obs: Observation, gt: StepRecord | None, rng: random.Random) -> str:
        proc = self._proc
        if proc.poll() is not None:
            raise AgentUnavailableError("stdio agent exited")
        try:
            assert proc.stdin is not None and proc.stdout is not None
            proc.stdin.write(json.dumps(observation_to_wire(obs)) + "\n")
            proc.stdin.flush()
            lines: list[str] = []
            while True:
                line = proc.stdout.readline()
                if not line:
                    raise AgentUnavailableError("stdio agent closed its output")
                if line.rstrip("\n") == STDIO_SENTINEL:
                    break
                lines.append(line)
            return "".join(lines).rstrip("\n")
        except (BrokenPipeError, OSError) as exc:
            raise AgentUnavailableError(f"stdio transport failed: {exc}") from exc

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


# -- agent spec parsing (CLI surface) ---------------------------------------------


def parse_agent_spec(spec: str, timeout: float = 30.0, token: str | None = None) -> AgentHandle:
    """Build an agent from a spec string.

    Forms: scripted:oracle | scripted:loopy | scripted:failk:K |
    scripted:bernoulli:P | scripted:offset_then_correct |
    remote:URL | stdio:COMMAND.
    """
    head, _, rest = spec.partition(":")
    if head == "scripted":
        parts = rest.split(":")
        try:
            name = VariantName(parts[0])
        except ValueError:
            raise InvariantViolationError("agent", "variant", parts[0]) from None
        if name is VariantName.FAIL_K:
            k = int(parts[1]) if len(parts) > 1 else 1
            return ScriptedAgent(Variant(name, k=k))
        if name is VariantName.BERNOULLI:
            p = float(parts[1]) if len(parts) > 1 else 0.5
            return ScriptedAgent(Variant(name, p=p))
        return ScriptedAgent(Variant(name))
    if head == "remote":
        return RemoteAgent(rest, timeout=timeout, token=token)
    if head == "stdio":
        return StdioAgent(rest)
    raise InvariantViolationError("agent", "spec", spec)


# -- prompt rendering --------------------------------------------------------------


def _template(name: str) -> str:
    return resources.files("tvae_harness").joinpath("templates", name).read_text("utf-8")


def render_system_prompt() -> str:
    return _template("system_prompt.txt")


def render_think_template(verification: Verification) -> str:
    if verification is Verification.SUCCESS:
        return _template("think_success.txt")
    return _template("think_no_change.txt")


def _history_item(index: int, entry: HistoryEntry) -> str:
    a = entry.action
    if a.coordinate is not None:
        x, y = a.coordinate
        body = f"{a.kind.value} [{x:g}, {y:g}]"
    elif a.text is not None:
        body = f"{a.kind.value} '{a.text}'"
    elif a.direction is not None:
        body = f"{a.kind.value} {a.direction.value}"
    else:
        body = a.kind.value
    return f"Step {index}: {body}"


def render_observation_prompt(obs: Observation) -> str:
    """Render the user-visible prompt body for one observation."""
    lines = ["User Instruction:", obs.instruction, ""]
    if len(obs.history) > 1:
        completed = " | ".join(
            _history_item(i + 1, e) for i, e in enumerate(obs.history[:-1])
        )
        lines += ["History (Completed):", completed, ""]
    if obs.history:
        last = obs.history[-1]
        action_json = json.dumps(
            {"action": last.action.kind.value, **{
                k: v for k, v in action_to_json(last.action).items() if k != "kind"
            }}
        )
        lines += [
            "Last Step (Needs Verification):",
            f"Step {len(obs.history)}: Action {action_json} | "
            f'Expected: "{last.expected_effect}"',
            "",
        ]
    lines += ["Current Screen:", f"[{obs.screen_ref}]"]
    return "\n".join(lines)
