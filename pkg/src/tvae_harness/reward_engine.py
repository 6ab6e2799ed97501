"""Action matching, effect similarity, and the composite turn reward.

The composite reward couples action correctness (signed indicator), gated
effect similarity, and the asymmetric verification reward: a hallucinated
SUCCESS costs -2.0 while a cautious miss costs only -0.5.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable

from .errors import InvariantViolationError
from .trajectory_store import (
    ActionKind,
    ActionRecord,
    CoordinateSpace,
    normalize_action,
)
from .tvae_codec import TvaeOutput, Verification

if TYPE_CHECKING:
    from .failure_forge import SyntheticSample

DEFAULT_DELTA = 0.14

REWARD_CORRECT_VERIFICATION = 1.0
REWARD_MISS = -0.5
REWARD_HALLUCINATION = -2.0


class TextMatchMode(str, Enum):
    NORMALIZED_EXACT = "normalized_exact"
    TOKEN_F1_THRESHOLD = "token_f1_threshold"


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    beta: float = 0.5
    delta: float = DEFAULT_DELTA
    similarity: str = "token-f1"
    text_match: TextMatchMode = TextMatchMode.NORMALIZED_EXACT
    text_match_threshold: float = 0.8

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise InvariantViolationError("reward_config", "alpha/beta", "must be >= 0")
        if not 0 < self.delta < 1:
            raise InvariantViolationError("reward_config", "delta", "must be in (0,1)")


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-output reward components; total = r_act + alpha*r_eff + beta*r_ver."""

    r_act: float
    r_eff: float
    r_ver: float
    total: float
    similarity: str = "token-f1"

    def to_json(self) -> dict[str, Any]:
        return {
            "r_act": self.r_act,
            "r_eff": self.r_eff,
            "r_ver": self.r_ver,
            "total": self.total,
            "similarity": self.similarity,
        }


# -- geometry ----------------------------------------------------------------


def point_in_bbox(point: tuple[float, float], bbox: tuple[float, float, float, float]) -> bool:
    x, y = point
    x0, y0, x1, y1 = bbox
    return x0 <= x <= x1 and y0 <= y <= y1


def euclidean(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def distance_to_bbox(point: tuple[float, float], bbox: tuple[float, float, float, float]) -> float:
    """Distance from a point to the nearest point of the box (0 inside)."""
    x, y = point
    x0, y0, x1, y1 = bbox
    dx = max(x0 - x, 0.0, x - x1)
    dy = max(y0 - y, 0.0, y - y1)
    return math.hypot(dx, dy)


def _normalized_text(text: str) -> str:
    return text.strip().casefold()


def texts_match(pred: str, ref: str, cfg: RewardConfig) -> bool:
    if cfg.text_match is TextMatchMode.NORMALIZED_EXACT:
        return _normalized_text(pred) == _normalized_text(ref)
    return token_f1(pred, ref) >= cfg.text_match_threshold


def match_action(
    pred: ActionRecord | None,
    gt: ActionRecord,
    bbox: tuple[float, float, float, float] | None = None,
    cfg: RewardConfig | None = None,
) -> bool:
    """Decide whether a predicted action counts as correct.

    Kinds must agree; then parameters: spatial actions need the coordinate
    inside the ground-truth box (Euclidean distance <= delta when no box is
    known), scrolls need equal directions, text actions need matching text,
    and parameterless kinds match on kind alone.  Both actions are expected
    in relative coordinate space.
    """
    if pred is None:
        return False
    cfg = cfg or RewardConfig()
    if pred.kind is not gt.kind:
        return False
    if gt.kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        if pred.coordinate is None or gt.coordinate is None:
            return False
        if bbox is not None:
            return point_in_bbox(pred.coordinate, bbox)
        return euclidean(pred.coordinate, gt.coordinate) <= cfg.delta
    if gt.kind is ActionKind.SCROLL:
        return pred.direction is gt.direction
    if gt.kind in (ActionKind.INPUT_TEXT, ActionKind.OPEN_APP):
        return texts_match(pred.text or "", gt.text or "", cfg)
    return True  # navigate_back / wait: kind equality suffices


def actions_approx_equal(
    a: ActionRecord | None, b: ActionRecord, epsilon: float
) -> bool:
    """Loose identity used for repeated-action detection: same kind, nearly
    identical coordinates, same text and direction."""
    if a is None or a.kind is not b.kind:
        return False
    if (a.coordinate is None) != (b.coordinate is None):
        return False
    if a.coordinate is not None and b.coordinate is not None:
        if euclidean(a.coordinate, b.coordinate) > epsilon:
            return False
    if a.text != b.text:
        return False
    if a.direction is not b.direction:
        return False
    return True


# -- effect similarity --------------------------------------------------------

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def _tokens(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def token_f1(pred_text: str, ref_text: str) -> float:
    """Token-level F1 over lowercased, punctuation-stripped tokens.

    Symmetric; 1.0 for identical token multisets, 0.0 for disjoint ones.
    """
    pred = Counter(_tokens(pred_text))
    ref = Counter(_tokens(ref_text))
    overlap = sum((pred & ref).values())
    if overlap == 0:
        return 0.0
    return 2.0 * overlap / (sum(pred.values()) + sum(ref.values()))


SimilarityFn = Callable[[str, str], float]

_SIMILARITY_REGISTRY: dict[str, SimilarityFn] = {"token-f1": token_f1}


def register_similarity(name: str, fn: SimilarityFn) -> None:
    """Install an external effect scorer (must map text pairs into [0, 1])."""
    _SIMILARITY_REGISTRY[name] = fn


def effect_similarity(pred_text: str, ref_text: str, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    try:
        fn = _SIMILARITY_REGISTRY[cfg.similarity]
    except KeyError:
        raise InvariantViolationError("reward_config", "similarity", cfg.similarity) from None
    return fn(pred_text, ref_text)


# -- reward components ---------------------------------------------------------


def verification_reward(pred: Verification, target: Verification) -> float:
    """+1.0 on agreement, -2.0 for a false SUCCESS claim, -0.5 for a false
    NO_CHANGE claim."""
    if pred is target:
        return REWARD_CORRECT_VERIFICATION
    if pred is Verification.SUCCESS:
        return REWARD_HALLUCINATION
    return REWARD_MISS


def composite_reward(
    out: TvaeOutput, sample: "SyntheticSample", cfg: RewardConfig | None = None
) -> RewardBreakdown:
    """Score one parsed turn against its training sample.

    r_eff is gated on action correctness: a wrong action earns zero effect
    reward no matter how plausible the predicted effect reads.
    """
    cfg = cfg or RewardConfig()
    pred_action: ActionRecord | None = out.action
    if pred_action is not None and pred_action.coordinate_space is CoordinateSpace.PIXEL:
        try:
            pred_action = normalize_action(pred_action, sample.screen_dims)
        except Exception:
            pred_action = None  # ungroundable output scores as a miss
    matched = match_action(pred_action, sample.target_action, sample.target_bbox, cfg)
    r_act = 1.0 if matched else -1.0
    r_eff = effect_similarity(out.expected_effect, sample.target_effect, cfg) if matched else 0.0
    r_ver = verification_reward(out.verification, sample.target_verification)
    total = r_act + cfg.alpha * r_eff + cfg.beta * r_ver
    return RewardBreakdown(
        r_act=r_act, r_eff=r_eff, r_ver=r_ver, total=total, similarity=cfg.similarity
    )
