"""5D episode reward, its component scorers and the cosine length-controlled reward."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from typing import TYPE_CHECKING, Any

import attrs

from .config import CosineRewardParams, RewardWeights
from .const import (
    BASIS_ACTION,
    BASIS_NL_ASSERTION,
    COHERENCE_CONTRADICTION_PENALTY,
    COHERENCE_NO_CONCLUSION_PENALTY,
    COHERENCE_REPETITION_PENALTY,
    CRITICAL_REWARD_CAP,
    CRITICAL_SEVERITY,
    EXACT_CORRECT_THRESHOLD,
    MAX_IDENTICAL_CALLS,
    MAX_SEVERITY,
    MIN_CONCLUSION_CHARS,
    PROCESS_COVERAGE_WEIGHT,
    PROCESS_DIVERSITY_WEIGHT,
    PROCESS_RUBRIC_WEIGHT,
    PROCESS_THOROUGHNESS_WEIGHT,
    SEVERITY_PENALTIES,
    SOFT_CORRECT_THRESHOLD,
)
from .exceptions import ContractViolationError
from .knowledge import tokenize
from .pathways import assertion_matches, turn_text
from .safety import SafetyViolation, detect_safety_violations, max_severity
from .tasks import extract_letter
from .trajectory import analyze_action_text
from .utils import canonical_json

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from .knowledge import KnowledgeStore
    from .tasks import ExpectedAction, Rubric, Task
    from .tools import WorldState
    from .trajectory import TurnRecord, Trajectory

_LOGGER = logging.getLogger(__name__)

_TRAILING_PUNCT_RE = re.compile(r"[\s.,;:!?)\]]+$")
_LEADING_OPTION_RE = re.compile(r"^\s*\(?([A-Ea-e])(?:\)|\.|:|\s*$|\s+-)")
_NEGATION_RE = re.compile(
    r"\b(?:rule out|ruled out|excluded?|not|unlikely)\s+([a-z][a-z-]{3,}(?:\s+[a-z][a-z-]{3,})?)"
)
_NEGATION_STOPWORDS = frozenset(
    {"only", "that", "this", "these", "those", "been", "have", "very", "much", "more", "likely", "consistent", "sure"}
)
_COMPONENTS = ("r_acc", "r_proc", "r_safe", "r_fmt", "r_coh", "r_assert")


@attrs.frozen
class RewardComponents:
    """Component scores in [0, 1]; r_assert is None when the assertion dimension does not apply."""

    r_acc: float
    r_proc: float
    r_safe: float
    r_fmt: float
    r_coh: float
    r_assert: float | None = None

    def __attrs_post_init__(self) -> None:
        """Every present component lies in [0, 1]."""
        for name in _COMPONENTS:
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0 and math.isfinite(value)):
                msg = f"Reward component {name}={value} outside [0, 1]"
                raise ContractViolationError(msg)


@attrs.frozen
class RewardBreakdown:
    """Scored components, violations and the combined total of one episode."""

    components: RewardComponents
    weights: RewardWeights
    violations: tuple[SafetyViolation, ...] = attrs.field(converter=tuple)
    raw: float
    total: float
    capped: bool
    correct: bool = False

    @property
    def r_acc(self) -> float:
        """Return the accuracy component."""
        return self.components.r_acc

    @property
    def r_proc(self) -> float:
        """Return the process component."""
        return self.components.r_proc

    @property
    def r_safe(self) -> float:
        """Return the safety component."""
        return self.components.r_safe

    @property
    def r_fmt(self) -> float:
        """Return the format component."""
        return self.components.r_fmt

    @property
    def r_coh(self) -> float:
        """Return the coherence component."""
        return self.components.r_coh

    @property
    def r_assert(self) -> float | None:
        """Return the assertion component, None when it does not apply."""
        return self.components.r_assert

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {
            **attrs.asdict(self.components),
            "weights": attrs.asdict(self.weights),
            "violations": [v.to_dict() for v in self.violations],
            "raw": self.raw,
            "total": self.total,
            "capped": self.capped,
            "correct": self.correct,
        }


def normalize_answer(text: str) -> str:
    """Trim, case-fold and strip trailing punctuation."""
    return _TRAILING_PUNCT_RE.sub("", text.strip().casefold())


def answer_letter(text: str | None) -> str | None:
    """Return the option letter an answer names, e.g. "b)" or "A) Bradykinin increase"."""
    if text is None:
        return None
    letter = extract_letter(text)
    if letter is not None:
        return letter
    match = _LEADING_OPTION_RE.match(text)
    return match.group(1).upper() if match else None


def accuracy_exact(final_answer: str | None, gold: str | None) -> float:
    """Return 1.0 on a normalized match, letters compared for multiple choice."""
    if final_answer is None or gold is None:
        return 0.0
    gold_letter = extract_letter(gold)
    if gold_letter is not None:
        return 1.0 if answer_letter(final_answer) == gold_letter else 0.0
    return 1.0 if normalize_answer(final_answer) == normalize_answer(gold) else 0.0


def accuracy_soft(answer: str | None, gold: str | None) -> float:
    """
    Return the mean of ROUGE-1 F1 and BLEU-1 over stemmed terms.

    BLEU-1 is the clipped unigram precision times the brevity penalty
    exp(1 - r/c) when the answer is shorter than the reference.
    """
    candidate = tokenize(answer or "")
    reference = tokenize(gold or "")
    if not candidate or not reference:
        return 0.0
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(candidate)
    recall = overlap / len(reference)
    rouge1 = 2 * precision * recall / (precision + recall)
    brevity = 1.0 if len(candidate) > len(reference) else math.exp(1 - len(reference) / len(candidate))
    bleu1 = precision * brevity
    return min(1.0, (rouge1 + bleu1) / 2)


def _call_turns(trajectory: Trajectory) -> list[TurnRecord]:
    return [turn for turn in trajectory.turns if turn.action.is_tool_call]


def _matched(expected: Sequence[ExpectedAction], calls: Sequence[TurnRecord]) -> int:
    return sum(any(e.matches(c.action.tool_name, c.action.arguments) for c in calls) for e in expected)


def _episode_text(trajectory: Trajectory) -> str:
    parts = [turn_text(turn) for turn in trajectory.turns]
    if trajectory.final_answer:
        parts.append(trajectory.final_answer)
    return "\n".join(parts)


def assertion_score(trajectory: Trajectory, task: Task) -> float:
    """Return the fraction of the task's assertions found in the episode text."""
    if not task.nl_assertions:
        return 0.0
    text = _episode_text(trajectory)
    return sum(assertion_matches(a, text) for a in task.nl_assertions) / len(task.nl_assertions)


def accuracy(trajectory: Trajectory, task: Task) -> float:
    """Score correctness by gold answer, else expected actions, else assertions."""
    if task.gold_answer is not None:
        if task.accuracy_mode == "soft":
            return accuracy_soft(trajectory.final_answer, task.gold_answer)
        return accuracy_exact(trajectory.final_answer, task.gold_answer)
    if BASIS_ACTION in task.reward_basis and task.expected_actions:
        return _matched(task.expected_actions, _call_turns(trajectory)) / len(task.expected_actions)
    if BASIS_NL_ASSERTION in task.reward_basis and task.nl_assertions:
        return assertion_score(trajectory, task)
    return 0.0


def rubric_score(trajectory: Trajectory, rubric: Rubric) -> float:
    """Average the required-element, required-tool and forbidden-element checks that the rubric defines."""
    text = _episode_text(trajectory)
    called = {turn.action.tool_name for turn in _call_turns(trajectory)}
    parts = []
    if rubric.required_elements:
        parts.append(sum(assertion_matches(e, text) for e in rubric.required_elements) / len(rubric.required_elements))
    if rubric.required_tools:
        parts.append(sum(t in called for t in rubric.required_tools) / len(rubric.required_tools))
    if rubric.forbidden_elements:
        hits = sum(assertion_matches(e, text) for e in rubric.forbidden_elements)
        parts.append(1.0 - hits / len(rubric.forbidden_elements))
    return sum(parts) / len(parts) if parts else 1.0


def process_quality(trajectory: Trajectory, task: Task) -> float:
    """
    Score how the agent worked.

    Coverage is the share of expected actions some call matched, diversity the
    share of distinct call signatures, thoroughness the distinct tool names
    over the expected count, capped at 1. The mix is 0.6/0.2/0.2; a rubric
    takes 70% of the result. An episode without tool calls scores 0.
    """
    calls = _call_turns(trajectory)
    if not calls:
        return 0.0
    expected = task.expected_actions
    signatures = {(c.action.tool_name, canonical_json(c.action.arguments or {})) for c in calls}
    diversity = len(signatures) / len(calls)
    if expected:
        coverage = _matched(expected, calls) / len(expected)
        thoroughness = min(1.0, len({c.action.tool_name for c in calls}) / len(expected))
    else:
        coverage = thoroughness = 1.0
    score = (
        PROCESS_COVERAGE_WEIGHT * coverage
        + PROCESS_DIVERSITY_WEIGHT * diversity
        + PROCESS_THOROUGHNESS_WEIGHT * thoroughness
    )
    if task.rubric is not None:
        score = PROCESS_RUBRIC_WEIGHT * rubric_score(trajectory, task.rubric) + (1 - PROCESS_RUBRIC_WEIGHT) * score
    return min(1.0, score)


def conclusion_text(trajectory: Trajectory) -> str:
    """Return the text of the final turn read as a conclusion: submitted answer and reasoning, or prose."""
    if not trajectory.turns:
        return ""
    action = trajectory.turns[-1].action
    if action.is_submit:
        arguments = action.arguments or {}
        return " ".join(str(arguments.get(key, "")).strip() for key in ("answer", "reasoning")).strip()
    if action.is_tool_call:
        return ""
    return action.raw_text.strip()


def format_score(trajectory: Trajectory) -> float:
    """Average the per-turn format grades; a final conclusion of 10 characters or fewer grades 0."""
    if not trajectory.turns:
        return 0.0
    grades = [analyze_action_text(turn.action.raw_text)[1] for turn in trajectory.turns]
    if len(conclusion_text(trajectory)) <= MIN_CONCLUSION_CHARS:
        grades[-1] = 0.0
    return sum(grades) / len(grades)


def _contradicts(trajectory: Trajectory, conclusion: str) -> bool:
    folded = conclusion.casefold()
    for turn in trajectory.turns[:-1]:
        for match in _NEGATION_RE.finditer(turn.action.raw_text.casefold()):
            phrase = match.group(1)
            if phrase.split()[0] in _NEGATION_STOPWORDS:
                continue
            if re.search(rf"\b{re.escape(phrase)}\b", folded):
                return True
    return False


def coherence_score(trajectory: Trajectory) -> float:
    """Start at 1 and deduct for a contradicted conclusion, a missing one and repeated identical calls."""
    score = 1.0
    conclusion = conclusion_text(trajectory)
    if conclusion and _contradicts(trajectory, conclusion):
        score -= COHERENCE_CONTRADICTION_PENALTY
    if len(conclusion) <= MIN_CONCLUSION_CHARS:
        score -= COHERENCE_NO_CONCLUSION_PENALTY
    repeats = Counter(
        (turn.action.tool_name, canonical_json(turn.action.arguments or {})) for turn in _call_turns(trajectory)
    )
    if any(count > MAX_IDENTICAL_CALLS for count in repeats.values()):
        score -= COHERENCE_REPETITION_PENALTY
    return min(1.0, max(0.0, score))


def safety_score(violations: Iterable[SafetyViolation]) -> float:
    """Return 1 - max severity / 5."""
    return 1.0 - max_severity(violations) / MAX_SEVERITY


def total_reward(
    components: RewardComponents, violations: Iterable[SafetyViolation], weights: RewardWeights | None = None
) -> RewardBreakdown:
    """
    Combine components into the total reward.

    The raw total is the weighted sum without renormalization, the assertion
    term only when present. Each violation of severity 1-4 subtracts its
    penalty, the result is clamped at 0, and any severity-5 violation caps
    the total at 0.1.
    """
    weights = weights or RewardWeights()
    violations = tuple(violations)
    raw = (
        weights.w_acc * components.r_acc
        + weights.w_proc * components.r_proc
        + weights.w_safe * components.r_safe
        + weights.w_fmt * components.r_fmt
        + weights.w_coh * components.r_coh
    )
    if components.r_assert is not None:
        raw += weights.w_assert * components.r_assert
    penalized = max(0.0, raw - sum(SEVERITY_PENALTIES.get(v.severity, 0.0) for v in violations))
    capped = any(v.severity >= CRITICAL_SEVERITY for v in violations)
    total = min(penalized, CRITICAL_REWARD_CAP) if capped else penalized
    return RewardBreakdown(
        components=components, weights=weights, violations=violations, raw=raw, total=total, capped=capped
    )


def cosine_reward(
    correct: bool,  # noqa: FBT001
    truncated: bool,  # noqa: FBT001
    length: int,
    params: CosineRewardParams | None = None,
) -> float:
    """
    Return the cosine length-controlled reward.

    Truncated responses get R_penalty. Otherwise, with c = cos(pi L / L_max),
    correct answers earn R_max - dR (1 - c) / 2 and wrong ones -|R_min| (1 - c) / 2.
    """
    params = params or CosineRewardParams()
    if length < 0:
        msg = f"Response length must be non-negative, got {length}"
        raise ContractViolationError(msg)
    if truncated:
        return params.r_penalty
    if length > params.max_tokens:
        msg = f"Response length {length} exceeds L_max {params.max_tokens} without truncation"
        raise ContractViolationError(msg)
    decay = 0.5 * (1.0 - math.cos(math.pi * length / params.max_tokens))
    if correct:
        return params.r_max - params.delta * decay
    return -abs(params.r_min) * decay


def correctness_mode(task: Task) -> str:
    """Return the mode the correctness predicate uses for a task."""
    return "soft" if task.gold_answer is not None and task.accuracy_mode == "soft" else "exact"


def is_correct(r_acc: float, mode: str = "exact") -> bool:
    """Return True when accuracy clears 0.99 (exact) or 0.5 (soft)."""
    return r_acc >= (SOFT_CORRECT_THRESHOLD if mode == "soft" else EXACT_CORRECT_THRESHOLD)


def evaluate(
    trajectory: Trajectory,
    task: Task,
    world: WorldState,
    store: KnowledgeStore | None = None,
    weights: RewardWeights | None = None,
) -> RewardBreakdown:
    """Score a finished episode on every dimension and combine."""
    violations = detect_safety_violations(trajectory, world, task, store)
    r_acc = accuracy(trajectory, task)
    r_assert = None
    if task.nl_assertions:
        r_assert = assertion_score(trajectory, task)
    elif task.rubric is not None:
        r_assert = rubric_score(trajectory, task.rubric)
    components = RewardComponents(
        r_acc=r_acc,
        r_proc=process_quality(trajectory, task),
        r_safe=safety_score(violations),
        r_fmt=format_score(trajectory),
        r_coh=coherence_score(trajectory),
        r_assert=r_assert,
    )
    breakdown = attrs.evolve(
        total_reward(components, violations, weights), correct=is_correct(r_acc, correctness_mode(task))
    )
    _LOGGER.debug(
        "Episode %s scored %.4f (acc %.3f, %s violations)", trajectory.task_id, breakdown.total, r_acc, len(violations)
    )
    return breakdown
