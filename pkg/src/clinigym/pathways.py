"""Cross-domain pathways and their per-phase evaluation."""

from __future__ import annotations

import logging
import re
from typing import TYPE_CHECKING, Any

import attrs

from .const import PATHWAY_TURN_BUDGET
from .exceptions import TaskValidationError
from .tasks import ExpectedAction

if TYPE_CHECKING:
    from .trajectory import Trajectory, TurnRecord

_LOGGER = logging.getLogger(__name__)

TRANSITION_ACTIONS_COMPLETE = "actions_complete"
TRANSITION_AFTER_TOOL = "after_tool"
TRANSITION_RESULT_CONTAINS = "tool_result_contains"
TRANSITIONS = (TRANSITION_ACTIONS_COMPLETE, TRANSITION_AFTER_TOOL, TRANSITION_RESULT_CONTAINS)
MIN_PHASES = 2


def assertion_matches(pattern: str, text: str) -> bool:
    """Match an assertion pattern case-insensitively, as a regex or else as a substring."""
    try:
        return re.search(pattern, text, re.IGNORECASE) is not None
    except re.error:
        return pattern.casefold() in text.casefold()


def turn_text(turn: TurnRecord) -> str:
    """Return the action text and tool result of a turn."""
    return f"{turn.action.raw_text}\n{turn.tool_result_text}"


@attrs.frozen
class PathwayPhase:
    """One phase of a pathway: its domain, what it requires and when it hands over."""

    name: str
    active_domain: str
    required_actions: tuple[ExpectedAction, ...] = attrs.field(default=(), converter=tuple)
    nl_assertions: tuple[str, ...] = attrs.field(default=(), converter=tuple)
    transition_condition: str = TRANSITION_ACTIONS_COMPLETE
    transition_argument: str | None = None
    time_pressure: bool = False

    def __attrs_post_init__(self) -> None:
        """Known transition with the argument it needs."""
        if self.transition_condition not in TRANSITIONS:
            msg = f"Phase {self.name}: unknown transition {self.transition_condition!r}"
            raise TaskValidationError(msg)
        if self.transition_condition != TRANSITION_ACTIONS_COMPLETE and not self.transition_argument:
            msg = f"Phase {self.name}: transition {self.transition_condition} needs an argument"
            raise TaskValidationError(msg)


@attrs.frozen
class PathwaySpec:
    """An ordered sequence of phases spanning several domains."""

    name: str
    phases: tuple[PathwayPhase, ...] = attrs.field(converter=tuple)

    def __attrs_post_init__(self) -> None:
        """At least two phases; after_tool transitions name a tool of that phase or an earlier one."""
        if len(self.phases) < MIN_PHASES:
            msg = f"Pathway {self.name} needs at least {MIN_PHASES} phases"
            raise TaskValidationError(msg)
        known: set[str] = set()
        for phase in self.phases:
            known.update(a.tool_name for a in phase.required_actions)
            if phase.transition_condition == TRANSITION_AFTER_TOOL and phase.transition_argument not in known:
                msg = (
                    f"Phase {phase.name} of {self.name} waits for {phase.transition_argument}, "
                    "which no phase up to it requires"
                )
                raise TaskValidationError(msg)

    @property
    def domains(self) -> list[str]:
        """Return the distinct active domains in phase order."""
        seen: list[str] = []
        for phase in self.phases:
            if phase.active_domain not in seen:
                seen.append(phase.active_domain)
        return seen


@attrs.frozen
class PhaseScore:
    """Evaluation of a single phase."""

    name: str
    entered: bool
    coverage: float
    assertion_fraction: float | None
    score: float
    turns_used: int
    over_budget: bool


@attrs.frozen
class PathwayResult:
    """Per-phase scores and their mean."""

    phases: tuple[PhaseScore, ...]
    overall: float

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {"overall": self.overall, "phases": [attrs.asdict(p) for p in self.phases]}


def _transition_met(phase: PathwayPhase, turns: list[TurnRecord], last: TurnRecord) -> bool:
    if phase.transition_condition == TRANSITION_AFTER_TOOL:
        return last.action.is_tool_call and last.action.tool_name == phase.transition_argument
    if phase.transition_condition == TRANSITION_RESULT_CONTAINS:
        return str(phase.transition_argument).casefold() in last.tool_result_text.casefold()
    return _coverage(phase, turns) == 1.0


def _coverage(phase: PathwayPhase, turns: list[TurnRecord]) -> float:
    if not phase.required_actions:
        return 1.0
    calls = [t.action for t in turns if t.action.is_tool_call and t.tool_ok is not False]
    matched = sum(
        1 for expected in phase.required_actions if any(expected.matches(c.tool_name, c.arguments) for c in calls)
    )
    return matched / len(phase.required_actions)


def entry_turns(trajectory: Trajectory, pathway: PathwaySpec) -> list[int | None]:
    """Return the turn index at which each phase was entered, None for phases never reached."""
    entries: list[int | None] = [None] * len(pathway.phases)
    if not trajectory.turns:
        return entries
    entries[0] = 0
    current = 0
    for position, turn in enumerate(trajectory.turns):
        if current == len(pathway.phases) - 1:
            break
        span = trajectory.turns[entries[current] or 0 : position + 1]
        if _transition_met(pathway.phases[current], span, turn):
            current += 1
            entries[current] = position + 1
    return entries


def evaluate_pathway(trajectory: Trajectory, pathway: PathwaySpec) -> PathwayResult:
    """
    Score a trajectory phase by phase.

    A phase is scored over the turns from its entry to the end of the episode:
    the mean of required-action coverage and the fraction of its assertions
    that match, or coverage alone when it has no assertions. Phases never
    entered score 0. The overall score is the mean over phases.
    """
    entries = entry_turns(trajectory, pathway)
    total_turns = len(trajectory.turns)
    scores: list[PhaseScore] = []
    for index, phase in enumerate(pathway.phases):
        entry = entries[index]
        if entry is None or entry >= total_turns:
            scores.append(PhaseScore(phase.name, entry is not None, 0.0, None, 0.0, 0, over_budget=False))
            continue
        turns = trajectory.turns[entry:]
        coverage = _coverage(phase, turns)
        fraction = None
        if phase.nl_assertions:
            text = "\n".join(turn_text(t) for t in turns)
            fraction = sum(assertion_matches(p, text) for p in phase.nl_assertions) / len(phase.nl_assertions)
        score = coverage if fraction is None else (coverage + fraction) / 2.0
        following = next((e for e in entries[index + 1 :] if e is not None), total_turns)
        used = following - entry
        scores.append(
            PhaseScore(
                name=phase.name,
                entered=True,
                coverage=coverage,
                assertion_fraction=fraction,
                score=score,
                turns_used=used,
                over_budget=phase.time_pressure and used > PATHWAY_TURN_BUDGET,
            )
        )
    overall = sum(s.score for s in scores) / len(scores)
    _LOGGER.debug("Pathway %s scored %.3f", pathway.name, overall)
    return PathwayResult(phases=tuple(scores), overall=overall)


CHEST_PAIN = PathwaySpec(
    name="chest_pain",
    phases=(
        PathwayPhase(
            name="triage",
            active_domain="triage_emergency",
            required_actions=(ExpectedAction("get_chief_complaint"), ExpectedAction("order_stat_ecg")),
            nl_assertions=(r"chest pain",),
            transition_condition=TRANSITION_AFTER_TOOL,
            transition_argument="order_stat_ecg",
            time_pressure=True,
        ),
        PathwayPhase(
            name="workup",
            active_domain="clinical_diagnosis",
            required_actions=(ExpectedAction("order_lab"), ExpectedAction("generate_ddx")),
            nl_assertions=(r"troponin",),
        ),
        PathwayPhase(
            name="medication_review",
            active_domain="drug_interaction",
            required_actions=(ExpectedAction("check_interaction"),),
            nl_assertions=(r"aspirin",),
        ),
    ),
)

SEPSIS_BUNDLE = PathwaySpec(
    name="sepsis_bundle",
    phases=(
        PathwayPhase(
            name="recognition",
            active_domain="triage_emergency",
            required_actions=(ExpectedAction("calculate_qsofa"), ExpectedAction("activate_sepsis_protocol")),
            transition_condition=TRANSITION_RESULT_CONTAINS,
            transition_argument="sepsis",
            time_pressure=True,
        ),
        PathwayPhase(
            name="source_and_severity",
            active_domain="ehr_management",
            required_actions=(ExpectedAction("get_culture_results"), ExpectedAction("get_lab_trend")),
            nl_assertions=(r"lactate",),
        ),
        PathwayPhase(
            name="treatment",
            active_domain="clinical_diagnosis",
            required_actions=(ExpectedAction("prescribe"),),
            nl_assertions=(r"antibiotic|piperacillin|ceftriaxone|meropenem",),
        ),
    ),
)

PATHWAYS = {p.name: p for p in (CHEST_PAIN, SEPSIS_BUNDLE)}
