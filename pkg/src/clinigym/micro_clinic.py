"""Synthetic micro-clinic domain: lookup, assess, submit."""

from __future__ import annotations

import logging
import re
from typing import Any

import attrs

from .const import BASIS_ACTION, DOMAIN_MICRO_CLINIC, TOOL_SUBMIT_ANSWER
from .exceptions import ContractViolationError, ToolExecutionError
from .tasks import OPTION_LETTERS, ExpectedAction, Task
from .tools import ToolType, WorldState, is_tool, json_text
from .utils import derive_seed

_LOGGER = logging.getLogger(__name__)

TOOL_LOOKUP_FACT = "lookup_fact"
TOOL_ASSESS_CASE = "assess_case"
CASES_TABLE = "cases"

CASE_ID_RE = re.compile(r"Case ID:\s*(\S+)")
CUE_RE = re.compile(r"Referring note suggests option ([A-E])")

_SYMPTOMS = (
    "intermittent chest tightness",
    "a productive cough",
    "new-onset fatigue",
    "episodic dizziness",
    "a painful swollen knee",
    "blurred vision",
    "lower back pain",
    "a persistent rash",
)
_FINDINGS = (
    "an elevated marker",
    "a borderline imaging result",
    "a normal baseline panel",
    "an abnormal rhythm strip",
    "a positive culture",
    "a low saturation reading",
)
_MANAGEMENT = (
    "start conservative therapy",
    "order a specialist review",
    "begin empirical antibiotics",
    "arrange urgent imaging",
    "adjust the current medication",
    "schedule observation",
    "discharge with advice",
)
_FACT_KEY_ALPHABET = "abcdefghjkmnpqrstuvwxyz23456789"
_FACT_KEY_LENGTH = 6


@attrs.frozen
class MicroClinicTask:
    """A micro-clinic task plus its hidden solution path."""

    task: Task
    solution_path: tuple[ExpectedAction, ...] = attrs.field(converter=tuple)
    correct_option: str
    cue_option: str

    def __attrs_post_init__(self) -> None:
        """The solution path ends with submit_answer."""
        if not self.solution_path or self.solution_path[-1].tool_name != TOOL_SUBMIT_ANSWER:
            msg = "A micro-clinic solution path must end with submit_answer"
            raise ContractViolationError(msg)

    @property
    def id(self) -> str:
        """Return the id of the underlying task."""
        return self.task.id

    @property
    def case_id(self) -> str:
        """Return the case id named in the ticket."""
        return self.solution_path[0].arguments["case_id"]

    def solution_actions(self) -> list[str]:
        """Return the solution path as bare tool-call documents."""
        return [json_text({"name": a.tool_name, "arguments": a.arguments}) for a in self.solution_path]


def _fact_key(rng: Any) -> str:
    return "".join(_FACT_KEY_ALPHABET[int(i)] for i in rng.integers(len(_FACT_KEY_ALPHABET), size=_FACT_KEY_LENGTH))


def make_micro_task(seed: int, index: int, n_options: int = 4, cue_reliability: float = 0.5) -> MicroClinicTask:
    """Generate the index-th task of a seeded micro-clinic family."""
    rng = derive_seed(seed, index)
    letters = OPTION_LETTERS[:n_options]
    correct = letters[int(rng.integers(n_options))]
    if rng.random() < cue_reliability:
        cue = correct
    else:
        wrong = [letter for letter in letters if letter != correct]
        cue = wrong[int(rng.integers(len(wrong)))]

    case_id = f"mc-{seed}-{index:04d}"
    fact_key = _fact_key(rng)
    symptom = _SYMPTOMS[int(rng.integers(len(_SYMPTOMS)))]
    finding = _FINDINGS[int(rng.integers(len(_FINDINGS)))]
    choices = [int(i) for i in rng.permutation(len(_MANAGEMENT))[:n_options]]
    options = "\n".join(f"{letter}) {_MANAGEMENT[c]}" for letter, c in zip(letters, choices, strict=True))
    ticket = (
        f"Case ID: {case_id}\n"
        f"Patient presents with {symptom}.\n"
        f"Referring note suggests option {cue}.\n"
        "Which option is the correct management?\n"
        f"{options}"
    )

    solution = (
        ExpectedAction(tool_name=TOOL_LOOKUP_FACT, arguments={"case_id": case_id}, compare_args=("case_id",)),
        ExpectedAction(
            tool_name=TOOL_ASSESS_CASE,
            arguments={"case_id": case_id, "fact_key": fact_key},
            compare_args=("case_id", "fact_key"),
        ),
        ExpectedAction(tool_name=TOOL_SUBMIT_ANSWER, arguments={"answer": correct}, compare_args=("answer",)),
    )
    task = Task(
        domain=DOMAIN_MICRO_CLINIC,
        ticket=ticket,
        expected_actions=solution,
        reward_basis=(BASIS_ACTION,),
        gold_answer=correct,
        accuracy_mode="exact",
        initial_state={
            CASES_TABLE: {case_id: {"fact_key": fact_key, "finding": finding, "recommended_option": correct}}
        },
        metadata={"source": "micro_clinic", "seed": seed, "index": index},
    )
    return MicroClinicTask(task=task, solution_path=solution, correct_option=correct, cue_option=cue)


def micro_clinic_suite(
    seed: int, n: int, n_options: int = 4, cue_reliability: float = 0.5
) -> list[MicroClinicTask]:
    """
    Generate a deterministic family of micro-clinic tasks.

    Only lookup_fact followed by assess_case with the returned fact key
    reliably reveals the correct option. The ticket also carries a referring
    note that names the right option with probability cue_reliability and a
    uniformly chosen wrong one otherwise, so following the note is correct
    that often.

    Args:
        seed: Family seed; the same seed yields the same suite
        n: Number of tasks, at least 1
        n_options: Options per ticket, 2 to 5
        cue_reliability: Probability that the referring note is right

    Returns:
        The generated tasks

    """
    if n < 1:
        msg = f"n must be at least 1, got {n}"
        raise ContractViolationError(msg)
    if not 2 <= n_options <= len(OPTION_LETTERS):  # noqa: PLR2004
        msg = f"n_options must lie in [2, {len(OPTION_LETTERS)}], got {n_options}"
        raise ContractViolationError(msg)
    suite = [make_micro_task(seed, i, n_options, cue_reliability) for i in range(n)]
    _LOGGER.debug("Generated %s micro-clinic tasks for seed %s", n, seed)
    return suite


class MicroClinicTools:
    """Domain tools of the micro-clinic."""

    @staticmethod
    def _case(world: WorldState, case_id: str) -> dict[str, Any]:
        case = world.view(CASES_TABLE).get(case_id)
        if case is None:
            msg = f"No case {case_id!r}"
            raise ToolExecutionError(msg)
        return case

    @is_tool(ToolType.READ, category="case review")
    def lookup_fact(self, world: WorldState, case_id: str) -> dict[str, Any]:
        """
        Look up the key finding of a case.

        Args:
            case_id: Case identifier from the ticket

        """
        case = self._case(world, case_id)
        return {"case_id": case_id, "fact_key": case["fact_key"], "finding": case["finding"]}

    @is_tool(ToolType.READ, category="case review")
    def assess_case(self, world: WorldState, case_id: str, fact_key: str) -> dict[str, Any]:
        """
        Assess a case given its key finding.

        Args:
            case_id: Case identifier from the ticket
            fact_key: Key returned by lookup_fact for this case

        """
        case = self._case(world, case_id)
        if fact_key.strip() != case["fact_key"]:
            msg = f"fact_key {fact_key!r} does not belong to case {case_id}"
            raise ToolExecutionError(msg)
        return {"case_id": case_id, "recommended_option": case["recommended_option"]}


def ticket_case_id(ticket: str) -> str | None:
    """Return the case id named in a ticket."""
    match = CASE_ID_RE.search(ticket)
    return match.group(1) if match else None


def ticket_cue(ticket: str) -> str | None:
    """Return the option letter of the referring note."""
    match = CUE_RE.search(ticket)
    return match.group(1) if match else None
