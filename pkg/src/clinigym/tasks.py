"""Task schema, deterministic ids, loaders and the multiple-choice converter."""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import TYPE_CHECKING, Any

import attrs
import voluptuous as vol

from .const import (
    BASIS_ACTION,
    BASIS_NL_ASSERTION,
    DOMAIN_MEDICAL_QA,
    TOOL_SUBMIT_ANSWER,
)
from .exceptions import ConversionError, EmptySuiteError, TaskValidationError
from .utils import canonical_json, iter_json_records, md5_hex, write_jsonl

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

_LOGGER = logging.getLogger(__name__)

OPTION_LETTERS = "ABCDE"
MIN_OPTIONS = 2
MAX_OPTIONS = 5
ACCURACY_MODES = ("exact", "soft")
_SINGLE_LETTER_RE = re.compile(r"^\s*\(?([A-Ea-e])\)?[\s.):]*$")

EXPECTED_ACTION_SCHEMA = vol.Schema(
    {
        vol.Required("tool_name"): vol.All(str, vol.Length(min=1)),
        vol.Optional("arguments", default=dict): dict,
        vol.Optional("compare_args", default=None): vol.Any(None, [str]),
    },
    extra=vol.REMOVE_EXTRA,
)

RUBRIC_SCHEMA = vol.Schema(
    {
        vol.Optional("required_elements", default=list): [str],
        vol.Optional("required_tools", default=list): [str],
        vol.Optional("forbidden_elements", default=list): [str],
    },
    extra=vol.REMOVE_EXTRA,
)

TASK_SCHEMA = vol.Schema(
    {
        vol.Optional("id"): str,
        vol.Required("domain"): vol.All(str, vol.Length(min=1)),
        vol.Required("ticket"): vol.All(str, vol.Length(min=1)),
        vol.Optional("expected_actions", default=list): list,
        vol.Optional("nl_assertions", default=list): [str],
        vol.Optional("reward_basis", default=lambda: [BASIS_ACTION]): vol.All(
            [vol.In([BASIS_ACTION, BASIS_NL_ASSERTION])], vol.Length(min=1)
        ),
        vol.Optional("rubric", default=None): vol.Any(None, RUBRIC_SCHEMA),
        vol.Optional("gold_answer", default=None): vol.Any(None, str),
        vol.Optional("accuracy_mode", default=None): vol.Any(None, vol.In(ACCURACY_MODES)),
        vol.Optional("initial_state", default=dict): dict,
        vol.Optional("metadata", default=dict): dict,
    },
    extra=vol.REMOVE_EXTRA,
)


def _normalize_value(value: Any) -> Any:
    """Comparable form of an argument value: trimmed case-folded text, floats for numbers."""
    if isinstance(value, bool):
        return value
    if isinstance(value, int | float):
        return float(value)
    if isinstance(value, str):
        stripped = value.strip()
        try:
            return float(stripped)
        except ValueError:
            return stripped.casefold()
    return canonical_json(value)


@attrs.frozen
class ExpectedAction:
    """A tool call the task expects, with the arguments that must match."""

    tool_name: str
    arguments: dict[str, Any] = attrs.field(factory=dict)
    compare_args: tuple[str, ...] = attrs.field(default=(), converter=tuple)

    def __attrs_post_init__(self) -> None:
        """compare_args ⊆ keys(arguments)."""
        missing = [name for name in self.compare_args if name not in self.arguments]
        if missing:
            msg = f"compare_args {missing} of {self.tool_name} are not among its arguments"
            raise TaskValidationError(msg)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ExpectedAction:
        """Validate and build; compare_args defaults to every argument."""
        record = dict(data)
        if "tool_name" not in record and "name" in record:
            record["tool_name"] = record.pop("name")
        try:
            clean = EXPECTED_ACTION_SCHEMA(record)
        except vol.Invalid as err:
            msg = f"Invalid expected action: {err}"
            raise TaskValidationError(msg) from err
        compare = clean["compare_args"]
        if compare is None:
            compare = list(clean["arguments"])
        return cls(tool_name=clean["tool_name"], arguments=clean["arguments"], compare_args=tuple(compare))

    def matches(self, tool_name: str | None, arguments: Mapping[str, Any] | None) -> bool:
        """Return True if a call has this name and equal values for every compared argument."""
        if tool_name != self.tool_name:
            return False
        given = arguments or {}
        return all(
            name in given and _normalize_value(given[name]) == _normalize_value(self.arguments[name])
            for name in self.compare_args
        )

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {"tool_name": self.tool_name, "arguments": self.arguments, "compare_args": list(self.compare_args)}


@attrs.frozen
class Rubric:
    """Elements and tools a good answer contains, and elements it must avoid."""

    required_elements: tuple[str, ...] = attrs.field(default=(), converter=tuple)
    required_tools: tuple[str, ...] = attrs.field(default=(), converter=tuple)
    forbidden_elements: tuple[str, ...] = attrs.field(default=(), converter=tuple)

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {
            "required_elements": list(self.required_elements),
            "required_tools": list(self.required_tools),
            "forbidden_elements": list(self.forbidden_elements),
        }


def extract_letter(text: str | None) -> str | None:
    """Return the option letter if the text is a bare option letter like "b)" or "(C)"."""
    if text is None:
        return None
    match = _SINGLE_LETTER_RE.match(text)
    return match.group(1).upper() if match else None


@attrs.frozen
class Task:
    """A ticket plus everything needed to grade an episode on it."""

    domain: str
    ticket: str
    expected_actions: tuple[ExpectedAction, ...] = attrs.field(default=(), converter=tuple)
    nl_assertions: tuple[str, ...] = attrs.field(default=(), converter=tuple)
    reward_basis: tuple[str, ...] = attrs.field(default=(BASIS_ACTION,), converter=tuple)
    rubric: Rubric | None = None
    gold_answer: str | None = None
    accuracy_mode: str = attrs.field()
    initial_state: dict[str, Any] = attrs.field(factory=dict)
    metadata: dict[str, Any] = attrs.field(factory=dict)

    @accuracy_mode.default
    def _default_accuracy_mode(self) -> str:
        return "exact" if extract_letter(self.gold_answer) is not None else "soft"

    def __attrs_post_init__(self) -> None:
        """reward_basis is non-empty and drawn from ACTION / NL_ASSERTION."""
        if not self.reward_basis or any(b not in {BASIS_ACTION, BASIS_NL_ASSERTION} for b in self.reward_basis):
            msg = f"Invalid reward_basis {self.reward_basis!r}"
            raise TaskValidationError(msg)
        if self.accuracy_mode not in ACCURACY_MODES:
            msg = f"Invalid accuracy_mode {self.accuracy_mode!r}"
            raise TaskValidationError(msg)

    @property
    def id(self) -> str:
        """Return the MD5 digest of the canonical form."""
        return task_id(self)

    @property
    def has_assertions(self) -> bool:
        """Return True if the assertion dimension applies."""
        return bool(self.nl_assertions) or self.rubric is not None

    def canonical_dict(self) -> dict[str, Any]:
        """Return every field except the id."""
        return {
            "domain": self.domain,
            "ticket": self.ticket,
            "expected_actions": [a.to_dict() for a in self.expected_actions],
            "nl_assertions": list(self.nl_assertions),
            "reward_basis": list(self.reward_basis),
            "rubric": None if self.rubric is None else self.rubric.to_dict(),
            "gold_answer": self.gold_answer,
            "accuracy_mode": self.accuracy_mode,
            "initial_state": self.initial_state,
            "metadata": self.metadata,
        }

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form including the id."""
        return {"id": self.id, **self.canonical_dict()}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> Task:
        """Validate and normalize a raw task record."""
        if not isinstance(data, dict):
            msg = f"Task record must be an object, got {type(data).__name__}"
            raise TaskValidationError(msg)
        try:
            clean = TASK_SCHEMA(dict(data))
        except vol.Invalid as err:
            msg = f"Invalid task record: {err}"
            raise TaskValidationError(msg) from err
        rubric = clean["rubric"]
        kwargs: dict[str, Any] = {
            "domain": clean["domain"],
            "ticket": clean["ticket"],
            "expected_actions": tuple(ExpectedAction.from_mapping(a) for a in clean["expected_actions"]),
            "nl_assertions": tuple(clean["nl_assertions"]),
            "reward_basis": tuple(sorted(set(clean["reward_basis"]))),
            "rubric": None if rubric is None else Rubric(**rubric),
            "gold_answer": clean["gold_answer"],
            "initial_state": clean["initial_state"],
            "metadata": clean["metadata"],
        }
        if clean["accuracy_mode"] is not None:
            kwargs["accuracy_mode"] = clean["accuracy_mode"]
        return cls(**kwargs)


def task_id(task: Task | Mapping[str, Any]) -> str:
    """
    Return the 32-hex MD5 id of a task.

    The digest covers the UTF-8 bytes of the canonical JSON serialization of
    the normalized task with the id field left out: keys sorted, arrays in
    their given order, separators "," and ":" without whitespace.
    """
    normalized = task if isinstance(task, Task) else Task.from_mapping(dict(task))
    return md5_hex(normalized.canonical_dict())


@attrs.frozen
class TaskDiagnostic:
    """Why a record of a task file was rejected."""

    line: int
    message: str


@attrs.frozen
class TaskLoadReport:
    """Valid tasks of a file and the diagnostics of rejected records."""

    tasks: tuple[Task, ...]
    diagnostics: tuple[TaskDiagnostic, ...]


def load_tasks_report(path: str | Path) -> TaskLoadReport:
    """Read a JSON array or JSONL task file, keeping valid records and reporting the rest."""
    tasks: list[Task] = []
    diagnostics: list[TaskDiagnostic] = []
    for line_no, record in iter_json_records(Path(path)):
        if isinstance(record, Exception):
            diagnostics.append(TaskDiagnostic(line_no, str(record)))
            continue
        try:
            task = Task.from_mapping(record)
        except TaskValidationError as err:
            diagnostics.append(TaskDiagnostic(line_no, str(err)))
            continue
        declared = record.get("id")
        if declared is not None and declared != task.id:
            diagnostics.append(TaskDiagnostic(line_no, f"id {declared} does not match computed id {task.id}"))
            continue
        tasks.append(task)
    return TaskLoadReport(tasks=tuple(tasks), diagnostics=tuple(diagnostics))


def load_tasks(path: str | Path) -> list[Task]:
    """Load a task file; invalid records are logged, an empty result is an error."""
    report = load_tasks_report(path)
    for diagnostic in report.diagnostics:
        _LOGGER.warning("%s:%s: %s", path, diagnostic.line, diagnostic.message)
    if not report.tasks:
        msg = f"No valid task in {path} ({len(report.diagnostics)} rejected)"
        raise EmptySuiteError(msg)
    _LOGGER.info("Loaded %s tasks from %s", len(report.tasks), path)
    return list(report.tasks)


def dump_tasks(path: str | Path, tasks: Iterable[Task]) -> int:
    """Write tasks as JSONL."""
    return write_jsonl(path, (task.to_dict() for task in tasks))


def _options_of(record: Mapping[str, Any]) -> list[tuple[str, str]]:
    options = record.get("options")
    if isinstance(options, dict):
        pairs = [(str(letter).strip().upper(), str(text)) for letter, text in options.items()]
    elif isinstance(options, list | tuple):
        pairs = [(OPTION_LETTERS[i], str(text)) for i, text in enumerate(options[:MAX_OPTIONS + 1])]
    else:
        msg = "MCQA record has no options"
        raise ConversionError(msg)
    if not MIN_OPTIONS <= len(pairs) <= MAX_OPTIONS:
        msg = f"MCQA record needs {MIN_OPTIONS}-{MAX_OPTIONS} options, got {len(pairs)}"
        raise ConversionError(msg)
    letters = [letter for letter, _ in pairs]
    if letters != list(OPTION_LETTERS[: len(pairs)]):
        msg = f"Option letters must run A.. in order, got {letters}"
        raise ConversionError(msg)
    return pairs


def convert_mcqa(record: Mapping[str, Any]) -> Task:
    """
    Convert a multiple-choice question into a medical-QA task.

    Args:
        record: Mapping with question, options (letter mapping or list), answer_key and source

    Returns:
        Task whose ticket lists the lettered options and whose gold answer is the key

    """
    question = str(record.get("question", "")).strip()
    if not question:
        msg = "MCQA record has no question"
        raise ConversionError(msg)
    pairs = _options_of(record)
    answer_key = record.get("answer_key")
    if answer_key is None or not str(answer_key).strip():
        msg = f"MCQA record {question[:40]!r} has no answer_key"
        raise ConversionError(msg)
    key = str(answer_key).strip().upper()
    if key not in {letter for letter, _ in pairs}:
        msg = f"answer_key {key!r} is not one of the option letters"
        raise ConversionError(msg)

    ticket = question + "\n" + "\n".join(f"{letter}) {text}" for letter, text in pairs)
    return Task(
        domain=DOMAIN_MEDICAL_QA,
        ticket=ticket,
        expected_actions=(
            ExpectedAction(tool_name="analyze_answer_options"),
            ExpectedAction(tool_name=TOOL_SUBMIT_ANSWER, arguments={"answer": key}, compare_args=("answer",)),
        ),
        reward_basis=(BASIS_ACTION,),
        gold_answer=key,
        accuracy_mode="exact",
        metadata={"source": str(record.get("source", ""))},
    )


def convert_mcqa_file(source: str | Path, target: str | Path) -> tuple[int, list[str]]:
    """Convert a JSON/JSONL file of MCQA records; return the count written and per-record errors."""
    tasks: list[Task] = []
    errors: list[str] = []
    for line_no, record in iter_json_records(Path(source)):
        try:
            if isinstance(record, Exception) or not isinstance(record, dict):
                msg = "not an MCQA record"
                raise ConversionError(msg)
            tasks.append(convert_mcqa(record))
        except ConversionError as err:
            errors.append(f"{source}:{line_no}: {err}")
    for error in errors:
        _LOGGER.warning("%s", error)
    return dump_tasks(target, tasks), errors


def options_from_ticket(ticket: str) -> dict[str, str]:
    """Return the lettered options listed in a ticket."""
    options = {}
    for line in ticket.splitlines():
        match = re.match(r"^\s*([A-E])\)\s*(.+)$", line)
        if match:
            options[match.group(1)] = match.group(2).strip()
    return options
