"""Actions, turn records and trajectories, plus the action parser and the JSONL trajectory log."""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import TYPE_CHECKING, Any

import attrs

from .const import FORMAT_BARE, FORMAT_FENCED, FORMAT_INVALID, FORMAT_PARTIAL, TOOL_SUBMIT_ANSWER, TOOL_THINK
from .utils import iter_jsonl, write_jsonl

if TYPE_CHECKING:
    from collections.abc import Iterable

_LOGGER = logging.getLogger(__name__)

TOOL_CALL = "tool_call"
FREE_TEXT = "free_text"

TERMINATED_BY = ("submit", "turn_limit", "context_limit")

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n?(.*?)```", re.DOTALL)
_MAX_EMBEDDED_SCANS = 64  # '{' positions tried when looking for a document inside prose


@attrs.frozen
class AgentAction:
    """One assistant turn, either a tool call or free text."""

    kind: str
    raw_text: str
    tool_name: str | None = None
    arguments: dict[str, Any] | None = None
    token_ids: tuple[int, ...] = attrs.field(default=(), converter=tuple)

    @property
    def is_tool_call(self) -> bool:
        """Return True for tool-call actions."""
        return self.kind == TOOL_CALL

    @property
    def is_submit(self) -> bool:
        """Return True for a submit_answer call."""
        return self.kind == TOOL_CALL and self.tool_name == TOOL_SUBMIT_ANSWER

    @property
    def is_think(self) -> bool:
        """Return True for a think call."""
        return self.kind == TOOL_CALL and self.tool_name == TOOL_THINK

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {
            "kind": self.kind,
            "raw_text": self.raw_text,
            "tool_name": self.tool_name,
            "arguments": self.arguments,
            "token_ids": list(self.token_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AgentAction:
        """Rebuild an action from its JSON form."""
        return cls(
            kind=data["kind"],
            raw_text=data.get("raw_text", ""),
            tool_name=data.get("tool_name"),
            arguments=data.get("arguments"),
            token_ids=tuple(data.get("token_ids") or ()),
        )


def _as_tool_call(value: Any) -> tuple[str, dict[str, Any]] | None:
    """Return (name, arguments) if a decoded JSON value is a complete tool-call document."""
    if not isinstance(value, dict) or "name" not in value or "arguments" not in value:
        return None
    name, arguments = value["name"], value["arguments"]
    if isinstance(arguments, str):
        try:
            arguments = json.loads(arguments)
        except ValueError:
            return None
    if not isinstance(name, str) or not name.strip() or not isinstance(arguments, dict):
        return None
    return name.strip(), arguments


def _is_partial(value: Any) -> bool:
    return isinstance(value, dict) and ("name" in value or "arguments" in value)


def _decode(text: str) -> Any:
    try:
        return json.loads(text)
    except (ValueError, RecursionError):
        return None


def _embedded_documents(text: str) -> Iterable[Any]:
    decoder = json.JSONDecoder()
    start = text.find("{")
    scans = 0
    while start != -1 and scans < _MAX_EMBEDDED_SCANS:
        scans += 1
        try:
            value, _ = decoder.raw_decode(text, start)
        except (ValueError, RecursionError):
            value = None
        if value is not None:
            yield value
        start = text.find("{", start + 1)


def analyze_action_text(text: str) -> tuple[tuple[str, dict[str, Any]] | None, float]:
    """
    Locate a tool-call document in action text and grade its format.

    Returns:
        The (name, arguments) pair or None, and the format grade: 1.0 for a bare
        document, 0.8 for one inside a fenced block or surrounded by prose, 0.5
        for partial structure, 0.0 otherwise

    """
    stripped = text.strip()
    partial = False

    bare = _decode(stripped) if stripped.startswith("{") else None
    if (call := _as_tool_call(bare)) is not None:
        return call, FORMAT_BARE
    partial = partial or _is_partial(bare)

    for match in _FENCE_RE.finditer(text):
        value = _decode(match.group(2).strip())
        if (call := _as_tool_call(value)) is not None:
            return call, FORMAT_FENCED
        partial = partial or _is_partial(value)

    for value in _embedded_documents(text):
        if (call := _as_tool_call(value)) is not None:
            return call, FORMAT_FENCED
        partial = partial or _is_partial(value)

    if partial or ('"name"' in text and "{" in text):
        return None, FORMAT_PARTIAL
    return None, FORMAT_INVALID


def parse_action(text: Any) -> AgentAction:
    """Parse agent output into a tool call or free text; never raises."""
    if isinstance(text, bytes | bytearray):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)
    call, _ = analyze_action_text(text)
    if call is None:
        return AgentAction(kind=FREE_TEXT, raw_text=text)
    name, arguments = call
    return AgentAction(kind=TOOL_CALL, raw_text=text, tool_name=name, arguments=arguments)


@attrs.frozen
class TurnRecord:
    """An assistant action together with what the environment answered."""

    turn_index: int
    action: AgentAction
    tool_result_text: str = ""
    per_token_logprobs: tuple[float, ...] | None = attrs.field(
        default=None, converter=attrs.converters.optional(tuple)
    )
    token_count: int = 0
    tool_ok: bool | None = None

    def __attrs_post_init__(self) -> None:
        """token_count matches the logprob count when logprobs are present."""
        if self.per_token_logprobs is not None and len(self.per_token_logprobs) != self.token_count:
            msg = (
                f"Turn {self.turn_index}: token_count {self.token_count} does not match "
                f"{len(self.per_token_logprobs)} logprobs"
            )
            raise ValueError(msg)

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {
            "turn_index": self.turn_index,
            "action": self.action.to_dict(),
            "tool_result_text": self.tool_result_text,
            "per_token_logprobs": None if self.per_token_logprobs is None else list(self.per_token_logprobs),
            "token_count": self.token_count,
            "tool_ok": self.tool_ok,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TurnRecord:
        """Rebuild a turn from its JSON form."""
        return cls(
            turn_index=int(data["turn_index"]),
            action=AgentAction.from_dict(data["action"]),
            tool_result_text=data.get("tool_result_text", ""),
            per_token_logprobs=data.get("per_token_logprobs"),
            token_count=int(data.get("token_count", 0)),
            tool_ok=data.get("tool_ok"),
        )


@attrs.define
class Trajectory:
    """A full rollout: turns in order and how the episode ended."""

    task_id: str
    turns: list[TurnRecord] = attrs.field(factory=list)
    terminated_by: str | None = None
    final_answer: str | None = None

    @property
    def total_response_tokens(self) -> int:
        """Return L, the summed token count of all assistant turns."""
        return sum(turn.token_count for turn in self.turns)

    @property
    def finished(self) -> bool:
        """Return True once the episode has ended."""
        return self.terminated_by is not None

    @property
    def truncated(self) -> bool:
        """Return True when the response ran into the context limit."""
        return self.terminated_by == "context_limit"

    def tool_calls(self) -> list[TurnRecord]:
        """Return the turns whose action is a tool call."""
        return [turn for turn in self.turns if turn.action.is_tool_call]

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON form."""
        return {
            "task_id": self.task_id,
            "turns": [turn.to_dict() for turn in self.turns],
            "terminated_by": self.terminated_by,
            "final_answer": self.final_answer,
            "total_response_tokens": self.total_response_tokens,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        """Rebuild a trajectory from its JSON form."""
        terminated_by = data.get("terminated_by")
        if terminated_by is not None and terminated_by not in TERMINATED_BY:
            msg = f"Unknown termination reason {terminated_by!r}"
            raise ValueError(msg)
        return cls(
            task_id=data["task_id"],
            turns=[TurnRecord.from_dict(turn) for turn in data.get("turns", [])],
            terminated_by=terminated_by,
            final_answer=data.get("final_answer"),
        )


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> int:
    """Write trajectories to a JSONL log."""
    return write_jsonl(path, (t.to_dict() for t in trajectories))


def read_trajectories(path: str | Path) -> list[Trajectory]:
    """Read a JSONL trajectory log; any malformed line is an error."""
    trajectories = []
    for line_no, record in iter_jsonl(Path(path)):
        if isinstance(record, Exception):
            msg = f"{path}:{line_no}: {record}"
            raise ValueError(msg)
        try:
            trajectories.append(Trajectory.from_dict(record))
        except (KeyError, TypeError, ValueError) as err:
            msg = f"{path}:{line_no}: malformed trajectory: {err}"
            raise ValueError(msg) from err
    _LOGGER.debug("Read %s trajectories from %s", len(trajectories), path)
    return trajectories
