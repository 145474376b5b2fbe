"""Tool definitions, toolkits, world state and dispatch."""

from __future__ import annotations

import copy
import enum
import inspect
import logging
import re
from typing import TYPE_CHECKING, Any, TypeAlias

import attrs
import voluptuous as vol

from .const import TOOL_SUBMIT_ANSWER, TOOL_THINK
from .exceptions import RegistrationError, ToolExecutionError
from .utils import canonical_json, md5_hex

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from .knowledge import KnowledgeStore

_LOGGER = logging.getLogger(__name__)

_TOOL_TYPE_ATTR = "_clinigym_tool_type"
_TOOL_CATEGORY_ATTR = "_clinigym_tool_category"
_ARG_LINE_RE = re.compile(r"^\s*(\*{0,2}\w+)\s*(?:\([^)]*\))?\s*:\s*(.*)$")
_SECTION_RE = re.compile(r"^\s*(Args|Arguments|Returns|Raises|Yields|Examples?|Notes?)\s*:\s*$")

# Parameters a handler receives that are not part of the tool's public signature
_HIDDEN_PARAMETERS = frozenset({"self", "world"})

_SEMANTIC_TYPES: dict[str, Any] = {
    "string": vol.Coerce(str),
    "integer": vol.Coerce(int),
    "number": vol.Coerce(float),
    "boolean": vol.Boolean(),
    "array": list,
    "object": dict,
}


class ToolType(enum.Enum):
    """What a tool is allowed to do to the world."""

    READ = "READ"
    WRITE = "WRITE"
    THINK = "THINK"
    GENERIC = "GENERIC"


@attrs.frozen
class ToolParameter:
    """A single named argument of a tool."""

    name: str
    kind: str = "string"
    required: bool = True
    description: str = ""

    def __attrs_post_init__(self) -> None:
        """Only JSON-schema semantic types are allowed."""
        if self.kind not in _SEMANTIC_TYPES:
            msg = f"Parameter {self.name!r} has unsupported type {self.kind!r}"
            raise RegistrationError(msg)


def _semantic_type(annotation: Any) -> str:
    """Map a (possibly string) annotation onto a JSON-schema type name."""
    text = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    head = next((part.strip() for part in text.split("|") if part.strip() != "None"), "str")
    for prefix, kind in (
        ("str", "string"),
        ("int", "integer"),
        ("float", "number"),
        ("bool", "boolean"),
        ("list", "array"),
        ("Sequence", "array"),
        ("tuple", "array"),
        ("dict", "object"),
        ("Mapping", "object"),
    ):
        if head.startswith(prefix):
            return kind
    return "string"


def _parse_docstring(doc: str | None) -> tuple[str, dict[str, str]]:
    """Split a Google-style docstring into its summary and per-argument descriptions."""
    if not doc:
        return "", {}
    lines = inspect.cleandoc(doc).splitlines()
    summary: list[str] = []
    args: dict[str, str] = {}
    section = None
    current = None
    for line in lines:
        if header := _SECTION_RE.match(line):
            section = header.group(1)
            current = None
            continue
        if section is None:
            if line.strip():
                summary.append(line.strip())
            elif summary:
                section = "body"
            continue
        if section in {"Args", "Arguments"}:
            if (match := _ARG_LINE_RE.match(line)) and not line.startswith(" " * 8):
                current = match.group(1).lstrip("*")
                args[current] = match.group(2).strip()
            elif current and line.strip():
                args[current] = f"{args[current]} {line.strip()}".strip()
    return " ".join(summary), args


@attrs.frozen
class ToolDefinition:
    """Name, type, description and ordered parameters of a tool."""

    name: str
    tool_type: ToolType
    description: str = ""
    parameters: tuple[ToolParameter, ...] = attrs.field(default=(), converter=tuple)
    category: str = ""

    def __attrs_post_init__(self) -> None:
        """Names are non-empty and parameters unique."""
        if not self.name:
            msg = "Tool name must be non-empty"
            raise RegistrationError(msg)
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            msg = f"Tool {self.name!r} declares a parameter twice"
            raise RegistrationError(msg)

    @classmethod
    def from_method(cls, method: Callable[..., Any], tool_type: ToolType | None = None) -> ToolDefinition:
        """
        Build a definition from a handler's signature and docstring.

        The leading ``self`` and ``world`` parameters are skipped; every other
        parameter becomes a tool argument, required when it has no default.

        Args:
            method: The handler, usually a method decorated with is_tool
            tool_type: Overrides the type recorded by the decorator

        Returns:
            The tool definition

        """
        resolved_type = tool_type or getattr(method, _TOOL_TYPE_ATTR, None)
        if resolved_type is None:
            msg = f"{method.__name__} is not marked with is_tool() and no tool type was given"
            raise RegistrationError(msg)
        summary, arg_docs = _parse_docstring(inspect.getdoc(method))
        parameters = []
        for param in inspect.signature(method).parameters.values():
            if param.name in _HIDDEN_PARAMETERS or param.kind in {param.VAR_POSITIONAL, param.VAR_KEYWORD}:
                continue
            parameters.append(
                ToolParameter(
                    name=param.name,
                    kind=_semantic_type(param.annotation) if param.annotation is not param.empty else "string",
                    required=param.default is param.empty,
                    description=arg_docs.get(param.name, ""),
                )
            )
        return cls(
            name=method.__name__,
            tool_type=resolved_type,
            description=summary,
            parameters=tuple(parameters),
            category=getattr(method, _TOOL_CATEGORY_ATTR, ""),
        )

    @property
    def required(self) -> list[str]:
        """Return the names of required parameters."""
        return [p.name for p in self.parameters if p.required]

    def schema(self) -> dict[str, Any]:
        """Return the function-calling schema document of this tool."""
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": {p.name: {"type": p.kind, "description": p.description} for p in self.parameters},
                    "required": self.required,
                },
            },
        }

    def validator(self) -> vol.Schema:
        """Return the voluptuous schema checking this tool's arguments."""
        return vol.Schema(
            {
                (vol.Required(p.name) if p.required else vol.Optional(p.name)): _SEMANTIC_TYPES[p.kind]
                for p in self.parameters
            }
        )


def is_tool(tool_type: ToolType, category: str = "") -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """Mark a method as a tool of the given type."""

    def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
        setattr(func, _TOOL_TYPE_ATTR, tool_type)
        setattr(func, _TOOL_CATEGORY_ATTR, category)
        return func

    return decorator


@attrs.define
class WorldState:
    """Episode-local domain database plus the log of WRITE tool effects."""

    records: dict[str, Any] = attrs.field(factory=dict)
    mutation_log: list[dict[str, Any]] = attrs.field(factory=list)
    store: KnowledgeStore | None = attrs.field(default=None, eq=False)

    @classmethod
    def from_records(cls, records: Mapping[str, Any], store: KnowledgeStore | None = None) -> WorldState:
        """Build a fresh world from a deep copy of fixture records."""
        return cls(records=copy.deepcopy(dict(records)), store=store)

    def state_hash(self) -> str:
        """Return a digest of the records and mutation log."""
        return md5_hex({"records": self.records, "mutations": self.mutation_log})

    def record_mutation(self, tool: str, arguments: Mapping[str, Any]) -> None:
        """Append a WRITE effect to the log."""
        self.mutation_log.append({"tool": tool, "arguments": dict(arguments)})

    def table(self, name: str) -> dict[str, Any]:
        """Return a record table for writing, creating it if needed."""
        return self.records.setdefault(name, {})

    def view(self, name: str) -> Mapping[str, Any]:
        """Return a record table for reading; a missing table reads as empty."""
        return self.records.get(name) or {}


@attrs.frozen
class ToolResult:
    """Outcome of one dispatch; exactly one of payload or error_message is meaningful."""

    ok: bool
    payload: Any = None
    error_message: str | None = None
    warnings: tuple[str, ...] = attrs.field(default=(), converter=tuple)

    def __attrs_post_init__(self) -> None:
        """ok xor error_message."""
        if self.ok == (self.error_message is not None):
            msg = "A tool result is either ok or carries an error message"
            raise ValueError(msg)

    @classmethod
    def failure(cls, message: str) -> ToolResult:
        """Return a soft-error result."""
        return cls(ok=False, error_message=message)

    def to_wire(self) -> str:
        """Render the result as the JSON text shown to the agent."""
        if not self.ok:
            return canonical_json({"ok": False, "error": self.error_message})
        body: dict[str, Any] = {"ok": True, "result": self.payload}
        if self.warnings:
            body["warnings"] = list(self.warnings)
        return json_text(body)


def json_text(value: Any) -> str:
    """Serialize a payload, stringifying anything JSON cannot hold."""
    try:
        return canonical_json(value)
    except TypeError:
        return canonical_json(_jsonable(value))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, str | int | float | bool) or value is None:
        return value
    return str(value)


Handler: TypeAlias = "Callable[..., Any]"


@attrs.frozen
class ToolKit:
    """Immutable mapping of tool names to definitions and handlers for one domain."""

    domain: str
    tools: dict[str, ToolDefinition] = attrs.field(factory=dict)
    handlers: dict[str, Handler] = attrs.field(factory=dict, eq=False)

    def __len__(self) -> int:
        """Return the number of tools."""
        return len(self.tools)

    def __contains__(self, name: object) -> bool:
        """Return True if a tool of that name exists."""
        return name in self.tools

    @property
    def names(self) -> list[str]:
        """Return tool names in registration order."""
        return list(self.tools)

    def register(self, definition: ToolDefinition, handler: Handler) -> ToolKit:
        """Return a new toolkit that also holds the given tool."""
        if definition.name in self.tools:
            msg = f"Tool {definition.name!r} is already registered in {self.domain!r}"
            raise RegistrationError(msg)
        return ToolKit(
            domain=self.domain,
            tools={**self.tools, definition.name: definition},
            handlers={**self.handlers, definition.name: handler},
        )

    @classmethod
    def from_object(cls, domain: str, obj: object) -> ToolKit:
        """Collect every is_tool-decorated method of an object, in definition order."""
        kit = cls(domain=domain)
        members = [
            (name, member)
            for name, member in inspect.getmembers(type(obj), predicate=inspect.isfunction)
            if getattr(member, _TOOL_TYPE_ATTR, None) is not None
        ]
        members.sort(key=lambda item: item[1].__code__.co_firstlineno)
        for name, member in members:
            kit = kit.register(ToolDefinition.from_method(member), getattr(obj, name))
        return kit


def register(toolkit: ToolKit, definition: ToolDefinition, handler: Handler) -> ToolKit:
    """Register a tool; the toolkit itself is never modified."""
    return toolkit.register(definition, handler)


def schema_of(toolkit: ToolKit) -> list[dict[str, Any]]:
    """Return the function-calling schemas of a toolkit ordered by name."""
    return [toolkit.tools[name].schema() for name in sorted(toolkit.tools)]


def export_schema(toolkit: ToolKit) -> str:
    """Return the schema list as one byte-stable JSON array."""
    return canonical_json(schema_of(toolkit))


def merge(toolkits: Sequence[ToolKit], domain: str | None = None) -> ToolKit:
    """Combine toolkits; for a name present more than once the earliest toolkit wins."""
    if not toolkits:
        msg = "merge() needs at least one toolkit"
        raise RegistrationError(msg)
    if len(toolkits) == 1 and domain is None:
        return toolkits[0]
    tools: dict[str, ToolDefinition] = {}
    handlers: dict[str, Handler] = {}
    for kit in toolkits:
        for name, definition in kit.tools.items():
            if name in tools:
                _LOGGER.debug("Tool %s from %s shadowed by %s", name, kit.domain, tools[name].name)
                continue
            tools[name] = definition
            handlers[name] = kit.handlers[name]
    return ToolKit(domain=domain or toolkits[0].domain, tools=tools, handlers=handlers)


def dispatch(toolkit: ToolKit, name: Any, arguments: Any, world: WorldState) -> ToolResult:
    """
    Execute a tool call against a world, never raising.

    Unknown tools, malformed or missing arguments and handler failures all come
    back as ok=false results. Unknown argument keys are dropped and reported as
    warnings. WRITE tools append their validated arguments to the mutation log.
    """
    if not isinstance(name, str) or name not in toolkit:
        return ToolResult.failure(f"Unknown tool {name!r}. Available tools: {', '.join(sorted(toolkit.tools))}")
    if arguments is None:
        arguments = {}
    if not isinstance(arguments, dict):
        return ToolResult.failure(f"Arguments for {name} must be a JSON object")

    definition = toolkit.tools[name]
    known = {p.name for p in definition.parameters}
    unknown = sorted(str(key) for key in arguments if key not in known)
    warnings = tuple(f"Ignored unknown argument {key!r}" for key in unknown)
    if warnings:
        _LOGGER.warning("Tool %s called with unknown arguments %s", name, unknown)

    try:
        validated = definition.validator()({k: v for k, v in arguments.items() if k in known})
    except Exception as err:
        # vol.Invalid for schema failures, overflow and friends from coercion
        return ToolResult.failure(f"Invalid arguments for {name}: {err}")

    try:
        payload = toolkit.handlers[name](world, **validated)
    except ToolExecutionError as err:
        return ToolResult(ok=False, error_message=str(err), warnings=warnings)
    except Exception as err:
        _LOGGER.debug("Tool %s raised %s", name, err)
        return ToolResult(ok=False, error_message=f"Tool {name} failed: {err}", warnings=warnings)

    if definition.tool_type is ToolType.WRITE:
        world.record_mutation(name, validated)
    _LOGGER.debug("Dispatched %s (%s)", name, definition.tool_type.value)
    return ToolResult(ok=True, payload=payload, warnings=warnings)


class GenericTools:
    """Tools every toolkit carries."""

    @is_tool(ToolType.GENERIC, category="reasoning")
    def think(self, world: WorldState, thought: str = "") -> dict[str, Any]:  # noqa: ARG002
        """
        Record internal reasoning without side effects.

        Args:
            thought: Free-text reasoning to keep in the transcript

        """
        return {}

    @is_tool(ToolType.GENERIC, category="answer")
    def submit_answer(self, world: WorldState, answer: str, reasoning: str = "") -> dict[str, Any]:  # noqa: ARG002
        """
        Submit the final answer and end the episode.

        Args:
            answer: The final answer, an option letter for multiple-choice tickets
            reasoning: Optional justification shown with the answer

        """
        return {"submitted": answer}


def generic_toolkit(domain: str = "generic") -> ToolKit:
    """Return the think/submit_answer toolkit."""
    return ToolKit.from_object(domain, GenericTools())


def check_generic_tools(toolkit: ToolKit) -> None:
    """Raise if a composite toolkit lacks GENERIC think or submit_answer."""
    for name in (TOOL_THINK, TOOL_SUBMIT_ANSWER):
        definition = toolkit.tools.get(name)
        if definition is None or definition.tool_type is not ToolType.GENERIC:
            msg = f"Toolkit {toolkit.domain!r} must carry GENERIC tool {name!r}"
            raise RegistrationError(msg)


def stub_toolkit(domain: str, entries: Iterable[Mapping[str, Any]]) -> ToolKit:
    """Build a toolkit of metadata-only handlers from declarative entries."""
    kit = ToolKit(domain=domain)
    for entry in entries:
        definition = ToolDefinition(
            name=entry["name"],
            tool_type=ToolType(entry.get("type", "READ")),
            description=entry.get("description", ""),
            parameters=tuple(
                ToolParameter(
                    name=param["name"],
                    kind=param.get("type", "string"),
                    required=param.get("required", True),
                    description=param.get("description", ""),
                )
                for param in entry.get("parameters", ())
            ),
            category=entry.get("category", ""),
        )
        kit = kit.register(definition, _stub_handler(definition.name))
    return kit


def _stub_handler(name: str) -> Handler:
    def handler(world: WorldState, **arguments: Any) -> dict[str, Any]:  # noqa: ARG001
        return {"tool": name, "status": "simulated", "arguments": arguments}

    return handler
