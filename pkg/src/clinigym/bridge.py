r"""
Newline-delimited JSON bridge that lets an external agent drive episodes.

One message per line, UTF-8, keys sorted. A session runs episodes from a task
feed; for each turn the server sends an observation, reads one action, steps
the environment and answers with a result. The last message of an episode is
an end message whose payload is the reward breakdown:

    > {"done":false,"episode_id":"ep-0000","kind":"observation","payload":"=== SYSTEM ===\\n...","turn":0}
    < {"episode_id":"ep-0000","kind":"action","payload":"{\\"name\\": \\"think\\", ...}","turn":0}
    > {"done":false,"episode_id":"ep-0000","kind":"result","payload":"{\\"ok\\":true,...}","turn":0}
    ...
    > {"done":true,"episode_id":"ep-0000","kind":"end","payload":"{\\"total\\":0.81,...}","turn":4}

Malformed or out-of-order client messages abort the episode: it is scored as
truncated and the end message carries a diagnostic.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import sys
from typing import TYPE_CHECKING, Any, Protocol

import attrs
import voluptuous as vol

from .config import EpisodeConfig
from .const import BRIDGE_KINDS, DEFAULT_BRIDGE_HOST, DEFAULT_BRIDGE_PORT, DEFAULT_BRIDGE_TIMEOUT
from .env import ClinicalEnv
from .exceptions import ClinigymError, ProtocolError
from .utils import canonical_json

if TYPE_CHECKING:
    from collections.abc import Iterable

    from .knowledge import KnowledgeStore
    from .rewards import RewardBreakdown
    from .tasks import Task
    from .trajectory import Trajectory

_LOGGER = logging.getLogger(__name__)

KIND_OBSERVATION, KIND_ACTION, KIND_RESULT, KIND_END = BRIDGE_KINDS

MESSAGE_SCHEMA = vol.Schema(
    {
        vol.Required("kind"): vol.In(BRIDGE_KINDS),
        vol.Required("episode_id"): str,
        vol.Required("turn"): vol.All(int, vol.Range(min=0)),
        vol.Optional("payload", default=""): str,
        vol.Optional("token_logprobs", default=None): vol.Any(None, [vol.Coerce(float)]),
        vol.Optional("done", default=False): bool,
        vol.Optional("token_count", default=None): vol.Any(None, vol.All(int, vol.Range(min=0))),
    }
)


@attrs.frozen
class BridgeMessage:
    """One line of the bridge protocol."""

    kind: str
    episode_id: str
    turn: int
    payload: str = ""
    token_logprobs: tuple[float, ...] | None = None
    done: bool = False
    token_count: int | None = None

    def to_line(self) -> bytes:
        """Return the message as one encoded line."""
        body: dict[str, Any] = {
            "kind": self.kind,
            "episode_id": self.episode_id,
            "turn": self.turn,
            "payload": self.payload,
            "done": self.done,
        }
        if self.token_logprobs is not None:
            body["token_logprobs"] = list(self.token_logprobs)
        if self.token_count is not None:
            body["token_count"] = self.token_count
        return (canonical_json(body) + "\n").encode()

    @classmethod
    def from_line(cls, line: bytes | str) -> BridgeMessage:
        """Parse one line; raises ProtocolError on anything malformed."""
        text = line.decode("utf-8", errors="replace") if isinstance(line, bytes) else line
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            msg = f"Line is not JSON: {err}"
            raise ProtocolError(msg) from err
        if not isinstance(data, dict):
            msg = f"Expected a JSON object, got {type(data).__name__}"
            raise ProtocolError(msg)
        try:
            valid = MESSAGE_SCHEMA(data)
        except vol.Invalid as err:
            msg = f"Invalid message: {err}"
            raise ProtocolError(msg) from err
        logprobs = valid["token_logprobs"]
        return cls(
            kind=valid["kind"],
            episode_id=valid["episode_id"],
            turn=valid["turn"],
            payload=valid["payload"],
            token_logprobs=None if logprobs is None else tuple(logprobs),
            done=valid["done"],
            token_count=valid["token_count"],
        )


class LineReader(Protocol):
    """Anything with an awaitable readline, such as asyncio.StreamReader."""

    async def readline(self) -> bytes:
        """Return the next line, b"" at end of stream."""


class LineWriter(Protocol):
    """Anything with write and an awaitable drain, such as asyncio.StreamWriter."""

    def write(self, data: bytes) -> None:
        """Queue bytes."""

    async def drain(self) -> None:
        """Flush queued bytes."""


@attrs.frozen
class EpisodeReport:
    """Outcome of one bridged episode."""

    episode_id: str
    task_id: str
    trajectory: Trajectory
    reward: RewardBreakdown | None
    aborted: bool = False
    diagnostic: str = ""


class TaskFeed:
    """Hands out tasks to sessions, each task once."""

    def __init__(self, tasks: Iterable[Task]) -> None:
        """Initialize the feed."""
        self._tasks = list(tasks)
        self._next = 0
        self._lock = asyncio.Lock()

    async def take(self) -> tuple[int, Task] | None:
        """Return the next (index, task), None once the feed is drained."""
        async with self._lock:
            if self._next >= len(self._tasks):
                return None
            index = self._next
            self._next += 1
            return index, self._tasks[index]

    @property
    def drained(self) -> bool:
        """Return True once every task has been handed out."""
        return self._next >= len(self._tasks)


class BridgeSession:
    """
    One client connection.

    Every episode runs on the session's own environment, so concurrent
    sessions never share state.
    """

    def __init__(  # noqa: PLR0913
        self,
        reader: LineReader,
        writer: LineWriter,
        config: EpisodeConfig | None = None,
        store: KnowledgeStore | None = None,
        timeout: float = DEFAULT_BRIDGE_TIMEOUT,
        *,
        require_logprobs: bool = False,
    ) -> None:
        """Initialize the session."""
        self.reader = reader
        self.writer = writer
        self.env = ClinicalEnv(config, store)
        self.timeout = timeout
        self.require_logprobs = require_logprobs
        self.reports: list[EpisodeReport] = []

    async def _send(self, message: BridgeMessage) -> None:
        self.writer.write(message.to_line())
        await self.writer.drain()

    async def _receive(self, episode_id: str, turn: int) -> BridgeMessage:
        line = await asyncio.wait_for(self.reader.readline(), self.timeout)
        if not line:
            msg = "Client closed the stream mid-episode"
            raise ProtocolError(msg)
        message = BridgeMessage.from_line(line)
        if message.kind != KIND_ACTION:
            msg = f"Expected an action message, got {message.kind!r}"
            raise ProtocolError(msg)
        if message.episode_id != episode_id or message.turn != turn:
            msg = f"Expected episode {episode_id} turn {turn}, got {message.episode_id} turn {message.turn}"
            raise ProtocolError(msg)
        if self.require_logprobs and message.token_logprobs is None:
            msg = f"Turn {turn}: this server requires token_logprobs"
            raise ProtocolError(msg)
        return message

    async def run_episode(self, task: Task, episode_id: str) -> EpisodeReport:
        """Drive one episode against the client."""
        env = self.env
        observation = env.reset(task)
        turn = 0
        diagnostic = ""
        while not env.finished:
            await self._send(BridgeMessage(KIND_OBSERVATION, episode_id, turn, observation.render()))
            try:
                message = await self._receive(episode_id, turn)
                result = env.step(message.payload, message.token_count, message.token_logprobs)
            except TimeoutError:
                diagnostic = f"Client sent no action for turn {turn} within {self.timeout}s"
                _LOGGER.warning("Episode %s: %s", episode_id, diagnostic)
                env.abort()
                break
            except ClinigymError as err:
                diagnostic = f"Protocol violation at turn {turn}: {err}"
                _LOGGER.error("Episode %s aborted: %s", episode_id, diagnostic)  # noqa: TRY400
                env.abort()
                break
            last = env.trajectory.turns[-1]
            await self._send(BridgeMessage(KIND_RESULT, episode_id, turn, last.tool_result_text, done=env.finished))
            observation = result.observation
            turn += 1

        reward = env.reward
        payload: dict[str, Any] = reward.to_dict() if reward is not None else {}
        if diagnostic:
            payload["diagnostic"] = diagnostic
        await self._send(BridgeMessage(KIND_END, episode_id, turn, canonical_json(payload), done=True))
        report = EpisodeReport(episode_id, task.id, env.trajectory, reward, bool(diagnostic), diagnostic)
        self.reports.append(report)
        return report

    async def run(self, feed: TaskFeed) -> list[EpisodeReport]:
        """Run episodes until the feed is drained or an episode is aborted."""
        while (item := await feed.take()) is not None:
            index, task = item
            report = await self.run_episode(task, f"ep-{index:04d}")
            if report.aborted:
                break
        return self.reports


async def serve_streams(  # noqa: PLR0913
    reader: LineReader,
    writer: LineWriter,
    tasks: Iterable[Task],
    config: EpisodeConfig | None = None,
    store: KnowledgeStore | None = None,
    timeout: float = DEFAULT_BRIDGE_TIMEOUT,
    *,
    require_logprobs: bool = False,
) -> list[EpisodeReport]:
    """Run a single session over a pair of streams."""
    session = BridgeSession(reader, writer, config, store, timeout, require_logprobs=require_logprobs)
    return await session.run(TaskFeed(tasks))


class _StdinReader:
    async def readline(self) -> bytes:
        line = await asyncio.get_running_loop().run_in_executor(None, sys.stdin.buffer.readline)
        return bytes(line)


class _StdoutWriter:
    def write(self, data: bytes) -> None:
        sys.stdout.buffer.write(data)

    async def drain(self) -> None:
        sys.stdout.buffer.flush()


async def serve_stdio(  # noqa: PLR0913
    tasks: Iterable[Task],
    config: EpisodeConfig | None = None,
    store: KnowledgeStore | None = None,
    timeout: float = DEFAULT_BRIDGE_TIMEOUT,
    *,
    require_logprobs: bool = False,
) -> list[EpisodeReport]:
    """Serve one session on standard input and output."""
    _LOGGER.info("Bridge session opened on stdio")
    reports = await serve_streams(
        _StdinReader(), _StdoutWriter(), tasks, config, store, timeout, require_logprobs=require_logprobs
    )
    _LOGGER.info("Bridge session on stdio closed after %s episodes", len(reports))
    return reports


async def serve_tcp(  # noqa: PLR0913
    tasks: Iterable[Task],
    host: str = DEFAULT_BRIDGE_HOST,
    port: int = DEFAULT_BRIDGE_PORT,
    config: EpisodeConfig | None = None,
    store: KnowledgeStore | None = None,
    timeout: float = DEFAULT_BRIDGE_TIMEOUT,
    *,
    require_logprobs: bool = False,
) -> list[EpisodeReport]:
    """
    Serve connections until every task has been handed out and finished.

    Each connection is a session pulling tasks from one shared feed.
    """
    feed = TaskFeed(tasks)
    reports: list[EpisodeReport] = []
    if feed.drained:
        return reports
    active = 0
    finished = asyncio.Event()

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        nonlocal active
        active += 1
        peer = writer.get_extra_info("peername")
        _LOGGER.info("Bridge session opened for %s", peer)
        session = BridgeSession(reader, writer, config, store, timeout, require_logprobs=require_logprobs)
        try:
            reports.extend(await session.run(feed))
        except (ConnectionError, asyncio.IncompleteReadError) as err:
            _LOGGER.warning("Bridge session for %s lost: %s", peer, err)
        finally:
            writer.close()
            with contextlib.suppress(ConnectionError):
                await writer.wait_closed()
            _LOGGER.info("Bridge session for %s closed", peer)
            active -= 1
            if feed.drained and not active:
                finished.set()

    server = await asyncio.start_server(handle, host, port)
    _LOGGER.info("Bridge listening on %s:%s", host, port)
    async with server:
        await finished.wait()
    return reports
