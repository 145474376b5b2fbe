import asyncio
import json

import pytest
from conftest import call

from clinigym.bridge import BridgeMessage, BridgeSession, TaskFeed, serve_streams
from clinigym.config import EpisodeConfig
from clinigym.env import score_trajectory
from clinigym.exceptions import ProtocolError


class Collector:
    """Writer that keeps every line sent to the client."""

    def __init__(self):
        self.data = b""

    def write(self, data):
        self.data += data

    async def drain(self):
        pass

    @property
    def messages(self):
        return [BridgeMessage.from_line(line) for line in self.data.splitlines()]


class Silent:
    async def readline(self):
        await asyncio.sleep(10)
        return b""


def _action(episode_id, turn, text, **extra):
    return BridgeMessage("action", episode_id, turn, text, **extra).to_line()


def _serve(lines, tasks, store, **kwargs):
    async def run():
        reader = asyncio.StreamReader()
        for line in lines:
            reader.feed_data(line)
        reader.feed_eof()
        writer = Collector()
        reports = await serve_streams(reader, writer, tasks, EpisodeConfig(), store, **kwargs)
        return reports, writer.messages

    return asyncio.run(run())


def test_message_line_is_canonical():
    line = BridgeMessage("action", "ep-0000", 2, "x", token_count=3).to_line()
    assert line.endswith(b"\n")
    assert list(json.loads(line)) == sorted(json.loads(line))
    assert BridgeMessage.from_line(line) == BridgeMessage("action", "ep-0000", 2, "x", token_count=3)


@pytest.mark.parametrize(
    "line",
    [
        b"not json",
        b"[1, 2]",
        b'{"kind": "shout", "episode_id": "ep-0000", "turn": 0}',
        b'{"kind": "action", "episode_id": "ep-0000", "turn": -1}',
        b'{"kind": "action", "turn": 0}',
    ],
)
def test_malformed_messages(line):
    with pytest.raises(ProtocolError):
        BridgeMessage.from_line(line)


def test_episode_over_streams(qa_tasks, store):
    task = qa_tasks[0]
    lines = [
        _action("ep-0000", 0, call("search_pubmed", query="bradykinin"), token_count=12),
        _action("ep-0000", 1, call("submit_answer", answer="A", reasoning="ACE inhibitors raise bradykinin.")),
    ]
    reports, messages = _serve(lines, [task], store)
    assert [m.kind for m in messages] == ["observation", "result", "observation", "result", "end"]
    assert messages[0].payload.startswith("=== SYSTEM ===")
    assert messages[-2].done
    assert messages[-1].done

    (report,) = reports
    assert not report.aborted
    assert report.trajectory.final_answer == "A"
    end = json.loads(messages[-1].payload)
    assert end["total"] == report.reward.total
    assert report.reward.total == score_trajectory(report.trajectory, task, store=store).total


def test_sessions_run_the_feed_in_order(qa_tasks, store):
    lines = [_action(f"ep-{i:04d}", 0, call("submit_answer", answer="B")) for i in range(2)]
    reports, messages = _serve(lines, qa_tasks[:2], store)
    assert [r.episode_id for r in reports] == ["ep-0000", "ep-0001"]
    assert [r.task_id for r in reports] == [t.id for t in qa_tasks[:2]]
    assert sum(m.kind == "end" for m in messages) == 2


def test_malformed_action_aborts_episode(qa_tasks, store):
    reports, messages = _serve([b"{broken\n"], qa_tasks[:2], store)
    (report,) = reports
    assert report.aborted
    assert "Protocol violation at turn 0" in report.diagnostic
    assert report.trajectory.terminated_by == "turn_limit"
    end = json.loads(messages[-1].payload)
    assert "diagnostic" in end
    assert "total" in end


def test_out_of_order_turn_aborts(qa_tasks, store):
    reports, _ = _serve([_action("ep-0000", 3, call("think"))], qa_tasks[:1], store)
    assert "Expected episode ep-0000 turn 0" in reports[0].diagnostic


def test_closed_stream_aborts(qa_tasks, store):
    reports, _ = _serve([], qa_tasks[:1], store)
    assert reports[0].aborted
    assert "closed the stream" in reports[0].diagnostic


def test_logprobs_can_be_required(qa_tasks, store):
    missing = [_action("ep-0000", 0, call("think"))]
    reports, _ = _serve(missing, qa_tasks[:1], store, require_logprobs=True)
    assert "requires token_logprobs" in reports[0].diagnostic
    given = [_action("ep-0000", 0, call("submit_answer", answer="A"), token_logprobs=(-0.5, -0.25))]
    reports, _ = _serve(given, qa_tasks[:1], store, require_logprobs=True)
    assert not reports[0].aborted
    assert reports[0].trajectory.turns[0].token_count == 2


def test_silent_client_times_out(qa_tasks, store):
    async def run():
        writer = Collector()
        session = BridgeSession(Silent(), writer, EpisodeConfig(), store, timeout=0.05)
        reports = await session.run(TaskFeed(qa_tasks[:1]))
        return reports, writer.messages

    reports, messages = asyncio.run(run())
    assert reports[0].aborted
    assert "no action for turn 0" in reports[0].diagnostic
    assert messages[-1].kind == "end"


def test_task_feed_hands_out_each_task_once(qa_tasks):
    async def drain():
        feed = TaskFeed(qa_tasks)
        taken = []
        while (item := await feed.take()) is not None:
            taken.append(item[0])
        return taken, feed.drained

    assert asyncio.run(drain()) == ([0, 1, 2], True)
