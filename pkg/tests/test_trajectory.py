import pytest

from clinigym.trajectory import (
    FREE_TEXT,
    TOOL_CALL,
    AgentAction,
    Trajectory,
    TurnRecord,
    analyze_action_text,
    parse_action,
    read_trajectories,
    write_trajectories,
)

THINK = '{"name": "think", "arguments": {"thought": "check allergies"}}'


def test_bare_document():
    call, grade = analyze_action_text(f"  {THINK}\n")
    assert call == ("think", {"thought": "check allergies"})
    assert grade == 1.0


def test_fenced_document():
    call, grade = analyze_action_text(f"```json\n{THINK}\n```")
    assert call is not None
    assert call[0] == "think"
    assert grade == 0.8


def test_document_inside_prose():
    call, grade = analyze_action_text(f"Let me think first. {THINK} Then I will answer.")
    assert call == ("think", {"thought": "check allergies"})
    assert grade == 0.8


def test_string_encoded_arguments():
    call, grade = analyze_action_text('{"name": "submit_answer", "arguments": "{\\"answer\\": \\"B\\"}"}')
    assert call == ("submit_answer", {"answer": "B"})
    assert grade == 1.0


@pytest.mark.parametrize(
    "text",
    ['{"name": "think"}', '{"name": "", "arguments": {}}', '{"name": "think", "arguments": {"thought": '],
)
def test_partial_structure(text):
    call, grade = analyze_action_text(text)
    assert call is None
    assert grade == 0.5


@pytest.mark.parametrize("text", ["", "The answer is B.", "[1, 2, 3]"])
def test_no_structure(text):
    assert analyze_action_text(text) == (None, 0.0)


def test_parse_action_never_raises():
    assert parse_action(THINK).kind == TOOL_CALL
    assert parse_action(THINK).is_think
    assert parse_action(b"\xff\xfe not text").kind == FREE_TEXT
    assert parse_action(42).raw_text == "42"
    submit = parse_action('{"name": "submit_answer", "arguments": {"answer": "C"}}')
    assert submit.is_submit
    assert not submit.is_think


def test_turn_record_checks_logprob_count():
    action = parse_action(THINK)
    with pytest.raises(ValueError, match="does not match"):
        TurnRecord(0, action, per_token_logprobs=[-0.1, -0.2], token_count=3)
    assert TurnRecord(0, action, per_token_logprobs=[-0.1], token_count=1).per_token_logprobs == (-0.1,)


def test_trajectory_totals():
    turns = [
        TurnRecord(0, parse_action(THINK), token_count=12),
        TurnRecord(1, parse_action("just text"), token_count=3),
    ]
    trajectory = Trajectory("t1", turns)
    assert trajectory.total_response_tokens == 15
    assert not trajectory.finished
    assert [t.turn_index for t in trajectory.tool_calls()] == [0]
    trajectory.terminated_by = "context_limit"
    assert trajectory.finished
    assert trajectory.truncated


def test_read_fixture_log(pharmacology_log):
    (trajectory,) = read_trajectories(pharmacology_log)
    assert trajectory.task_id == "example-pharmacology"
    assert trajectory.terminated_by == "submit"
    assert trajectory.final_answer == "A"
    assert [t.action.tool_name for t in trajectory.turns] == [
        "think",
        "retrieve_evidence",
        "search_medical_wiki",
        "analyze_answer_options",
        "submit_answer",
    ]


def test_log_round_trip(tmp_path, pharmacology_log):
    original = read_trajectories(pharmacology_log)
    extra = Trajectory(
        "t2",
        [TurnRecord(0, AgentAction(TOOL_CALL, THINK, "think", {}, (3, 4)), "{}", (-0.5, -0.25), 2, True)],
    )
    path = tmp_path / "log.jsonl"
    assert write_trajectories(path, [*original, extra]) == 2
    assert [t.to_dict() for t in read_trajectories(path)] == [t.to_dict() for t in [*original, extra]]


@pytest.mark.parametrize(
    "line",
    ["not json", '{"turns": []}', '{"task_id": "t", "terminated_by": "timeout"}'],
)
def test_read_rejects_malformed_logs(tmp_path, line):
    path = tmp_path / "log.jsonl"
    path.write_text(line + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"log\.jsonl:1"):
        read_trajectories(path)
