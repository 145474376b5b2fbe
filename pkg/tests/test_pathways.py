import pytest
from conftest import call

from clinigym.exceptions import TaskValidationError
from clinigym.pathways import (
    CHEST_PAIN,
    PATHWAYS,
    SEPSIS_BUNDLE,
    PathwayPhase,
    PathwaySpec,
    entry_turns,
    evaluate_pathway,
)
from clinigym.tasks import ExpectedAction
from clinigym.trajectory import Trajectory, TurnRecord, parse_action

TWO_PHASE = PathwaySpec(
    "assess_then_treat",
    (
        PathwayPhase(
            "assess",
            "triage_emergency",
            required_actions=(ExpectedAction("get_vital_signs"),),
            nl_assertions=("tachycardia",),
        ),
        PathwayPhase("treat", "clinical_diagnosis", required_actions=(ExpectedAction("prescribe"),)),
    ),
)


def _trajectory(*steps):
    turns = []
    for index, step in enumerate(steps):
        text, result = step if isinstance(step, tuple) else (step, "")
        turns.append(TurnRecord(index, parse_action(text), result, tool_ok=True))
    return Trajectory("t", turns, "submit")


VITALS = (call("get_vital_signs", patient_id="p5"), '{"ok":true,"result":{"note":"tachycardia"}}')
PRESCRIBE = call("prescribe", patient_id="p5", drug="ceftriaxone", dose_mg=2000)

CHEST_PAIN_STEPS = [
    (call("get_chief_complaint", patient_id="p1"), '{"ok":true,"result":{"complaint":"chest pain"}}'),
    call("order_stat_ecg", patient_id="p1"),
    call("order_lab", patient_id="p1", test="troponin"),
    call("generate_ddx", symptoms="chest pain diaphoresis"),
    call("check_interaction", drug_a="aspirin", drug_b="lisinopril"),
]


def test_two_phases_completed():
    result = evaluate_pathway(_trajectory(VITALS, PRESCRIBE), TWO_PHASE)
    assert result.overall == 1.0
    assert [p.entered for p in result.phases] == [True, True]


def test_stopping_after_first_phase():
    result = evaluate_pathway(_trajectory(VITALS), TWO_PHASE)
    assert result.overall == 0.5
    assert result.phases[0].score == 1.0
    assert result.phases[1].score == 0.0


def test_empty_trajectory():
    result = evaluate_pathway(Trajectory("t"), TWO_PHASE)
    assert result.overall == 0.0
    assert [p.entered for p in result.phases] == [False, False]
    assert entry_turns(Trajectory("t"), TWO_PHASE) == [None, None]


def test_phase_score_mixes_coverage_and_assertions():
    silent_vitals = call("get_vital_signs", patient_id="p5")
    result = evaluate_pathway(_trajectory(silent_vitals, PRESCRIBE), TWO_PHASE)
    assert result.phases[0].coverage == 1.0
    assert result.phases[0].assertion_fraction == 0.0
    assert result.phases[0].score == 0.5
    assert result.phases[1].assertion_fraction is None
    assert result.overall == 0.75


def test_adding_a_required_action_never_lowers_the_score():
    phase = PathwayPhase(
        "workup",
        "clinical_diagnosis",
        required_actions=(ExpectedAction("order_lab"), ExpectedAction("generate_ddx")),
        nl_assertions=("troponin",),
    )
    pathway = PathwaySpec("workup_only", (phase, PathwayPhase("done", "medical_qa")))
    partial = evaluate_pathway(_trajectory(call("order_lab", patient_id="p1", test="troponin")), pathway)
    fuller = evaluate_pathway(
        _trajectory(call("order_lab", patient_id="p1", test="troponin"), call("generate_ddx", symptoms="chest pain")),
        pathway,
    )
    assert fuller.phases[0].score >= partial.phases[0].score
    assert fuller.phases[0].score == 1.0


def test_chest_pain_pathway():
    trajectory = _trajectory(*CHEST_PAIN_STEPS)
    assert entry_turns(trajectory, CHEST_PAIN) == [0, 2, 4]
    result = evaluate_pathway(trajectory, CHEST_PAIN)
    assert result.overall == 1.0
    assert [p.turns_used for p in result.phases] == [2, 2, 1]
    assert not any(p.over_budget for p in result.phases)


def test_slow_triage_is_over_budget_without_losing_score():
    thinking = [call("think", thought="Gather history first."), call("think", thought="Now the complaint.")]
    result = evaluate_pathway(_trajectory(*thinking, *CHEST_PAIN_STEPS), CHEST_PAIN)
    triage = result.phases[0]
    assert triage.turns_used == 4
    assert triage.over_budget
    assert triage.score == 1.0
    assert result.overall == 1.0


def test_result_contains_transition():
    steps = [
        (call("calculate_qsofa", patient_id="p5"), '{"ok":true,"result":{"score":3}}'),
        (call("activate_sepsis_protocol", patient_id="p5"), '{"ok":true,"result":{"status":"sepsis protocol"}}'),
        call("get_culture_results", encounter_id="p5"),
    ]
    assert entry_turns(_trajectory(*steps), SEPSIS_BUNDLE) == [0, 2, None]


def test_to_dict():
    document = evaluate_pathway(_trajectory(VITALS), TWO_PHASE).to_dict()
    assert document["overall"] == 0.5
    assert [p["name"] for p in document["phases"]] == ["assess", "treat"]


def test_fixtures_are_registered():
    assert sorted(PATHWAYS) == ["chest_pain", "sepsis_bundle"]
    assert CHEST_PAIN.domains == ["triage_emergency", "clinical_diagnosis", "drug_interaction"]


def test_pathway_needs_two_phases():
    with pytest.raises(TaskValidationError, match="at least 2"):
        PathwaySpec("single", (PathwayPhase("only", "medical_qa"),))


@pytest.mark.parametrize(
    ("kwargs", "message"),
    [
        ({"transition_condition": "on_timeout"}, "unknown transition"),
        ({"transition_condition": "after_tool"}, "needs an argument"),
    ],
)
def test_phase_validation(kwargs, message):
    with pytest.raises(TaskValidationError, match=message):
        PathwayPhase("p", "medical_qa", **kwargs)


def test_after_tool_must_name_a_required_tool():
    waiting = PathwayPhase("wait", "medical_qa", transition_condition="after_tool", transition_argument="order_lab")
    with pytest.raises(TaskValidationError, match="order_lab"):
        PathwaySpec("bad", (waiting, PathwayPhase("next", "medical_qa")))
