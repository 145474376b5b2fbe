import math

import numpy as np
import pytest

from clinigym.config import TrainerConfig
from clinigym.const import CHECKPOINT_MAGIC, HINT_CORRECTIVE, HINT_REINFORCING
from clinigym.exceptions import CheckpointError, ContractViolationError, EmptySuiteError
from clinigym.metrics import check_steps
from clinigym.policy import VOCABULARY, GradientItem, PolicyContext, ToySoftmaxPolicy, analytic_gradient
from clinigym.trainer import (
    Checkpoint,
    HintCatalog,
    PrivilegedContext,
    RolloutGroup,
    Trainer,
    TrainingSample,
    clip_grad_norm,
    dynamic_filter,
    ema_update,
    grpo_loss,
    group_advantages,
    hard_copy,
    load_checkpoint,
    position_kl,
    privileged_context,
    save_checkpoint,
    total_loss,
    turn_level_kl,
)
from clinigym.trajectory import Trajectory

CONTEXT = PolicyContext(turn=0, case_id="mc-1-0000")
SMALL = {"steps": 3, "batch_prompts": 2, "group_size": 2, "train_tasks": 4, "validation_tasks": 2}


def _tokens(*names):
    return tuple(VOCABULARY.id_of(name) for name in names)


def _sample(policy, turns, advantage=1.0, teacher=None):
    contexts = [CONTEXT] * len(turns)
    old = [policy.logprob_of(CONTEXT, tokens) for tokens in turns]
    return TrainingSample(contexts, turns, old, advantage, teacher or PrivilegedContext(contexts))


def test_group_advantages():
    assert group_advantages([1.0, 0.0, 0.5]) == pytest.approx([1.2247, -1.2247, 0.0], abs=1e-4)
    assert np.array_equal(group_advantages([0.3, 0.3]), [0.0, 0.0])
    with pytest.raises(ContractViolationError):
        group_advantages([1.0])


def test_group_advantages_are_standardized():
    rng = np.random.default_rng(47)
    for index in range(10_000):
        size = int(rng.integers(2, 9))
        rewards = rng.integers(0, 2, size).astype(float) if index % 2 else rng.random(size)
        advantages = group_advantages(rewards)
        sigma = float(np.std(rewards))
        if sigma == 0:
            assert not advantages.any()
            continue
        assert abs(float(advantages.mean())) < 1e-9
        assert float(advantages.std()) == pytest.approx(sigma / (sigma + 1e-6), rel=1e-9)
        assert np.array_equal(np.argsort(advantages, kind="stable"), np.argsort(rewards, kind="stable"))


def test_dynamic_filter_keeps_mixed_groups():
    def group(name, flags):
        return RolloutGroup(name, [Trajectory(name) for _ in flags], [float(f) for f in flags], flags)

    groups = [
        group("a", [True, True]),
        group("b", [True, False]),
        group("c", [False, False]),
        group("d", [False, True]),
    ]
    assert [g.task_id for g in dynamic_filter(groups)] == ["b", "d"]


def test_rollout_group_checks():
    with pytest.raises(ContractViolationError, match="other tasks"):
        RolloutGroup("a", [Trajectory("b")], [1.0], [True])
    with pytest.raises(ContractViolationError, match="length"):
        RolloutGroup("a", [Trajectory("a")], [1.0, 0.0], [True])


def test_grpo_on_fresh_samples():
    policy = ToySoftmaxPolicy()
    tokens = _tokens("check", "lookup_fact", "<end>")
    result = grpo_loss(policy, [_sample(policy, [tokens], advantage=2.0)])
    assert result.loss == pytest.approx(-6.0)
    assert result.clip_activations == 0
    assert result.max_ratio_deviation == 0.0
    expected = analytic_gradient(policy, [GradientItem(CONTEXT, tokens, [-2.0, -2.0, -2.0])])
    assert np.allclose(result.gradient, expected)


def test_grpo_clips_large_ratios():
    policy = ToySoftmaxPolicy()
    tokens = _tokens("submit_answer", "A", "<end>")
    old = policy.logprob_of(CONTEXT, tokens) - 0.5
    sample = TrainingSample([CONTEXT], [tokens], [old], 1.0, PrivilegedContext([CONTEXT]))
    result = grpo_loss(policy, [sample], clip_epsilon=0.2, kl_beta=0.0)
    assert result.clip_activations == 3
    assert result.loss == pytest.approx(-3 * 1.2)
    assert np.allclose(result.gradient, 0.0)


def test_grpo_empty_batch():
    result = grpo_loss(ToySoftmaxPolicy(), [])
    assert result.loss == 0.0
    assert not result.gradient.any()


def test_training_sample_shapes():
    with pytest.raises(ContractViolationError, match="mismatch"):
        TrainingSample([CONTEXT], [], [], 0.0, PrivilegedContext([CONTEXT]))
    with pytest.raises(ContractViolationError, match="Turn 0"):
        TrainingSample([CONTEXT], [_tokens("the")], [np.zeros(2)], 0.0, PrivilegedContext([CONTEXT]))


def test_position_kl():
    kl, _ = position_kl(np.log([[0.5, 0.5]]), np.log([[0.9, 0.1]]))
    assert kl[0] == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(5.0))
    same, derivative = position_kl(np.log([[0.2, 0.8]]), np.log([[0.2, 0.8]]))
    assert same[0] == pytest.approx(0.0)
    assert np.allclose(derivative, 0.0)


def test_turn_level_kl_against_itself_is_zero():
    policy = ToySoftmaxPolicy()
    sample = _sample(policy, [_tokens("lookup_fact", "<end>"), _tokens("submit_answer", "B", "<end>")])
    result = turn_level_kl(policy, ToySoftmaxPolicy(policy.theta), sample, 64)
    assert result.total == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(result.gradient, 0.0)


def test_turn_level_kl_matches_direct_average():
    student = ToySoftmaxPolicy()
    teacher = ToySoftmaxPolicy(np.zeros_like(student.theta))
    tokens = _tokens("check", "note", "think", "<end>")
    result = turn_level_kl(student, teacher, _sample(student, [tokens]), 64)
    _, logp = student.log_probs(CONTEXT, tokens)
    expected = np.mean(np.sum(np.exp(logp) * (logp + math.log(64)), axis=1))
    assert result.total == pytest.approx(expected)


def test_turns_past_the_limit_contribute_nothing():
    student = ToySoftmaxPolicy()
    teacher = ToySoftmaxPolicy(np.zeros_like(student.theta))
    turns = [_tokens("lookup_fact", "<end>"), _tokens("assess_case", "<end>"), ()]
    result = turn_level_kl(student, teacher, _sample(student, turns), 3)
    assert result.per_turn[0] > 0.0
    assert result.per_turn[1:] == (0.0, 0.0)
    assert result.total == result.per_turn[0]


def test_hint_positions_are_excluded():
    student = ToySoftmaxPolicy()
    teacher = ToySoftmaxPolicy(include_hint=True)
    tokens = _tokens("lookup_fact", "<end>")
    hint = VOCABULARY.encode_text("Revisit the differential diagnosis.")
    hinted = PrivilegedContext([CONTEXT.with_hint(HINT_CORRECTIVE)], hint)
    assert hinted.excluded == (0, 1, 2, 3)
    result = turn_level_kl(student, teacher, _sample(student, [tokens], teacher=hinted), 64)
    assert len(result.per_turn) == 1
    assert math.isfinite(result.total)
    assert result.gradient.shape == student.theta.shape


def test_distillation_weight():
    student = ToySoftmaxPolicy()
    teacher = ToySoftmaxPolicy(np.zeros_like(student.theta))
    batch = [_sample(student, [_tokens("lookup_fact", "<end>")], advantage=0.5)]
    plain = grpo_loss(student, batch)
    off = total_loss(student, teacher, batch, TrainerConfig(variant="full", lambda_distill=0.0))
    assert off.loss == pytest.approx(plain.loss)
    assert np.allclose(off.gradient, plain.gradient)
    baseline = total_loss(student, teacher, batch, TrainerConfig(variant="grpo"))
    assert baseline.loss_distill == 0.0
    full = total_loss(student, teacher, batch, TrainerConfig(variant="full"))
    assert full.loss == pytest.approx(plain.loss + 4.0 * full.mean_kl)


def test_hint_catalog():
    catalog = HintCatalog()
    flag, text = catalog.select(True, "task-1")  # noqa: FBT003
    assert flag == HINT_REINFORCING
    assert text in catalog.reinforcing
    assert catalog.select(True, "task-1") == (flag, text)  # noqa: FBT003
    assert catalog.select(False, "task-1")[0] == HINT_CORRECTIVE  # noqa: FBT003
    with pytest.raises(ContractViolationError):
        HintCatalog(reinforcing=())


def test_privileged_context_leaves_student_view_alone(micro_task):
    trajectory = Trajectory(micro_task.id)
    view = privileged_context(trajectory, micro_task.task.ticket, correct=False)
    assert view.contexts == ()
    assert view.hint_tokens
    assert all(VOCABULARY.kind(t) == "word" for t in view.hint_tokens)


def test_ema_update():
    teacher = np.ones((2, 2))
    student = np.zeros((2, 2))
    for _ in range(60):
        teacher = ema_update(teacher, student, 0.995)
    assert teacher[0, 0] == pytest.approx(0.995**60)
    assert teacher[0, 0] == pytest.approx(0.7405, abs=1e-3)
    with pytest.raises(ContractViolationError, match="shape"):
        ema_update(teacher, np.zeros(3), 0.5)


def test_hard_copy_is_a_copy():
    student = np.arange(4.0)
    copied = hard_copy(np.zeros(4), student)
    assert np.array_equal(copied, student)
    assert copied is not student


def test_clip_grad_norm():
    gradient = np.array([3.0, 4.0])
    assert np.allclose(clip_grad_norm(gradient, 1.0), [0.6, 0.8])
    assert clip_grad_norm(gradient, 10.0) is gradient
    assert clip_grad_norm(gradient, None) is gradient


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    checkpoint = Checkpoint(12, 4, rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, checkpoint)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    loaded = load_checkpoint(path)
    assert (loaded.step, loaded.steps_since_copy) == (12, 4)
    assert np.array_equal(loaded.student, checkpoint.student)
    assert np.array_equal(loaded.teacher, checkpoint.teacher)


@pytest.mark.parametrize(
    ("mutate", "message"),
    [
        (lambda data: b"NOTACKPT" + data[8:], "not a clinigym checkpoint"),
        (lambda data: data[:12], "truncated header"),
        (lambda data: data[:-8], "expected"),
        (lambda data: data[:8] + b"\x02\x00" + data[10:], "version"),
    ],
)
def test_corrupt_checkpoints(tmp_path, mutate, message):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, Checkpoint(1, 0, np.zeros((2, 2)), np.ones((2, 2))))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="Cannot read"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_trainer_needs_tasks():
    with pytest.raises(EmptySuiteError):
        Trainer(TrainerConfig(**SMALL), 0, tasks=[])


def test_teacher_schedule():
    trainer = Trainer(TrainerConfig(variant="full", **SMALL), 0)
    trainer.student.theta += 1.0
    trainer.step = 5
    assert trainer.update_teacher() == ["ema"]
    trainer.step = 30
    assert trainer.update_teacher() == ["ema", "copy"]
    assert trainer.teacher.distance(trainer.student.theta) == 0.0
    assert trainer.teacher.steps_since_copy == 0
    trainer.step = 7
    assert trainer.update_teacher() == []
    assert trainer.teacher.steps_since_copy == 1


def test_grpo_variant_keeps_teacher_fixed():
    trainer = Trainer(TrainerConfig(variant="grpo", **SMALL), 0)
    trainer.step = 30
    assert trainer.update_teacher() == []


def test_training_is_reproducible():
    first = Trainer(TrainerConfig(**SMALL), 5).run()
    second = Trainer(TrainerConfig(**SMALL), 5).run()
    assert first == second
    assert [row.step for row in first] == [1, 2, 3]
    check_steps(first)
    for row in first:
        assert 0.0 <= row.validation_accuracy <= 1.0
        assert row.clip_activations == 0
        assert row.skipped == (row.update_norm == 0.0)


def test_checkpoint_resume_matches_uninterrupted_run(tmp_path):
    config = TrainerConfig(**SMALL)
    straight = Trainer(config, 9).run()
    first = Trainer(config, 9)
    first.run(2)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, first.checkpoint())
    resumed = Trainer(config, 9)
    resumed.restore(load_checkpoint(path))
    assert resumed.run(1) == straight[2:]


@pytest.mark.slow
def test_hard_copy_drops_reference_kl():
    config = TrainerConfig(variant="reset", hard_copy_interval=4, steps=8, batch_prompts=4, train_tasks=16)
    rows = Trainer(config, 1).run()
    for row in rows:
        if row.step % 4 == 0 and row.reference_kl_pre > 1e-8:
            assert row.reference_kl < 0.1 * row.reference_kl_pre


@pytest.mark.slow
def test_full_variant_keeps_reference_kl_smooth():
    config = TrainerConfig(variant="full", hard_copy_interval=4, steps=8, batch_prompts=4, train_tasks=16)
    rows = Trainer(config, 1).run()
    assert any(row.reference_kl > 1e-8 for row in rows if row.step % 4 == 0)
    for row in rows:
        if row.reference_kl_pre > 1e-8:
            assert row.reference_kl >= 0.5 * row.reference_kl_pre
