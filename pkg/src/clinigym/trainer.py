"""GRPO with turn-level truncated distillation towards an outcome-conditioned EMA teacher."""

from __future__ import annotations

import logging
import math
import struct
from pathlib import Path
from typing import TYPE_CHECKING

import attrs
import numpy as np

from .config import CosineRewardParams, EpisodeConfig, TrainerConfig
from .const import (
    ADVANTAGE_EPSILON,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    CORRECTIVE_HINTS,
    DEFAULT_CLIP_EPSILON,
    DEFAULT_KL_BETA,
    HINT_CORRECTIVE,
    HINT_NONE,
    HINT_REINFORCING,
    REINFORCING_HINTS,
    VALIDATION_SEED_OFFSET,
)
from .coordinator import RolloutCoordinator
from .exceptions import CheckpointError, ContractViolationError, EmptySuiteError
from .metrics import MetricsRow
from .micro_clinic import micro_clinic_suite
from .policy import (
    VOCABULARY,
    GradientItem,
    ToySoftmaxPolicy,
    Vocabulary,
    analytic_gradient,
    trajectory_contexts,
)
from .rewards import correctness_mode, cosine_reward, is_correct
from .utils import derive_seed, md5_hex

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from .policy import EpisodeOutcome, PolicyContext
    from .tasks import Task
    from .trajectory import Trajectory

_LOGGER = logging.getLogger(__name__)

REFERENCE_TASKS = 8  # trajectories in the fixed KL reference batch
MAX_RATIO_DEVIATION = 1e-9  # single-pass updates keep the importance ratio at 1
_HEADER = struct.Struct("<HIII")  # version, step, rows, cols
_COPY_COUNTER = struct.Struct("<I")  # steps since the last hard copy


# Advantages and the GRPO surrogate


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Return (R_i − mean) / (population std + 1e-6) for one group."""
    values = np.asarray(rewards, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:  # noqa: PLR2004
        msg = f"A group needs at least 2 rewards, got {values.shape}"
        raise ContractViolationError(msg)
    return (values - values.mean()) / (values.std() + ADVANTAGE_EPSILON)


@attrs.frozen
class HintCatalog:
    """Hint texts shown to the teacher, chosen by the outcome of a trajectory."""

    reinforcing: tuple[str, ...] = attrs.field(default=REINFORCING_HINTS, converter=tuple)
    corrective: tuple[str, ...] = attrs.field(default=CORRECTIVE_HINTS, converter=tuple)

    def __attrs_post_init__(self) -> None:
        """Both sides carry at least one text."""
        if not self.reinforcing or not self.corrective:
            msg = "A hint catalog needs reinforcing and corrective texts"
            raise ContractViolationError(msg)

    def select(self, correct: bool, key: str) -> tuple[str, str]:  # noqa: FBT001
        """Return the hint flag and a text for an outcome; key picks the text."""
        texts = self.reinforcing if correct else self.corrective
        text = texts[int(md5_hex(key)[:8], 16) % len(texts)]
        return (HINT_REINFORCING if correct else HINT_CORRECTIVE), text


@attrs.frozen
class PrivilegedContext:
    """Teacher view of a trajectory: per-turn contexts and the hint prefix removed from its logprobs."""

    contexts: tuple[PolicyContext, ...] = attrs.field(converter=tuple)
    hint_tokens: tuple[int, ...] = attrs.field(default=(), converter=tuple)

    @property
    def excluded(self) -> tuple[int, ...]:
        """Return the positions of the hint in every teacher sequence."""
        return tuple(range(len(self.hint_tokens)))


def privileged_context(
    trajectory: Trajectory,
    ticket: str,
    correct: bool,  # noqa: FBT001
    catalog: HintCatalog | None = None,
    vocabulary: Vocabulary = VOCABULARY,
) -> PrivilegedContext:
    """
    Build the teacher context of every turn.

    The hint is reinforcing for a correct trajectory and corrective
    otherwise. Its tokens sit at the prompt-response boundary and are
    excluded from the teacher logprobs; student contexts are not touched.
    """
    catalog = catalog or HintCatalog()
    flag, text = catalog.select(correct, trajectory.task_id)
    contexts = [context.with_hint(flag) for context in trajectory_contexts(ticket, trajectory)]
    return PrivilegedContext(contexts, vocabulary.encode_text(text))


@attrs.frozen
class TrainingSample:
    """One trajectory prepared for the loss."""

    contexts: tuple[PolicyContext, ...] = attrs.field(converter=tuple)
    turn_tokens: tuple[tuple[int, ...], ...] = attrs.field(converter=tuple)
    old_logprobs: tuple[np.ndarray, ...] = attrs.field(converter=tuple)
    advantage: float
    teacher: PrivilegedContext

    def __attrs_post_init__(self) -> None:
        """Turns, tokens, logprobs and teacher contexts line up."""
        turns = len(self.contexts)
        if not len(self.turn_tokens) == len(self.old_logprobs) == len(self.teacher.contexts) == turns:
            msg = (
                f"Sample shape mismatch: {turns} contexts, {len(self.turn_tokens)} token lists, "
                f"{len(self.old_logprobs)} logprob lists, {len(self.teacher.contexts)} teacher contexts"
            )
            raise ContractViolationError(msg)
        for index, (tokens, logprobs) in enumerate(zip(self.turn_tokens, self.old_logprobs, strict=True)):
            if np.shape(logprobs) != (len(tokens),):
                msg = f"Turn {index}: {len(tokens)} tokens but logprobs of shape {np.shape(logprobs)}"
                raise ContractViolationError(msg)

    @property
    def token_count(self) -> int:
        """Return the number of response tokens."""
        return sum(len(tokens) for tokens in self.turn_tokens)

    @classmethod
    def from_trajectory(
        cls, trajectory: Trajectory, ticket: str, advantage: float, teacher: PrivilegedContext | None = None
    ) -> TrainingSample:
        """Prepare a toy-policy trajectory; every turn must carry token ids and logprobs."""
        tokens, logprobs = [], []
        for turn in trajectory.turns:
            if turn.per_token_logprobs is None or len(turn.action.token_ids) != len(turn.per_token_logprobs):
                msg = f"Turn {turn.turn_index} of {trajectory.task_id} lacks token ids or logprobs"
                raise ContractViolationError(msg)
            tokens.append(turn.action.token_ids)
            logprobs.append(np.asarray(turn.per_token_logprobs, dtype=np.float64))
        contexts = trajectory_contexts(ticket, trajectory)
        return cls(contexts, tokens, logprobs, float(advantage), teacher or PrivilegedContext(contexts))


@attrs.frozen
class GrpoResult:
    """Clipped surrogate loss and its gradient."""

    loss: float
    gradient: np.ndarray
    clip_activations: int
    max_ratio_deviation: float


def grpo_loss(
    policy: ToySoftmaxPolicy,
    batch: Sequence[TrainingSample],
    clip_epsilon: float = DEFAULT_CLIP_EPSILON,
    kl_beta: float = DEFAULT_KL_BETA,
) -> GrpoResult:
    """
    Return the clipped surrogate loss with a per-token KL penalty to the rollout policy.

    Every token of a trajectory carries its advantage. The KL term uses the
    k3 estimator against the recorded logprobs. The loss is summed over
    tokens and averaged over trajectories.
    """
    if not batch:
        return GrpoResult(0.0, np.zeros_like(policy.theta), 0, 0.0)
    items = []
    loss = 0.0
    clipped = 0
    deviation = 0.0
    for sample in batch:
        advantage = sample.advantage
        for context, tokens, old in zip(sample.contexts, sample.turn_tokens, sample.old_logprobs, strict=True):
            if not tokens:
                continue
            new = policy.logprob_of(context, tokens)
            ratio = np.exp(new - old)
            unclipped = ratio * advantage
            bounded = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage
            surrogate = np.minimum(unclipped, bounded)
            log_gap = old - new
            loss += float(np.sum(-surrogate + kl_beta * (np.exp(log_gap) - log_gap - 1.0)))
            clipped += int(np.count_nonzero(bounded < unclipped))
            deviation = max(deviation, float(np.max(np.abs(ratio - 1.0))))
            coefficients = -unclipped * (unclipped <= bounded) + kl_beta * (1.0 - np.exp(log_gap))
            items.append(GradientItem(context, tokens, coefficients))
    gradient = analytic_gradient(policy, items) if items else np.zeros_like(policy.theta)
    return GrpoResult(loss / len(batch), gradient / len(batch), clipped, deviation)


def dynamic_filter(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """Keep the groups whose correctness flags are not all equal, in order."""
    return [group for group in groups if group.mixed]


# Turn-level KL


def position_kl(student_logp: np.ndarray, teacher_logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Return KL(p ‖ q) per position and its derivative with respect to the student logits.

    The derivative of D = Σ_j p_j (log p_j − log q_j) is p_j (log p_j − log q_j − D).
    """
    p = np.exp(student_logp)
    gap = student_logp - teacher_logp
    kl = np.sum(p * gap, axis=-1)
    return kl, p * (gap - kl[..., None])


@attrs.frozen
class KlResult:
    """Turn-level KL of one trajectory."""

    total: float
    per_turn: tuple[float, ...]
    gradient: np.ndarray


def turn_level_kl(
    student: ToySoftmaxPolicy, teacher: ToySoftmaxPolicy, sample: TrainingSample, max_response_tokens: int
) -> KlResult:
    """
    Return Σ_t (1/|a_t|) Σ_k KL(π_S(·|s_t, a_t^<k) ‖ π_T(·|s_t^+, a_t^<k)) and its gradient in θ_S.

    The teacher scores hint + action; hint positions are dropped before the
    KL. A turn whose cumulative end offset exceeds max_response_tokens, or
    that has no tokens, contributes 0.
    """
    gradient = np.zeros_like(student.theta)
    per_turn = []
    offset = 0
    hint = sample.teacher.hint_tokens
    excluded = np.asarray(sample.teacher.excluded, dtype=np.intp)
    for index, tokens in enumerate(sample.turn_tokens):
        offset += len(tokens)
        if not tokens or offset > max_response_tokens:
            per_turn.append(0.0)
            continue
        phi, student_logp = student.log_probs(sample.contexts[index], tokens)
        _, teacher_logp = teacher.log_probs(sample.teacher.contexts[index], (*hint, *tokens), offset=len(hint))
        kl, dlogits = position_kl(student_logp, np.delete(teacher_logp, excluded, axis=0))
        per_turn.append(float(kl.mean()))
        gradient += phi.T @ dlogits / (len(tokens) * student.temperature)
    return KlResult(math.fsum(per_turn), tuple(per_turn), gradient)


@attrs.frozen
class LossResult:
    """The combined objective L_GRPO + λ·KL and its parts."""

    loss: float
    gradient: np.ndarray
    loss_grpo: float
    loss_distill: float
    mean_kl: float
    clip_activations: int
    max_ratio_deviation: float


def total_loss(
    student: ToySoftmaxPolicy,
    teacher: ToySoftmaxPolicy,
    batch: Sequence[TrainingSample],
    config: TrainerConfig | None = None,
) -> LossResult:
    """Return L_GRPO + λ_distill · mean turn-level KL over the batch, with the gradient in θ_S."""
    config = config or TrainerConfig()
    grpo = grpo_loss(student, batch, config.clip_epsilon, config.kl_beta)
    lam = config.effective_lambda
    mean_kl = 0.0
    kl_gradient = np.zeros_like(student.theta)
    if batch:
        results = [turn_level_kl(student, teacher, sample, config.max_response_tokens) for sample in batch]
        mean_kl = math.fsum(result.total for result in results) / len(batch)
        for result in results:
            kl_gradient += result.gradient
        kl_gradient /= len(batch)
    return LossResult(
        loss=grpo.loss + lam * mean_kl,
        gradient=grpo.gradient + lam * kl_gradient,
        loss_grpo=grpo.loss,
        loss_distill=lam * mean_kl,
        mean_kl=mean_kl,
        clip_activations=grpo.clip_activations,
        max_ratio_deviation=grpo.max_ratio_deviation,
    )


# Teacher schedules


def _check_shapes(teacher: np.ndarray, student: np.ndarray) -> None:
    if teacher.shape != student.shape:
        msg = f"Teacher shape {teacher.shape} differs from student shape {student.shape}"
        raise ContractViolationError(msg)


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    """Return αθ_T + (1−α)θ_S."""
    _check_shapes(teacher, student)
    return alpha * teacher + (1.0 - alpha) * student


def hard_copy(teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
    """Return a copy of θ_S to replace θ_T."""
    _check_shapes(teacher, student)
    return student.copy()


@attrs.define
class TeacherState:
    """Teacher parameters and the steps since the last hard copy."""

    theta: np.ndarray
    steps_since_copy: int = 0

    def distance(self, student: np.ndarray) -> float:
        """Return ‖θ_T − θ_S‖."""
        _check_shapes(self.theta, student)
        return float(np.linalg.norm(self.theta - student))

    def policy(self) -> ToySoftmaxPolicy:
        """Return the teacher as a hint-aware policy."""
        return ToySoftmaxPolicy(self.theta, include_hint=True)


@attrs.frozen
class RolloutGroup:
    """G rollouts of one task with their rewards and correctness flags."""

    task_id: str
    trajectories: tuple[Trajectory, ...] = attrs.field(converter=tuple)
    rewards: tuple[float, ...] = attrs.field(converter=tuple)
    correct: tuple[bool, ...] = attrs.field(converter=tuple)

    def __attrs_post_init__(self) -> None:
        """All trajectories belong to the task; one reward and flag each."""
        if any(t.task_id != self.task_id for t in self.trajectories):
            msg = f"Group of task {self.task_id} holds trajectories of other tasks"
            raise ContractViolationError(msg)
        if not len(self.trajectories) == len(self.rewards) == len(self.correct):
            msg = f"Group of task {self.task_id}: trajectories, rewards and flags differ in length"
            raise ContractViolationError(msg)

    @property
    def mixed(self) -> bool:
        """Return True when the outcomes are neither all correct nor all wrong."""
        return len(set(self.correct)) > 1


def clip_grad_norm(gradient: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Scale a gradient down to max_norm when it is longer."""
    if max_norm is None:
        return gradient
    norm = float(np.linalg.norm(gradient))
    return gradient * (max_norm / norm) if norm > max_norm else gradient


# Checkpoints


@attrs.frozen
class Checkpoint:
    """Saved trainer state."""

    step: int
    steps_since_copy: int
    student: np.ndarray
    teacher: np.ndarray


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint.

    Layout, little-endian: the 8-byte magic, version (u16), step (u32),
    rows (u32), cols (u32), steps since copy (u32), then θ_S and θ_T as
    row-major float64.
    """
    _check_shapes(checkpoint.teacher, checkpoint.student)
    rows, cols = checkpoint.student.shape
    payload = b"".join(
        (
            CHECKPOINT_MAGIC,
            _HEADER.pack(CHECKPOINT_VERSION, checkpoint.step, rows, cols),
            _COPY_COUNTER.pack(checkpoint.steps_since_copy),
            np.ascontiguousarray(checkpoint.student, dtype="<f8").tobytes(),
            np.ascontiguousarray(checkpoint.teacher, dtype="<f8").tobytes(),
        )
    )
    Path(path).write_bytes(payload)
    _LOGGER.debug("Saved checkpoint of step %s to %s", checkpoint.step, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        msg = f"Cannot read checkpoint {path}: {err}"
        raise CheckpointError(msg) from err
    start = len(CHECKPOINT_MAGIC)
    if data[:start] != CHECKPOINT_MAGIC:
        msg = f"{path} is not a clinigym checkpoint"
        raise CheckpointError(msg)
    head_end = start + _HEADER.size + _COPY_COUNTER.size
    if len(data) < head_end:
        msg = f"{path}: truncated header"
        raise CheckpointError(msg)
    version, step, rows, cols = _HEADER.unpack_from(data, start)
    (steps_since_copy,) = _COPY_COUNTER.unpack_from(data, start + _HEADER.size)
    if version != CHECKPOINT_VERSION:
        msg = f"{path}: unsupported checkpoint version {version}"
        raise CheckpointError(msg)
    size = rows * cols * 8
    if len(data) != head_end + 2 * size:
        msg = f"{path}: expected {head_end + 2 * size} bytes, found {len(data)}"
        raise CheckpointError(msg)
    student = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=head_end).reshape(rows, cols)
    teacher = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=head_end + size).reshape(rows, cols)
    return Checkpoint(step, steps_since_copy, student.astype(np.float64), teacher.astype(np.float64))


# Training loop


class Trainer:
    """
    Runs the toy training loop.

    Each step samples prompts, collects G rollouts per prompt with the
    student, scores them, drops groups with uniform outcomes, computes
    group-relative advantages and teacher logprobs, takes one gradient step
    on the combined objective and then applies the teacher schedule.
    """

    def __init__(
        self,
        config: TrainerConfig,
        seed: int,
        tasks: Sequence[Task] | None = None,
        student: ToySoftmaxPolicy | None = None,
    ) -> None:
        """Initialize the trainer; tasks default to a micro-clinic suite drawn from seed."""
        self.config = config
        self.seed = seed
        if tasks is None:
            suite = micro_clinic_suite(seed, config.train_tasks, cue_reliability=config.cue_reliability)
            tasks = [item.task for item in suite]
        self.tasks = list(tasks)
        if not self.tasks:
            msg = "Training needs at least one task"
            raise EmptySuiteError(msg)
        validation = micro_clinic_suite(
            seed + VALIDATION_SEED_OFFSET, config.validation_tasks, cue_reliability=config.cue_reliability
        )
        self.validation_tasks = [item.task for item in validation]
        self.student = student or ToySoftmaxPolicy()
        self.teacher = TeacherState(self.student.theta.copy())
        self.episode_config = EpisodeConfig(max_turns=config.max_turns, max_response_tokens=config.max_response_tokens)
        self.cosine = CosineRewardParams(max_tokens=config.max_response_tokens)
        self.catalog = HintCatalog()
        self.step = 0
        self._tickets = {task.id: task.ticket for task in self.tasks}
        self._reference: list[TrainingSample] | None = None

    # Scoring

    def score(self, task: Task, outcome: EpisodeOutcome) -> tuple[float, bool]:
        """Return the training reward and the correctness flag of one rollout."""
        correct = is_correct(outcome.reward.r_acc, correctness_mode(task))
        if self.config.effective_reward_mode == "accuracy":
            return outcome.reward.r_acc, correct
        trajectory = outcome.trajectory
        return cosine_reward(correct, trajectory.truncated, trajectory.total_response_tokens, self.cosine), correct

    def score_group(self, task: Task, outcomes: Sequence[EpisodeOutcome]) -> RolloutGroup:
        """Score the rollouts of one task."""
        scored = [self.score(task, outcome) for outcome in outcomes]
        return RolloutGroup(
            task_id=task.id,
            trajectories=[outcome.trajectory for outcome in outcomes],
            rewards=[reward for reward, _ in scored],
            correct=[flag for _, flag in scored],
        )

    def teacher_context(self, trajectory: Trajectory, correct: bool) -> PrivilegedContext:  # noqa: FBT001
        """Return the teacher view of a trajectory under the configured variant."""
        ticket = self._tickets[trajectory.task_id]
        if self.config.uses_hints:
            return privileged_context(trajectory, ticket, correct, self.catalog)
        return PrivilegedContext(trajectory_contexts(ticket, trajectory, HINT_NONE))

    def prepare_batch(self, groups: Sequence[RolloutGroup]) -> list[TrainingSample]:
        """Turn kept groups into training samples with advantages and teacher contexts."""
        batch = []
        for group in groups:
            advantages = group_advantages(group.rewards)
            for trajectory, advantage, correct in zip(group.trajectories, advantages, group.correct, strict=True):
                ticket = self._tickets[trajectory.task_id]
                teacher = self.teacher_context(trajectory, correct)
                batch.append(TrainingSample.from_trajectory(trajectory, ticket, float(advantage), teacher))
        return batch

    # Reference KL

    def reference_batch(self) -> list[TrainingSample]:
        """Return the fixed batch the reference KL is measured on, built once from the prior policy."""
        if self._reference is None:
            coordinator = RolloutCoordinator(ToySoftmaxPolicy(), self.seed, self.episode_config)
            samples = []
            for index, task in enumerate(self.tasks[:REFERENCE_TASKS]):
                outcome = coordinator.rollout(task, 0, index)
                _, correct = self.score(task, outcome)
                teacher = self.teacher_context(outcome.trajectory, correct)
                samples.append(TrainingSample.from_trajectory(outcome.trajectory, task.ticket, 0.0, teacher))
            self._reference = samples
        return self._reference

    def reference_kl(self) -> tuple[float, float]:
        """Return the mean KL on the reference batch and the norm of its gradient."""
        batch = self.reference_batch()
        teacher = self.teacher.policy()
        results = [turn_level_kl(self.student, teacher, sample, self.config.max_response_tokens) for sample in batch]
        gradient = np.zeros_like(self.student.theta)
        for result in results:
            gradient += result.gradient
        mean = math.fsum(result.total for result in results) / len(results)
        return mean, float(np.linalg.norm(gradient / len(results)))

    def validation_accuracy(self) -> float:
        """Return the accuracy of one sampled rollout per held-out task."""
        coordinator = RolloutCoordinator(self.student, self.seed + VALIDATION_SEED_OFFSET, self.episode_config)
        hits = 0
        for index, task in enumerate(self.validation_tasks):
            outcome = coordinator.rollout(task, self.step, index)
            hits += is_correct(outcome.reward.r_acc, correctness_mode(task))
        return hits / len(self.validation_tasks) if self.validation_tasks else 0.0

    # Teacher

    def update_teacher(self) -> list[str]:
        """Apply the teacher schedule of the current step: EMA, then hard copy."""
        events = []
        config = self.config
        self.teacher.steps_since_copy += 1
        if config.uses_ema and self.step % config.ema_interval == 0:
            self.teacher.theta = ema_update(self.teacher.theta, self.student.theta, config.ema_decay)
            events.append("ema")
        if config.uses_hard_copy and self.step % config.hard_copy_interval == 0:
            self.teacher.theta = hard_copy(self.teacher.theta, self.student.theta)
            self.teacher.steps_since_copy = 0
            events.append("copy")
        if events:
            _LOGGER.debug("Step %s teacher update: %s", self.step, ", ".join(events))
        return events

    # Loop

    def train_step(self) -> MetricsRow:
        """Run one training step and return its metrics."""
        self.step += 1
        step = self.step
        config = self.config
        rng = derive_seed(self.seed, step)
        count = min(config.batch_prompts, len(self.tasks))
        picks = [int(i) for i in rng.choice(len(self.tasks), size=count, replace=False)]

        coordinator = RolloutCoordinator(self.student, self.seed, self.episode_config)
        groups = []
        for prompt_index, task_index in enumerate(picks):
            task = self.tasks[task_index]
            outcomes = coordinator.collect_group(task, config.group_size, step, prompt_index)
            groups.append(self.score_group(task, outcomes))
        trajectories = [t for group in groups for t in group.trajectories]
        kept = dynamic_filter(groups)

        loss_grpo = loss_distill = mean_kl = update_norm = 0.0
        clip_activations = 0
        if kept:
            batch = self.prepare_batch(kept)
            result = total_loss(self.student, self.teacher.policy(), batch, config)
            if result.clip_activations or result.max_ratio_deviation > MAX_RATIO_DEVIATION:
                msg = (
                    f"Step {step}: importance ratios left 1.0 (deviation {result.max_ratio_deviation}, "
                    f"{result.clip_activations} clipped tokens)"
                )
                raise ContractViolationError(msg)
            update = -config.learning_rate * clip_grad_norm(result.gradient, config.max_grad_norm)
            self.student.theta += update
            update_norm = float(np.linalg.norm(update))
            loss_grpo, loss_distill, mean_kl = result.loss_grpo, result.loss_distill, result.mean_kl
            clip_activations = result.clip_activations
        else:
            _LOGGER.debug("Step %s skipped: all %s groups had uniform outcomes", step, len(groups))

        reference_pre, _ = self.reference_kl()
        self.update_teacher()
        reference_post, kl_grad_norm = self.reference_kl()
        return MetricsRow(
            step=step,
            validation_accuracy=self.validation_accuracy(),
            mean_kl=mean_kl,
            reference_kl=reference_post,
            reference_kl_pre=reference_pre,
            teacher_distance=self.teacher.distance(self.student.theta),
            kl_grad_norm=kl_grad_norm,
            mean_response_tokens=float(np.mean([t.total_response_tokens for t in trajectories])),
            mean_turns=float(np.mean([len(t.turns) for t in trajectories])),
            loss_grpo=loss_grpo,
            loss_distill=loss_distill,
            clip_activations=clip_activations,
            filtered_groups=len(groups) - len(kept),
            skipped=not kept,
            update_norm=update_norm,
        )

    def run(self, steps: int | None = None, callback: Callable[[MetricsRow], None] | None = None) -> list[MetricsRow]:
        """Run steps (default: the configured count) and return their metrics."""
        steps = self.config.steps if steps is None else steps
        _LOGGER.info(
            "Training variant %s for %s steps on %s tasks (seed %s)",
            self.config.variant,
            steps,
            len(self.tasks),
            self.seed,
        )
        rows = []
        for _ in range(steps):
            row = self.train_step()
            rows.append(row)
            if callback is not None:
                callback(row)
        if rows:
            _LOGGER.info(
                "Finished at step %s: validation accuracy %.3f, reference KL %.5f",
                self.step,
                rows[-1].validation_accuracy,
                rows[-1].reference_kl,
            )
        return rows

    def checkpoint(self) -> Checkpoint:
        """Return the current state."""
        return Checkpoint(
            self.step, self.teacher.steps_since_copy, self.student.theta.copy(), self.teacher.theta.copy()
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Continue from a saved state."""
        _check_shapes(self.student.theta, checkpoint.student)
        self.step = checkpoint.step
        self.student.theta = checkpoint.student.copy()
        self.teacher = TeacherState(checkpoint.teacher.copy(), checkpoint.steps_since_copy)
        _LOGGER.info("Restored trainer state at step %s", self.step)


def train(config: TrainerConfig, seed: int, tasks: Sequence[Task] | None = None) -> list[MetricsRow]:
    """Train the toy student and return one metrics row per step."""
    return Trainer(config, seed, tasks).run()
