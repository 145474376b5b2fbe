"""Episode engine: reset/step over a domain world with sparse terminal rewards."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, NamedTuple

import attrs

from .config import EpisodeConfig, RewardWeights
from .domains import get_domain
from .exceptions import ContractViolationError, EpisodeFinishedError
from .rewards import evaluate
from .tools import ToolResult, dispatch
from .trajectory import AgentAction, Trajectory, TurnRecord, parse_action
from .utils import count_tokens

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .domains import Domain
    from .knowledge import KnowledgeStore
    from .rewards import RewardBreakdown
    from .tasks import Task
    from .tools import WorldState

_LOGGER = logging.getLogger(__name__)

NO_TOOL_CALL_MESSAGE = (
    'No tool call found. Reply with one JSON document {"name": <tool>, "arguments": {...}}; '
    "call submit_answer to finish."
)
CONTEXT_LIMIT_MESSAGE = "Context limit reached; the action was not executed."


def _section(title: str, body: str) -> str:
    return f"=== {title} ===\n{body}\n"


def _turn_block(turn: TurnRecord) -> str:
    return _section(f"TURN {turn.turn_index} ASSISTANT", turn.action.raw_text) + _section(
        f"TURN {turn.turn_index} TOOL", turn.tool_result_text
    )


@attrs.frozen
class Observation:
    """What the agent sees before acting."""

    system_prompt: str
    ticket: str
    transcript: tuple[TurnRecord, ...] = attrs.field(default=(), converter=tuple)
    tool_results: str = ""
    tools: tuple[str, ...] = attrs.field(default=(), converter=tuple)
    omitted_turns: int = 0

    @property
    def turn(self) -> int:
        """Return the index of the next assistant turn."""
        return self.transcript[-1].turn_index + 1 if self.transcript else self.omitted_turns

    def render(self) -> str:
        """Return the text handed to an agent."""
        parts = [_section("SYSTEM", self.system_prompt)]
        if self.tools:
            parts.append(_section("TOOLS", ", ".join(self.tools)))
        parts.append(_section("TICKET", self.ticket))
        if self.omitted_turns:
            parts.append(_section("EARLIER TURNS OMITTED", str(self.omitted_turns)))
        parts.extend(_turn_block(turn) for turn in self.transcript)
        return "".join(parts)

    @classmethod
    def fit(
        cls,
        system_prompt: str,
        ticket: str,
        transcript: Sequence[TurnRecord],
        max_chars: int,
        tools: Sequence[str] = (),
    ) -> Observation:
        """
        Build an observation whose rendering fits in max_chars.

        Oldest turns are dropped first; then the ticket is cut to a leading
        prefix. The system prompt is only cut when it alone exceeds the budget.
        """
        turns = tuple(transcript)
        latest = turns[-1].tool_result_text if turns else ""
        omitted = 0
        observation = cls(system_prompt, ticket, turns, latest, tools)
        while len(observation.render()) > max_chars and omitted < len(turns):
            omitted += 1
            observation = cls(system_prompt, ticket, turns[omitted:], latest, tools, omitted)
        overflow = len(observation.render()) - max_chars
        if overflow > 0:
            keep = max(0, len(ticket) - overflow)
            observation = attrs.evolve(observation, ticket=ticket[:keep])
            overflow = len(observation.render()) - max_chars
        if overflow > 0:
            keep = max(0, len(system_prompt) - overflow)
            observation = attrs.evolve(observation, system_prompt=system_prompt[:keep])
        return observation


@attrs.define
class _Episode:
    task: Task
    domain: Domain
    world: WorldState
    trajectory: Trajectory
    reward: RewardBreakdown | None = None


class StepResult(NamedTuple):
    """Outcome of one step."""

    observation: Observation
    terminated: bool
    truncated: bool
    reward: RewardBreakdown | None


class ClinicalEnv:
    """
    One episode at a time over a registered domain.

    An episode ends when submit_answer succeeds, after max_turns assistant
    turns, or when the next action would push the response past
    max_response_tokens. Only the final step carries a reward.
    """

    def __init__(
        self,
        config: EpisodeConfig | None = None,
        store: KnowledgeStore | None = None,
        weights: RewardWeights | None = None,
    ) -> None:
        """Initialize the environment."""
        self.config = config or EpisodeConfig()
        self.store = store
        self.weights = weights or RewardWeights()
        self._episode: _Episode | None = None

    @property
    def episode(self) -> _Episode:
        """Return the current episode."""
        if self._episode is None:
            msg = "No episode in progress; call reset() first"
            raise ContractViolationError(msg)
        return self._episode

    @property
    def task(self) -> Task:
        """Return the current task."""
        return self.episode.task

    @property
    def world(self) -> WorldState:
        """Return the world of the current episode."""
        return self.episode.world

    @property
    def trajectory(self) -> Trajectory:
        """Return the trajectory recorded so far."""
        return self.episode.trajectory

    @property
    def reward(self) -> RewardBreakdown | None:
        """Return the terminal reward, None while the episode runs."""
        return None if self._episode is None else self._episode.reward

    @property
    def finished(self) -> bool:
        """Return True once the current episode has ended."""
        return self._episode is not None and self._episode.trajectory.finished

    def reset(self, task: Task) -> Observation:
        """Start an episode on a task and return the first observation."""
        domain = get_domain(task.domain)
        self._episode = _Episode(
            task=task, domain=domain, world=domain.new_world(task, self.store), trajectory=Trajectory(task_id=task.id)
        )
        _LOGGER.debug("Reset episode on task %s (%s)", task.id, task.domain)
        return self.observation()

    def observation(self) -> Observation:
        """Return the current observation."""
        episode = self.episode
        return Observation.fit(
            episode.domain.policy,
            episode.task.ticket,
            episode.trajectory.turns,
            self.config.max_observation_chars,
            tools=episode.domain.toolkit.names,
        )

    def _token_count(self, action: AgentAction, token_count: int | None, logprobs: Sequence[float] | None) -> int:
        if logprobs is not None:
            if token_count is not None and token_count != len(logprobs):
                msg = f"token_count {token_count} does not match {len(logprobs)} logprobs"
                raise ContractViolationError(msg)
            return len(logprobs)
        if token_count is not None:
            if token_count < 0:
                msg = f"token_count must be non-negative, got {token_count}"
                raise ContractViolationError(msg)
            return token_count
        if action.token_ids:
            return len(action.token_ids)
        return count_tokens(action.raw_text)

    def _coerce_action(self, action: str | AgentAction) -> AgentAction:
        limit = self.config.max_action_chars
        if isinstance(action, AgentAction):
            if len(action.raw_text) <= limit:
                return action
            _LOGGER.warning("Action of %s characters cut to %s", len(action.raw_text), limit)
            return attrs.evolve(parse_action(action.raw_text[:limit]), token_ids=action.token_ids)
        text = action if isinstance(action, str) else str(action)
        if len(text) > limit:
            _LOGGER.warning("Action of %s characters cut to %s", len(text), limit)
            text = text[:limit]
        return parse_action(text)

    def step(
        self,
        action: str | AgentAction,
        token_count: int | None = None,
        logprobs: Sequence[float] | None = None,
    ) -> StepResult:
        """
        Apply one assistant action.

        Args:
            action: Raw action text, or an action already produced by a policy
            token_count: Token count reported by an external agent
            logprobs: Per-token log-probabilities of the action, in nats

        Returns:
            The next observation, the terminated and truncated flags, and the
            reward when the episode ended

        """
        trajectory = self.trajectory
        if trajectory.finished:
            msg = f"Episode on task {trajectory.task_id} already ended ({trajectory.terminated_by})"
            raise EpisodeFinishedError(msg)
        parsed = self._coerce_action(action)
        count = self._token_count(parsed, token_count, logprobs)
        turn_index = len(trajectory.turns)

        if trajectory.total_response_tokens + count > self.config.max_response_tokens:
            trajectory.turns.append(
                TurnRecord(
                    turn_index=turn_index,
                    action=parsed,
                    tool_result_text=ToolResult.failure(CONTEXT_LIMIT_MESSAGE).to_wire(),
                    per_token_logprobs=logprobs,
                    token_count=count,
                    tool_ok=False,
                )
            )
            _LOGGER.debug("Task %s hit the context limit at turn %s", trajectory.task_id, turn_index)
            return self._finish("context_limit")

        if parsed.is_tool_call:
            result = dispatch(self.episode.domain.toolkit, parsed.tool_name, parsed.arguments, self.world)
            result_text, ok = result.to_wire(), result.ok
        else:
            result_text, ok = ToolResult.failure(NO_TOOL_CALL_MESSAGE).to_wire(), None
        trajectory.turns.append(
            TurnRecord(
                turn_index=turn_index,
                action=parsed,
                tool_result_text=result_text,
                per_token_logprobs=logprobs,
                token_count=count,
                tool_ok=ok,
            )
        )

        if parsed.is_submit and ok:
            trajectory.final_answer = str((parsed.arguments or {}).get("answer", ""))
            return self._finish("submit")
        if len(trajectory.turns) >= self.config.max_turns:
            return self._finish("turn_limit")
        return StepResult(self.observation(), terminated=False, truncated=False, reward=None)

    def _finish(self, reason: str) -> StepResult:
        episode = self.episode
        trajectory = episode.trajectory
        trajectory.terminated_by = reason
        episode.reward = evaluate(trajectory, episode.task, episode.world, self.store, self.weights)
        _LOGGER.debug(
            "Task %s ended by %s after %s turns, total %.4f",
            trajectory.task_id,
            reason,
            len(trajectory.turns),
            episode.reward.total,
        )
        return StepResult(
            self.observation(), terminated=reason == "submit", truncated=reason != "submit", reward=episode.reward
        )

    def abort(self) -> RewardBreakdown | None:
        """End a live episode as truncated by the turn limit and score it."""
        if self._episode is None or self._episode.trajectory.finished:
            return self.reward
        _LOGGER.debug("Aborting episode on task %s", self._episode.trajectory.task_id)
        return self._finish("turn_limit").reward

    def render(self) -> str:
        """Return the transcript with the termination status; byte-stable for equal states."""
        trajectory = self.trajectory
        if trajectory.finished:
            status = f"terminated_by={trajectory.terminated_by} final_answer={trajectory.final_answer!r}"
            if self.reward is not None:
                status += f" total={self.reward.total:.6f}"
        else:
            status = f"running turn={len(trajectory.turns)}/{self.config.max_turns}"
        return self.observation().render() + _section("STATUS", status)


def score_trajectory(
    trajectory: Trajectory,
    task: Task,
    config: EpisodeConfig | None = None,
    store: KnowledgeStore | None = None,
    weights: RewardWeights | None = None,
) -> RewardBreakdown:
    """
    Return the reward a logged trajectory earns when replayed on its task.

    The recorded actions run on a fresh episode with their token counts and
    logprobs. A log that stops before the episode ends is closed as
    truncated; actions logged after the replay ended are ignored.
    """
    if trajectory.task_id != task.id:
        msg = f"Trajectory of task {trajectory.task_id} cannot be scored against task {task.id}"
        raise ContractViolationError(msg)
    env = ClinicalEnv(config, store, weights)
    env.reset(task)
    for turn in trajectory.turns:
        if env.finished:
            break
        env.step(turn.action, turn.token_count, turn.per_token_logprobs)
    reward = env.abort()
    if reward is None:
        msg = f"Replay of task {task.id} produced no reward"
        raise ContractViolationError(msg)
    return reward
