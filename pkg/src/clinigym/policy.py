"""Policies: the linear-softmax toy policy, scripted and replay policies, and the episode driver."""

from __future__ import annotations

import bisect
import copy
import json
import logging
import re
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any

import attrs
import numpy as np
from scipy.special import log_softmax

from .const import (
    END_TOKEN,
    HINT_CORRECTIVE,
    HINT_NONE,
    HINT_REINFORCING,
    TOOL_SUBMIT_ANSWER,
    TOOL_THINK,
    TOY_TURN_TOKEN_CAP,
)
from .exceptions import ContractViolationError, UsageError, VocabularyError
from .micro_clinic import TOOL_ASSESS_CASE, TOOL_LOOKUP_FACT, ticket_case_id, ticket_cue
from .tasks import OPTION_LETTERS
from .tools import json_text
from .trajectory import FREE_TEXT, AgentAction, parse_action, read_trajectories
from .utils import derive_seed, md5_hex

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from .env import ClinicalEnv, Observation
    from .rewards import RewardBreakdown
    from .tasks import Task
    from .trajectory import Trajectory, TurnRecord

_LOGGER = logging.getLogger(__name__)

TOOL_TOKENS = (TOOL_LOOKUP_FACT, TOOL_ASSESS_CASE, TOOL_SUBMIT_ANSWER, TOOL_THINK)
WORDS = (
    "the", "patient", "case", "findings", "suggests", "consider", "evidence", "review", "likely",
    "option", "because", "history", "exam", "result", "supports", "therefore", "check", "note",
    "referral", "key", "fact", "diagnosis", "management", "plan", "risk", "symptoms", "indicates",
    "confirms", "next", "step", "differential", "treatment", "first", "then", "given", "clinical",
    "pattern", "answer", "reasoning", "appears", "sound", "revisit", "chain", "this", "re",
    "before", "answering", "so", "and", "is", "with", "not", "verify", "assessment",
)  # fmt: skip
_WORD_RE = re.compile(r"[a-z]+")

# Token kinds, in feature-row order
KIND_START = "start"
KIND_WORD = "word"
KIND_LOOKUP = "lookup"
KIND_ASSESS = "assess"
KIND_SUBMIT = "submit"
KIND_THINK = "think"
KIND_LETTER = "letter"
TOKEN_KINDS = (KIND_START, KIND_WORD, KIND_LOOKUP, KIND_ASSESS, KIND_SUBMIT, KIND_THINK, KIND_LETTER)
_TOOL_KIND = {
    TOOL_LOOKUP_FACT: KIND_LOOKUP,
    TOOL_ASSESS_CASE: KIND_ASSESS,
    TOOL_SUBMIT_ANSWER: KIND_SUBMIT,
    TOOL_THINK: KIND_THINK,
}

LAST_TOOLS = ("none", KIND_LOOKUP, KIND_ASSESS, KIND_THINK, "other")
HINTS = (HINT_REINFORCING, HINT_CORRECTIVE)
TURN_BUCKETS = 5
HASH_BUCKETS = 4
POSITION_EDGES = (1, 3, 6, 12)  # in-turn positions 0, 1-2, 3-5, 6-11, 12+

# Feature layout
_BIAS = 0
_TURN = 1
_LAST_TOOL = _TURN + TURN_BUCKETS
_EVIDENCE = _LAST_TOOL + len(LAST_TOOLS)
_CUE = _EVIDENCE + 1 + len(OPTION_LETTERS)
_HASH = _CUE + len(OPTION_LETTERS)
_POSITION = _HASH + HASH_BUCKETS
_PREV_KIND = _POSITION + len(POSITION_EDGES) + 1
# hint rows: hint x last tool, then hint x evidence letter
_HINT_TOOL = _PREV_KIND + len(TOKEN_KINDS)
_HINT_EVIDENCE = _HINT_TOOL + len(HINTS) * len(LAST_TOOLS)
FEATURE_DIM = _HINT_EVIDENCE + len(HINTS) * len(OPTION_LETTERS)


def hint_tool_row(hint: str, last_tool: str) -> int:
    """Return the feature row a hint lights up for the last tool called."""
    return _HINT_TOOL + HINTS.index(hint) * len(LAST_TOOLS) + LAST_TOOLS.index(last_tool)


def hint_evidence_row(hint: str, letter: str) -> int:
    """Return the feature row a hint lights up for the evidence letter."""
    return _HINT_EVIDENCE + HINTS.index(hint) * len(OPTION_LETTERS) + OPTION_LETTERS.index(letter)


class Vocabulary:
    """The fixed token list of the toy policy."""

    def __init__(self) -> None:
        """Initialize the 64-token vocabulary."""
        self.tokens: tuple[str, ...] = (END_TOKEN, *TOOL_TOKENS, *OPTION_LETTERS, *WORDS)
        self._index = {token: i for i, token in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            msg = "Vocabulary tokens must be unique"
            raise ContractViolationError(msg)
        self.end_id = self._index[END_TOKEN]
        self.tool_ids = tuple(self._index[t] for t in TOOL_TOKENS)
        self.letter_ids = tuple(self._index[t] for t in OPTION_LETTERS)
        self.word_ids = tuple(self._index[t] for t in WORDS)
        kinds = [KIND_START] * len(self.tokens)
        for token, kind in _TOOL_KIND.items():
            kinds[self._index[token]] = kind
        for i in self.letter_ids:
            kinds[i] = KIND_LETTER
        for i in self.word_ids:
            kinds[i] = KIND_WORD
        self._kinds = tuple(kinds)

    @property
    def size(self) -> int:
        """Return |V|."""
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        """Return the id of a token."""
        try:
            return self._index[token]
        except KeyError as err:
            msg = f"Token {token!r} is not in the vocabulary"
            raise VocabularyError(msg) from err

    def kind(self, token_id: int) -> str:
        """Return the kind of a token id."""
        return self._kinds[token_id]

    def check(self, token_ids: Sequence[int]) -> tuple[int, ...]:
        """Return token ids as a tuple, raising on ids outside the vocabulary."""
        ids = tuple(int(t) for t in token_ids)
        for token_id in ids:
            if not 0 <= token_id < self.size:
                msg = f"Token id {token_id} is outside the vocabulary of {self.size}"
                raise VocabularyError(msg)
        return ids

    def encode_text(self, text: str) -> tuple[int, ...]:
        """Encode lower-cased words of a text; every word must be in the vocabulary."""
        return tuple(self.id_of(word) for word in _WORD_RE.findall(text.lower()))


VOCABULARY = Vocabulary()


@attrs.frozen
class PolicyContext:
    """What the toy policy conditions on at the start of a turn."""

    turn: int = 0
    last_tool: str = "none"
    evidence: str | None = None
    cue: str | None = None
    ticket_bucket: int = 0
    hint: str = HINT_NONE
    case_id: str | None = None
    fact_key: str | None = None

    def with_hint(self, hint: str) -> PolicyContext:
        """Return the same context carrying a hint flag."""
        return attrs.evolve(self, hint=hint)


def _result_payload(turn: TurnRecord) -> dict[str, Any] | None:
    if not turn.tool_ok:
        return None
    try:
        body = json.loads(turn.tool_result_text)
    except ValueError:
        return None
    result = body.get("result") if isinstance(body, dict) else None
    return result if isinstance(result, dict) else None


def build_context(
    ticket: str, turns: Sequence[TurnRecord], hint: str = HINT_NONE, turn: int | None = None
) -> PolicyContext:
    """
    Build the context of the next turn from the ticket and the turns so far.

    Args:
        ticket: Task ticket
        turns: Earlier turns, oldest first
        hint: Hint flag; only teacher feature maps read it
        turn: Index of the next turn, defaults to the number of turns

    Returns:
        The policy context

    """
    last_tool = "none"
    evidence = fact_key = None
    for record in turns:
        action = record.action
        if action.is_tool_call:
            kind = _TOOL_KIND.get(action.tool_name or "")
            last_tool = kind if kind in LAST_TOOLS else "other"
        payload = _result_payload(record)
        if payload is None:
            continue
        if action.tool_name == TOOL_LOOKUP_FACT and isinstance(payload.get("fact_key"), str):
            fact_key = payload["fact_key"]
        elif action.tool_name == TOOL_ASSESS_CASE and payload.get("recommended_option") in OPTION_LETTERS:
            evidence = payload["recommended_option"]
    return PolicyContext(
        turn=len(turns) if turn is None else turn,
        last_tool=last_tool,
        evidence=evidence,
        cue=ticket_cue(ticket),
        ticket_bucket=int(md5_hex(ticket)[:8], 16) % HASH_BUCKETS,
        hint=hint,
        case_id=ticket_case_id(ticket),
        fact_key=fact_key,
    )


def trajectory_contexts(ticket: str, trajectory: Trajectory, hint: str = HINT_NONE) -> list[PolicyContext]:
    """Return the context every turn of a trajectory was generated from."""
    return [build_context(ticket, trajectory.turns[:i], hint) for i in range(len(trajectory.turns))]


class FeatureMap:
    """φ(context, prefix) ∈ R^58; student maps leave the hint rows at zero."""

    def __init__(self, vocabulary: Vocabulary = VOCABULARY, *, include_hint: bool = False) -> None:
        """Initialize the map."""
        self.vocabulary = vocabulary
        self.include_hint = include_hint

    @property
    def dim(self) -> int:
        """Return d."""
        return FEATURE_DIM

    def base(self, context: PolicyContext) -> np.ndarray:
        """Return the features shared by every position of a turn."""
        phi = np.zeros(FEATURE_DIM)
        phi[_BIAS] = 1.0
        phi[_TURN + min(max(context.turn, 0), TURN_BUCKETS - 1)] = 1.0
        phi[_LAST_TOOL + LAST_TOOLS.index(context.last_tool)] = 1.0
        evidence = 0 if context.evidence is None else 1 + OPTION_LETTERS.index(context.evidence)
        phi[_EVIDENCE + evidence] = 1.0
        if context.cue is not None:
            phi[_CUE + OPTION_LETTERS.index(context.cue)] = 1.0
        phi[_HASH + context.ticket_bucket % HASH_BUCKETS] = 1.0
        if self.include_hint and context.hint in HINTS:
            phi[hint_tool_row(context.hint, context.last_tool)] = 1.0
            if context.evidence is not None:
                phi[hint_evidence_row(context.hint, context.evidence)] = 1.0
        return phi

    def matrix(self, context: PolicyContext, token_ids: Sequence[int], offset: int = 0) -> np.ndarray:
        """
        Return one feature row per token position.

        Positions before offset belong to a prefix that is not part of the
        response; response positions only look at response tokens.
        """
        base = self.base(context)
        rows = np.tile(base, (len(token_ids), 1))
        for k in range(len(token_ids)):
            position = max(k - offset, 0)
            prev = KIND_START if k <= offset else self.vocabulary.kind(token_ids[k - 1])
            rows[k, _POSITION + bisect.bisect_right(POSITION_EDGES, position)] = 1.0
            rows[k, _PREV_KIND + TOKEN_KINDS.index(prev)] = 1.0
        return rows

    def vector(self, context: PolicyContext, prefix: Sequence[int]) -> np.ndarray:
        """Return the features of the position following a prefix."""
        phi = self.base(context)
        prev = self.vocabulary.kind(prefix[-1]) if prefix else KIND_START
        phi[_POSITION + bisect.bisect_right(POSITION_EDGES, len(prefix))] = 1.0
        phi[_PREV_KIND + TOKEN_KINDS.index(prev)] = 1.0
        return phi


def prior_parameters(vocabulary: Vocabulary = VOCABULARY) -> np.ndarray:
    """
    Return the "base model" parameters the toy runs start from.

    The prior follows the tool-call format: after a tool token the turn ends,
    after submit_answer an option letter follows. It leans towards answering
    straight away, so a typical episode is short. The evidence letter and the
    referral cue are mildly preferred.

    Hint rows steer the teacher only. A corrective hint follows the lookup,
    assess, submit procedure from whatever tool came last, prefers the
    evidence letter and adds deliberation words. A reinforcing hint commits
    with fewer words.
    """
    theta = np.zeros((FEATURE_DIM, vocabulary.size))
    words = list(vocabulary.word_ids)
    tools = list(vocabulary.tool_ids)
    letters = list(vocabulary.letter_ids)
    end = vocabulary.end_id
    lookup, assess, submit, _think = tools

    def kind_row(kind: str) -> int:
        return _PREV_KIND + TOKEN_KINDS.index(kind)

    for kind, tool_logit, end_logit, word_logit in ((KIND_START, 2.7, 1.8, 0.0), (KIND_WORD, 2.07, 1.55, 0.9)):
        row = kind_row(kind)
        theta[row, tools] = tool_logit
        theta[row, submit] += 0.8
        theta[row, end] = end_logit
        theta[row, words] = word_logit
        theta[row, letters] = -6.0
    for kind in (KIND_LOOKUP, KIND_ASSESS):
        theta[kind_row(kind), tools] = -2.0
        theta[kind_row(kind), end] = 6.2
    theta[kind_row(KIND_THINK), end] = 4.0
    theta[kind_row(KIND_SUBMIT), end] = -2.0
    theta[kind_row(KIND_SUBMIT), words] = -2.0
    theta[kind_row(KIND_SUBMIT), letters] = 4.6
    theta[kind_row(KIND_LETTER), end] = 6.2

    for i, letter in enumerate(letters):
        theta[_EVIDENCE + 1 + i, letter] = 1.0
        theta[_CUE + i, letter] = 0.5
    theta[_TURN + TURN_BUCKETS - 1, submit] = 0.5
    theta[_POSITION + len(POSITION_EDGES), end] = 1.0

    next_step = {"none": lookup, KIND_LOOKUP: assess, KIND_ASSESS: submit, KIND_THINK: lookup, "other": lookup}
    for last_tool, tool in next_step.items():
        row = hint_tool_row(HINT_CORRECTIVE, last_tool)
        theta[row, tools] = -1.0
        theta[row, tool] = 1.5 if last_tool in ("none", KIND_LOOKUP, KIND_ASSESS) else 1.0
        if tool != submit:
            theta[row, submit] = -3.0
        theta[row, words] = 0.5
        theta[hint_tool_row(HINT_REINFORCING, last_tool), words] = -1.0
    for letter, token in zip(OPTION_LETTERS, letters, strict=True):
        theta[hint_evidence_row(HINT_CORRECTIVE, letter), token] = 3.0
        theta[hint_evidence_row(HINT_REINFORCING, letter), token] = 1.0
    return theta


def render_action(token_ids: Sequence[int], context: PolicyContext, vocabulary: Vocabulary = VOCABULARY) -> AgentAction:
    """
    Map a sampled token sequence to an action.

    Words before the first tool token are prose; the tool token becomes a
    tool-call document whose arguments come from the context. A think call
    takes the prose as its thought. Without a tool token the turn is free text.
    """
    ids = vocabulary.check(token_ids)
    prose: list[str] = []
    tool: str | None = None
    rest: tuple[int, ...] = ()
    for k, token_id in enumerate(ids):
        token = vocabulary.tokens[token_id]
        if token_id == vocabulary.end_id:
            break
        if token in TOOL_TOKENS:
            tool, rest = token, ids[k + 1 :]
            break
        prose.append(token)
    text = " ".join(prose)
    if tool is None:
        return AgentAction(kind=FREE_TEXT, raw_text=text, token_ids=ids)

    arguments: dict[str, Any]
    if tool == TOOL_THINK:
        arguments = {"thought": text} if text else {}
        text = ""
    elif tool == TOOL_SUBMIT_ANSWER:
        letter = ""
        for token_id in rest:
            if token_id == vocabulary.end_id:
                break
            if vocabulary.kind(token_id) == KIND_LETTER:
                letter = vocabulary.tokens[token_id]
                break
        arguments = {"answer": letter}
    elif tool == TOOL_LOOKUP_FACT:
        arguments = {"case_id": context.case_id or ""}
    else:
        arguments = {"case_id": context.case_id or "", "fact_key": context.fact_key or ""}
    document = json_text({"name": tool, "arguments": arguments})
    raw_text = f"{text}\n{document}" if text else document
    return attrs.evolve(parse_action(raw_text), token_ids=ids)


class Policy(ABC):
    """Maps an observation to the next action."""

    kind = "policy"

    @abstractmethod
    def act(self, observation: Observation, rng: np.random.Generator) -> tuple[AgentAction, tuple[float, ...] | None]:
        """Return the next action and its per-token logprobs in nats, None when unknown."""

    def begin_episode(self, task: Task) -> None:  # noqa: B027
        """Hook called by run_episode before the first action."""

    def clone(self) -> Policy:
        """Return an independent copy."""
        return copy.deepcopy(self)


class ToySoftmaxPolicy(Policy):
    """Linear softmax over a 64-token vocabulary: π(v | ctx, prefix) ∝ exp(φ·θ_v / τ)."""

    kind = "toy"

    def __init__(
        self,
        theta: np.ndarray | None = None,
        temperature: float = 1.0,
        *,
        include_hint: bool = False,
        turn_cap: int = TOY_TURN_TOKEN_CAP,
        vocabulary: Vocabulary = VOCABULARY,
    ) -> None:
        """Initialize the policy; theta defaults to the prior."""
        if temperature <= 0:
            msg = f"temperature must be positive, got {temperature}"
            raise ContractViolationError(msg)
        self.vocabulary = vocabulary
        self.features = FeatureMap(vocabulary, include_hint=include_hint)
        self.theta = prior_parameters(vocabulary) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (FEATURE_DIM, vocabulary.size):
            msg = f"theta must have shape {(FEATURE_DIM, vocabulary.size)}, got {self.theta.shape}"
            raise ContractViolationError(msg)
        self.temperature = float(temperature)
        self.turn_cap = turn_cap

    def log_probs(
        self, context: PolicyContext, token_ids: Sequence[int], offset: int = 0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return the feature rows and the per-position log-distributions for a teacher-forced sequence."""
        phi = self.features.matrix(context, token_ids, offset)
        return phi, log_softmax(phi @ self.theta / self.temperature, axis=1)

    def logprob_of(self, context: PolicyContext, token_ids: Sequence[int], offset: int = 0) -> np.ndarray:
        """Return teacher-forced per-token logprobs of a sequence."""
        ids = self.vocabulary.check(token_ids)
        if not ids:
            return np.zeros(0)
        _, logp = self.log_probs(context, ids, offset)
        return logp[np.arange(len(ids)), ids]

    def sample(
        self, context: PolicyContext, rng: np.random.Generator, *, greedy: bool = False
    ) -> tuple[list[int], list[float]]:
        """Sample one turn token by token until the end token or the per-turn cap."""
        tokens: list[int] = []
        logprobs: list[float] = []
        for _ in range(self.turn_cap):
            logp = log_softmax(self.features.vector(context, tokens) @ self.theta / self.temperature)
            token = int(np.argmax(logp)) if greedy else int(rng.choice(self.vocabulary.size, p=np.exp(logp)))
            tokens.append(token)
            logprobs.append(float(logp[token]))
            if token == self.vocabulary.end_id:
                break
        return tokens, logprobs

    def act(
        self,
        observation: Observation,
        rng: np.random.Generator,
        hint: str = HINT_NONE,
        *,
        greedy: bool = False,
    ) -> tuple[AgentAction, tuple[float, ...]]:
        """Sample the next action for an observation."""
        context = build_context(observation.ticket, observation.transcript, hint, turn=observation.turn)
        tokens, logprobs = self.sample(context, rng, greedy=greedy)
        return render_action(tokens, context, self.vocabulary), tuple(logprobs)

    def clone(self) -> ToySoftmaxPolicy:
        """Return a copy with its own parameter array."""
        return ToySoftmaxPolicy(
            self.theta.copy(),
            self.temperature,
            include_hint=self.features.include_hint,
            turn_cap=self.turn_cap,
            vocabulary=self.vocabulary,
        )


@attrs.frozen
class GradientItem:
    """One teacher-forced sequence with a coefficient per token."""

    context: PolicyContext
    token_ids: tuple[int, ...] = attrs.field(converter=tuple)
    coefficients: np.ndarray = attrs.field(converter=lambda c: np.asarray(c, dtype=np.float64))

    def __attrs_post_init__(self) -> None:
        """One coefficient per token."""
        if self.coefficients.shape != (len(self.token_ids),):
            msg = f"Expected {len(self.token_ids)} coefficients, got shape {self.coefficients.shape}"
            raise ContractViolationError(msg)


def analytic_gradient(policy: ToySoftmaxPolicy, batch: Sequence[GradientItem]) -> np.ndarray:
    """
    Return ∂/∂θ of Σ coefficient·logπ over a batch.

    Uses ∂logπ(v)/∂logits = onehot(v) − π, so the gradient of a sequence is
    Φᵀ(C ⊙ (Y − P)) / τ.
    """
    if not batch:
        msg = "analytic_gradient needs a non-empty batch"
        raise ContractViolationError(msg)
    grad = np.zeros_like(policy.theta)
    for item in batch:
        if not item.token_ids:
            continue
        ids = policy.vocabulary.check(item.token_ids)
        phi, logp = policy.log_probs(item.context, ids)
        residual = -np.exp(logp)
        residual[np.arange(len(ids)), ids] += 1.0
        grad += phi.T @ (item.coefficients[:, None] * residual)
    return grad / policy.temperature


class ScriptedPolicy(Policy):
    """Solves micro-clinic tasks: lookup_fact, assess_case, then submit the recommended option."""

    kind = "scripted"

    def __init__(self, vocabulary: Vocabulary = VOCABULARY) -> None:
        """Initialize the policy."""
        self.vocabulary = vocabulary

    def act(
        self,
        observation: Observation,
        rng: np.random.Generator | None = None,  # noqa: ARG002
    ) -> tuple[AgentAction, None]:
        """Return the next step of the solution path."""
        context = build_context(observation.ticket, observation.transcript, turn=observation.turn)
        vocabulary = self.vocabulary
        if context.evidence is not None:
            tokens = [vocabulary.id_of(TOOL_SUBMIT_ANSWER), vocabulary.id_of(context.evidence)]
        elif context.fact_key is not None:
            tokens = [vocabulary.id_of(TOOL_ASSESS_CASE)]
        else:
            tokens = [vocabulary.id_of(TOOL_LOOKUP_FACT)]
        return render_action([*tokens, vocabulary.end_id], context, vocabulary), None


EMPTY_SUBMIT = json_text({"name": TOOL_SUBMIT_ANSWER, "arguments": {"answer": ""}})


class ReplayPolicy(Policy):
    """Emits recorded action texts in order, then an empty submit."""

    kind = "replay"

    def __init__(self, actions: Sequence[str] = ()) -> None:
        """Initialize the policy."""
        self.actions = tuple(actions)
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str | Path, task_id: str | None = None) -> ReplayPolicy:
        """Replay the first trajectory of a log, or the first one on task_id."""
        trajectories = read_trajectories(path)
        if task_id is not None:
            trajectories = [t for t in trajectories if t.task_id == task_id]
        if not trajectories:
            _LOGGER.debug("Nothing to replay in %s", path)
            return cls()
        return cls([turn.action.raw_text for turn in trajectories[0].turns])

    def begin_episode(self, task: Task) -> None:  # noqa: ARG002
        """Rewind to the first recorded action."""
        self._cursor = 0

    def act(
        self,
        observation: Observation,
        rng: np.random.Generator | None = None,  # noqa: ARG002
    ) -> tuple[AgentAction, None]:
        """Return the next recorded action."""
        if self._cursor >= len(self.actions):
            return parse_action(EMPTY_SUBMIT), None
        text = self.actions[self._cursor]
        self._cursor += 1
        return parse_action(text), None


POLICY_KINDS = ("toy", "uniform", "scripted", "replay")


def get_policy(kind: str, *, path: str | Path | None = None, temperature: float = 1.0) -> Policy:
    """
    Build a policy by name.

    Args:
        kind: One of toy (prior parameters), uniform (θ = 0), scripted, replay
        path: Trajectory log for replay
        temperature: Sampling temperature of the toy policies

    Returns:
        The policy

    """
    if kind == "toy":
        return ToySoftmaxPolicy(temperature=temperature)
    if kind == "uniform":
        return ToySoftmaxPolicy(np.zeros((FEATURE_DIM, VOCABULARY.size)), temperature)
    if kind == "scripted":
        return ScriptedPolicy()
    if kind == "replay":
        if path is None:
            msg = "The replay policy needs a trajectory file"
            raise UsageError(msg)
        return ReplayPolicy.from_file(path)
    msg = f"Unknown policy {kind!r}, expected one of {POLICY_KINDS}"
    raise UsageError(msg)


def task_seed(task_id: str) -> int:
    """Fold a task id into a seed component."""
    return int(md5_hex(task_id)[:12], 16)


@attrs.frozen
class EpisodeOutcome:
    """A finished episode."""

    trajectory: Trajectory
    reward: RewardBreakdown


def run_episode(env: ClinicalEnv, policy: Policy, task: Task, seed: int, *parts: int) -> EpisodeOutcome:
    """
    Run one episode to completion.

    The action stream is a function of (task id, seed, parts) alone, so a
    rollout can be reproduced bit for bit.
    """
    rng = derive_seed(seed, task_seed(task.id), *parts)
    policy.begin_episode(task)
    observation = env.reset(task)
    while True:
        action, logprobs = policy.act(observation, rng)
        result = env.step(action, logprobs=logprobs)
        if result.reward is not None:
            return EpisodeOutcome(env.trajectory, result.reward)
        observation = result.observation
