"""Configuration schemas and value objects for episodes, rewards and training."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import attrs
import voluptuous as vol
import yaml

from .const import (
    DEFAULT_BATCH_PROMPTS,
    DEFAULT_CLIP_EPSILON,
    DEFAULT_COSINE_R_MAX,
    DEFAULT_COSINE_R_MIN,
    DEFAULT_COSINE_R_PENALTY,
    DEFAULT_EMA_DECAY,
    DEFAULT_EMA_INTERVAL,
    DEFAULT_GROUP_SIZE,
    DEFAULT_HARD_COPY_INTERVAL,
    DEFAULT_KL_BETA,
    DEFAULT_LAMBDA_DISTILL,
    DEFAULT_MAX_ACTION_CHARS,
    DEFAULT_MAX_OBSERVATION_CHARS,
    DEFAULT_MAX_RESPONSE_TOKENS,
    DEFAULT_MAX_TURNS,
    DEFAULT_TRAIN_STEPS,
    DEFAULT_TRAIN_TASKS,
    DEFAULT_VALIDATION_TASKS,
    DEFAULT_W_ACC,
    DEFAULT_W_ASSERT,
    DEFAULT_W_COH,
    DEFAULT_W_FMT,
    DEFAULT_W_PROC,
    DEFAULT_W_SAFE,
    REWARD_MODES,
    TOY_LEARNING_RATE,
    TOY_MAX_GRAD_NORM,
    TOY_MAX_RESPONSE_TOKENS,
    VARIANTS,
)
from .exceptions import ContractViolationError

_LOGGER = logging.getLogger(__name__)

# Constants for validation
MIN_GROUP_SIZE = 2  # advantages need within-group variance
MIN_TURNS = 1
MIN_CUE_RELIABILITY = 0.0
MAX_CUE_RELIABILITY = 1.0

_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
_NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_UNIT_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))

EPISODE_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("max_turns", default=DEFAULT_MAX_TURNS): vol.All(vol.Coerce(int), vol.Range(min=MIN_TURNS)),
        vol.Optional("max_observation_chars", default=DEFAULT_MAX_OBSERVATION_CHARS): _POSITIVE_INT,
        vol.Optional("max_action_chars", default=DEFAULT_MAX_ACTION_CHARS): _POSITIVE_INT,
        vol.Optional("max_response_tokens", default=DEFAULT_MAX_RESPONSE_TOKENS): _POSITIVE_INT,
    }
)

REWARD_WEIGHTS_SCHEMA = vol.Schema(
    {
        vol.Optional("w_acc", default=DEFAULT_W_ACC): _UNIT_FLOAT,
        vol.Optional("w_proc", default=DEFAULT_W_PROC): _UNIT_FLOAT,
        vol.Optional("w_safe", default=DEFAULT_W_SAFE): _UNIT_FLOAT,
        vol.Optional("w_fmt", default=DEFAULT_W_FMT): _UNIT_FLOAT,
        vol.Optional("w_coh", default=DEFAULT_W_COH): _UNIT_FLOAT,
        vol.Optional("w_assert", default=DEFAULT_W_ASSERT): _UNIT_FLOAT,
    }
)

COSINE_PARAMS_SCHEMA = vol.Schema(
    {
        vol.Optional("r_max", default=DEFAULT_COSINE_R_MAX): vol.Coerce(float),
        vol.Optional("r_min", default=DEFAULT_COSINE_R_MIN): vol.Coerce(float),
        vol.Optional("r_penalty", default=DEFAULT_COSINE_R_PENALTY): vol.Coerce(float),
        vol.Optional("max_tokens", default=DEFAULT_MAX_RESPONSE_TOKENS): _POSITIVE_INT,
    }
)

TRAINER_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("variant", default="full"): vol.In(VARIANTS),
        vol.Optional("group_size", default=DEFAULT_GROUP_SIZE): vol.All(vol.Coerce(int), vol.Range(min=MIN_GROUP_SIZE)),
        vol.Optional("learning_rate", default=TOY_LEARNING_RATE): _POSITIVE_FLOAT,
        vol.Optional("kl_beta", default=DEFAULT_KL_BETA): _NON_NEGATIVE_FLOAT,
        vol.Optional("lambda_distill", default=None): vol.Any(None, _NON_NEGATIVE_FLOAT),
        vol.Optional("ema_decay", default=DEFAULT_EMA_DECAY): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)
        ),
        vol.Optional("ema_interval", default=DEFAULT_EMA_INTERVAL): _POSITIVE_INT,
        vol.Optional("hard_copy_interval", default=DEFAULT_HARD_COPY_INTERVAL): _POSITIVE_INT,
        vol.Optional("clip_epsilon", default=DEFAULT_CLIP_EPSILON): _POSITIVE_FLOAT,
        vol.Optional("max_response_tokens", default=TOY_MAX_RESPONSE_TOKENS): _POSITIVE_INT,
        vol.Optional("batch_prompts", default=DEFAULT_BATCH_PROMPTS): _POSITIVE_INT,
        vol.Optional("steps", default=DEFAULT_TRAIN_STEPS): _POSITIVE_INT,
        vol.Optional("max_grad_norm", default=TOY_MAX_GRAD_NORM): vol.Any(None, _POSITIVE_FLOAT),
        vol.Optional("reward_mode", default=None): vol.Any(None, vol.In(REWARD_MODES)),
        vol.Optional("max_turns", default=DEFAULT_MAX_TURNS): vol.All(vol.Coerce(int), vol.Range(min=MIN_TURNS)),
        vol.Optional("train_tasks", default=DEFAULT_TRAIN_TASKS): _POSITIVE_INT,
        vol.Optional("validation_tasks", default=DEFAULT_VALIDATION_TASKS): _POSITIVE_INT,
        vol.Optional("cue_reliability", default=0.5): vol.All(
            vol.Coerce(float), vol.Range(min=MIN_CUE_RELIABILITY, max=MAX_CUE_RELIABILITY)
        ),
    }
)


@attrs.frozen
class EpisodeConfig:
    """Bounds of a single episode."""

    max_turns: int = DEFAULT_MAX_TURNS
    max_observation_chars: int = DEFAULT_MAX_OBSERVATION_CHARS
    max_action_chars: int = DEFAULT_MAX_ACTION_CHARS
    max_response_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS

    def __attrs_post_init__(self) -> None:
        """Check the cross-field invariants."""
        bounds = (self.max_turns, self.max_observation_chars, self.max_action_chars, self.max_response_tokens)
        if min(bounds) <= 0:
            msg = f"Episode bounds must be strictly positive, got {bounds}"
            raise ContractViolationError(msg)
        if self.max_action_chars > self.max_observation_chars:
            msg = (
                f"max_action_chars ({self.max_action_chars}) exceeds "
                f"max_observation_chars ({self.max_observation_chars})"
            )
            raise ContractViolationError(msg)

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None = None) -> EpisodeConfig:
        """Validate a mapping and build the config."""
        return cls(**_validated(EPISODE_CONFIG_SCHEMA, data))


@attrs.frozen
class RewardWeights:
    """Weights of the five reward dimensions plus the optional assertion one."""

    w_acc: float = DEFAULT_W_ACC
    w_proc: float = DEFAULT_W_PROC
    w_safe: float = DEFAULT_W_SAFE
    w_fmt: float = DEFAULT_W_FMT
    w_coh: float = DEFAULT_W_COH
    w_assert: float = DEFAULT_W_ASSERT

    def __attrs_post_init__(self) -> None:
        """Each weight lies in [0, 1]."""
        for name, value in attrs.asdict(self).items():
            if not 0.0 <= value <= 1.0:
                msg = f"Reward weight {name}={value} outside [0, 1]"
                raise ContractViolationError(msg)

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None = None) -> RewardWeights:
        """Validate a mapping and build the weights."""
        return cls(**_validated(REWARD_WEIGHTS_SCHEMA, data))


@attrs.frozen
class CosineRewardParams:
    """Parameters of the cosine length-controlled reward."""

    r_max: float = DEFAULT_COSINE_R_MAX
    r_min: float = DEFAULT_COSINE_R_MIN
    r_penalty: float = DEFAULT_COSINE_R_PENALTY
    max_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS

    def __attrs_post_init__(self) -> None:
        """R_max exceeds R_min and L_max is positive."""
        if self.r_max <= self.r_min:
            msg = f"r_max ({self.r_max}) must exceed r_min ({self.r_min})"
            raise ContractViolationError(msg)
        if self.max_tokens <= 0:
            msg = f"max_tokens must be positive, got {self.max_tokens}"
            raise ContractViolationError(msg)

    @property
    def delta(self) -> float:
        """Return ΔR = R_max − R_min."""
        return self.r_max - self.r_min

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None = None) -> CosineRewardParams:
        """Validate a mapping and build the parameters."""
        return cls(**_validated(COSINE_PARAMS_SCHEMA, data))


@attrs.frozen
class TrainerConfig:
    """Hyperparameters of a training run; structural values follow the LLM-scale recipe."""

    variant: str = "full"
    group_size: int = DEFAULT_GROUP_SIZE
    learning_rate: float = TOY_LEARNING_RATE
    kl_beta: float = DEFAULT_KL_BETA
    lambda_distill: float | None = None
    ema_decay: float = DEFAULT_EMA_DECAY
    ema_interval: int = DEFAULT_EMA_INTERVAL
    hard_copy_interval: int = DEFAULT_HARD_COPY_INTERVAL
    clip_epsilon: float = DEFAULT_CLIP_EPSILON
    max_response_tokens: int = TOY_MAX_RESPONSE_TOKENS
    batch_prompts: int = DEFAULT_BATCH_PROMPTS
    steps: int = DEFAULT_TRAIN_STEPS
    max_grad_norm: float | None = TOY_MAX_GRAD_NORM
    reward_mode: str | None = None
    max_turns: int = DEFAULT_MAX_TURNS
    train_tasks: int = DEFAULT_TRAIN_TASKS
    validation_tasks: int = DEFAULT_VALIDATION_TASKS
    cue_reliability: float = 0.5

    def __attrs_post_init__(self) -> None:
        """Check the invariants the schema cannot express on direct construction."""
        if self.variant not in VARIANTS:
            msg = f"Unknown variant {self.variant!r}, expected one of {VARIANTS}"
            raise ContractViolationError(msg)
        if self.group_size < MIN_GROUP_SIZE:
            msg = f"group_size must be at least {MIN_GROUP_SIZE}, got {self.group_size}"
            raise ContractViolationError(msg)
        if not 0.0 < self.ema_decay < 1.0:
            msg = f"ema_decay must lie in (0, 1), got {self.ema_decay}"
            raise ContractViolationError(msg)
        if self.reward_mode is not None and self.reward_mode not in REWARD_MODES:
            msg = f"Unknown reward mode {self.reward_mode!r}"
            raise ContractViolationError(msg)

    @property
    def distills(self) -> bool:
        """Return True if the variant carries the distillation term."""
        return self.variant != "grpo"

    @property
    def uses_hints(self) -> bool:
        """Return True if the teacher sees outcome-privileged hints."""
        return self.variant in {"ema_hints", "full"}

    @property
    def uses_ema(self) -> bool:
        """Return True if the teacher follows the student by EMA."""
        return self.variant in {"ema", "ema_hints", "full"}

    @property
    def uses_hard_copy(self) -> bool:
        """Return True if the teacher is periodically reset to the student."""
        return self.variant in {"reset", "full"}

    @property
    def effective_lambda(self) -> float:
        """Return λ_distill, zero for the plain GRPO baseline."""
        if self.lambda_distill is not None:
            return self.lambda_distill
        return DEFAULT_LAMBDA_DISTILL if self.distills else 0.0

    @property
    def effective_reward_mode(self) -> str:
        """Return the reward used for advantages."""
        if self.reward_mode is not None:
            return self.reward_mode
        return "accuracy" if self.variant in {"grpo", "ema_hints"} else "cosine"

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None = None) -> TrainerConfig:
        """Validate a mapping and build the config."""
        return cls(**_validated(TRAINER_CONFIG_SCHEMA, data))


def load_yaml_config(path: str | Path) -> dict[str, Any]:
    """Read a YAML configuration file into a mapping."""
    with Path(path).open(encoding="utf-8") as handle:
        data = yaml.safe_load(handle) or {}
    if not isinstance(data, dict):
        msg = f"Configuration file {path} must hold a mapping, got {type(data).__name__}"
        raise ContractViolationError(msg)
    _LOGGER.debug("Loaded configuration from %s: %s", path, sorted(data))
    return data


def _validated(schema: vol.Schema, data: dict[str, Any] | None) -> dict[str, Any]:
    """Run a voluptuous schema and turn its errors into contract violations."""
    try:
        return schema(dict(data or {}))
    except vol.Invalid as err:
        msg = f"Invalid configuration: {err}"
        raise ContractViolationError(msg) from err
