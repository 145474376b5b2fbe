"""Clinical agent gym: multi-turn environment, reward engine and distillation trainer."""

from __future__ import annotations

from .config import CosineRewardParams, EpisodeConfig, RewardWeights, TrainerConfig
from .domains import get_domain, list_domains, register_domain
from .env import ClinicalEnv, Observation, StepResult, score_trajectory
from .exceptions import ClinigymError
from .knowledge import KnowledgeStore, default_store
from .rewards import RewardBreakdown, cosine_reward, evaluate
from .tasks import Task, load_tasks
from .trainer import Trainer, train
from .trajectory import AgentAction, Trajectory, read_trajectories, write_trajectories

__all__ = [
    "AgentAction",
    "ClinicalEnv",
    "ClinigymError",
    "CosineRewardParams",
    "EpisodeConfig",
    "KnowledgeStore",
    "Observation",
    "RewardBreakdown",
    "RewardWeights",
    "StepResult",
    "Task",
    "Trainer",
    "TrainerConfig",
    "Trajectory",
    "cosine_reward",
    "default_store",
    "evaluate",
    "get_domain",
    "list_domains",
    "load_tasks",
    "read_trajectories",
    "register_domain",
    "score_trajectory",
    "train",
    "write_trajectories",
]
