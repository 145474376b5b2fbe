"""Rollout coordinator for clinigym."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from .config import EpisodeConfig
from .env import ClinicalEnv
from .exceptions import RolloutFailedError
from .policy import run_episode

if TYPE_CHECKING:
    from .knowledge import KnowledgeStore
    from .policy import EpisodeOutcome, Policy
    from .tasks import Task

_LOGGER = logging.getLogger(__name__)


class RolloutCoordinator:
    """Class to collect seeded rollouts of a policy."""

    def __init__(
        self,
        policy: Policy,
        seed: int,
        config: EpisodeConfig | None = None,
        store: KnowledgeStore | None = None,
    ) -> None:
        """Initialize the coordinator."""
        self.policy = policy
        self.seed = seed
        self.config = config or EpisodeConfig()
        self.store = store

    def rollout(self, task: Task, *parts: int) -> EpisodeOutcome:
        """Run one episode on a fresh environment with a clone of the policy."""
        env = ClinicalEnv(self.config, self.store)
        try:
            outcome = run_episode(env, self.policy.clone(), task, self.seed, *parts)
        except Exception as err:
            msg = f"Rollout on task {task.id} ({parts}) failed: {err}"
            raise RolloutFailedError(msg) from err
        else:
            return outcome

    def collect_group(self, task: Task, group_size: int, *parts: int) -> list[EpisodeOutcome]:
        """Collect group_size rollouts of one task; the group index is folded into each seed."""
        outcomes = [self.rollout(task, *parts, index) for index in range(group_size)]
        _LOGGER.debug(
            "Collected %s rollouts of task %s, mean turns %.2f",
            group_size,
            task.id,
            sum(len(o.trajectory.turns) for o in outcomes) / group_size,
        )
        return outcomes
