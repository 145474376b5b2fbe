"""Shared fixtures for the clinigym test suite."""

from __future__ import annotations

from pathlib import Path

import pytest

import clinigym
from clinigym.config import EpisodeConfig
from clinigym.env import ClinicalEnv
from clinigym.knowledge import KnowledgeStore, default_store
from clinigym.micro_clinic import micro_clinic_suite
from clinigym.tasks import Task, load_tasks
from clinigym.tools import json_text

FIXTURES = Path(__file__).parent / "fixtures"
PACKAGED_TASKS = Path(clinigym.__file__).parent / "data" / "tasks"


def call(name: str, **arguments: object) -> str:
    """Return a bare tool-call document."""
    return json_text({"name": name, "arguments": arguments})


@pytest.fixture(scope="session")
def store() -> KnowledgeStore:
    return default_store()


@pytest.fixture
def env(store: KnowledgeStore) -> ClinicalEnv:
    return ClinicalEnv(EpisodeConfig(), store)


@pytest.fixture(scope="session")
def micro_suite():
    return micro_clinic_suite(7, 10)


@pytest.fixture
def micro_task(micro_suite):
    return micro_suite[0]


@pytest.fixture(scope="session")
def qa_tasks() -> list[Task]:
    return load_tasks(PACKAGED_TASKS / "medical_qa.jsonl")


@pytest.fixture(scope="session")
def diagnosis_tasks() -> list[Task]:
    return load_tasks(PACKAGED_TASKS / "clinical_diagnosis.json")


@pytest.fixture
def clinic_task() -> Task:
    """Open clinical-diagnosis ticket on the packaged patient records."""
    return Task(
        domain="clinical_diagnosis",
        ticket="Review patient p1 and manage the presenting complaint.",
        nl_assertions=(r"chest pain",),
    )


@pytest.fixture
def pharmacology_log() -> Path:
    return FIXTURES / "example_pharmacology.jsonl"
