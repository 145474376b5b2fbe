"""Domain registry: behavioral policies, toolkits and world databases."""

from __future__ import annotations

import copy
import functools
import json
import logging
import re
import threading
from importlib import resources
from typing import TYPE_CHECKING, Any

import attrs
import yaml

from .const import CLINICAL_DOMAINS, DEFAULT_SEARCH_K, DOMAIN_CLINICAL_DIAGNOSIS, DOMAIN_CROSS, DOMAIN_MICRO_CLINIC
from .exceptions import DomainNotRegisteredError, QuerySyntaxError, RegistrationError, ToolExecutionError
from .micro_clinic import MicroClinicTools
from .pathways import PATHWAYS
from .tasks import options_from_ticket
from .tools import (
    ToolKit,
    ToolType,
    WorldState,
    check_generic_tools,
    generic_toolkit,
    is_tool,
    merge,
    stub_toolkit,
)

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .knowledge import KnowledgeStore
    from .tasks import Task

_LOGGER = logging.getLogger(__name__)

ENCOUNTER_TABLE = "encounter"
PRESCRIPTIONS_TABLE = "prescriptions"
ORDERS_TABLE = "orders"
DIAGNOSES_TABLE = "diagnoses"
SOURCE_PUBMED = "pubmed"
SOURCE_WIKI = "wikipedia"
MAX_DDX = 5
_WORD_RE = re.compile(r"[^\W_]+")


def _data_text(*parts: str) -> str:
    return resources.files("clinigym").joinpath("data", *parts).read_text(encoding="utf-8")


@functools.cache
def formulary() -> dict[str, Any]:
    """Return the packaged drug reference, interaction and guideline tables."""
    return json.loads(_data_text("formulary.json"))


@functools.cache
def stub_inventory() -> dict[str, list[dict[str, Any]]]:
    """Return the declarative tool inventory of the clinical domains."""
    return yaml.safe_load(_data_text("tools.yaml"))


def _policy(domain: str) -> str:
    return _data_text("domains", domain, "policy.md").strip()


def _database(domain: str) -> dict[str, Any]:
    try:
        return json.loads(_data_text("domains", domain, "db.json"))
    except FileNotFoundError:
        return {}


def merge_records(base: Mapping[str, Any], overlay: Mapping[str, Any]) -> dict[str, Any]:
    """Overlay task records onto a domain database; tables merge key by key."""
    merged = copy.deepcopy(dict(base))
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **copy.deepcopy(value)}
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def drug_class(world: WorldState, drug: str) -> str:
    """Return the pharmacological class of a drug, the drug name itself when unknown."""
    name = drug.strip().casefold()
    entry = world.records.get("drug_reference", {}).get(name)
    return entry["class"] if entry else name


def find_interaction(world: WorldState, drug_a: str, drug_b: str) -> dict[str, Any] | None:
    """Return the interaction record between two drugs, matched by class or name."""
    a_keys = {drug_a.strip().casefold(), drug_class(world, drug_a)}
    b_keys = {drug_b.strip().casefold(), drug_class(world, drug_b)}
    for record in world.records.get("interactions", ()):
        if (record["a"] in a_keys and record["b"] in b_keys) or (record["a"] in b_keys and record["b"] in a_keys):
            return record
    return None


@attrs.frozen
class Domain:
    """A registered domain: behavioral policy, toolkit and base database."""

    name: str
    policy: str
    toolkit: ToolKit
    records: dict[str, Any] = attrs.field(factory=dict, eq=False)

    def new_world(self, task: Task, store: KnowledgeStore | None = None) -> WorldState:
        """Return a fresh world for an episode on a task."""
        records = merge_records(self.records, task.initial_state)
        records[ENCOUNTER_TABLE] = {"ticket": task.ticket, "domain": task.domain}
        return WorldState(records=records, store=store)


class KnowledgeTools:
    """Retrieval tools shared by every clinical domain."""

    @staticmethod
    def _search(world: WorldState, query: str, max_results: int, source: str | None) -> dict[str, Any]:
        if world.store is None:
            msg = "Knowledge store unavailable"
            raise ToolExecutionError(msg)
        try:
            hits = world.store.search(query, k=max(1, min(int(max_results), 20)), source=source)
        except QuerySyntaxError as err:
            raise ToolExecutionError(str(err)) from err
        return {
            "query": query,
            "hits": [
                {
                    "doc_id": hit.doc_id,
                    "title": world.store.get_passage(hit.doc_id).title,
                    "source": world.store.get_passage(hit.doc_id).source,
                    "score": round(hit.score, 6),
                    "snippet": hit.snippet,
                }
                for hit in hits
            ],
        }

    @is_tool(ToolType.READ, category="evidence")
    def search_pubmed(self, world: WorldState, query: str, max_results: int = DEFAULT_SEARCH_K) -> dict[str, Any]:
        """
        Search biomedical literature abstracts.

        Args:
            query: Search terms; AND, OR, NOT, parentheses and quoted groups are supported
            max_results: Number of hits to return

        """
        return self._search(world, query, max_results, SOURCE_PUBMED)

    @is_tool(ToolType.READ, category="evidence")
    def search_medical_wiki(
        self, world: WorldState, query: str, max_results: int = DEFAULT_SEARCH_K
    ) -> dict[str, Any]:
        """
        Search encyclopedic medical articles.

        Args:
            query: Search terms
            max_results: Number of hits to return

        """
        return self._search(world, query, max_results, SOURCE_WIKI)

    @is_tool(ToolType.READ, category="evidence")
    def retrieve_evidence(self, world: WorldState, query: str, max_results: int = 3) -> dict[str, Any]:
        """
        Retrieve the best supporting passages across all sources.

        Args:
            query: Search terms
            max_results: Number of passages to return

        """
        return self._search(world, query, max_results, None)


class ClinicalDiagnosisTools:
    """Patient-record, ordering and prescribing tools."""

    @staticmethod
    def _patient(world: WorldState, patient_id: str) -> dict[str, Any]:
        patient = world.view("patients").get(patient_id)
        if patient is None:
            msg = f"No patient {patient_id!r}"
            raise ToolExecutionError(msg)
        return patient

    @is_tool(ToolType.READ, category="patient record")
    def get_patient_info(self, world: WorldState, patient_id: str) -> dict[str, Any]:
        """
        Demographics, allergies, medications and chief complaint.

        Args:
            patient_id: Patient identifier

        """
        return copy.deepcopy(self._patient(world, patient_id))

    @is_tool(ToolType.READ, category="patient record")
    def get_vital_signs(self, world: WorldState, patient_id: str) -> dict[str, Any]:
        """
        Latest vital signs.

        Args:
            patient_id: Patient identifier

        """
        self._patient(world, patient_id)
        return {"patient_id": patient_id, **world.view("vitals").get(patient_id, {})}

    @is_tool(ToolType.READ, category="laboratory")
    def get_lab_results(self, world: WorldState, patient_id: str, test: str = "") -> dict[str, Any]:
        """
        Resulted laboratory and bedside tests.

        Args:
            patient_id: Patient identifier
            test: Restrict to one test

        """
        self._patient(world, patient_id)
        labs = world.view("labs").get(patient_id, {})
        if test:
            wanted = test.strip().casefold()
            labs = {name: value for name, value in labs.items() if name == wanted}
        return {"patient_id": patient_id, "results": copy.deepcopy(labs)}

    @is_tool(ToolType.WRITE, category="laboratory")
    def order_lab(self, world: WorldState, patient_id: str, test: str) -> dict[str, Any]:
        """
        Order a test; returns its result when one is on file.

        Args:
            patient_id: Patient identifier
            test: Test name, e.g. troponin or blood culture

        """
        self._patient(world, patient_id)
        orders = world.table(ORDERS_TABLE)
        order_id = f"ord{len(orders) + 1}"
        name = test.strip().casefold()
        result = world.view("labs").get(patient_id, {}).get(name)
        orders[order_id] = {"patient_id": patient_id, "test": name}
        return {
            "order_id": order_id,
            "test": name,
            "status": "resulted" if result is not None else "pending",
            "result": copy.deepcopy(result),
        }

    @is_tool(ToolType.READ, category="diagnostic reasoning")
    def generate_ddx(self, world: WorldState, symptoms: str) -> dict[str, Any]:
        """
        Rank candidate diagnoses by the features they share with the presentation.

        Args:
            symptoms: Free-text description of the presentation

        """
        text = symptoms.casefold()
        guidelines = world.view("guidelines")
        ranked = []
        for condition, guideline in guidelines.items():
            matched = [feature for feature in guideline.get("features", ()) if feature in text]
            if matched:
                ranked.append((-len(matched), condition, matched))
        ranked.sort()
        return {
            "differential": [
                {
                    "condition": condition,
                    "matched_features": matched,
                    "confirm_with": guidelines[condition]["confirmatory_tests"],
                }
                for _, condition, matched in ranked[:MAX_DDX]
            ]
        }

    @is_tool(ToolType.WRITE, category="treatment")
    def prescribe(
        self,
        world: WorldState,
        patient_id: str,
        drug: str,
        dose_mg: float,
        indication: str = "",
        justification: str = "",
    ) -> dict[str, Any]:
        """
        Prescribe a drug.

        Args:
            patient_id: Patient identifier
            drug: Generic drug name
            dose_mg: Single dose in milligrams
            indication: Condition treated
            justification: Reason for choosing a drug outside first-line therapy

        """
        self._patient(world, patient_id)
        if dose_mg <= 0:
            msg = f"dose_mg must be positive, got {dose_mg}"
            raise ToolExecutionError(msg)
        prescriptions = world.table(PRESCRIPTIONS_TABLE)
        prescription_id = f"rx{len(prescriptions) + 1}"
        prescriptions[prescription_id] = {
            "patient_id": patient_id,
            "drug": drug.strip().casefold(),
            "dose_mg": dose_mg,
            "indication": indication,
            "justification": justification,
        }
        return {"prescription_id": prescription_id, "drug": drug.strip().casefold(), "status": "active"}

    @is_tool(ToolType.WRITE, category="documentation")
    def record_diagnosis(self, world: WorldState, patient_id: str, diagnosis: str) -> dict[str, Any]:
        """
        Record the working diagnosis in the chart.

        Args:
            patient_id: Patient identifier
            diagnosis: Diagnosis name

        """
        self._patient(world, patient_id)
        world.table(DIAGNOSES_TABLE)[patient_id] = diagnosis.strip()
        return {"patient_id": patient_id, "diagnosis": diagnosis.strip(), "status": "recorded"}


class MedicalQATools:
    """Tools for multiple-choice questions."""

    @is_tool(ToolType.READ, category="question analysis")
    def analyze_answer_options(self, world: WorldState, options: str = "") -> dict[str, Any]:
        """
        Weigh each lettered option against the knowledge base.

        Args:
            options: Lettered options as "A) ..." lines; defaults to those of the ticket

        """
        parsed = options_from_ticket(options) or options_from_ticket(
            world.records.get(ENCOUNTER_TABLE, {}).get("ticket", "")
        )
        if not parsed:
            msg = "No lettered options found"
            raise ToolExecutionError(msg)
        analysis = []
        for letter, text in sorted(parsed.items()):
            entry: dict[str, Any] = {"letter": letter, "text": text, "evidence_score": 0.0, "top_doc_id": None}
            if world.store is not None:
                words = _WORD_RE.findall(text.casefold())
                hits = world.store.search(" ".join(words), k=1) if words else []
                if hits:
                    entry["evidence_score"] = round(hits[0].score, 6)
                    entry["top_doc_id"] = hits[0].doc_id
            analysis.append(entry)
        return {"options": analysis}

    @is_tool(ToolType.READ, category="treatment")
    def compare_treatments(
        self, world: WorldState, treatment_a: str, treatment_b: str, condition: str = ""
    ) -> dict[str, Any]:
        """
        Compare two drugs by class, first-line status and mutual interaction.

        Args:
            treatment_a: First drug
            treatment_b: Second drug
            condition: Condition both would treat

        """
        guideline = world.view("guidelines").get(condition.strip().casefold(), {})
        first_line = set(guideline.get("first_line", ()))
        interaction = find_interaction(world, treatment_a, treatment_b)
        return {
            "treatments": [
                {
                    "drug": drug.strip().casefold(),
                    "class": drug_class(world, drug),
                    "first_line": drug.strip().casefold() in first_line,
                }
                for drug in (treatment_a, treatment_b)
            ],
            "interaction": interaction,
        }


class DrugInteractionTools:
    """Interaction checking."""

    @is_tool(ToolType.READ, category="safety")
    def check_interaction(self, world: WorldState, drug_a: str, drug_b: str) -> dict[str, Any]:
        """
        Check two drugs for a known interaction.

        Args:
            drug_a: First drug
            drug_b: Second drug

        """
        record = find_interaction(world, drug_a, drug_b)
        if record is None:
            return {"drug_a": drug_a, "drug_b": drug_b, "interaction": False}
        return {
            "drug_a": drug_a,
            "drug_b": drug_b,
            "interaction": True,
            "severity": record["severity"],
            "effect": record["effect"],
        }


_REAL_TOOLS: dict[str, type] = {
    DOMAIN_CLINICAL_DIAGNOSIS: ClinicalDiagnosisTools,
    "medical_qa": MedicalQATools,
    "drug_interaction": DrugInteractionTools,
}

_REGISTRY: dict[str, Domain] = {}
_REGISTRY_LOCK = threading.RLock()
_BUILTINS_LOADED = False


def register_domain(domain: Domain, *, replace: bool = False) -> None:
    """Add a domain to the registry."""
    with _REGISTRY_LOCK:
        _load_builtins()
        if domain.name in _REGISTRY and not replace:
            msg = f"Domain {domain.name!r} is already registered"
            raise RegistrationError(msg)
        check_generic_tools(domain.toolkit)
        _REGISTRY[domain.name] = domain
    _LOGGER.debug("Registered domain %s with %s tools", domain.name, len(domain.toolkit))


def get_domain(name: str) -> Domain:
    """Return a registered domain."""
    with _REGISTRY_LOCK:
        _load_builtins()
        try:
            return _REGISTRY[name]
        except KeyError as err:
            msg = f"Domain {name!r} is not registered; known domains: {', '.join(sorted(_REGISTRY))}"
            raise DomainNotRegisteredError(msg) from err


def list_domains() -> list[str]:
    """Return the registered domain names in order."""
    with _REGISTRY_LOCK:
        _load_builtins()
        return sorted(_REGISTRY)


def clinical_tool_names() -> set[str]:
    """Return the union of tool names over the clinical domains."""
    names: set[str] = set()
    for name in CLINICAL_DOMAINS:
        names.update(get_domain(name).toolkit.names)
    return names


def shared_toolkit() -> ToolKit:
    """Return the knowledge and generic tools every clinical domain carries."""
    return merge([ToolKit.from_object("knowledge", KnowledgeTools()), generic_toolkit()], domain="shared")


def _clinical_toolkit(name: str, shared: ToolKit) -> ToolKit:
    parts = []
    if name in _REAL_TOOLS:
        parts.append(ToolKit.from_object(name, _REAL_TOOLS[name]()))
    parts.extend((stub_toolkit(name, stub_inventory().get(name, ())), shared))
    return merge(parts, domain=name)


def _load_builtins() -> None:
    global _BUILTINS_LOADED  # noqa: PLW0603
    if _BUILTINS_LOADED:
        return
    _BUILTINS_LOADED = True
    shared = shared_toolkit()
    reference = formulary()
    kits: dict[str, ToolKit] = {}
    for name in CLINICAL_DOMAINS:
        kits[name] = _clinical_toolkit(name, shared)
        _REGISTRY[name] = Domain(
            name=name, policy=_policy(name), toolkit=kits[name], records=merge_records(reference, _database(name))
        )

    micro = merge(
        [ToolKit.from_object(DOMAIN_MICRO_CLINIC, MicroClinicTools()), generic_toolkit()], domain=DOMAIN_MICRO_CLINIC
    )
    _REGISTRY[DOMAIN_MICRO_CLINIC] = Domain(
        name=DOMAIN_MICRO_CLINIC, policy=_policy(DOMAIN_MICRO_CLINIC), toolkit=micro
    )

    pathway_domains: list[str] = []
    for pathway in PATHWAYS.values():
        pathway_domains.extend(d for d in pathway.domains if d not in pathway_domains)
    _REGISTRY[DOMAIN_CROSS] = Domain(
        name=DOMAIN_CROSS,
        policy=_policy(DOMAIN_CROSS),
        toolkit=merge([kits[d] for d in pathway_domains], domain=DOMAIN_CROSS),
        records=merge_records(reference, _database(DOMAIN_CLINICAL_DIAGNOSIS)),
    )
    for domain in _REGISTRY.values():
        check_generic_tools(domain.toolkit)
    _LOGGER.debug("Loaded %s built-in domains", len(_REGISTRY))
