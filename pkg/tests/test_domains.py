import pytest

from clinigym.const import CLINICAL_DOMAINS, DOMAIN_CROSS, DOMAIN_MICRO_CLINIC
from clinigym.domains import (
    Domain,
    clinical_tool_names,
    drug_class,
    find_interaction,
    get_domain,
    list_domains,
    register_domain,
)
from clinigym.exceptions import DomainNotRegisteredError, RegistrationError
from clinigym.pathways import PATHWAYS
from clinigym.tasks import Task
from clinigym.tools import ToolKit, generic_toolkit


def test_builtin_domains_are_registered():
    assert {*CLINICAL_DOMAINS, DOMAIN_MICRO_CLINIC, DOMAIN_CROSS} <= set(list_domains())
    assert list_domains() == sorted(list_domains())


def test_clinical_tool_inventory():
    assert len(clinical_tool_names()) == 135


@pytest.mark.parametrize("name", [*CLINICAL_DOMAINS, DOMAIN_MICRO_CLINIC, DOMAIN_CROSS])
def test_every_domain_has_policy_and_generic_tools(name):
    domain = get_domain(name)
    assert domain.policy.strip()
    assert {"think", "submit_answer"} <= set(domain.toolkit.names)


def test_unknown_domain():
    with pytest.raises(DomainNotRegisteredError, match="dermatology"):
        get_domain("dermatology")


def test_cross_domain_carries_pathway_tools():
    toolkit = get_domain(DOMAIN_CROSS).toolkit
    for pathway in PATHWAYS.values():
        for phase in pathway.phases:
            assert {a.tool_name for a in phase.required_actions} <= set(toolkit.names)


def test_register_domain():
    kit = generic_toolkit("ward_round")
    register_domain(Domain("ward_round", "Round the ward.", kit), replace=True)
    assert get_domain("ward_round").policy == "Round the ward."
    with pytest.raises(RegistrationError, match="already registered"):
        register_domain(Domain("ward_round", "Again.", kit))
    register_domain(Domain("ward_round", "Round the ward twice.", kit), replace=True)
    assert get_domain("ward_round").policy == "Round the ward twice."


def test_register_domain_needs_generic_tools():
    with pytest.raises(RegistrationError):
        register_domain(Domain("bare_ward", "No tools.", ToolKit("bare_ward")))
    with pytest.raises(DomainNotRegisteredError):
        get_domain("bare_ward")


def test_task_state_overlays_domain_records(store):
    domain = get_domain("clinical_diagnosis")
    task = Task(domain="clinical_diagnosis", ticket="t", initial_state={"beds": {"icu": 2}})
    world = domain.new_world(task, store)
    assert world.view("beds") == {"icu": 2}
    assert world.view("encounter")["ticket"] == "t"
    assert "beds" not in domain.records


def test_interaction_lookup_by_class(store):
    world = get_domain("drug_interaction").new_world(Task(domain="drug_interaction", ticket="t"), store)
    assert drug_class(world, "Ibuprofen") == "nsaid"
    assert drug_class(world, "unlisted-drug") == "unlisted-drug"
    record = find_interaction(world, "ibuprofen", "warfarin")
    assert record is not None
    assert record["severity"] == "major"
    assert find_interaction(world, "acetaminophen", "warfarin") is None
