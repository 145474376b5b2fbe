import json

import pytest

from clinigym.domains import get_domain, shared_toolkit
from clinigym.exceptions import RegistrationError, ToolExecutionError
from clinigym.tasks import Task
from clinigym.tools import (
    ToolDefinition,
    ToolKit,
    ToolParameter,
    ToolResult,
    ToolType,
    WorldState,
    check_generic_tools,
    dispatch,
    export_schema,
    generic_toolkit,
    is_tool,
    merge,
    register,
    schema_of,
    stub_toolkit,
)


class WardTools:
    @is_tool(ToolType.READ, category="ward")
    def bed_count(self, world: WorldState, ward: str, include_closed: bool = False) -> dict:
        """
        Count beds on a ward.

        Args:
            ward: Ward name
            include_closed: Also count closed beds

        """
        beds = world.view("beds").get(ward)
        if beds is None:
            msg = f"No ward {ward!r}"
            raise ToolExecutionError(msg)
        return {"ward": ward, "beds": beds + (2 if include_closed else 0)}

    @is_tool(ToolType.WRITE, category="ward")
    def admit(self, world: WorldState, ward: str, patient_id: str) -> dict:
        """
        Admit a patient to a ward.

        Args:
            ward: Ward name
            patient_id: Patient identifier

        """
        world.table("admissions")[patient_id] = ward
        return {"admitted": patient_id}


@pytest.fixture
def ward_kit():
    return merge([ToolKit.from_object("ward", WardTools()), generic_toolkit()], domain="ward")


@pytest.fixture
def ward_world():
    return WorldState.from_records({"beds": {"icu": 4}})


@pytest.fixture
def diagnosis_world(store):
    domain = get_domain("clinical_diagnosis")
    return domain, domain.new_world(Task(domain="clinical_diagnosis", ticket="Review patient p1."), store)


def test_definition_from_method():
    definition = ToolDefinition.from_method(WardTools.bed_count)
    assert definition.name == "bed_count"
    assert definition.tool_type is ToolType.READ
    assert definition.description == "Count beds on a ward."
    assert definition.required == ["ward"]
    assert [(p.name, p.kind) for p in definition.parameters] == [("ward", "string"), ("include_closed", "boolean")]
    assert definition.parameters[1].description == "Also count closed beds"


def test_definition_requires_marker():
    def unmarked(world, value: str):
        return value

    with pytest.raises(RegistrationError):
        ToolDefinition.from_method(unmarked)
    assert ToolDefinition.from_method(unmarked, ToolType.THINK).tool_type is ToolType.THINK


def test_parameter_kind_is_checked():
    with pytest.raises(RegistrationError):
        ToolParameter("x", kind="date")


def test_schema_document():
    schema = ToolDefinition.from_method(WardTools.admit).schema()
    assert schema["type"] == "function"
    assert schema["function"]["name"] == "admit"
    assert schema["function"]["parameters"]["required"] == ["ward", "patient_id"]
    assert schema["function"]["parameters"]["properties"]["ward"] == {"type": "string", "description": "Ward name"}


def test_register_rejects_duplicates(ward_kit):
    definition = ToolDefinition.from_method(WardTools.admit)
    with pytest.raises(RegistrationError, match="already registered"):
        register(ward_kit, definition, WardTools().admit)


def test_register_returns_new_toolkit():
    empty = ToolKit("ward")
    kit = register(empty, ToolDefinition.from_method(WardTools.admit), WardTools().admit)
    assert len(empty) == 0
    assert kit.names == ["admit"]
    assert "admit" in kit


def test_schema_of_is_sorted(ward_kit):
    assert schema_of(ToolKit("empty")) == []
    names = [doc["function"]["name"] for doc in schema_of(ward_kit)]
    assert names == sorted(names) == ["admit", "bed_count", "submit_answer", "think"]
    assert json.loads(export_schema(ward_kit)) == schema_of(ward_kit)


def test_merge_first_wins():
    first = stub_toolkit("a", [{"name": "lookup", "description": "first"}])
    second = stub_toolkit("b", [{"name": "lookup", "description": "second"}, {"name": "other"}])
    merged = merge([first, second], domain="ab")
    assert merged.domain == "ab"
    assert merged.names == ["lookup", "other"]
    assert merged.tools["lookup"].description == "first"


def test_merge_edge_cases():
    kit = generic_toolkit()
    assert merge([kit]) is kit
    with pytest.raises(RegistrationError):
        merge([])


def test_shared_toolkit_size():
    shared = shared_toolkit()
    assert len(shared) == 5
    check_generic_tools(shared)
    assert len(get_domain("clinical_diagnosis").toolkit.tools.keys() & shared.tools.keys()) == 5


def test_check_generic_tools():
    with pytest.raises(RegistrationError, match="think"):
        check_generic_tools(ToolKit.from_object("ward", WardTools()))


def test_dispatch_unknown_tool(ward_kit, ward_world):
    result = dispatch(ward_kit, "discharge", {}, ward_world)
    assert not result.ok
    assert result.error_message == (
        "Unknown tool 'discharge'. Available tools: admit, bed_count, submit_answer, think"
    )
    assert json.loads(result.to_wire()) == {"ok": False, "error": result.error_message}
    assert not dispatch(ward_kit, None, {}, ward_world).ok


def test_dispatch_validates_arguments(ward_kit, ward_world):
    assert "must be a JSON object" in dispatch(ward_kit, "bed_count", ["icu"], ward_world).error_message
    assert "Invalid arguments" in dispatch(ward_kit, "bed_count", {}, ward_world).error_message
    coerced = dispatch(ward_kit, "bed_count", {"ward": "icu", "include_closed": "yes"}, ward_world)
    assert coerced.payload == {"ward": "icu", "beds": 6}


def test_dispatch_soft_errors(ward_kit, ward_world):
    result = dispatch(ward_kit, "bed_count", {"ward": "maternity"}, ward_world)
    assert not result.ok
    assert result.error_message == "No ward 'maternity'"


def test_dispatch_warns_on_unknown_arguments(ward_kit, ward_world):
    result = dispatch(ward_kit, "bed_count", {"ward": "icu", "floor": 3}, ward_world)
    assert result.ok
    assert result.warnings == ("Ignored unknown argument 'floor'",)
    assert json.loads(result.to_wire())["warnings"] == ["Ignored unknown argument 'floor'"]


def test_read_tools_leave_world_unchanged(diagnosis_world):
    domain, world = diagnosis_world
    before = world.state_hash()
    result = dispatch(domain.toolkit, "get_patient_info", {"patient_id": "p1"}, world)
    assert result.ok
    assert "penicillin" in json.dumps(result.payload).casefold()
    dispatch(domain.toolkit, "get_lab_results", {"patient_id": "p1", "test": "troponin"}, world)
    assert world.state_hash() == before
    assert world.mutation_log == []


def test_write_tools_log_mutations(diagnosis_world):
    domain, world = diagnosis_world
    before = world.state_hash()
    result = dispatch(domain.toolkit, "order_lab", {"patient_id": "p1", "test": "Troponin"}, world)
    assert result.ok
    assert result.payload["status"] == "resulted"
    assert world.mutation_log == [{"tool": "order_lab", "arguments": {"patient_id": "p1", "test": "Troponin"}}]
    assert world.state_hash() != before


def test_failed_write_is_not_logged(diagnosis_world):
    domain, world = diagnosis_world
    result = dispatch(domain.toolkit, "prescribe", {"patient_id": "p9", "drug": "aspirin", "dose_mg": 81}, world)
    assert not result.ok
    assert world.mutation_log == []


def test_new_world_is_isolated(store):
    domain = get_domain("clinical_diagnosis")
    task = Task(domain="clinical_diagnosis", ticket="Review patient p1.")
    first = domain.new_world(task, store)
    dispatch(domain.toolkit, "record_diagnosis", {"patient_id": "p1", "diagnosis": "STEMI"}, first)
    second = domain.new_world(task, store)
    assert second.mutation_log == []
    assert "diagnoses" not in second.records


def test_stub_tools_simulate():
    kit = stub_toolkit("radiology", [{"name": "read_film", "parameters": [{"name": "study_id"}]}])
    result = dispatch(kit, "read_film", {"study_id": "cxr-1"}, WorldState())
    assert result.payload == {"tool": "read_film", "status": "simulated", "arguments": {"study_id": "cxr-1"}}


def test_tool_result_invariant():
    with pytest.raises(ValueError, match="either ok"):
        ToolResult(ok=True, error_message="boom")
    assert ToolResult.failure("boom").to_wire() == '{"error":"boom","ok":false}'
