import copy
import json

import pytest

from questsim.generate import fig5_document
from questsim.scenario import ParseError, ScenarioError, ScenarioValidationError, builtin, hpa_layout, load_scenario

MB = 1 << 20


@pytest.fixture
def doc():
    return fig5_document()


def test_fig5_loads():
    sc = builtin("fig5")
    assert sc.platform.pcpu_count == 4
    assert sorted(s.mem_bytes // MB for s in sc.sandboxes) == [256, 256, 512]
    owner = sc.device_owner()
    assert owner["nic"] == 1 and owner["serial"] == 2
    assert "invented" in sc.description


def test_mb_fields_become_bytes(doc):
    assert load_scenario(doc).sandbox(1).mem_bytes == 256 * MB


def test_double_assigned_nic(doc):
    doc["sandboxes"][1]["devices"] = ["nic"]
    with pytest.raises(ScenarioValidationError) as e:
        load_scenario(doc)
    assert e.value.path == "sandboxes.1.devices.0"


def test_budget_over_period_rejected(doc):
    v = doc["sandboxes"][0]["vcpus"][0]
    v["budget_us"], v["period_us"] = 10_000, 5_000
    with pytest.raises(ScenarioError) as e:
        load_scenario(doc)
    assert e.value.path == "sandboxes.0.vcpus.0.budget_us"


def test_unknown_field_rejected(doc):
    doc["sandboxes"][0]["colour"] = "blue"
    with pytest.raises(ScenarioValidationError) as e:
        load_scenario(doc)
    assert "colour" in e.value.path


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["sandboxes"][1]["pcpus"].append(0), "sandboxes.1.pcpus.1"),
        (lambda d: d["sandboxes"][0]["pcpus"].__setitem__(0, 9), "sandboxes.0.pcpus.0"),
        (lambda d: d["sandboxes"][0]["devices"].append("tape"), "sandboxes.0.devices.1"),
        (lambda d: d["sandboxes"][0]["threads"][0].__setitem__("vcpu", "q1-nic"), "sandboxes.0.threads.0.vcpu"),
        (lambda d: d.__setitem__("channels", [{"at_us": 0, "a": 1, "b": 1}]), "channels.0.b"),
        (lambda d: d.__setitem__("faults", [{"at_us": 0, "sandbox": 7, "kind": "rogue_read"}]), "faults.0.sandbox"),
        (lambda d: d["platform"].__setitem__("ram_mb", 512), "platform.ram_bytes"),
    ],
)
def test_validation_paths(doc, mutate, path):
    mutate(doc)
    with pytest.raises(ScenarioValidationError) as e:
        load_scenario(doc)
    assert e.value.path == path


def test_fault_target_keys_checked(doc):
    doc["faults"] = [{"at_us": 5, "sandbox": 3, "kind": "rogue_write", "target": {"victim": 1, "colour": 1}}]
    with pytest.raises(ScenarioValidationError, match="colour"):
        load_scenario(doc)


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_scenario("{not json")
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "nope.json")


def test_load_from_path_and_text(tmp_path, doc):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    assert load_scenario(p).digest() == load_scenario(str(p)).digest() == load_scenario(json.dumps(doc)).digest()


def test_overrides_change_digest(doc):
    sc = load_scenario(doc)
    sc2 = sc.with_overrides(until_us=5, seed=9)
    assert (sc2.run.until_us, sc2.run.seed) == (5, 9)
    assert sc2.digest() != sc.digest() and sc.run.until_us == doc["run"]["until_us"]


def test_hpa_layout_disjoint(doc):
    sc = load_scenario(doc)
    pool, bases = hpa_layout(sc)
    spans = sorted((bases[s.id], bases[s.id] + s.mem_bytes) for s in sc.sandboxes)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert pool + sc.platform.channel_pool_pages * 4096 <= spans[0][0]


def test_document_not_mutated(doc):
    before = copy.deepcopy(doc)
    load_scenario(doc)
    assert doc == before
