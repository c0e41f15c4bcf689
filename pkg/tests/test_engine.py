import copy

import pytest

from questsim import Simulation, builtin, load_scenario, run, window_check
from questsim.engine import EngineInvariantViolation
from questsim.generate import _platform, fig5_document

SHORT = 50_000


def fig5(until=SHORT, **extra):
    doc = fig5_document()
    doc["run"]["until_us"] = until
    doc.update(copy.deepcopy(extra))
    return load_scenario(doc)


@pytest.fixture(scope="module")
def steady():
    sim = Simulation(fig5(), check=True)
    return sim, sim.run()


def test_steady_state_has_no_traps(steady):
    sim, tr = steady
    c = tr.counters
    assert set(c["monitor_entries"].values()) == {0}
    assert set(c["tlb_flushes"].values()) == {0}
    assert tr.records["trap"] == [] and c["violations"] == 0
    assert c["irqs_delivered"] > 0 and c["translations"] > 0
    assert sim.disjoint_ownership_violations() == []


def test_nic_handler_deferred_behind_main(steady):
    _, tr = steady
    first = [s for s in tr.records["schedule"] if s["job"] == "irq11#0"][0]
    # q1-main holds the PCPU with q1-control then q1-logger until its 2000us budget runs out
    assert first["time_start"] == 2000


def test_channel_costs_exactly_setup_traps():
    tr = run(fig5(channels=[{"at_us": 1000, "a": 1, "b": 2}]))
    traps = tr.records["trap"]
    assert [(t["time"], t["sandbox"], t["kind"]) for t in traps] == [(1000, 1, "hypercall"), (1000, 2, "hypercall")]
    assert tr.counters["monitor_entries"] == {"1": 1, "2": 1, "3": 0}
    ch = tr.records["channel"][0]
    assert (ch["a"], ch["b"], ch["n_pages"]) == (1, 2, 1)


def test_channel_ping_stays_trap_free():
    tr = run(fig5(channels=[{"at_us": 1000, "a": 1, "b": 2, "ping_period_us": 500}]))
    assert len(tr.records["trap"]) == 2
    pings = [r for r in tr.records["translation"] if r["gpa"] is not None and r["gpa"] >> 12 == 256 * 256]
    assert pings and {r["outcome"] for r in pings} == {"ok"}
    hpas = {r["hpa"] >> 12 for r in pings}
    assert hpas == {tr.records["channel"][0]["hpa_first"] >> 12}


def one_fault(kind, sandbox, target, **kw):
    return fig5(faults=[{"at_us": 2000, "sandbox": sandbox, "kind": kind, "target": target}], **kw)


def test_rogue_write_into_quest_ram_contained():
    sim = Simulation(one_fault("rogue_write", 3, {"victim": 1, "offset": 0x1000, "value": 0xDEADBEEF}))
    target = sim.sandboxes[1].ram_base + 0x1000
    before = sim.memory.read(target, 4)
    tr = sim.run()
    (f,) = tr.records["fault"]
    assert f["contained"] and f["outcome"] == "contained"
    assert tr.records["violation"][0]["kind"] == "memory"
    assert tr.records["trap"][0]["kind"] == "ept_violation"
    assert sim.memory.read(target, 4) == before != (0xDEADBEEF).to_bytes(4, "little")


def test_pci_probe_of_nic_reads_all_ones():
    tr = run(one_fault("pci_probe", 2, {"device": "nic", "offset": 0}))
    assert tr.records["fault"][0]["contained"]
    reads = [r for r in tr.records["io"] if r["kind"] == "pci" and r["target"].startswith("00:03.0") and r["outcome"] == "deny"]
    assert reads[-1]["value"] == 0xFFFFFFFF


def test_ioapic_hijack_denied_and_serial_still_delivered():
    tr = run(one_fault("ioapic_hijack", 3, {"irq": 4, "destinations": [3]}))
    assert tr.records["fault"][0]["contained"]
    assert tr.records["trap"][0]["resolution"] == "ioapic_denied"
    later = [r for r in tr.records["irq"] if r["irq_line"] == 4 and r["time"] > 2000]
    assert later and all(r["destinations"] == [2] for r in later)


def test_own_ioapic_write_is_applied_not_contained():
    tr = run(one_fault("ioapic_hijack", 1, {"irq": 11, "destinations": [1], "masked": True}))
    f = tr.records["fault"][0]
    assert f["outcome"] == "applied" and not f["contained"]
    assert not [r for r in tr.records["irq"] if r["irq_line"] == 11 and r["time"] > 2000 and r["destinations"]]


def test_owner_pci_access_goes_through_single_step():
    tr = run(one_fault("pci_probe", 1, {"device": "nic", "offset": 0}))
    outcomes = [r["outcome"] for r in tr.records["io"] if r["kind"] == "pci" and r["target"].startswith("00:03.0")]
    assert outcomes[-3:] == ["allow", "exec", "remask"]
    assert tr.records["fault"][0]["outcome"] == "permitted"


def test_irq_burst_respects_io_budget():
    doc = {"name": "burst", "platform": _platform(1, 1), "run": {"until_us": 3000, "seed": 0},
           "sandboxes": [{"id": 1, "pcpus": [0], "mem_mb": 8, "devices": ["uart0"],
                          "vcpus": [{"id": "main", "pcpu": 0, "budget_us": 200, "period_us": 1000},
                                    {"id": "io", "flavor": "io", "pcpu": 0, "budget_us": 30, "period_us": 1000, "irqs": [3]}],
                          "threads": [{"id": "t", "vcpu": "main", "touch_memory": False,
                                       "jobs": [{"arrival_us": 0, "compute_us": 2500}]}]}],
           "workload": {"interrupts": [{"irq_line": 3, "period_us": 1, "handler_us": 10}]}}
    sc = load_scenario(doc).with_overrides(until_us=3000)
    tr = Simulation(sc, check=True).run()
    assert window_check(tr, "io").passed
    assert window_check(tr, "main").passed


def test_burst_of_ten_irqs():
    """Ten 10us handlers against a 30us Io budget: 30 foreground, the rest in background."""
    doc = {"name": "burst10", "platform": _platform(1, 1), "run": {"until_us": 3000, "seed": 0},
           "sandboxes": [{"id": 1, "pcpus": [0], "mem_mb": 8, "devices": ["uart0"],
                          "vcpus": [{"id": "io", "flavor": "io", "pcpu": 0, "budget_us": 30, "period_us": 1000, "irqs": [3]},
                                    {"id": "main", "pcpu": 0, "budget_us": 100, "period_us": 2000}],
                          "threads": [{"id": "t", "vcpu": "main", "touch_memory": False,
                                       "jobs": [{"arrival_us": 0, "compute_us": 2900}]}]}],
           "workload": {"interrupts": [{"irq_line": 3, "period_us": 100_000, "offset_us": k, "handler_us": 10}
                                       for k in range(10)]}}
    tr = Simulation(load_scenario(doc), check=True).run()
    handled = [s for s in tr.records["schedule"] if s["vcpu"] == "io"]
    assert tr.counters["irqs_delivered"] == 10
    assert sum(s["time_end"] - s["time_start"] for s in handled) == 100
    assert sum(s["time_end"] - s["time_start"] for s in handled if s["foreground"]) == 30
    assert window_check(tr, "io").passed
    assert window_check(tr, "main").passed


def test_engine_is_deterministic():
    sc = one_fault("rogue_read", 2, {"victim": 3, "offset": 77})
    assert run(sc).to_json() == run(sc).to_json()


def test_noop_events_do_not_change_trace():
    sc = fig5(until=20_000)
    base = Simulation(sc).run().to_json()
    sim = Simulation(sc)
    for t in (0, 1, 1499, 1500, 7777, 19_999):
        sim.insert_noop(t)
    assert sim.run().to_json() == base


def test_schedule_is_time_ordered(steady):
    _, tr = steady
    by_pcpu = {}
    for s in tr.records["schedule"]:
        by_pcpu.setdefault(s["pcpu"], []).append(s)
    for segs in by_pcpu.values():
        assert all(a["time_end"] <= b["time_start"] for a, b in zip(segs, segs[1:]))
        assert all(s["time_start"] < s["time_end"] for s in segs)


def test_empty_run_has_counters():
    tr = run(builtin("fig5").with_overrides(until_us=0))
    assert len(tr) == 0
    assert tr.counters["monitor_entries"] == {"1": 0, "2": 0, "3": 0}


def test_meta_describes_partitioning(steady):
    _, tr = steady
    m = tr.meta
    assert m["sandboxes"]["1"]["devices"] == ["nic"]
    assert m["vcpus"]["q1-main"] == {**m["vcpus"]["q1-main"], "pcpu": 0, "budget_us": 2000, "period_us": 5000}
    assert m["sandboxes"]["3"]["ept_structure_bytes"] > 0


def test_invariant_violation_is_wrapped(monkeypatch):
    from questsim.io_model import ProtocolViolation

    sim = Simulation(one_fault("pci_probe", 1, {"device": "nic"}))

    def broken(sid):
        raise ProtocolViolation("debug trap without an armed single-step")

    monkeypatch.setattr(sim.io, "complete_single_step", broken)
    with pytest.raises(EngineInvariantViolation, match="ProtocolViolation"):
        sim.run()
