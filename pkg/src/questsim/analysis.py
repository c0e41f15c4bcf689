"""Post-run audits over a trace (and optionally its scenario).

Each audit returns a ``CheckResult``; the command line only formats them.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .io_model import all_ones
from .scheduler import VcpuParams, rms_admission, window_check
from .trace import Trace

CHECKS = ("admission", "windows", "isolation", "traps")


@dataclass
class CheckResult:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "lines": self.lines, "details": self.details}


def _vcpus_by_pcpu(meta: dict) -> dict[int, list[tuple[str, VcpuParams]]]:
    out = defaultdict(list)
    for vid, info in sorted(meta["vcpus"].items()):
        out[info["pcpu"]].append((vid, VcpuParams(info["budget_us"], info["period_us"])))
    return out


def check_admission(meta: dict) -> CheckResult:
    """Liu-Layland test per PCPU, using the VCPU table recorded in the trace meta."""
    res = CheckResult("admission", True)
    for pcpu, vcpus in sorted(_vcpus_by_pcpu(meta).items()):
        rep = rms_admission([p for _, p in vcpus], pcpu)
        res.details[str(pcpu)] = rep.to_dict() | {"vcpus": [v for v, _ in vcpus]}
        verdict = "admitted" if rep.admitted else "REJECTED"
        res.lines.append(
            f"pcpu {pcpu}: n={rep.n} U={rep.utilization:.6f} bound={rep.bound:.6f} {verdict}"
        )
        res.passed &= rep.admitted
    return res


def check_windows(trace: Trace) -> CheckResult:
    res = CheckResult("windows", True)
    for vid in sorted(trace.meta.get("vcpus", {})):
        rep = window_check(trace, vid)
        res.details[vid] = rep.to_dict()
        res.lines.append(
            f"{vid}: max fg in any {rep.period}us window = {rep.max_window} (C_max {rep.budget}) "
            + ("pass" if rep.passed else "FAIL")
        )
        res.passed &= rep.passed
    return res


def _sanctioned(trap: dict, fault_times: set) -> bool:
    kind = trap["kind"]
    if kind in ("hypercall", "debug_exception"):
        return True
    if kind == "io_port" and trap["detail"].startswith("port=0xcf"):
        return True
    return (trap["sandbox"], trap["time"]) in fault_times


def check_traps(trace: Trace) -> CheckResult:
    """Monitor entries after t=0, split into sanctioned causes and the rest.

    Sanctioned: channel setup, PCI configuration mediation and declared
    fault injections. Passes iff nothing else trapped and the exported
    counters match a recount of the trap records.
    """
    res = CheckResult("traps", True)
    traps = [r for r in trace.records["trap"] if r["time"] >= 0]
    faults = {(f["sandbox"], f["time"]) for f in trace.records["fault"]}
    unexplained = [t for t in traps if not _sanctioned(t, faults)]
    by_kind = Counter(t["kind"] for t in traps)
    res.lines.append(f"monitor traps after t=0: {len(traps)}")
    for k in sorted(by_kind):
        res.lines.append(f"  {k}: {by_kind[k]}")
    if unexplained:
        res.lines.append(f"unexplained traps: {len(unexplained)} (first at t={unexplained[0]['time']})")
    mismatches = counter_mismatches(trace)
    for m in mismatches:
        res.lines.append(f"counter mismatch: {m}")
    res.details = {"after_t0": len(traps), "by_kind": dict(by_kind), "unexplained": len(unexplained),
                   "counter_mismatches": mismatches}
    res.passed = not unexplained and not mismatches
    return res


def recount(trace: Trace) -> dict:
    """Counters recomputed from the record stream alone."""
    rec = trace.records
    sids = sorted(trace.meta.get("sandboxes", {}))
    entries = {s: 0 for s in sids}
    after = {s: 0 for s in sids}
    overhead = {s: 0 for s in sids}
    for t in rec["trap"]:
        s = str(t["sandbox"])
        entries[s] = entries.get(s, 0) + 1
        overhead[s] = overhead.get(s, 0) + t["cost_ns"]
        if t["time"] >= 0:
            after[s] = after.get(s, 0) + 1
    io = rec["io"]
    return {
        "monitor_entries": entries,
        "monitor_entries_after_t0": after,
        "tlb_flushes": dict(entries),
        "overhead_ns": overhead,
        "violations": len(rec["violation"]),
        "translations": len(rec["translation"]),
        "channels": len(rec["channel"]),
        "irqs_delivered": sum(1 for r in io if r["kind"] == "irq" and r["outcome"] == "queued"),
        "irqs_dropped": sum(1 for r in io if r["kind"] == "irq" and r["outcome"] == "dropped"),
        "pci_allows": sum(1 for r in io if r["outcome"] == "allow"),
        "pci_denies": sum(1 for r in io if r["kind"] == "pci" and r["outcome"] == "deny"),
        "faults_injected": len(rec["fault"]),
        "faults_contained": sum(1 for r in rec["fault"] if r["contained"]),
    }


def counter_mismatches(trace: Trace) -> list[str]:
    out = []
    for k, v in recount(trace).items():
        if trace.counters.get(k) != v:
            out.append(f"{k}: exported {trace.counters.get(k)!r}, recount {v!r}")
    return out


def pci_mediation_report(trace: Trace) -> dict:
    """Trace-level audit of the allow / single-step / re-mask protocol."""
    io = [r for r in trace.records["io"] if r["kind"] == "pci"]
    counts = Counter(r["outcome"] for r in io)
    broken = []
    by_sandbox = defaultdict(list)
    for r in trace.records["io"]:
        if r["isn"] is not None:
            by_sandbox[r["sandbox"]].append(r)
    for sid, rows in by_sandbox.items():
        for i, r in enumerate(rows):
            if r["outcome"] != "allow":
                continue
            nxt = rows[i + 1:i + 3]
            ok = (
                len(nxt) == 2
                and nxt[0]["outcome"] == "exec" and nxt[0]["isn"] == r["isn"]
                and nxt[1]["outcome"] == "remask" and nxt[1]["isn"] == r["isn"]
            )
            if not ok:
                broken.append(f"sandbox {sid} isn {r['isn']} at t={r['time']}")
    # no other instruction of the sandbox may sit between an allow and its re-mask
    for sid, rows in by_sandbox.items():
        open_isn = None
        for r in rows:
            if r["outcome"] == "allow":
                open_isn = r["isn"]
            elif open_isn is not None:
                if r["isn"] != open_isn:
                    broken.append(f"sandbox {sid}: isn {r['isn']} ran while {open_isn} was armed")
                if r["outcome"] == "remask":
                    open_isn = None
    leaks = [
        r for r in io
        if r["outcome"] == "deny" and r["detail"].endswith("blacklisted")
        and r["value"] is not None and r["value"] != all_ones(4)
    ]
    return {
        "allows": counts["allow"],
        "execs": counts["exec"],
        "remasks": counts["remask"],
        "denies": counts["deny"],
        "blacklisted_reads": sum(
            1 for r in io if r["outcome"] == "deny" and r["detail"].endswith("blacklisted") and r["value"] is not None
        ),
        "blacklist_leaks": len(leaks),
        "protocol_breaks": broken,
    }


def _owned_ranges(meta: dict, channels: list[dict]) -> dict[str, list[tuple[int, int]]]:
    out = {}
    for sid, info in meta.get("sandboxes", {}).items():
        spans = [(info["ram_hpa"], info["ram_hpa"] + info["mem_bytes"])]
        for name in info["devices"]:
            dev = meta.get("pci_devices", {}).get(name)
            if dev:
                spans += [(hpa, hpa + size) for hpa, size in dev.get("mmio", [])]
        for c in channels:
            if str(c["a"]) == sid or str(c["b"]) == sid:
                spans.append((c["hpa_first"], c["hpa_first"] + c["n_pages"] * 4096))
        out[sid] = spans
    return out


def check_isolation(trace: Trace) -> CheckResult:
    """Faults contained, every completed access inside the accessor's own resources,
    every schedule record on a PCPU of its own sandbox, PCI protocol intact."""
    res = CheckResult("isolation", True)
    meta = trace.meta
    owned = _owned_ranges(meta, trace.records["channel"])
    stray = []
    for r in trace.records["translation"]:
        if r["outcome"] != "ok":
            continue
        spans = owned.get(str(r["sandbox"]), [])
        if not any(lo <= r["hpa"] < hi for lo, hi in spans):
            stray.append(r)
    wrong_pcpu = []
    for s in trace.records["schedule"]:
        sb = meta.get("sandboxes", {}).get(str(s["sandbox"]))
        if sb is not None and s["pcpu"] not in sb["pcpus"]:
            wrong_pcpu.append(s)
    faults = trace.records["fault"]
    escaped = [f for f in faults if not f["contained"]]
    pci = pci_mediation_report(trace)
    res.lines += [
        f"faults injected: {len(faults)}, contained: {len(faults) - len(escaped)}",
        f"completed accesses outside own memory: {len(stray)}",
        f"schedule records on foreign PCPUs: {len(wrong_pcpu)}",
        f"pci allow/exec/remask: {pci['allows']}/{pci['execs']}/{pci['remasks']}, "
        f"blacklisted reads: {pci['blacklisted_reads']}, leaks: {pci['blacklist_leaks']}",
    ]
    res.details = {"escaped": escaped, "stray_accesses": len(stray), "wrong_pcpu": len(wrong_pcpu), "pci": pci}
    res.passed = (
        not escaped and not stray and not wrong_pcpu and not pci["blacklist_leaks"]
        and not pci["protocol_breaks"] and pci["allows"] == pci["execs"] == pci["remasks"]
    )
    return res


def idle_with_work(trace: Trace) -> list[tuple[int, int, int]]:
    """``(pcpu, start, end)`` intervals where a PCPU was idle although a job was pending."""
    busy = defaultdict(list)
    for s in trace.records["schedule"]:
        busy[s["pcpu"]].append((s["time_start"], s["time_end"]))
    until = trace.meta.get("until_us", 0)
    pending = defaultdict(list)
    for j in trace.records["job"]:
        end = j["finished"] if j["finished"] is not None else until
        if end > j["time"]:
            pending[j["pcpu"]].append((j["time"], end))
    gaps = []
    for pcpu, spans in pending.items():
        covered = _merge(busy[pcpu])
        for lo, hi in _merge(spans):
            t = lo
            for blo, bhi in covered:
                if bhi <= t:
                    continue
                if blo >= hi:
                    break
                if blo > t:
                    gaps.append((pcpu, t, blo))
                t = max(t, bhi)
                if t >= hi:
                    break
            if t < hi:
                gaps.append((pcpu, t, hi))
    return gaps


def _merge(spans):
    out = []
    for lo, hi in sorted(spans):
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return out


def run_checks(trace: Trace, checks=CHECKS, scenario=None) -> list[CheckResult]:
    out = []
    for name in checks:
        if name == "admission":
            meta = trace.meta if trace is not None else _scenario_meta(scenario)
            out.append(check_admission(meta))
        elif name == "windows":
            out.append(check_windows(trace))
        elif name == "isolation":
            out.append(check_isolation(trace))
        elif name == "traps":
            out.append(check_traps(trace))
        else:
            raise ValueError(f"unknown check {name!r}")
    return out


def _scenario_meta(scenario) -> dict:
    return {
        "vcpus": {
            v.id: {"pcpu": v.pcpu, "budget_us": v.budget_us, "period_us": v.period_us}
            for s in scenario.sandboxes for v in s.vcpus
        }
    }
