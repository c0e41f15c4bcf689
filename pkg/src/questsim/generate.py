"""Seeded random scenario generators for sweeps, fuzzing and the acceptance suite.

All generators return plain scenario documents (dicts); pass them through
``load_scenario`` to validate.
"""

from __future__ import annotations

import copy
import json
from importlib.resources import files

import numpy as np

from .scheduler import VcpuParams, liu_layland_bound, rms_admission


def fig5_document() -> dict:
    return json.loads((files("questsim") / "scenarios" / "fig5.json").read_text())


def random_vcpu_set(rng: np.random.Generator, n: int, *, min_period: int = 8, max_period: int = 400):
    """``n`` integer (C, T) pairs that pass the Liu-Layland test."""
    bound = liu_layland_bound(n)
    while True:
        periods = rng.integers(min_period, max_period + 1, size=n)
        shares = rng.dirichlet(np.ones(n)) * bound * rng.uniform(0.3, 1.0)
        params = [VcpuParams(max(1, int(u * t)), int(t)) for u, t in zip(shares, periods)]
        if rms_admission(params).admitted:
            return params


def _platform(n_pcpus: int, irq_devices: int = 0) -> dict:
    return {
        "pcpu_count": n_pcpus,
        "ram_mb": 64 + 16 * n_pcpus,
        "monitor_reserved_mb": 4,
        "channel_pool_pages": 16,
        "port_devices": [
            {"name": f"uart{i}", "base": 0x3F8 - 0x100 * i, "count": 8, "irq_line": 3 + i}
            for i in range(irq_devices)
        ],
    }


def random_sched_scenario(seed: int, until_us: int = 20000) -> dict:
    """1-3 single-PCPU sandboxes, 1-4 VCPUs per PCPU, random admitted budgets and random demand.

    Every sandbox gets one I/O VCPU fed by a Poisson interrupt source when
    it has more than one VCPU, so handler jobs share the PCPU with threads.
    """
    rng = np.random.default_rng([seed, 0x5C4ED])
    n_sb = int(rng.integers(1, 4))
    doc = {"name": f"sched-{seed}", "platform": _platform(n_sb, n_sb), "sandboxes": [],
           "workload": {"interrupts": []}, "run": {"until_us": until_us, "seed": seed}}
    for s in range(n_sb):
        n = int(rng.integers(1, 5))
        vcpus, threads = [], []
        for k, p in enumerate(random_vcpu_set(rng, n)):
            vid = f"s{s}v{k}"
            io = k == n - 1 and n > 1
            vcpus.append({"id": vid, "flavor": "io" if io else "main", "pcpu": s, "budget_us": p.budget,
                          "period_us": p.period, "irqs": [3 + s] if io else []})
            if io:
                doc["workload"]["interrupts"].append({
                    "irq_line": 3 + s, "kind": "poisson", "mean_us": float(rng.uniform(5, 4 * p.period)),
                    "handler_us": int(rng.integers(1, 3 * p.budget + 2)), "seed": int(rng.integers(1 << 16)),
                })
                continue
            if rng.random() < 0.5:
                period = int(rng.integers(p.period // 2 + 1, 3 * p.period))
                threads.append({"id": f"{vid}t0", "vcpu": vid, "touch_memory": False, "periodic": {
                    "period_us": period, "compute_us": int(rng.integers(1, 2 * p.budget + 2)),
                    "offset_us": int(rng.integers(0, p.period))}})
            arrivals = np.sort(rng.integers(0, until_us, size=int(rng.integers(1, 40))))
            threads.append({"id": f"{vid}t1", "vcpu": vid, "touch_memory": False, "jobs": [
                {"arrival_us": int(a), "compute_us": int(rng.integers(1, 4 * p.budget + 2))} for a in arrivals]})
        doc["sandboxes"].append({"id": s + 1, "pcpus": [s], "mem_mb": 8, "devices": [f"uart{s}"],
                                 "vcpus": vcpus, "threads": threads})
    return doc


def backlogged_scenario(params, until_us: int, name: str = "backlogged") -> dict:
    """One PCPU whose Main VCPUs ``params`` each hold a job longer than the run (always backlogged)."""
    vcpus = [{"id": f"v{k}", "pcpu": 0, "budget_us": p.budget, "period_us": p.period} for k, p in enumerate(params)]
    threads = [{"id": f"t{k}", "vcpu": f"v{k}", "touch_memory": False,
                "jobs": [{"arrival_us": 0, "compute_us": until_us + 1}]} for k in range(len(params))]
    return {"name": name, "platform": _platform(1),
            "sandboxes": [{"id": 1, "pcpus": [0], "mem_mb": 8, "vcpus": vcpus, "threads": threads}],
            "run": {"until_us": until_us, "seed": 0}}


def random_backlogged(seed: int, until_us: int = 20000) -> dict:
    rng = np.random.default_rng([seed, 0xBAC])
    return backlogged_scenario(random_vcpu_set(rng, int(rng.integers(1, 5))), until_us, f"backlogged-{seed}")


def _owned_irqs(doc: dict) -> dict[int, set]:
    irq_of = {d["name"]: d.get("irq_line") for d in doc["platform"].get("pci_devices", []) + doc["platform"].get("port_devices", [])}
    return {s["id"]: {irq_of[d] for d in s.get("devices", []) if irq_of.get(d) is not None} for s in doc["sandboxes"]}


def fault_fuzz_scenario(seed: int, n_faults: int = 60, base: dict | None = None, until_us: int = 200000) -> dict:
    """``base`` (default fig5) plus ``n_faults`` random hostile accesses from random sandboxes.

    Every target is something the attacker has no right to: another
    sandbox's RAM or device MMIO, unmapped guest-physical space, a
    blacklisted or absent PCI function, or a redirection entry for a line
    it does not own.
    """
    doc = copy.deepcopy(base or fig5_document())
    rng = np.random.default_rng([seed, 0xF417])
    doc["name"] = f"fuzz-{seed}"
    doc["run"] = {"until_us": until_us, "seed": seed}
    sbs = doc["sandboxes"]
    mem = {s["id"]: s.get("mem_bytes", s.get("mem_mb", 0) << 20) for s in sbs}
    pci = doc["platform"].get("pci_devices", [])
    owner = {d: s["id"] for s in sbs for d in s.get("devices", [])}
    owned_irqs = _owned_irqs(doc)
    n_entries = doc["platform"].get("ioapic", {}).get("entries", 24)
    faults = []
    times = np.sort(rng.choice(np.arange(1, until_us), size=n_faults, replace=False))
    for t in times:
        attacker = sbs[int(rng.integers(len(sbs)))]["id"]
        others = [s["id"] for s in sbs if s["id"] != attacker]
        kind = ["rogue_read", "rogue_write", "pci_probe", "ioapic_hijack"][int(rng.integers(4))]
        target: dict = {}
        if kind in ("rogue_read", "rogue_write"):
            choice = rng.integers(3)
            foreign_mmio = [d["name"] for d in pci if d.get("mmio") and owner.get(d["name"]) != attacker]
            if choice == 0 and others:
                victim = others[int(rng.integers(len(others)))]
                target = {"victim": victim, "offset": int(rng.integers(mem[victim]))}
            elif choice == 1 and foreign_mmio:
                target = {"device": foreign_mmio[int(rng.integers(len(foreign_mmio)))], "offset": int(rng.integers(64)) * 4}
            else:
                # unmapped guest-physical space far above RAM, channels and MMIO
                target = {"gpa": int(rng.integers(1 << 33, 1 << 40)) & ~3}
            if kind == "rogue_write":
                target["value"] = int(rng.integers(1 << 32))
        elif kind == "pci_probe":
            foreign = [d["name"] for d in pci if owner.get(d["name"]) != attacker]
            if foreign and rng.random() < 0.8:
                target = {"device": foreign[int(rng.integers(len(foreign)))]}
            else:
                target = {"bus": int(rng.integers(2, 256)), "dev": int(rng.integers(32)), "func": int(rng.integers(8))}
            target["offset"] = int(rng.integers(64)) * 4
            if rng.random() < 0.3:
                target["write"] = int(rng.integers(1 << 32))
        else:
            candidates = [i for i in range(n_entries) if i not in owned_irqs[attacker]]
            irq = candidates[int(rng.integers(len(candidates)))]
            target = {"irq": irq, "destinations": [attacker], "masked": bool(rng.random() < 0.3)}
        faults.append({"at_us": int(t), "sandbox": attacker, "kind": kind, "target": target})
    doc["faults"] = faults
    return doc


def pci_workload_scenario(seed: int, until_us: int = 200000, accesses: int = 80) -> dict:
    """fig5 plus a random configuration-space workload in every sandbox."""
    doc = fig5_document()
    rng = np.random.default_rng([seed, 0x9C1])
    doc["name"] = f"pci-{seed}"
    doc["run"] = {"until_us": until_us, "seed": seed}
    doc["workload"]["pci_config"] = [
        {"sandbox": s["id"], "start_us": int(rng.integers(0, 1000)), "interval_us": int(rng.integers(50, 2000)),
         "count": accesses, "seed": int(rng.integers(1 << 16)), "write_fraction": float(rng.uniform(0, 0.5))}
        for s in doc["sandboxes"]
    ]
    return doc
