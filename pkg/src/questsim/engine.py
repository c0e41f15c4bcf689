"""Deterministic discrete-event engine.

``run(scenario)`` builds the boot-time partition (before the clock starts,
so no trap is recorded for it), then drains a single ``(time, sequence)``
ordered event heap until ``run.until_us``. PCPU schedulers advance lazily
to each event time; each one only ever sees its own sandbox's VCPUs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import __version__
from .io_model import (
    IoModelError,
    Direct,
    Direction,
    IoFabric,
    PciBus,
    PciDevice,
    PortDevice,
    RedirectionEntry,
    RedirectionTable,
    all_ones,
    pci_encode,
    route_interrupt,
)
from .memory_model import (
    PAGE_SHIFT,
    PAGE_SIZE,
    Access,
    AddressSpace,
    EptViolation,
    GuestPageFault,
    HostMemory,
    HostOwnership,
    MemoryModelError,
    Permissions,
    Tlb,
    Translated,
    ept_map,
    ept_map_range,
    translate,
)
from .monitor import (
    ChannelPool,
    MemoryTrap,
    Monitor,
    MonitorError,
    Trap,
    TrapCosts,
    TrapKind,
    create_channel,
)
from .scenario import Scenario, hpa_layout
from .scheduler import Flavor, Job, PcpuScheduler, SchedulerError, Vcpu, VcpuParams
from .trace import Trace

log = logging.getLogger(__name__)

IOAPIC_HPA = 0xFEC00000
IOWIN_OFFSET = 0x10
ROGUE_VALUE = 0xDEADBEEF


class EngineInvariantViolation(Exception):
    pass


@dataclass
class _SandboxRt:
    spec: Any
    space: AddressSpace
    monitor: Monitor
    ram_base: int  # HPA bytes
    pcpus: list[int]
    isn: int = 0
    io_vcpus: dict[int, Vcpu] = field(default_factory=dict)
    devices: set = field(default_factory=set)


class Simulation:
    """One run of one scenario. Single-threaded; build a new one per run."""

    def __init__(self, scenario: Scenario, *, chunked: bool = True, check: bool = False):
        self.sc = scenario
        self.chunked = chunked
        self.check = check
        self.until = scenario.run.until_us
        self.trace = Trace()
        self._heap: list = []
        self._seq = 0
        self.now = 0
        self.tally = {"irqs_delivered": 0, "irqs_dropped": 0, "pci_allows": 0, "pci_denies": 0,
                      "faults_injected": 0, "faults_contained": 0}
        self._setup()

    # ------------------------------------------------------------------ setup

    def _setup(self) -> None:
        sc, p = self.sc, self.sc.platform
        self.tlb = Tlb()
        self.registry = HostOwnership()
        self.memory = HostMemory()
        self.costs = TrapCosts(sc.costs.trap_ns, sc.costs.tlb_flush_ns)
        self.pci_devices = {
            d.name: PciDevice(d.name, d.vendor_id, d.device_id, d.bus, d.dev, d.func, d.irq_line,
                              [(m.hpa, m.size) for m in d.mmio], d.class_code)
            for d in p.pci_devices
        }
        # 16550-style reset values: LSR reports transmitter empty
        self.port_devices = {}
        for d in p.port_devices:
            reset = bytearray(d.count)
            if d.count > 5:
                reset[5] = 0x60
            self.port_devices[d.name] = PortDevice(d.name, d.base, d.count, d.irq_line, reset)
        self.io = IoFabric(PciBus(self.pci_devices.values()), self.port_devices.values(),
                           p.pci_address_port, p.pci_data_port)
        self.ioapic = RedirectionTable(p.ioapic.entries, p.ioapic.gpa)

        pool_base, bases = hpa_layout(sc)
        self.pool = ChannelPool(pool_base >> PAGE_SHIFT, p.channel_pool_pages)
        owner = sc.device_owner()
        all_pci_ids = {name: (d.vendor_id, d.device_id) for name, d in self.pci_devices.items()}

        self.sandboxes: dict[int, _SandboxRt] = {}
        self.schedulers: dict[int, PcpuScheduler] = {}
        self.vcpus: dict[str, Vcpu] = {}
        self._threads: dict[str, Any] = {}
        for s in sc.sandboxes:
            space = AddressSpace(s.id, self.tlb)
            n_pages = s.mem_bytes >> PAGE_SHIFT
            ept_map_range(space.ept, 0, bases[s.id] >> PAGE_SHIFT, n_pages, Permissions.RWX, registry=self.registry)
            owned_ports = []
            for name in s.devices:
                if name in self.pci_devices:
                    for hpa, size in self.pci_devices[name].mmio:
                        for page in range(hpa >> PAGE_SHIFT, (hpa + size + PAGE_SIZE - 1) >> PAGE_SHIFT):
                            ept_map(space.ept, page, page, Permissions.RW, registry=self.registry)
                else:
                    owned_ports.extend(self.port_devices[name].ports)
            # IOAPIC window: present but inaccessible, so every touch is an EPT violation
            ept_map(space.ept, p.ioapic.gpa >> PAGE_SHIFT, IOAPIC_HPA >> PAGE_SHIFT, Permissions.NONE)
            self.io.add_sandbox(s.id, owned_ports)

            own_ids = {all_pci_ids[n] for n in s.devices if n in all_pci_ids}
            if s.blacklist is None:
                blacklist = {ids for n, ids in all_pci_ids.items() if owner.get(n) != s.id} - own_ids
            else:
                blacklist = {(b.vendor_id, b.device_id) for b in s.blacklist}
            dev_irqs = {self._device_irq(n) for n in s.devices} - {None}
            irqs = set(s.ioapic_irqs) if s.ioapic_irqs is not None else dev_irqs
            mon = Monitor(s.id, space, self.io, self.ioapic, self.registry, blacklist, irqs, self.costs,
                          channel_gpa_page=n_pages)
            rt = _SandboxRt(s, space, mon, bases[s.id], list(s.pcpus), devices=set(s.devices))
            self.sandboxes[s.id] = rt

            for c in s.pcpus:
                self.schedulers[c] = PcpuScheduler(
                    c, s.id, chunked=self.chunked, check=self.check,
                    on_segment=self._on_segment, on_job_done=self._on_job_done,
                )
            for v in s.vcpus:
                vc = Vcpu(v.id, Flavor(v.flavor), VcpuParams(v.budget_us, v.period_us), v.pcpu, s.id,
                          v.irqs, v.background)
                self.schedulers[v.pcpu].add_vcpu(vc)
                self.vcpus[v.id] = vc
                for irq in v.irqs:
                    rt.io_vcpus.setdefault(irq, vc)
            # boot image: one recognisable page per sandbox
            self.memory.write(bases[s.id], f"sandbox {s.id} boot".encode())

        for s in sc.sandboxes:
            for name in s.devices:
                irq = self._device_irq(name)
                if irq is not None and irq < len(self.ioapic):
                    e = self.ioapic.entries[irq]
                    self.ioapic.entries[irq] = RedirectionEntry(irq, e.destinations | {s.id}, False)

        self._schedule_workload()

    def _device_irq(self, name):
        d = self.pci_devices.get(name) or self.port_devices.get(name)
        return None if d is None else d.irq_line

    def _schedule_workload(self) -> None:
        sc = self.sc
        for s in sc.sandboxes:
            for t in s.threads:
                self._threads[t.id] = t
                if t.periodic is not None:
                    self._push(t.periodic.offset_us, "thread", (s.id, t.id, 0, t.periodic.compute_us))
                for k, j in enumerate(t.jobs):
                    self._push(j.arrival_us, "thread", (s.id, t.id, None, j.compute_us))
        self._irq_rng = {}
        for i, g in enumerate(sc.workload.interrupts):
            self._irq_rng[i] = np.random.default_rng([sc.run.seed, g.seed, i])
            self._push(g.offset_us, "irq", i)
        self._pci_rng = {}
        for i, w in enumerate(sc.workload.pci_config):
            self._pci_rng[i] = np.random.default_rng([sc.run.seed, w.seed, 1000 + i])
            if w.count:
                self._push(w.start_us, "pci", (i, 0))
        for i, c in enumerate(sc.channels):
            self._push(c.at_us, "channel", i)
        for i, f in enumerate(sc.faults):
            self._push(f.at_us, "fault", i)
        self._job_seq: dict[str, int] = {}
        self.channels: dict[int, Any] = {}

    def _push(self, time: int, kind: str, payload) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    def insert_noop(self, time: int) -> None:
        """Queue an event that does nothing; traces must not change."""
        self._push(time, "noop", None)

    # --------------------------------------------------------------- running

    def run(self) -> Trace:
        handlers = {
            "thread": self._ev_thread,
            "irq": self._ev_irq,
            "pci": self._ev_pci,
            "channel": self._ev_channel,
            "fault": self._ev_fault,
            "ping": self._ev_ping,
            "noop": lambda payload: None,
        }
        while self._heap and self._heap[0][0] < self.until:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t < self.now:
                raise EngineInvariantViolation(f"event at {t} after clock reached {self.now}")
            self.now = t
            for sched in self.schedulers.values():
                sched.run_until(t)
            try:
                handlers[kind](payload)
                if self.check:
                    self.io.check_masking()
            except (IoModelError, MemoryModelError, MonitorError, SchedulerError) as e:
                raise EngineInvariantViolation(f"t={t} {kind} event: {type(e).__name__}: {e}") from e
        self.now = self.until
        for sched in self.schedulers.values():
            sched.finish(self.until)
        self._finalize()
        return self.trace

    # -- scheduling callbacks

    def _on_segment(self, seg: dict) -> None:
        self.trace.records["schedule"].append(seg)

    def _on_job_done(self, vcpu: Vcpu, job: Job) -> None:
        self.trace.add("job", time=job.arrival, sandbox=vcpu.sandbox, pcpu=vcpu.pcpu, vcpu=vcpu.id,
                       job=job.label, compute=job.compute, finished=job.finished)

    def _new_job(self, owner: str, kind: str, compute: int) -> Job:
        k = self._job_seq.get(owner, 0)
        self._job_seq[owner] = k + 1
        return Job(owner, kind, self.now, compute, k)

    # -- guest-side helpers

    def _next_isn(self, sid: int) -> int:
        rt = self.sandboxes[sid]
        rt.isn += 1
        return rt.isn

    def guest_access(self, sid: int, gva: int, access: Access | str, data: bytes | None = None,
                     width: int = 4, payload=None, map_identity: bool = True):
        """One guest memory instruction: returns ``(outcome, value_or_resolution)``.

        With ``map_identity`` the guest kernel first maps ``gva`` to the same
        GPA in its own page table (a guest edit, never a trap).
        """
        rt = self.sandboxes[sid]
        access = Access(access)
        isn = self._next_isn(sid)
        if map_identity and rt.space.gpt.lookup(gva >> PAGE_SHIFT) is None:
            rt.space.guest_map(gva >> PAGE_SHIFT, gva >> PAGE_SHIFT, Permissions.RWX)
        out = translate(rt.space, gva, access)
        rec = dict(time=self.now, sandbox=sid, isn=isn, gva=gva, access=access.value)
        if isinstance(out, Translated):
            self.trace.add("translation", gpa=out.gpa, hpa=out.hpa, outcome="ok", **rec)
            if access is Access.WRITE:
                self.memory.write(out.hpa, data if data is not None else bytes(width))
                return out, None
            return out, int.from_bytes(self.memory.read(out.hpa, width), "little")
        if isinstance(out, GuestPageFault):
            self.trace.add("translation", gpa=None, hpa=None, outcome="guest_page_fault", **rec)
            return out, None
        self.trace.add("translation", gpa=out.gpa, hpa=None, outcome="ept_violation", **rec)
        res = self._trap(Trap(TrapKind.EPT_VIOLATION, sid, self.now, MemoryTrap(out, width, payload), isn))
        return out, res

    def port_access(self, sid: int, port: int, direction: str, width: int = 1, value: int | None = None,
                    kind: str = "port", target: str | None = None) -> int | None:
        """One ``in``/``out`` including any monitor round trip; returns the value read."""
        isn = self._next_isn(sid)
        direction = Direction(direction)
        tgt = target or f"{port:#x}"
        r = self.io.io_port_access(sid, port, direction, width, value, isn)
        if isinstance(r, Direct):
            self._io(sid, isn, kind, tgt, f"{direction.value} {port:#x}/{width}", "direct", r.value)
            return r.value
        res = self._trap(Trap(TrapKind.IO_PORT, sid, self.now, r.context, isn))
        if res.action != "single_step":
            if kind == "pci":
                self.tally["pci_denies"] += 1
            self._io(sid, isn, kind, tgt, res.detail, "deny", res.value)
            return res.value
        self.tally["pci_allows"] += 1
        self._io(sid, isn, kind, tgt, res.detail, "allow", None)
        # the same instruction, now executed directly under single-step
        again = self.io.io_port_access(sid, port, direction, width, value, isn)
        if not isinstance(again, Direct):
            raise EngineInvariantViolation("data port still masked after Allow")
        self._io(sid, isn, kind, tgt, f"{direction.value} {port:#x}/{width}", "exec", again.value)
        res2 = self._trap(Trap(TrapKind.DEBUG_EXCEPTION, sid, self.now, None, isn))
        self._io(sid, isn, kind, tgt, res2.detail, "remask", None)
        return again.value

    def pci_config(self, sid: int, bdf, offset: int, write: int | None = None) -> int | None:
        bus, dev, func = bdf
        addr = pci_encode(bus, dev, func, offset)
        tgt = f"{bus:02x}:{dev:02x}.{func}+{offset & 0xFC:#04x}"
        self.port_access(sid, self.io.address_port, "out", 4, addr, kind="pci", target=tgt)
        if write is None:
            return self.port_access(sid, self.io.data_port, "in", 4, kind="pci", target=tgt)
        self.port_access(sid, self.io.data_port, "out", 4, write, kind="pci", target=tgt)
        return None

    def _io(self, sid, isn, kind, target, detail, outcome, value):
        self.trace.add("io", time=self.now, sandbox=sid, isn=isn, kind=kind, target=target, detail=detail,
                       outcome=outcome, value=value)

    def _trap(self, trap: Trap):
        rt = self.sandboxes[trap.sandbox]
        before = len(rt.monitor.violation_log)
        res = rt.monitor.handle_trap(trap)
        for v in rt.monitor.violation_log[before:]:
            self.trace.add("violation", **v)
        cost_ns = self.costs.trap_ns + self.costs.tlb_flush_ns
        stall_us = -(-cost_ns // 1000)
        charged = self.schedulers[rt.pcpus[0]].stall(self.now, stall_us)
        self.trace.add("trap", time=self.now, sandbox=trap.sandbox, kind=trap.kind.value, isn=trap.isn,
                       detail=trap.describe(), resolution=res.action, cost_ns=cost_ns, charged_vcpu=charged)
        return res

    # -- event handlers

    def _ev_thread(self, payload) -> None:
        sid, tid, k, compute = payload
        t = self._threads[tid]
        vcpu = self.vcpus[t.vcpu]
        job = self._new_job(tid, "thread", compute)
        if t.touch_memory:
            rt = self.sandboxes[sid]
            n_pages = rt.spec.mem_bytes >> PAGE_SHIFT
            page = int(hashlib.blake2s(tid.encode(), digest_size=4).hexdigest(), 16) % n_pages
            gva = (page << PAGE_SHIFT) | ((job.seq * 8) % PAGE_SIZE)
            self.guest_access(sid, gva, Access.WRITE, job.seq.to_bytes(8, "little"))
        self.schedulers[vcpu.pcpu].enqueue(vcpu, job, self.now)
        if k is not None:
            nxt = self.now + t.periodic.period_us
            self._push(nxt, "thread", (sid, tid, k + 1, compute))

    def _ev_irq(self, i: int) -> None:
        g = self.sc.workload.interrupts[i]
        dests = route_interrupt(g.irq_line, self.ioapic)
        self.trace.add("irq", time=self.now, irq_line=g.irq_line, destinations=sorted(dests))
        for sid in sorted(dests):
            rt = self.sandboxes.get(sid)
            vcpu = rt.io_vcpus.get(g.irq_line) if rt is not None else None
            if vcpu is None:
                log.warning("irq %d to sandbox %s has no I/O VCPU; dropped", g.irq_line, sid)
                self.tally["irqs_dropped"] += 1
                self._io(sid, None, "irq", str(g.irq_line), "no I/O VCPU", "dropped", None)
                continue
            self.tally["irqs_delivered"] += 1
            self._io(sid, None, "irq", str(g.irq_line), f"to {vcpu.id}", "queued", None)
            self._acknowledge(rt, g.irq_line)
            self.schedulers[vcpu.pcpu].enqueue(vcpu, self._new_job(f"irq{g.irq_line}", "irq", g.handler_us), self.now)
        if g.kind == "periodic":
            gap = g.period_us
        else:
            gap = max(1, int(round(self._irq_rng[i].exponential(g.mean_us))))
        self._push(self.now + gap, "irq", i)

    def _acknowledge(self, rt: _SandboxRt, irq: int) -> None:
        """Handler touches its own device directly: a port read or an MMIO read."""
        for name in sorted(rt.devices):
            if name in self.port_devices and self.port_devices[name].irq_line == irq:
                self.port_access(rt.spec.id, self.port_devices[name].base + 5, "in", 1)
                return
            d = self.pci_devices.get(name)
            if d is not None and d.irq_line == irq and d.mmio:
                self.guest_access(rt.spec.id, d.mmio[0][0], Access.READ)
                return

    def _ev_pci(self, payload) -> None:
        i, k = payload
        w = self.sc.workload.pci_config[i]
        rng = self._pci_rng[i]
        targets = sorted(d.bdf for d in self.pci_devices.values())
        if w.include_absent:
            targets.append((7, 31, 0))
        bdf = targets[int(rng.integers(len(targets)))]
        offset = int(rng.choice([0x00, 0x04, 0x08, 0x0C, 0x10, 0x2C, 0x3C]))
        if rng.random() < w.write_fraction:
            self.pci_config(w.sandbox, bdf, offset, write=int(rng.integers(1 << 32)))
        else:
            self.pci_config(w.sandbox, bdf, offset)
        if k + 1 < w.count:
            self._push(self.now + w.interval_us, "pci", (i, k + 1))

    def _ev_channel(self, i: int) -> None:
        c = self.sc.channels[i]
        monitors = {sid: rt.monitor for sid, rt in self.sandboxes.items()}
        chan, handled = create_channel(self.pool, monitors, c.a, c.b, c.pages, Permissions.parse(c.perms_a),
                                       Permissions.parse(c.perms_b), self.now)
        self.channels[chan.id] = chan
        for trap, res in handled:
            cost_ns = self.costs.trap_ns + self.costs.tlb_flush_ns
            charged = self.schedulers[self.sandboxes[trap.sandbox].pcpus[0]].stall(self.now, -(-cost_ns // 1000))
            self.trace.add("trap", time=self.now, sandbox=trap.sandbox, kind=trap.kind.value, isn=trap.isn,
                           detail=trap.describe(), resolution=res.action, cost_ns=cost_ns, charged_vcpu=charged)
        self.trace.add("channel", **chan.to_record())
        if c.ping_period_us:
            self._push(self.now + c.ping_period_us, "ping", (chan.id, c.ping_period_us, 1))

    def _ev_ping(self, payload) -> None:
        cid, period, k = payload
        chan = self.channels[cid]
        a, b = chan.endpoints
        self.guest_access(a, chan.gpa_page[a] << PAGE_SHIFT, Access.WRITE, k.to_bytes(8, "little"))
        self.guest_access(b, chan.gpa_page[b] << PAGE_SHIFT, Access.READ, width=8)
        self._push(self.now + period, "ping", (cid, period, k + 1))

    # -- faults

    def _foreign_state(self, sid: int) -> str:
        """Digest of everything that does not belong to ``sid``."""
        h = hashlib.sha256()
        for oid, rt in sorted(self.sandboxes.items()):
            if oid == sid:
                continue
            h.update(self.memory.checksum(rt.ram_base >> PAGE_SHIFT, rt.spec.mem_bytes >> PAGE_SHIFT).encode())
            for name in sorted(rt.devices):
                if name in self.pci_devices:
                    h.update(bytes(self.pci_devices[name].config))
                else:
                    h.update(bytes(self.port_devices[name].regs))
            for e in self.ioapic.entries:
                if e.irq_line in rt.monitor.ioapic_irqs:
                    h.update(repr(e).encode())
        return h.hexdigest()

    def _ev_fault(self, i: int) -> None:
        f = self.sc.faults[i]
        sid, t = f.sandbox, f.target
        before = self._foreign_state(sid)
        traps_before = self.sandboxes[sid].monitor.entries
        self.tally["faults_injected"] += 1
        outcome = "contained"
        if f.kind in ("rogue_read", "rogue_write"):
            gpa = self._rogue_gpa(t)
            access = Access.WRITE if f.kind == "rogue_write" else Access.READ
            data = int(t.get("value", ROGUE_VALUE)).to_bytes(4, "little")
            out, _ = self.guest_access(sid, gpa, access, data)
            if not isinstance(out, EptViolation):
                outcome = "reached_memory"
        elif f.kind == "pci_probe":
            bdf = self._probe_bdf(t)
            offset = int(t.get("offset", 0))
            value = self.pci_config(sid, bdf, offset)
            dev = self.io.bus.find(bdf)
            blacklisted = dev is not None and dev.ids in self.sandboxes[sid].monitor.blacklist
            if blacklisted and value != all_ones(4):
                outcome = "leaked"
            if "write" in t:
                self.pci_config(sid, bdf, offset, write=int(t["write"]))
            if not blacklisted and dev is not None:
                outcome = "permitted"
        else:
            irq = int(t["irq"])
            dests = frozenset(t.get("destinations", [sid]))
            entry = RedirectionEntry(irq, dests, bool(t.get("masked", False)))
            _, res = self.guest_access(sid, self.ioapic.mmio_gpa + IOWIN_OFFSET, Access.WRITE, payload=(irq, entry))
            if res is None or res.action != "ioapic_denied":
                outcome = "applied"
        after = self._foreign_state(sid)
        trapped = self.sandboxes[sid].monitor.entries > traps_before
        contained = before == after and trapped and outcome == "contained"
        if contained:
            self.tally["faults_contained"] += 1
        self.trace.add("fault", time=self.now, sandbox=sid, kind=f.kind,
                       target=json.dumps(t, sort_keys=True, separators=(",", ":")),
                       outcome=outcome, contained=contained)

    def _rogue_gpa(self, t: dict) -> int:
        if "gpa" in t:
            return int(t["gpa"])
        if "device" in t:
            return self.pci_devices[t["device"]].mmio[0][0] + int(t.get("offset", 0))
        rt = self.sandboxes[int(t["victim"])]
        return rt.ram_base + int(t.get("offset", 0)) % rt.spec.mem_bytes

    def _probe_bdf(self, t: dict):
        if "device" in t:
            return self.pci_devices[t["device"]].bdf
        return int(t["bus"]), int(t["dev"]), int(t.get("func", 0))

    # --------------------------------------------------------------- wrap-up

    def _finalize(self) -> None:
        tr = self.trace
        for sched in self.schedulers.values():
            for v in sched.vcpus:
                for job in v.queue:
                    tr.add("job", time=job.arrival, sandbox=v.sandbox, pcpu=v.pcpu, vcpu=v.id, job=job.label,
                           compute=job.compute, finished=None)
        tr.records["schedule"].sort(key=lambda r: (r["time_start"], r["pcpu"]))
        tr.records["job"].sort(key=lambda r: (r["time"], r["pcpu"], r["job"]))
        tr.meta = self._meta()
        tr.counters = self._counters()

    def _meta(self) -> dict:
        sc = self.sc
        return {
            "format_version": 1,
            "generator": f"questsim {__version__}",
            "scenario": sc.name,
            "scenario_digest": sc.digest(),
            "seed": sc.run.seed,
            "until_us": self.until,
            "chunked_replenishment": self.chunked,
            "vcpus": {
                v.id: {"sandbox": v.sandbox, "pcpu": v.pcpu, "flavor": v.flavor.value,
                       "budget_us": v.params.budget, "period_us": v.params.period, "background": v.background}
                for v in sorted(self.vcpus.values(), key=lambda v: v.id)
            },
            "sandboxes": {
                str(sid): {
                    "name": rt.spec.name,
                    "pcpus": rt.pcpus,
                    "mem_bytes": rt.spec.mem_bytes,
                    "ram_hpa": rt.ram_base,
                    "devices": sorted(rt.devices),
                    "blacklist": sorted(f"{v:04x}:{d:04x}" for v, d in rt.monitor.blacklist),
                    "ioapic_irqs": sorted(rt.monitor.ioapic_irqs),
                    "ept_structure_bytes": rt.space.ept.structure_pages() * PAGE_SIZE,
                }
                for sid, rt in sorted(self.sandboxes.items())
            },
            "pci_devices": {
                name: {"bdf": f"{d.bus:02x}:{d.dev:02x}.{d.func}", "ids": f"{d.vendor_id:04x}:{d.device_id:04x}",
                       "irq_line": d.irq_line, "mmio": [[hpa, size] for hpa, size in d.mmio]}
                for name, d in sorted(self.pci_devices.items())
            },
            "costs": {"trap_ns": self.costs.trap_ns, "tlb_flush_ns": self.costs.tlb_flush_ns},
        }

    def _counters(self) -> dict:
        sbs = sorted(self.sandboxes.items())
        after_t0 = {str(sid): 0 for sid, _ in sbs}
        for r in self.trace.records["trap"]:
            if r["time"] >= 0:
                after_t0[str(r["sandbox"])] += 1
        c = {
            "monitor_entries": {str(sid): rt.monitor.entries for sid, rt in sbs},
            "monitor_entries_after_t0": after_t0,
            "tlb_flushes": {str(sid): self.tlb.flushes.get(sid, 0) for sid, _ in sbs},
            "overhead_ns": {str(sid): rt.monitor.overhead_ns for sid, rt in sbs},
            "violations": sum(len(rt.monitor.violation_log) for _, rt in sbs),
            "translations": len(self.trace.records["translation"]),
            "tlb_hits": self.tlb.hits,
            "tlb_walks": self.tlb.walks,
            "channels": len(self.pool.channels),
        }
        c.update(self.tally)
        return c

    # --------------------------------------------------------------- audits

    def disjoint_ownership_violations(self) -> list[str]:
        """Full scan: accessible HPA pages shared between sandboxes outside channels."""
        seen: dict[int, int] = {}
        bad = []
        channel_pages = set(self.registry.channel_pages)
        for sid, rt in sorted(self.sandboxes.items()):
            mine = set()
            for hpa, n, _gpa, _e in rt.space.ept.mapped_hpa_ranges():
                if n > 1:
                    frame = -(hpa + 1)  # superframes keyed apart from 4KB pages
                    mine.add(frame)
                else:
                    mine.add(hpa)
            for key in mine:
                if key >= 0 and key in channel_pages:
                    continue
                if key in seen and seen[key] != sid:
                    bad.append(f"page key {key} in sandboxes {seen[key]} and {sid}")
                seen[key] = sid
        # superpages vs 4KB pages across sandboxes
        supers = {}
        for sid, rt in self.sandboxes.items():
            for hpa, n, _g, _e in rt.space.ept.mapped_hpa_ranges():
                if n > 1:
                    supers[hpa >> 9] = sid
        for sid, rt in self.sandboxes.items():
            for hpa, n, _g, _e in rt.space.ept.mapped_hpa_ranges():
                if n == 1 and supers.get(hpa >> 9, sid) != sid:
                    bad.append(f"HPA page {hpa:#x} of sandbox {sid} inside superpage of {supers[hpa >> 9]}")
        return bad


def run(scenario: Scenario, *, chunked: bool = True, check: bool = False) -> Trace:
    """Simulate ``scenario`` and return its trace."""
    return Simulation(scenario, chunked=chunked, check=check).run()
