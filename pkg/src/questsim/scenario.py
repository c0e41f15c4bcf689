"""Scenario documents: schema, ``_mb`` conversion and partition validation.

A scenario is a JSON object describing the platform, the boot-time
partition into sandboxes, the runtime workload and injected faults. Every
error names the offending field as a dotted path.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .memory_model import PAGE_SIZE, SUPERPAGE_SIZE

MB = 1 << 20


class ScenarioError(Exception):
    """Base for load failures; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class ParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


def _mb_to_bytes(data: Any, *names: str) -> Any:
    if not isinstance(data, dict):
        return data
    data = dict(data)
    for name in names:
        mb_key, b_key = f"{name}_mb", f"{name}_bytes"
        if mb_key in data:
            if b_key in data:
                raise ValueError(f"give either {mb_key} or {b_key}, not both")
            v = data.pop(mb_key)
            data[b_key] = int(v * MB) if isinstance(v, (int, float)) and not isinstance(v, bool) else v
    return data


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MmioRange(_Model):
    hpa: int = Field(ge=0)
    size: int = Field(gt=0)


class PciDeviceSpec(_Model):
    name: str
    vendor_id: int = Field(ge=0, le=0xFFFF)
    device_id: int = Field(ge=0, le=0xFFFF)
    bus: int = Field(ge=0, le=255)
    dev: int = Field(ge=0, le=31)
    func: int = Field(default=0, ge=0, le=7)
    irq_line: Optional[int] = Field(default=None, ge=0, le=255)
    class_code: int = Field(default=0, ge=0, le=0xFFFFFF)
    mmio: list[MmioRange] = []


class PortDeviceSpec(_Model):
    name: str
    base: int = Field(ge=0, lt=1 << 16)
    count: int = Field(gt=0, le=256)
    irq_line: Optional[int] = Field(default=None, ge=0, le=255)


class IoapicSpec(_Model):
    gpa: int = 0xFEC00000
    entries: int = Field(default=24, gt=0, le=240)


class Platform(_Model):
    pcpu_count: int = Field(gt=0)
    ram_bytes: int = Field(gt=0)
    monitor_reserved_bytes: int = Field(default=16 * MB, ge=0)
    channel_pool_pages: int = Field(default=256, ge=0)
    pci_address_port: int = 0xCF8
    pci_data_port: int = 0xCFC
    ioapic: IoapicSpec = IoapicSpec()
    pci_devices: list[PciDeviceSpec] = []
    port_devices: list[PortDeviceSpec] = []

    @model_validator(mode="before")
    @classmethod
    def _units(cls, data):
        return _mb_to_bytes(data, "ram", "monitor_reserved")


class IdPair(_Model):
    vendor_id: int = Field(ge=0, le=0xFFFF)
    device_id: int = Field(ge=0, le=0xFFFF)


class VcpuSpec(_Model):
    id: str
    flavor: Literal["main", "io"] = "main"
    pcpu: int
    budget_us: int = Field(gt=0)
    period_us: int = Field(gt=0)
    irqs: list[int] = []
    background: bool = True


class Periodic(_Model):
    period_us: int = Field(gt=0)
    compute_us: int = Field(gt=0)
    offset_us: int = Field(default=0, ge=0)


class JobSpec(_Model):
    arrival_us: int = Field(ge=0)
    compute_us: int = Field(gt=0)


class ThreadSpec(_Model):
    id: str
    vcpu: str
    periodic: Optional[Periodic] = None
    jobs: list[JobSpec] = []
    touch_memory: bool = True


class SandboxSpec(_Model):
    id: int = Field(ge=0)
    name: str = ""
    pcpus: list[int]
    mem_bytes: int = Field(gt=0)
    devices: list[str] = []
    blacklist: Optional[list[IdPair]] = None
    ioapic_irqs: Optional[list[int]] = None
    vcpus: list[VcpuSpec] = []
    threads: list[ThreadSpec] = []

    @model_validator(mode="before")
    @classmethod
    def _units(cls, data):
        return _mb_to_bytes(data, "mem")


class ChannelSpec(_Model):
    at_us: int = Field(ge=0)
    a: int
    b: int
    pages: int = Field(default=1, gt=0)
    perms_a: str = "rw"
    perms_b: str = "rw"
    ping_period_us: Optional[int] = Field(default=None, gt=0)


class InterruptGen(_Model):
    irq_line: int = Field(ge=0, le=255)
    kind: Literal["periodic", "poisson"] = "periodic"
    period_us: Optional[int] = Field(default=None, gt=0)
    mean_us: Optional[float] = Field(default=None, gt=0)
    offset_us: int = Field(default=0, ge=0)
    handler_us: int = Field(default=10, gt=0)
    seed: int = 0


class PciWorkload(_Model):
    sandbox: int
    start_us: int = Field(default=0, ge=0)
    interval_us: int = Field(default=100, gt=0)
    count: int = Field(default=10, ge=0)
    seed: int = 0
    include_absent: bool = True
    write_fraction: float = Field(default=0.25, ge=0, le=1)


class Workload(_Model):
    interrupts: list[InterruptGen] = []
    pci_config: list[PciWorkload] = []


class FaultSpec(_Model):
    at_us: int = Field(ge=0)
    sandbox: int
    kind: Literal["rogue_read", "rogue_write", "pci_probe", "ioapic_hijack"]
    target: dict[str, Any] = {}


class Costs(_Model):
    trap_us: float = Field(default=2.0, ge=0)
    tlb_flush_us: float = Field(default=0.5, ge=0)

    @property
    def trap_ns(self) -> int:
        return round(self.trap_us * 1000)

    @property
    def tlb_flush_ns(self) -> int:
        return round(self.tlb_flush_us * 1000)


class RunSpec(_Model):
    until_us: int = Field(ge=0)
    seed: int = 0


class Scenario(_Model):
    name: str = "scenario"
    description: str = ""
    platform: Platform
    sandboxes: list[SandboxSpec]
    channels: list[ChannelSpec] = []
    workload: Workload = Workload()
    faults: list[FaultSpec] = []
    costs: Costs = Costs()
    run: RunSpec

    # -- helpers ------------------------------------------------------------

    def sandbox(self, sid: int) -> SandboxSpec:
        for s in self.sandboxes:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def device_owner(self) -> dict[str, int]:
        return {d: s.id for s in self.sandboxes for d in s.devices}

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, until_us: int | None = None, seed: int | None = None) -> "Scenario":
        run = self.run.model_copy(
            update={k: v for k, v in (("until_us", until_us), ("seed", seed)) if v is not None}
        )
        return self.model_copy(update={"run": run})


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc)


def hpa_layout(sc: Scenario) -> tuple[int, dict[int, int]]:
    """Place sandbox RAM above every guest's RAM top so GPA aliases of foreign HPAs are unmapped.

    Returns ``(pool_base_bytes, {sandbox id: ram_base_bytes})``.
    """
    p = sc.platform
    pool_base = _round_up(p.monitor_reserved_bytes, PAGE_SIZE)
    low_end = pool_base + p.channel_pool_pages * PAGE_SIZE
    # channel GPAs sit just above each guest's RAM top; keep those clear as well
    top = max((s.mem_bytes for s in sc.sandboxes), default=0) + p.channel_pool_pages * PAGE_SIZE
    base = _round_up(max(low_end, top), SUPERPAGE_SIZE)
    bases = {}
    for s in sc.sandboxes:
        bases[s.id] = base
        base = _round_up(base + s.mem_bytes, SUPERPAGE_SIZE)
    return pool_base, bases


def _round_up(x: int, a: int) -> int:
    return -(-x // a) * a


def validate(sc: Scenario) -> Scenario:
    """Partition-level checks that need more than one field."""
    err = ScenarioValidationError
    p = sc.platform

    names = [d.name for d in p.pci_devices] + [d.name for d in p.port_devices]
    for i, n in enumerate(names):
        if names.index(n) != i:
            raise err("platform.devices", f"duplicate device name {n!r}")
    bdfs = set()
    for i, d in enumerate(p.pci_devices):
        if (d.bus, d.dev, d.func) in bdfs:
            raise err(f"platform.pci_devices.{i}", "two devices at the same bus/dev/func")
        bdfs.add((d.bus, d.dev, d.func))
    ports: dict[int, str] = {}
    pci_ports = set(range(p.pci_address_port, p.pci_address_port + 4)) | set(range(p.pci_data_port, p.pci_data_port + 4))
    for i, d in enumerate(p.port_devices):
        for port in range(d.base, d.base + d.count):
            if port in ports or port in pci_ports:
                raise err(f"platform.port_devices.{i}.base", f"port {port:#x} overlaps another device")
            ports[port] = d.name

    if not sc.sandboxes:
        raise err("sandboxes", "at least one sandbox required")
    sids, pcpu_owner, dev_owner, vcpu_ids = set(), {}, {}, set()
    for i, s in enumerate(sc.sandboxes):
        path = f"sandboxes.{i}"
        if s.id in sids:
            raise err(f"{path}.id", f"duplicate sandbox id {s.id}")
        sids.add(s.id)
        if not s.pcpus:
            raise err(f"{path}.pcpus", "a sandbox needs at least one PCPU")
        for j, c in enumerate(s.pcpus):
            if not 0 <= c < p.pcpu_count:
                raise err(f"{path}.pcpus.{j}", f"PCPU {c} does not exist")
            if c in pcpu_owner:
                raise err(f"{path}.pcpus.{j}", f"PCPU {c} already assigned to sandbox {pcpu_owner[c]}")
            pcpu_owner[c] = s.id
        if s.mem_bytes % PAGE_SIZE:
            raise err(f"{path}.mem_bytes", "memory must be a multiple of 4KB")
        for j, d in enumerate(s.devices):
            if d not in names:
                raise err(f"{path}.devices.{j}", f"unknown device {d!r}")
            if d in dev_owner:
                raise err(f"{path}.devices.{j}", f"device {d!r} already assigned to sandbox {dev_owner[d]}")
            dev_owner[d] = s.id
        local_vcpus = {}
        for j, v in enumerate(s.vcpus):
            vp = f"{path}.vcpus.{j}"
            if v.id in vcpu_ids:
                raise err(f"{vp}.id", f"duplicate VCPU id {v.id!r}")
            vcpu_ids.add(v.id)
            local_vcpus[v.id] = v
            if v.pcpu not in s.pcpus:
                raise err(f"{vp}.pcpu", f"PCPU {v.pcpu} is not owned by sandbox {s.id}")
            if v.budget_us > v.period_us:
                raise err(f"{vp}.budget_us", f"C_max {v.budget_us} exceeds V_T {v.period_us} (utilisation > 1)")
            if v.flavor == "main" and v.irqs:
                raise err(f"{vp}.irqs", "only I/O VCPUs take interrupts")
        for j, t in enumerate(s.threads):
            tp = f"{path}.threads.{j}"
            if t.vcpu not in local_vcpus:
                raise err(f"{tp}.vcpu", f"no VCPU {t.vcpu!r} in sandbox {s.id}")
            if local_vcpus[t.vcpu].flavor != "main":
                raise err(f"{tp}.vcpu", "threads bind to Main VCPUs")

    pool_base, bases = hpa_layout(sc)
    used = sum(s.mem_bytes for s in sc.sandboxes)
    reserved = p.monitor_reserved_bytes + p.channel_pool_pages * PAGE_SIZE
    if used + reserved > p.ram_bytes:
        raise err("platform.ram_bytes", f"sandboxes need {used} bytes + {reserved} reserved > {p.ram_bytes}")
    last = sc.sandboxes[-1]
    if bases[last.id] + last.mem_bytes > p.ram_bytes:
        raise err("platform.ram_bytes", f"HPA layout needs {bases[last.id] + last.mem_bytes} bytes")

    by_id = {s.id: s for s in sc.sandboxes}
    pages = 0
    for i, c in enumerate(sc.channels):
        for side in ("a", "b"):
            if getattr(c, side) not in by_id:
                raise err(f"channels.{i}.{side}", f"unknown sandbox {getattr(c, side)}")
        if c.a == c.b:
            raise err(f"channels.{i}.b", "channel endpoints must differ")
        for side in ("perms_a", "perms_b"):
            if any(ch not in "rwx" for ch in getattr(c, side).lower()):
                raise err(f"channels.{i}.{side}", "permissions are letters from 'rwx'")
        pages += c.pages
    if pages > p.channel_pool_pages:
        raise err("channels", f"{pages} channel pages exceed the pool of {p.channel_pool_pages}")

    for i, g in enumerate(sc.workload.interrupts):
        if g.kind == "periodic" and g.period_us is None:
            raise err(f"workload.interrupts.{i}.period_us", "required for periodic generators")
        if g.kind == "poisson" and g.mean_us is None:
            raise err(f"workload.interrupts.{i}.mean_us", "required for poisson generators")
    for i, w in enumerate(sc.workload.pci_config):
        if w.sandbox not in by_id:
            raise err(f"workload.pci_config.{i}.sandbox", f"unknown sandbox {w.sandbox}")
    for i, f in enumerate(sc.faults):
        if f.sandbox not in by_id:
            raise err(f"faults.{i}.sandbox", f"unknown sandbox {f.sandbox}")
        _check_fault_target(sc, f, f"faults.{i}.target", names, by_id)
    return sc


_TARGET_KEYS = {
    "rogue_read": {"victim", "offset", "gpa", "device"},
    "rogue_write": {"victim", "offset", "gpa", "device", "value"},
    "pci_probe": {"device", "bus", "dev", "func", "offset", "write"},
    "ioapic_hijack": {"irq", "destinations", "masked"},
}


def _check_fault_target(sc, f, path, names, by_id):
    err = ScenarioValidationError
    extra = set(f.target) - _TARGET_KEYS[f.kind]
    if extra:
        raise err(path, f"unknown keys {sorted(extra)} for {f.kind}")
    t = f.target
    if f.kind in ("rogue_read", "rogue_write"):
        if sum(k in t for k in ("victim", "gpa", "device")) != 1:
            raise err(path, "give exactly one of victim, gpa, device")
        if "victim" in t and t["victim"] not in by_id:
            raise err(f"{path}.victim", f"unknown sandbox {t['victim']}")
        if "device" in t and t["device"] not in {d.name for d in sc.platform.pci_devices}:
            raise err(f"{path}.device", f"unknown PCI device {t['device']!r}")
    elif f.kind == "pci_probe":
        if "device" in t and t["device"] not in names:
            raise err(f"{path}.device", f"unknown device {t['device']!r}")
        if "device" not in t and not {"bus", "dev"} <= set(t):
            raise err(path, "give device or bus/dev")
    elif "irq" not in t:
        raise err(f"{path}.irq", "required")


def load_scenario(document: Union[str, bytes, dict, Path]) -> Scenario:
    """Parse and validate a scenario from a path, JSON text or a dict."""
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        try:
            document = Path(document).read_text()
        except OSError as e:
            raise ParseError("", f"cannot read scenario: {e}") from e
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise ParseError("", f"invalid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ParseError("", "scenario must be a JSON object")
    try:
        sc = Scenario.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioValidationError(_loc(first["loc"]), first["msg"]) from e
    return validate(sc)


def builtin(name: str) -> Scenario:
    """Load a scenario shipped with the package (e.g. ``"fig5"``)."""
    path = Path(__file__).parent / "scenarios" / f"{name}.json"
    return load_scenario(path)
