"""Port-I/O partitioning, PCI configuration mediation and IOAPIC routing.

Each sandbox has a VT-x style I/O bitmap (one bit per port, set = trap).
The PCI address port is left untrapped and latched per sandbox; the data
ports always trap, and the monitor lets a permitted access through by
unmasking the data port and arming a single-step. The IOAPIC register
window is never mapped accessibly in any EPT, so redirection-table writes
always reach the monitor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

PCI_ADDRESS_PORT = 0xCF8
PCI_DATA_PORT = 0xCFC
N_PORTS = 1 << 16
IOAPIC_DEFAULT_GPA = 0xFEC00000
IOAPIC_DEFAULT_ENTRIES = 24


class IoModelError(Exception):
    pass


class NotEnabled(IoModelError):
    """PCI configuration address written with the enable bit clear."""


class ProtocolViolation(IoModelError):
    """Debug trap without an armed single-step: a simulator bug."""


def all_ones(width: int) -> int:
    return (1 << (8 * width)) - 1


class Direction(str, enum.Enum):
    IN = "in"
    OUT = "out"


# ---------------------------------------------------------------------------
# port bitmap

class IoPortBitmap:
    """65536-bit trap bitmap, as the hardware keeps it."""

    def __init__(self, trap_all: bool = True) -> None:
        self.bits = bytearray(b"\xff" * (N_PORTS // 8) if trap_all else N_PORTS // 8)

    def traps(self, port: int) -> bool:
        return bool(self.bits[port >> 3] & (1 << (port & 7)))

    def set_trap(self, port: int, trap: bool = True) -> None:
        if trap:
            self.bits[port >> 3] |= 1 << (port & 7)
        else:
            self.bits[port >> 3] &= ~(1 << (port & 7)) & 0xFF

    def allow(self, ports) -> None:
        for p in ports:
            self.set_trap(p, False)

    def trapped_ports(self) -> set[int]:
        return {p for p in range(N_PORTS) if self.traps(p)}


# ---------------------------------------------------------------------------
# devices

class PciAddress(NamedTuple):
    bus: int
    dev: int
    func: int
    offset: int

    @property
    def bdf(self) -> tuple[int, int, int]:
        return self.bus, self.dev, self.func


def pci_decode(address_word: int) -> PciAddress:
    """Decode a configuration-mechanism-#1 address word."""
    address_word &= 0xFFFFFFFF
    if not address_word & 0x80000000:
        raise NotEnabled(f"enable bit clear in {address_word:#010x}")
    return PciAddress(
        bus=(address_word >> 16) & 0xFF,
        dev=(address_word >> 11) & 0x1F,
        func=(address_word >> 8) & 0x7,
        offset=address_word & 0xFC,
    )


def pci_encode(bus: int, dev: int, func: int, offset: int = 0) -> int:
    return 0x80000000 | (bus << 16) | (dev << 11) | (func << 8) | (offset & 0xFC)


class PciDevice:
    """A device's 256-byte configuration register file.

    Vendor and device id (offsets 0 and 2) are read-only; the interrupt
    line register (0x3C) is initialised from ``irq_line``.
    """

    def __init__(self, name, vendor_id, device_id, bus, dev, func=0, irq_line=None, mmio=(), class_code=0):
        self.name = name
        self.vendor_id = vendor_id
        self.device_id = device_id
        self.bus, self.dev, self.func = bus, dev, func
        self.irq_line = irq_line
        self.mmio = list(mmio)  # [(hpa, size)]
        self.config = bytearray(256)
        self.config[0:2] = vendor_id.to_bytes(2, "little")
        self.config[2:4] = device_id.to_bytes(2, "little")
        self.config[0x09:0x0C] = class_code.to_bytes(3, "little")
        if irq_line is not None:
            self.config[0x3C] = irq_line & 0xFF
            self.config[0x3D] = 1
        for i, (hpa, _size) in enumerate(self.mmio[:6]):
            self.config[0x10 + 4 * i:0x14 + 4 * i] = (hpa & 0xFFFFFFF0).to_bytes(4, "little")

    @property
    def bdf(self) -> tuple[int, int, int]:
        return self.bus, self.dev, self.func

    @property
    def ids(self) -> tuple[int, int]:
        return self.vendor_id, self.device_id

    def read_config(self, offset: int, width: int = 4) -> int:
        offset &= 0xFF
        return int.from_bytes(self.config[offset:offset + width].ljust(width, b"\xff"), "little")

    def write_config(self, offset: int, width: int, value: int) -> None:
        offset &= 0xFF
        data = (value & all_ones(width)).to_bytes(width, "little")
        for i, b in enumerate(data):
            if offset + i < 4 or offset + i > 0xFF:  # vendor/device id are read-only
                continue
            self.config[offset + i] = b


class PortDevice:
    """A legacy port-mapped device (e.g. a 16550 UART) with a byte register file."""

    def __init__(self, name, base, count, irq_line=None, reset=None):
        self.name = name
        self.base = base
        self.count = count
        self.irq_line = irq_line
        self.regs = bytearray(reset if reset is not None else bytes(count))

    @property
    def ports(self) -> range:
        return range(self.base, self.base + self.count)

    def read(self, port: int, width: int) -> int:
        off = port - self.base
        return int.from_bytes(bytes(self.regs[off:off + width]).ljust(width, b"\xff"), "little")

    def write(self, port: int, width: int, value: int) -> None:
        off = port - self.base
        for i, b in enumerate((value & all_ones(width)).to_bytes(width, "little")):
            if off + i < self.count:
                self.regs[off + i] = b


class PciBus:
    def __init__(self, devices=()):
        self.devices: dict[tuple[int, int, int], PciDevice] = {}
        for d in devices:
            self.add(d)

    def add(self, device: PciDevice) -> None:
        if device.bdf in self.devices:
            raise IoModelError(f"two PCI devices at {device.bdf}")
        self.devices[device.bdf] = device

    def find(self, bdf) -> PciDevice | None:
        return self.devices.get(tuple(bdf))

    def by_name(self, name: str) -> PciDevice:
        for d in self.devices.values():
            if d.name == name:
                return d
        raise KeyError(name)


# ---------------------------------------------------------------------------
# per-sandbox port state and the mediation state machine

class Phase(str, enum.Enum):
    MASKED = "masked"
    SINGLE_STEP_ARMED = "single_step_armed"


@dataclass
class PendingAccess:
    sandbox: object
    target: PciAddress
    direction: Direction
    width: int
    isn: int


@dataclass
class PciMediationState:
    phase: Phase = Phase.MASKED
    pending: PendingAccess | None = None


@dataclass
class SandboxIo:
    """Everything port-related that belongs to one sandbox."""

    sandbox: object
    bitmap: IoPortBitmap = field(default_factory=IoPortBitmap)
    latched_address: int = 0
    mediation: PciMediationState = field(default_factory=PciMediationState)
    trap_flag: bool = False
    data_ports: range = range(PCI_DATA_PORT, PCI_DATA_PORT + 4)


@dataclass(frozen=True)
class PortTrap:
    """Context of an I/O-bitmap trap."""

    port: int
    direction: Direction
    width: int
    value: int | None
    isn: int


@dataclass(frozen=True)
class Direct:
    value: int | None


@dataclass(frozen=True)
class Trapped:
    context: PortTrap


@dataclass(frozen=True)
class Deny:
    value: int | None
    reason: str


@dataclass(frozen=True)
class Allow:
    target: PciAddress
    device: PciDevice


Blacklist = set  # of (vendor_id, device_id)


class IoFabric:
    """Machine-wide port space, PCI bus and per-sandbox port state."""

    def __init__(self, bus: PciBus | None = None, port_devices=(), address_port=PCI_ADDRESS_PORT, data_port=PCI_DATA_PORT):
        self.bus = bus if bus is not None else PciBus()
        self.address_port = address_port
        self.data_port = data_port
        self.port_devices: list[PortDevice] = list(port_devices)
        self._port_map: dict[int, PortDevice] = {}
        for d in self.port_devices:
            for p in d.ports:
                self._port_map[p] = d
        self.sandboxes: dict[object, SandboxIo] = {}

    def add_sandbox(self, sandbox, owned_ports=()) -> SandboxIo:
        sio = SandboxIo(sandbox, data_ports=range(self.data_port, self.data_port + 4))
        sio.bitmap.allow(owned_ports)
        sio.bitmap.allow(range(self.address_port, self.address_port + 4))
        self.sandboxes[sandbox] = sio
        return sio

    def port_device(self, port: int) -> PortDevice | None:
        return self._port_map.get(port)

    def io_port_access(self, sandbox, port: int, direction, width: int = 1, value: int | None = None, isn: int = 0):
        """Execute one ``in``/``out``; returns Direct or Trapped."""
        if not 0 <= port < N_PORTS:
            raise IoModelError(f"port {port:#x} out of range")
        direction = Direction(direction)
        sio = self.sandboxes[sandbox]
        if sio.bitmap.traps(port):
            return Trapped(PortTrap(port, direction, width, value, isn))
        return Direct(self._execute(sio, port, direction, width, value))

    def _execute(self, sio: SandboxIo, port, direction, width, value):
        if self.address_port <= port < self.address_port + 4:
            if direction is Direction.OUT:
                if port == self.address_port and width == 4:
                    sio.latched_address = value & 0xFFFFFFFF
                return None
            return sio.latched_address if port == self.address_port else all_ones(width)
        if port in sio.data_ports:
            try:
                addr = pci_decode(sio.latched_address)
            except NotEnabled:
                return all_ones(width) if direction is Direction.IN else None
            dev = self.bus.find(addr.bdf)
            offset = addr.offset + (port - self.data_port)
            if dev is None:
                return all_ones(width) if direction is Direction.IN else None
            if direction is Direction.IN:
                return dev.read_config(offset, width)
            dev.write_config(offset, width, value)
            return None
        dev = self._port_map.get(port)
        if dev is None:
            return all_ones(width) if direction is Direction.IN else None
        if direction is Direction.IN:
            return dev.read(port, width)
        dev.write(port, width, value)
        return None

    # -- mediation ----------------------------------------------------------

    def is_pci_data_trap(self, trap: PortTrap) -> bool:
        return self.data_port <= trap.port < self.data_port + 4

    def mediate_pci(self, sandbox, trap: PortTrap, blacklist) -> Deny | Allow:
        """Monitor-side check of a trapped PCI data-port access."""
        sio = self.sandboxes[sandbox]
        if sio.mediation.phase is not Phase.MASKED:
            raise ProtocolViolation(f"sandbox {sandbox}: data-port trap while {sio.mediation.phase.value}")
        deny_value = all_ones(trap.width) if trap.direction is Direction.IN else None
        try:
            addr = pci_decode(sio.latched_address)
        except NotEnabled:
            return Deny(deny_value, "address not enabled")
        dev = self.bus.find(addr.bdf)
        if dev is None:
            return Deny(deny_value, f"no device at {addr.bus:02x}:{addr.dev:02x}.{addr.func}")
        if dev.ids in blacklist:
            return Deny(deny_value, f"{dev.name} ({dev.vendor_id:04x}:{dev.device_id:04x}) blacklisted")
        for p in sio.data_ports:
            sio.bitmap.set_trap(p, False)
        sio.trap_flag = True
        sio.mediation = PciMediationState(
            Phase.SINGLE_STEP_ARMED, PendingAccess(sandbox, addr, trap.direction, trap.width, trap.isn)
        )
        return Allow(addr, dev)

    def complete_single_step(self, sandbox) -> PendingAccess:
        """Handle the debug exception that follows an allowed access: re-mask."""
        sio = self.sandboxes[sandbox]
        if sio.mediation.phase is not Phase.SINGLE_STEP_ARMED:
            raise ProtocolViolation(f"sandbox {sandbox}: debug trap with no single-step armed")
        pending = sio.mediation.pending
        for p in sio.data_ports:
            sio.bitmap.set_trap(p, True)
        sio.trap_flag = False
        sio.mediation = PciMediationState()
        return pending

    def check_masking(self) -> None:
        """Masked phase implies every data port traps and TF is clear."""
        for sid, sio in self.sandboxes.items():
            if sio.mediation.phase is Phase.MASKED:
                assert all(sio.bitmap.traps(p) for p in sio.data_ports), f"sandbox {sid}: data port unmasked"
                assert not sio.trap_flag, f"sandbox {sid}: stray trap flag"
            else:
                assert sio.trap_flag


# ---------------------------------------------------------------------------
# IOAPIC

@dataclass(frozen=True)
class RedirectionEntry:
    irq_line: int
    destinations: frozenset = frozenset()
    masked: bool = False

    def to_dict(self) -> dict:
        return {"irq_line": self.irq_line, "destinations": sorted(self.destinations), "masked": self.masked}


class RedirectionTable:
    def __init__(self, n_entries: int = IOAPIC_DEFAULT_ENTRIES, mmio_gpa: int = IOAPIC_DEFAULT_GPA):
        self.entries: list[RedirectionEntry] = [RedirectionEntry(i, frozenset(), True) for i in range(n_entries)]
        self.mmio_gpa = mmio_gpa
        self.mmio_size = 0x1000

    def __len__(self) -> int:
        return len(self.entries)

    def in_window(self, gpa: int) -> bool:
        return self.mmio_gpa <= gpa < self.mmio_gpa + self.mmio_size

    def snapshot(self) -> tuple:
        return tuple(self.entries)


class Applied(NamedTuple):
    index: int
    entry: RedirectionEntry


class Denied(NamedTuple):
    index: int
    reason: str


def ioapic_write(table: RedirectionTable, sandbox, entry_index: int, new_entry: RedirectionEntry, authorized_irqs) -> Applied | Denied:
    """Monitor-mediated redirection-table update.

    The sandbox must own both the line the entry currently carries and the
    line it wants to program.
    """
    if not 0 <= entry_index < len(table.entries):
        return Denied(entry_index, f"bad index {entry_index}")
    current = table.entries[entry_index]
    if current.irq_line not in authorized_irqs or new_entry.irq_line not in authorized_irqs:
        return Denied(entry_index, f"sandbox {sandbox} not authorised for irq {current.irq_line}")
    table.entries[entry_index] = RedirectionEntry(new_entry.irq_line, frozenset(new_entry.destinations), new_entry.masked)
    return Applied(entry_index, table.entries[entry_index])


def route_interrupt(irq_line: int, table: RedirectionTable) -> frozenset:
    """Destinations of every unmasked entry carrying ``irq_line``."""
    dests = set()
    for e in table.entries:
        if e.irq_line == irq_line and not e.masked:
            dests |= e.destinations
    return frozenset(dests)
