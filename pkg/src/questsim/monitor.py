"""Per-sandbox monitors: trap dispatch, channel setup and trap accounting."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any

from .io_model import (
    Allow,
    Deny,
    Direction,
    IoFabric,
    PortTrap,
    RedirectionTable,
    all_ones,
    ioapic_write,
    Applied,
)
from .memory_model import (
    PAGE_SHIFT,
    Access,
    AddressSpace,
    EptViolation,
    HostOwnership,
    Permissions,
    ept_map,
)


class MonitorError(Exception):
    pass


class UnhandledTrapKind(MonitorError):
    pass


class PoolExhausted(MonitorError):
    pass


class SandboxUnknown(MonitorError):
    pass


class TrapKind(str, enum.Enum):
    EPT_VIOLATION = "ept_violation"
    IO_PORT = "io_port"
    DEBUG_EXCEPTION = "debug_exception"
    # guest request to its monitor, used only for channel setup
    HYPERCALL = "hypercall"


@dataclass(frozen=True)
class MemoryTrap:
    """EPT-violation context; ``payload`` is what a write would have stored."""

    violation: EptViolation
    width: int = 4
    payload: Any = None


@dataclass(frozen=True)
class ChannelSide:
    channel_id: int
    hpa_pages: tuple[int, ...]
    gpa_page: int
    perms: Permissions


@dataclass(frozen=True)
class Trap:
    kind: TrapKind
    sandbox: Any
    time: int
    context: Any = None
    isn: int = 0

    def describe(self) -> str:
        c = self.context
        if self.kind is TrapKind.EPT_VIOLATION:
            return f"gpa={c.violation.gpa:#x} access={c.violation.access.value}"
        if self.kind is TrapKind.IO_PORT:
            return f"port={c.port:#x} dir={c.direction.value} width={c.width}"
        if self.kind is TrapKind.HYPERCALL:
            return f"channel={c.channel_id} pages={len(c.hpa_pages)} gpa={c.gpa_page << PAGE_SHIFT:#x}"
        return "single-step"


@dataclass(frozen=True)
class Resolution:
    action: str
    value: int | None = None
    detail: str = ""


@dataclass(frozen=True)
class TrapCosts:
    trap_ns: int = 2000
    tlb_flush_ns: int = 500


def trap_cost_accounting(trap: Trap, costs: TrapCosts) -> tuple[int, int]:
    """``(trap_ns, flush_ns)`` charged for one monitor entry and its return."""
    return costs.trap_ns, costs.tlb_flush_ns


@dataclass
class Channel:
    id: int
    endpoints: tuple
    hpa_pages: tuple[int, ...]
    gpa_page: dict
    perms: dict
    created: int

    def to_record(self) -> dict:
        a, b = self.endpoints
        return {
            "time": self.created,
            "id": self.id,
            "a": a,
            "b": b,
            "hpa_first": self.hpa_pages[0] << PAGE_SHIFT,
            "n_pages": len(self.hpa_pages),
            "gpa_a": self.gpa_page[a] << PAGE_SHIFT,
            "gpa_b": self.gpa_page[b] << PAGE_SHIFT,
            "perms_a": self.perms[a].short(),
            "perms_b": self.perms[b].short(),
        }


class ChannelPool:
    """Reserved HPA pages from which channel pages are carved, lowest first."""

    def __init__(self, first_page: int, n_pages: int) -> None:
        self.first_page = first_page
        self.n_pages = n_pages
        self.used = 0
        self.channels: list[Channel] = []

    @property
    def free(self) -> int:
        return self.n_pages - self.used

    def allocate(self, n: int) -> tuple[int, ...]:
        if n < 1:
            raise ValueError("channel needs at least one page")
        if n > self.free:
            raise PoolExhausted(f"{n} pages requested, {self.free} free")
        pages = tuple(range(self.first_page + self.used, self.first_page + self.used + n))
        self.used += n
        return pages

    def registry(self) -> list[dict]:
        return [c.to_record() for c in self.channels]


class Monitor:
    """Trusted code serving exactly one sandbox.

    Holds the only handle to that sandbox's EPT. ``entries`` counts every
    monitor entry, whatever its cause.
    """

    def __init__(
        self,
        sandbox,
        space: AddressSpace,
        io: IoFabric,
        ioapic: RedirectionTable,
        registry: HostOwnership,
        blacklist=frozenset(),
        ioapic_irqs=frozenset(),
        costs: TrapCosts = TrapCosts(),
        channel_gpa_page: int = 0,
    ) -> None:
        self.sandbox = sandbox
        self.space = space
        self.io = io
        self.ioapic = ioapic
        self.registry = registry
        self.blacklist = frozenset(blacklist)
        self.ioapic_irqs = frozenset(ioapic_irqs)
        self.costs = costs
        self.next_channel_gpa_page = channel_gpa_page
        self.entries = 0
        self.overhead_ns = 0
        self.violation_log: list[dict] = []

    @property
    def ept(self):
        return self.space.ept

    def _violation(self, trap: Trap, kind: str, detail: str, action: str = "deny") -> None:
        self.violation_log.append(
            {"time": trap.time, "sandbox": self.sandbox, "kind": kind, "detail": detail, "action": action}
        )

    def handle_trap(self, trap: Trap) -> Resolution:
        if trap.sandbox != self.sandbox:
            raise MonitorError(f"monitor {self.sandbox} handed a trap from sandbox {trap.sandbox}")
        self.entries += 1
        trap_ns, flush_ns = trap_cost_accounting(trap, self.costs)
        self.overhead_ns += trap_ns + flush_ns
        try:
            handler = {
                TrapKind.EPT_VIOLATION: self._on_ept_violation,
                TrapKind.IO_PORT: self._on_port,
                TrapKind.DEBUG_EXCEPTION: self._on_debug,
                TrapKind.HYPERCALL: self._on_hypercall,
            }[trap.kind]
        except KeyError:
            raise UnhandledTrapKind(trap.kind) from None
        resolution = handler(trap)
        # back to the guest
        self.space.tlb.flush(self.sandbox)
        return resolution

    def _on_ept_violation(self, trap: Trap) -> Resolution:
        ctx: MemoryTrap = trap.context
        v = ctx.violation
        if self.ioapic.in_window(v.gpa):
            if v.access is Access.WRITE:
                if not (isinstance(ctx.payload, tuple) and len(ctx.payload) == 2):
                    self._violation(trap, "ioapic", "malformed redirection write")
                    return Resolution("ioapic_denied", None, "malformed redirection write")
                index, entry = ctx.payload
                result = ioapic_write(self.ioapic, self.sandbox, index, entry, self.ioapic_irqs)
                if isinstance(result, Applied):
                    return Resolution("ioapic_applied", None, f"entry {index} <- {entry.to_dict()}")
                self._violation(trap, "ioapic", result.reason)
                return Resolution("ioapic_denied", None, result.reason)
            index = ctx.payload if isinstance(ctx.payload, int) else 0
            if 0 <= index < len(self.ioapic):
                e = self.ioapic.entries[index]
                return Resolution("ioapic_read", e.irq_line | (int(e.masked) << 16), f"entry {index}")
            return Resolution("ioapic_read", all_ones(ctx.width), f"bad index {index}")
        self._violation(trap, "memory", f"{v.access.value} gpa={v.gpa:#x}")
        return Resolution("deny", all_ones(ctx.width) if v.access is Access.READ else None, "ept violation")

    def _on_port(self, trap: Trap) -> Resolution:
        ctx: PortTrap = trap.context
        if self.io.is_pci_data_trap(ctx):
            result = self.io.mediate_pci(self.sandbox, ctx, self.blacklist)
            if isinstance(result, Allow):
                return Resolution("single_step", None, f"{result.device.name} offset {result.target.offset:#x}")
            assert isinstance(result, Deny)
            self._violation(trap, "pci", result.reason)
            return Resolution("deny", result.value, result.reason)
        self._violation(trap, "port", f"port {ctx.port:#x} not assigned")
        value = all_ones(ctx.width) if ctx.direction is Direction.IN else None
        return Resolution("deny", value, "port not assigned")

    def _on_debug(self, trap: Trap) -> Resolution:
        pending = self.io.complete_single_step(self.sandbox)
        return Resolution("remask", None, f"isn {pending.isn}")

    def _on_hypercall(self, trap: Trap) -> Resolution:
        side: ChannelSide = trap.context
        for i, hpa_page in enumerate(side.hpa_pages):
            ept_map(
                self.space.ept,
                side.gpa_page + i,
                hpa_page,
                side.perms,
                registry=self.registry,
                immutable=True,
                channel_id=side.channel_id,
            )
        return Resolution("channel_mapped", None, f"channel {side.channel_id}")

    def violations_jsonl(self) -> str:
        return "".join(json.dumps(v, sort_keys=True) + "\n" for v in self.violation_log)


def create_channel(
    pool: ChannelPool,
    monitors: dict,
    a,
    b,
    n_pages: int,
    perms_a: Permissions = Permissions.RW,
    perms_b: Permissions = Permissions.RW,
    time: int = 0,
) -> tuple[Channel, list[tuple[Trap, Resolution]]]:
    """Allocate shared pages and have each endpoint's monitor map them.

    Allocation is checked before any EPT is touched, so a failure leaves
    both sandboxes unchanged.
    """
    for s in (a, b):
        if s not in monitors:
            raise SandboxUnknown(s)
    if a == b:
        raise ValueError("channel endpoints must differ")
    pages = pool.allocate(n_pages)
    cid = len(pool.channels)
    for p in pages:
        monitors[a].registry.register_channel_page(p, cid)
    chan = Channel(cid, (a, b), pages, {}, {a: Permissions(perms_a), b: Permissions(perms_b)}, time)
    handled = []
    for s in (a, b):
        mon = monitors[s]
        chan.gpa_page[s] = mon.next_channel_gpa_page
        mon.next_channel_gpa_page += n_pages
        trap = Trap(TrapKind.HYPERCALL, s, time, ChannelSide(cid, pages, chan.gpa_page[s], chan.perms[s]))
        handled.append((trap, mon.handle_trap(trap)))
    pool.channels.append(chan)
    return chan, handled
