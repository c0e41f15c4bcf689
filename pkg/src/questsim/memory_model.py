"""Two-stage address translation: guest page tables, EPTs, TLB and host memory.

Addresses are plain integers. A page number is ``address >> 12``. Guest
tables are a flat map from GVA page to GPA page; extended page tables map
GPA pages to HPA pages with 4KB or 2MB entries, and a 4KB entry inside a
2MB region takes precedence over it (a split superpage, used for channel
pages and MMIO holes).

Stage-1 faults are delivered to the sandbox kernel (``GuestPageFault``);
stage-2 faults are delivered to the monitor (``EptViolation``). Neither is
raised: both come back as values from :func:`translate` so the caller can
route them.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Union

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
SUPERPAGE_PAGES = 512
SUPERPAGE_SIZE = PAGE_SIZE * SUPERPAGE_PAGES

GVA_BITS = 48
GPA_BITS = 48
HPA_BITS = 52

ENTRIES_PER_TABLE = 512
EPT_LEVELS = 4


class MemoryModelError(Exception):
    """Base class for memory-model errors."""


class ImmutableEntry(MemoryModelError):
    pass


class OwnershipConflict(MemoryModelError):
    pass


class MisalignedSuperpage(MemoryModelError):
    pass


class AddressOutOfRange(MemoryModelError):
    pass


class Permissions(enum.IntFlag):
    NONE = 0
    READ = 1
    WRITE = 2
    EXECUTE = 4
    RW = READ | WRITE
    RX = READ | EXECUTE
    RWX = READ | WRITE | EXECUTE

    @classmethod
    def parse(cls, text: str) -> "Permissions":
        """Parse ``"rw"``, ``"rwx"``, ``"r"``, ``""``/``"none"``."""
        text = text.lower()
        if text in ("", "none", "-"):
            return cls.NONE
        perms = cls.NONE
        for ch in text:
            try:
                perms |= {"r": cls.READ, "w": cls.WRITE, "x": cls.EXECUTE}[ch]
            except KeyError:
                raise ValueError(f"bad permission letter {ch!r} in {text!r}") from None
        return perms

    def short(self) -> str:
        return "".join(
            ch if self & bit else "-"
            for ch, bit in (("r", Permissions.READ), ("w", Permissions.WRITE), ("x", Permissions.EXECUTE))
        )


class Access(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"

    @property
    def required(self) -> Permissions:
        return {
            Access.READ: Permissions.READ,
            Access.WRITE: Permissions.WRITE,
            Access.EXECUTE: Permissions.EXECUTE,
        }[self]


class PageSize(enum.IntEnum):
    SIZE_4K = PAGE_SIZE
    SIZE_2M = SUPERPAGE_SIZE

    @property
    def pages(self) -> int:
        return self.value // PAGE_SIZE


def page_of(addr: int) -> int:
    return addr >> PAGE_SHIFT


def _check_page(page: int, bits: int, what: str) -> None:
    if not 0 <= page < (1 << (bits - PAGE_SHIFT)):
        raise AddressOutOfRange(f"{what} page {page:#x} outside {bits}-bit space")


# ---------------------------------------------------------------------------
# stage 1

class GuestPageTable:
    """Guest-owned GVA page -> (GPA page, perms) map."""

    def __init__(self) -> None:
        self.entries: dict[int, tuple[int, Permissions]] = {}

    def lookup(self, gva_page: int) -> tuple[int, Permissions] | None:
        return self.entries.get(gva_page)

    def __len__(self) -> int:
        return len(self.entries)


def guest_map(gpt: GuestPageTable, gva_page: int, gpa_page: int, perms: Permissions) -> GuestPageTable:
    """Install or overwrite a stage-1 entry. Guests edit their own table freely."""
    _check_page(gva_page, GVA_BITS, "GVA")
    _check_page(gpa_page, GPA_BITS, "GPA")
    gpt.entries[gva_page] = (gpa_page, Permissions(perms))
    return gpt


# ---------------------------------------------------------------------------
# stage 2

@dataclass(frozen=True)
class EptEntry:
    hpa_page: int
    perms: Permissions
    page_size: PageSize = PageSize.SIZE_4K
    immutable: bool = False


class HostOwnership:
    """Registry of which sandbox owns each accessible HPA page.

    Pages handed to a channel are owned by the channel, and may be mapped by
    its endpoints only. Perms-none mappings grant no access and are not
    registered.
    """

    def __init__(self) -> None:
        # 4KB page -> [owner, refcount]; superframe (hpa_page >> 9) -> [owner, refcount]
        self._small: dict[int, list] = {}
        self._large: dict[int, list] = {}
        self._small_by_frame: dict[int, set[int]] = {}
        self.channel_pages: dict[int, int] = {}  # hpa page -> channel id

    def owner_of(self, hpa_page: int):
        rec = self._small.get(hpa_page) or self._large.get(hpa_page >> 9)
        return None if rec is None else rec[0]

    def register_channel_page(self, hpa_page: int, channel_id: int) -> None:
        self.channel_pages[hpa_page] = channel_id

    def _conflicts(self, owner, hpa_page: int, size: PageSize, channel_id: int | None) -> str | None:
        if size is PageSize.SIZE_4K:
            chan = self.channel_pages.get(hpa_page)
            if chan is not None:
                return None if chan == channel_id else f"HPA page {hpa_page:#x} belongs to channel {chan}"
            if channel_id is not None:
                return f"HPA page {hpa_page:#x} is not a page of channel {channel_id}"
            cur = self.owner_of(hpa_page)
            if cur is not None and cur != owner:
                return f"HPA page {hpa_page:#x} owned by sandbox {cur}"
            return None
        frame = hpa_page >> 9
        rec = self._large.get(frame)
        if rec is not None and rec[0] != owner:
            return f"HPA superpage {frame:#x} owned by sandbox {rec[0]}"
        for p in self._small_by_frame.get(frame, ()):
            if p in self.channel_pages or self._small[p][0] != owner:
                return f"HPA page {p:#x} inside superpage owned elsewhere"
        if any((hpa_page <= p < hpa_page + SUPERPAGE_PAGES) for p in self.channel_pages):
            return f"superpage at {hpa_page:#x} overlaps a channel page"
        return None

    def claim(self, owner, hpa_page: int, size: PageSize, channel_id: int | None = None) -> None:
        why = self._conflicts(owner, hpa_page, size, channel_id)
        if why:
            raise OwnershipConflict(why)
        if size is PageSize.SIZE_4K:
            rec = self._small.setdefault(hpa_page, [owner if channel_id is None else ("channel", channel_id), 0])
            rec[1] += 1
            self._small_by_frame.setdefault(hpa_page >> 9, set()).add(hpa_page)
        else:
            rec = self._large.setdefault(hpa_page >> 9, [owner, 0])
            rec[1] += 1

    def release(self, hpa_page: int, size: PageSize) -> None:
        if size is PageSize.SIZE_4K:
            rec = self._small.get(hpa_page)
            if rec is None:
                return
            rec[1] -= 1
            if rec[1] == 0:
                del self._small[hpa_page]
                self._small_by_frame[hpa_page >> 9].discard(hpa_page)
        else:
            rec = self._large.get(hpa_page >> 9)
            if rec is None:
                return
            rec[1] -= 1
            if rec[1] == 0:
                del self._large[hpa_page >> 9]


class ExtendedPageTable:
    """GPA page -> EptEntry, owned by one sandbox and edited only by its monitor."""

    def __init__(self, owner) -> None:
        self.owner = owner
        self.small: dict[int, EptEntry] = {}  # gpa page -> entry
        self.large: dict[int, EptEntry] = {}  # gpa superframe (gpa_page >> 9) -> entry

    def lookup(self, gpa_page: int) -> tuple[int, EptEntry] | None:
        """Return ``(hpa_page, entry)`` for a GPA page, or None if unmapped."""
        e = self.small.get(gpa_page)
        if e is not None:
            return e.hpa_page, e
        e = self.large.get(gpa_page >> 9)
        if e is not None:
            return e.hpa_page + (gpa_page & (SUPERPAGE_PAGES - 1)), e
        return None

    def mapped_hpa_ranges(self, accessible_only: bool = True):
        """Yield ``(hpa_first_page, n_pages, gpa_first_page, entry)`` for every entry."""
        for frame, e in self.large.items():
            if accessible_only and not e.perms:
                continue
            yield e.hpa_page, SUPERPAGE_PAGES, frame << 9, e
        for gpa_page, e in self.small.items():
            if accessible_only and not e.perms:
                continue
            yield e.hpa_page, 1, gpa_page, e

    def structure_pages(self) -> int:
        """Number of 4KB paging-structure pages needed for the installed entries."""
        pdpt, pd, pt = set(), set(), set()
        for frame in self.large:
            pd.add(frame >> 9)
            pdpt.add(frame >> 18)
        for gpa_page in self.small:
            pt.add(gpa_page >> 9)
            pd.add(gpa_page >> 18)
            pdpt.add(gpa_page >> 27)
        if not (pdpt or pd or pt):
            return 1
        return 1 + len(pdpt) + len(pd) + len(pt)

    def __len__(self) -> int:
        return len(self.small) + len(self.large)


def ept_map(
    ept: ExtendedPageTable,
    gpa_page: int,
    hpa_page: int,
    perms: Permissions,
    size: PageSize = PageSize.SIZE_4K,
    *,
    registry: HostOwnership | None = None,
    immutable: bool = False,
    channel_id: int | None = None,
) -> EptEntry:
    """Install an EPT entry on behalf of the owning monitor.

    Raises ImmutableEntry, OwnershipConflict or MisalignedSuperpage; on any
    error the table and registry are left untouched.
    """
    _check_page(gpa_page, GPA_BITS, "GPA")
    _check_page(hpa_page, HPA_BITS, "HPA")
    size = PageSize(size)
    perms = Permissions(perms)
    if size is PageSize.SIZE_2M:
        if gpa_page % SUPERPAGE_PAGES or hpa_page % SUPERPAGE_PAGES:
            raise MisalignedSuperpage(
                f"2MB mapping GPA page {gpa_page:#x} -> HPA page {hpa_page:#x} not 512-page aligned"
            )
        frame = gpa_page >> 9
        for p in range(gpa_page, gpa_page + SUPERPAGE_PAGES):
            e = ept.small.get(p)
            if e is not None and e.immutable:
                raise ImmutableEntry(f"GPA page {p:#x} is an immutable channel entry")
        old = ept.large.get(frame)
        if old is not None and old.immutable:
            raise ImmutableEntry(f"GPA superframe {frame:#x} is immutable")
    else:
        old = ept.small.get(gpa_page)
        if old is not None and old.immutable:
            raise ImmutableEntry(f"GPA page {gpa_page:#x} is an immutable channel entry")

    if registry is not None:
        if old is not None and old.perms:
            registry.release(old.hpa_page, old.page_size)
        if perms:
            try:
                registry.claim(ept.owner, hpa_page, size, channel_id)
            except OwnershipConflict:
                if old is not None and old.perms:
                    registry.claim(ept.owner, old.hpa_page, old.page_size)
                raise

    entry = EptEntry(hpa_page, perms, size, immutable)
    if size is PageSize.SIZE_2M:
        ept.large[gpa_page >> 9] = entry
    else:
        ept.small[gpa_page] = entry
    return entry


def ept_map_range(ept, gpa_page, hpa_page, n_pages, perms, *, registry=None) -> None:
    """Map a contiguous range using 2MB entries wherever alignment allows."""
    off = 0
    while off < n_pages:
        g, h = gpa_page + off, hpa_page + off
        if g % SUPERPAGE_PAGES == 0 and h % SUPERPAGE_PAGES == 0 and n_pages - off >= SUPERPAGE_PAGES:
            ept_map(ept, g, h, perms, PageSize.SIZE_2M, registry=registry)
            off += SUPERPAGE_PAGES
        else:
            ept_map(ept, g, h, perms, PageSize.SIZE_4K, registry=registry)
            off += 1


def ept_footprint(memory_bytes: int, page_size: PageSize | int = PageSize.SIZE_2M) -> int:
    """Bytes of 4-level EPT structure pages needed to map ``memory_bytes`` from GPA 0.

    With 2MB leaves the range is rounded up to whole superpages. Each
    structure page is 4KB and holds 512 eight-byte entries.
    """
    if memory_bytes <= 0:
        raise ValueError("memory_bytes must be positive")
    page_size = PageSize(page_size)
    leaves = -(-memory_bytes // page_size.value)
    pages = 1  # root
    # non-root levels holding entries: PT (4K leaves only), PD, PDPT
    levels = 3 if page_size is PageSize.SIZE_4K else 2
    count = leaves
    for _ in range(levels):
        count = -(-count // ENTRIES_PER_TABLE)
        pages += count
    return pages * PAGE_SIZE


# ---------------------------------------------------------------------------
# translation

@dataclass(frozen=True)
class Translated:
    hpa: int
    gpa: int


@dataclass(frozen=True)
class GuestPageFault:
    sandbox: object
    gva: int
    access: Access


@dataclass(frozen=True)
class EptViolation:
    sandbox: object
    gva: int
    gpa: int
    access: Access


AccessOutcome = Union[Translated, GuestPageFault, EptViolation]


class Tlb:
    """Composed-translation cache keyed by (sandbox, GVA page).

    Unbounded; emptied per sandbox only by :meth:`flush` or by guest-table
    edits to the specific GVA page.
    """

    def __init__(self) -> None:
        self.cache: dict[tuple[object, int], tuple[int, int, Permissions, Permissions]] = {}
        self.flush_count = 0
        self.flushes: dict[object, int] = {}
        self.walks = 0
        self.hits = 0

    def flush(self, sandbox) -> None:
        for key in [k for k in self.cache if k[0] == sandbox]:
            del self.cache[key]
        self.flush_count += 1
        self.flushes[sandbox] = self.flushes.get(sandbox, 0) + 1

    def invalidate(self, sandbox, gva_page: int) -> None:
        self.cache.pop((sandbox, gva_page), None)

    def entries_for(self, sandbox) -> dict[int, tuple[int, int, Permissions, Permissions]]:
        return {k[1]: v for k, v in self.cache.items() if k[0] == sandbox}


def tlb_flush(tlb: Tlb, sandbox) -> None:
    tlb.flush(sandbox)


class AddressSpace:
    """One sandbox's view: its guest table, its EPT, and the shared TLB."""

    def __init__(self, sandbox, tlb: Tlb | None = None) -> None:
        self.sandbox = sandbox
        self.gpt = GuestPageTable()
        self.ept = ExtendedPageTable(sandbox)
        self.tlb = tlb if tlb is not None else Tlb()

    def guest_map(self, gva_page: int, gpa_page: int, perms: Permissions) -> None:
        guest_map(self.gpt, gva_page, gpa_page, perms)
        self.tlb.invalidate(self.sandbox, gva_page)

    def translate(self, gva: int, access: Access) -> AccessOutcome:
        return translate(self, gva, access)


def translate(space: AddressSpace, gva: int, access: Access | str) -> AccessOutcome:
    access = Access(access)
    need = access.required
    gva_page, offset = gva >> PAGE_SHIFT, gva & (PAGE_SIZE - 1)
    tlb = space.tlb
    cached = tlb.cache.get((space.sandbox, gva_page))
    if cached is not None:
        tlb.hits += 1
        hpa_page, gpa_page, p1, p2 = cached
        if not p1 & need:
            return GuestPageFault(space.sandbox, gva, access)
        if not p2 & need:
            return EptViolation(space.sandbox, gva, (gpa_page << PAGE_SHIFT) | offset, access)
        return Translated((hpa_page << PAGE_SHIFT) | offset, (gpa_page << PAGE_SHIFT) | offset)

    tlb.walks += 1
    s1 = space.gpt.lookup(gva_page)
    if s1 is None or not s1[1] & need:
        return GuestPageFault(space.sandbox, gva, access)
    gpa_page, p1 = s1
    gpa = (gpa_page << PAGE_SHIFT) | offset
    s2 = space.ept.lookup(gpa_page)
    if s2 is None or not s2[1].perms & need:
        return EptViolation(space.sandbox, gva, gpa, access)
    hpa_page, entry = s2
    tlb.cache[(space.sandbox, gva_page)] = (hpa_page, gpa_page, p1, entry.perms)
    return Translated((hpa_page << PAGE_SHIFT) | offset, gpa)


def gpa_access(space: AddressSpace, gpa: int, access: Access | str) -> AccessOutcome:
    """Stage-2 only check, used for guest-physical accesses (kernel identity view)."""
    access = Access(access)
    s2 = space.ept.lookup(gpa >> PAGE_SHIFT)
    if s2 is None or not s2[1].perms & access.required:
        return EptViolation(space.sandbox, gpa, gpa, access)
    return Translated((s2[0] << PAGE_SHIFT) | (gpa & (PAGE_SIZE - 1)), gpa)


# ---------------------------------------------------------------------------
# host memory contents

class HostMemory:
    """Sparse host-physical memory: pages exist only once written."""

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}

    def read(self, hpa: int, n: int = 1) -> bytes:
        out = bytearray()
        while n > 0:
            page, off = hpa >> PAGE_SHIFT, hpa & (PAGE_SIZE - 1)
            take = min(n, PAGE_SIZE - off)
            buf = self.pages.get(page)
            out += buf[off:off + take] if buf is not None else bytes(take)
            hpa += take
            n -= take
        return bytes(out)

    def write(self, hpa: int, data: bytes) -> None:
        data = bytes(data)
        while data:
            page, off = hpa >> PAGE_SHIFT, hpa & (PAGE_SIZE - 1)
            take = min(len(data), PAGE_SIZE - off)
            buf = self.pages.get(page)
            if buf is None:
                buf = self.pages[page] = bytearray(PAGE_SIZE)
            buf[off:off + take] = data[:take]
            hpa += take
            data = data[take:]

    def checksum(self, first_page: int, n_pages: int) -> str:
        """Digest of every materialised page in ``[first_page, first_page + n_pages)``."""
        h = hashlib.sha256()
        for page in sorted(p for p in self.pages if first_page <= p < first_page + n_pages):
            h.update(page.to_bytes(8, "little"))
            h.update(self.pages[page])
        return h.hexdigest()
