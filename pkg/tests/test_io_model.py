import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pci_fields
from questsim.io_model import (
    Allow,
    Applied,
    Deny,
    Denied,
    Direct,
    IoFabric,
    IoPortBitmap,
    NotEnabled,
    PciBus,
    PciDevice,
    Phase,
    PortDevice,
    ProtocolViolation,
    RedirectionEntry,
    RedirectionTable,
    Trapped,
    all_ones,
    ioapic_write,
    pci_decode,
    pci_encode,
    route_interrupt,
)

NIC = (0x8086, 0x100E)


def fabric():
    nic = PciDevice("nic", *NIC, 0, 3, irq_line=11)
    usb = PciDevice("usb", 0x8086, 0x7020, 0, 1, 2, irq_line=9)
    serial = PortDevice("serial", 0x3F8, 8, irq_line=4, reset=bytes([0, 0, 0, 0, 0, 0x60, 0, 0]))
    io = IoFabric(PciBus([nic, usb]), [serial])
    io.add_sandbox(1)
    io.add_sandbox(2, serial.ports)
    return io


def config_read(io, sandbox, bdf, offset, blacklist=frozenset()):
    """Guest-side read through the full mediation cycle; returns (value, outcome)."""
    io.io_port_access(sandbox, 0xCF8, "out", 4, pci_encode(*bdf, offset))
    r = io.io_port_access(sandbox, 0xCFC, "in", 4)
    assert isinstance(r, Trapped)
    m = io.mediate_pci(sandbox, r.context, blacklist)
    if isinstance(m, Deny):
        return m.value, "deny"
    again = io.io_port_access(sandbox, 0xCFC, "in", 4)
    assert isinstance(again, Direct)
    io.complete_single_step(sandbox)
    return again.value, "allow"


def test_bitmap_defaults_to_trap_all():
    b = IoPortBitmap()
    assert b.traps(0) and b.traps(0xFFFF)
    b.allow(range(0x3F8, 0x400))
    assert not b.traps(0x3F8) and b.traps(0x400)
    b.set_trap(0x3F8)
    assert b.traps(0x3F8)


def test_owned_serial_port_is_direct():
    io = fabric()
    r = io.io_port_access(2, 0x3FD, "in", 1)
    assert r == Direct(0x60)


def test_pci_data_port_always_traps():
    io = fabric()
    for sb in (1, 2):
        assert isinstance(io.io_port_access(sb, 0xCFC, "in", 4), Trapped)
        assert isinstance(io.io_port_access(sb, 0xCFE, "out", 2, 0), Trapped)


def test_foreign_port_traps():
    io = fabric()
    assert isinstance(io.io_port_access(1, 0x3F8, "out", 1, 0x41), Trapped)
    assert io.port_device(0x3F8).regs[0] == 0


def test_address_port_is_latched_per_sandbox():
    io = fabric()
    io.io_port_access(1, 0xCF8, "out", 4, 0x80001800)
    io.io_port_access(2, 0xCF8, "out", 4, 0x80000800)
    assert io.io_port_access(1, 0xCF8, "in", 4) == Direct(0x80001800)
    assert io.sandboxes[2].latched_address == 0x80000800


def test_pci_decode_examples():
    assert pci_decode(0x80001000) == (0, 2, 0, 0)
    assert pci_decode(0x80000000) == (0, 0, 0, 0)
    with pytest.raises(NotEnabled):
        pci_decode(0x00001000)
    assert pci_decode(0x80FFFFFF) == (0xFF, 31, 7, 0xFC)


@settings(max_examples=500)
@given(st.integers(0, 0xFFFFFFFF))
def test_pci_decode_matches_bit_slicing(word):
    want = pci_fields(word)
    if want is None:
        with pytest.raises(NotEnabled):
            pci_decode(word)
    else:
        assert tuple(pci_decode(word)) == want


@given(st.integers(0, 255), st.integers(0, 31), st.integers(0, 7), st.integers(0, 255))
def test_pci_encode_roundtrip(bus, dev, func, off):
    assert pci_decode(pci_encode(bus, dev, func, off)) == (bus, dev, func, off & 0xFC)


def test_allowed_read_returns_ids_and_remasks():
    io = fabric()
    value, outcome = config_read(io, 1, (0, 3, 0), 0)
    assert outcome == "allow"
    assert value == NIC[0] | NIC[1] << 16
    sio = io.sandboxes[1]
    assert sio.mediation.phase is Phase.MASKED and not sio.trap_flag
    assert all(sio.bitmap.traps(p) for p in range(0xCFC, 0xD00))
    io.check_masking()


def test_allow_arms_single_step():
    io = fabric()
    io.io_port_access(1, 0xCF8, "out", 4, pci_encode(0, 3, 0, 0))
    r = io.io_port_access(1, 0xCFC, "in", 4)
    assert isinstance(io.mediate_pci(1, r.context, set()), Allow)
    sio = io.sandboxes[1]
    assert sio.mediation.phase is Phase.SINGLE_STEP_ARMED and sio.trap_flag
    assert not sio.bitmap.traps(0xCFC)
    # the other sandbox is unaffected
    assert io.sandboxes[2].bitmap.traps(0xCFC)
    with pytest.raises(ProtocolViolation):
        io.mediate_pci(1, r.context, set())


def test_blacklisted_read_is_all_ones():
    io = fabric()
    assert config_read(io, 2, (0, 3, 0), 0, {NIC}) == (0xFFFFFFFF, "deny")
    assert io.sandboxes[2].mediation.phase is Phase.MASKED


def test_blacklisted_write_dropped():
    io = fabric()
    dev = io.bus.by_name("nic")
    before = bytes(dev.config)
    io.io_port_access(2, 0xCF8, "out", 4, pci_encode(0, 3, 0, 0x3C))
    r = io.io_port_access(2, 0xCFC, "out", 4, 0x12345678)
    m = io.mediate_pci(2, r.context, {NIC})
    assert isinstance(m, Deny) and m.value is None
    assert bytes(dev.config) == before


def test_absent_device_reads_all_ones():
    io = fabric()
    assert config_read(io, 1, (7, 31, 0), 0) == (0xFFFFFFFF, "deny")


def test_disabled_address_denied():
    io = fabric()
    io.io_port_access(1, 0xCF8, "out", 4, 0x00001800)
    r = io.io_port_access(1, 0xCFC, "in", 2)
    assert io.mediate_pci(1, r.context, set()) == Deny(0xFFFF, "address not enabled")


def test_debug_trap_without_arm_is_protocol_violation():
    io = fabric()
    with pytest.raises(ProtocolViolation):
        io.complete_single_step(1)


def test_back_to_back_allows_are_full_cycles():
    io = fabric()
    for _ in range(2):
        io.io_port_access(1, 0xCF8, "out", 4, pci_encode(0, 3, 0, 0x3C))
        r = io.io_port_access(1, 0xCFC, "out", 4, 0xAB)
        assert isinstance(r, Trapped)
        assert isinstance(io.mediate_pci(1, r.context, set()), Allow)
        assert io.io_port_access(1, 0xCFC, "out", 4, 0xAB) == Direct(None)
        io.complete_single_step(1)
        io.check_masking()
    assert io.bus.by_name("nic").config[0x3C] == 0xAB


def test_vendor_device_ids_are_read_only():
    dev = PciDevice("x", 0x1234, 0x5678, 0, 0)
    dev.write_config(0, 4, 0)
    assert dev.read_config(0, 4) == 0x56781234


def test_all_ones_widths():
    assert [all_ones(w) for w in (1, 2, 4)] == [0xFF, 0xFFFF, 0xFFFFFFFF]


# -- IOAPIC

def table():
    t = RedirectionTable()
    t.entries[4] = RedirectionEntry(4, frozenset({2}), False)
    t.entries[11] = RedirectionEntry(11, frozenset({1}), False)
    return t


def test_owner_routes_own_irq():
    t = table()
    r = ioapic_write(t, 1, 11, RedirectionEntry(11, frozenset({1})), {11})
    assert isinstance(r, Applied)
    assert route_interrupt(11, t) == {1}


def test_unauthorised_reroute_denied():
    t = table()
    r = ioapic_write(t, 3, 4, RedirectionEntry(4, frozenset({3})), {9, 16})
    assert isinstance(r, Denied)
    assert route_interrupt(4, t) == {2}


def test_cannot_retarget_foreign_entry_to_own_line():
    t = table()
    assert isinstance(ioapic_write(t, 1, 4, RedirectionEntry(11, frozenset({1})), {11}), Denied)
    assert t.entries[4].irq_line == 4


def test_bad_index_denied():
    assert isinstance(ioapic_write(table(), 1, 99, RedirectionEntry(11), {11}), Denied)


def test_masking_stops_delivery():
    t = table()
    assert isinstance(ioapic_write(t, 2, 4, RedirectionEntry(4, frozenset({2}), True), {4}), Applied)
    assert route_interrupt(4, t) == frozenset()


def test_multi_destination_and_unrouted():
    t = table()
    ioapic_write(t, 1, 11, RedirectionEntry(11, frozenset({1, 3})), {11})
    assert route_interrupt(11, t) == {1, 3}
    assert route_interrupt(20, t) == frozenset()


def test_window_bounds():
    t = RedirectionTable()
    assert t.in_window(0xFEC00000) and t.in_window(0xFEC00FFF)
    assert not t.in_window(0xFEC01000)
