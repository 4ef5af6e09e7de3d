from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmimon.hypervisor import (
    ALLOW,
    DENY,
    MONITOR_SYSCALL_ENTRY,
    SYSCALL_RETURN,
    Access,
    BreakpointHit,
    CostModel,
    CpuContext,
    EptViolation,
    Hypervisor,
    MetricsReport,
    SingleStepDone,
    Site,
    Verdict,
)
from vmimon.kernel import OpenMode, Scheduler
from vmimon.memory import GuestMemory, MemoryFault

from conftest import make_guest

CTX = CpuContext(pid=7, address_space_id=0x7000, stack_id=0x100, syscall="open")


def _hv(pages=8):
    return Hypervisor(GuestMemory(pages))


def test_write_to_unwritable_page_traps():
    hv = _hv()
    hv.set_page_perms(2, readable=True, writable=False)
    hv.guest_write(CTX, 2 * 4096 + 8, b"\x01")
    kinds = [type(e.kind) for e in hv.events]
    assert kinds == [EptViolation, SingleStepDone]
    assert hv.events[0].kind.access is Access.WRITE


def test_read_of_unwritable_page_does_not_trap():
    hv = _hv()
    hv.set_page_perms(2, readable=True, writable=False)
    hv.guest_read(CTX, 2 * 4096, 8)
    assert hv.events == []


def test_read_of_unreadable_page_traps():
    hv = _hv()
    hv.set_page_perms(3, readable=False, writable=False)
    hv.guest_read(CTX, 3 * 4096, 4)
    assert hv.events[0].kind.access is Access.READ


def test_unprotected_write_costs_nothing_extra():
    hv = _hv()
    hv.guest_write(CTX, 4096, b"abc")
    assert hv.counters == Counter()
    assert hv.account().cycles == 0


def test_trap_is_accounted_at_vmexit_plus_single_step():
    hv = _hv()
    cm = hv.cost_model
    hv.set_page_perms(1, True, False)
    hv.guest_write(CTX, 4096, b"\x02")
    assert hv.account().cycles == cm.vmexit + cm.single_step


def test_deny_keeps_memory_unchanged():
    hv = _hv()
    hv.memory.write(4096, b"old!")
    hv.set_page_perms(1, True, False)
    hv.on_violation = lambda ev: DENY
    assert hv.guest_write(CTX, 4096, b"new!") is False
    assert hv.memory.read(4096, 4) == b"old!"


def test_rewrite_lands_instead_of_the_pending_value():
    hv = _hv()
    hv.set_page_perms(1, True, False)
    hv.on_violation = lambda ev: Verdict.rewrite(b"\x01\x00\x00\x00")
    hv.guest_write(CTX, 4096, b"\x00\x00\x00\x00")
    assert hv.memory.read(4096, 4) == b"\x01\x00\x00\x00"


def test_rewrite_of_wrong_size_is_rejected():
    hv = _hv()
    hv.set_page_perms(1, True, False)
    hv.on_violation = lambda ev: Verdict.rewrite(b"\x01")
    with pytest.raises(ValueError):
        hv.guest_write(CTX, 4096, b"\x00\x00")


def test_cross_page_write_is_split_per_page():
    hv = _hv()
    hv.set_page_perms(2, True, False)
    hv.guest_write(CTX, 2 * 4096 - 4, b"12345678")
    violations = [e.kind for e in hv.events if isinstance(e.kind, EptViolation)]
    assert len(violations) == 1
    assert violations[0].addr == 2 * 4096 and violations[0].size == 4
    assert hv.memory.read(2 * 4096 - 4, 8) == b"12345678"


def test_handler_access_inside_single_step_does_not_reenter():
    hv = _hv()
    hv.set_page_perms(1, True, False)
    seen = []

    def handler(ev):
        seen.append(ev)
        return ALLOW

    hv.on_violation = handler
    hv.guest_write(CTX, 4096, b"x")
    assert len(seen) == 1


def test_vmi_access_is_invisible():
    hv = _hv()
    hv.set_page_perms(1, False, False)
    hv.vmi_write(4096, b"vmi")
    assert hv.vmi_read(4096, 3) == b"vmi"
    assert hv.vmi_access(4096, Access.READ, 3) == b"vmi"
    assert hv.events == [] and hv.counters == Counter()


def test_vmi_write_visible_to_guest():
    hv = _hv()
    hv.vmi_write(4096 + 10, b"\x2a")
    assert hv.guest_read(CTX, 4096 + 10, 1) == b"\x2a"


def test_out_of_range_page_perms():
    with pytest.raises(MemoryFault):
        _hv(2).set_page_perms(5, True, False)


def test_breakpoint_on_kill_fires_before_execution():
    g = make_guest()
    k = g.kernel
    victim = k.spawn_process("victim", 1000)
    g.hv.arm_breakpoint(Site.entry("kill"))
    order = []
    g.hv.on_breakpoint = lambda ev: order.append(("bp", victim.alive))
    assert k.syscall_kill(g.init, victim.pid) == 0
    assert order == [("bp", True)]


def test_disarmed_breakpoint_is_silent():
    g = make_guest()
    g.hv.arm_breakpoint(Site.entry("kill"))
    g.hv.disarm_breakpoint(Site.entry("kill"))
    victim = g.kernel.spawn_process("victim")
    g.kernel.syscall_kill(g.init, victim.pid)
    assert g.hv.counters["breakpoint"] == 0


def test_unknown_breakpoint_site_rejected():
    with pytest.raises(ValueError):
        _hv().arm_breakpoint(Site.entry("mmap"))


def test_return_events_carry_each_instance_identity():
    g = make_guest()
    k = g.kernel
    procs = [k.spawn_process(f"p{i}") for i in range(5)]
    g.hv.arm_breakpoint(SYSCALL_RETURN)
    keys = []
    g.hv.on_breakpoint = lambda ev: keys.append(ev.ctx.key) if ev.kind.site == SYSCALL_RETURN else None
    sched = Scheduler(k, seed=3)
    insts = [sched.submit(k.start(p, "open", path="/etc/app.conf", mode=OpenMode.READ_ONLY)) for p in procs]
    sched.drain()
    assert len(keys) == len(insts)
    assert sorted(keys) == sorted(i.ctx.key for i in insts)


def test_patch_result_reaches_the_caller():
    g = make_guest()
    k = g.kernel
    g.hv.arm_breakpoint(SYSCALL_RETURN)

    def on_bp(ev):
        if ev.kind.site == SYSCALL_RETURN and ev.kind.args.get("syscall") == "open":
            g.hv.patch_syscall_result(ev.ctx.key, -1)

    g.hv.on_breakpoint = on_bp
    assert k.syscall_open(g.init, "/etc/app.conf") == -1


def test_patch_with_mismatched_identity_is_ignored():
    g = make_guest()
    k = g.kernel
    g.hv.arm_breakpoint(SYSCALL_RETURN)
    g.hv.on_breakpoint = lambda ev: g.hv.patch_syscall_result((1, 2), -1)
    assert k.syscall_open(g.init, "/etc/app.conf") == 0
    assert g.hv.diagnostics


def test_only_the_flagged_interleaved_open_is_patched():
    g = make_guest()
    k = g.kernel
    a, b = k.spawn_process("a"), k.spawn_process("b")
    g.hv.arm_breakpoint(SYSCALL_RETURN)
    sched = Scheduler(k, seed=11)
    ia = sched.submit(k.start(a, "open", path="/etc/app.conf", mode=OpenMode.READ_ONLY))
    ib = sched.submit(k.start(b, "open", path="/etc/app.conf", mode=OpenMode.READ_ONLY))
    g.hv.on_breakpoint = lambda ev: g.hv.patch_syscall_result(ev.ctx.key, -1) if ev.ctx.key == ia.ctx.key else None
    sched.drain()
    assert ia.result == -1 and ib.result == 0


def test_monitor_syscall_without_handler_replies_empty():
    g = make_guest()
    assert g.kernel.monitor_syscall(g.init, b"caches-ready") == b""


def test_monitor_syscall_loopback():
    g = make_guest()
    g.hv.arm_breakpoint(MONITOR_SYSCALL_ENTRY)
    got = []

    def on_bp(ev):
        got.append(ev.kind.args["payload"])
        return b"ack"

    g.hv.on_breakpoint = on_bp
    payload = b"caches-ready\x00" + (0x1234).to_bytes(8, "little")
    assert g.kernel.monitor_syscall(g.init, payload) == b"ack"
    assert got == [payload]


def test_cost_model_defaults():
    cm = CostModel()
    assert (cm.vmexit, cm.single_step, cm.breakpoint, cm.syscall_base, cm.per_block_io) == (6000, 1000, 3000, 300, 2000)
    assert cm.cfwatcher_injection_per_file == 4_000_000
    assert cm.base_startup_cycles == 550e-3 * 2e9


def test_cost_model_rejects_unknown_and_negative_keys():
    with pytest.raises(ValueError):
        CostModel.from_mapping({"vmexit_cost": 1})
    with pytest.raises(ValueError):
        CostModel.from_mapping({"vmexit": -1})


def test_metrics_report_round_trips():
    rep = MetricsReport({"ept_violation": 3, "syscall": 10}, 21000.0)
    assert MetricsReport.from_text(rep.to_text()) == rep


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 400), st.integers(0, 400))
def test_cycles_are_linear_in_trap_count(base_syscalls, traps):
    cm = CostModel()
    base = cm.cycles({"syscall": base_syscalls})
    more = cm.cycles({"syscall": base_syscalls, "ept_violation": traps, "single_step": traps})
    assert more - base == traps * (cm.vmexit + cm.single_step)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 5), st.booleans(), st.booleans()), max_size=6),
    st.lists(st.tuples(st.integers(1, 5), st.integers(0, 4095), st.integers(1, 64), st.booleans()), max_size=30),
)
def test_trap_soundness(perms, accesses):
    """Exactly one violation per page chunk that breaks its permissions, none otherwise."""
    hv = _hv(8)
    table = {}
    for page, r, w in perms:
        hv.set_page_perms(page, r, w)
        table[page] = (r, w)
    for page, off, n, is_write in accesses:
        addr = page * 4096 + off
        n = min(n, 8 * 4096 - addr)
        expected = 0
        a, end = addr, addr + n
        while a < end:
            p = a // 4096
            r, w = table.get(p, (True, True))
            expected += (not w) if is_write else (not r)
            a = (p + 1) * 4096
        before = hv.counters["ept_violation"]
        if is_write:
            hv.guest_write(CTX, addr, bytes(n))
        else:
            hv.guest_read(CTX, addr, n)
        assert hv.counters["ept_violation"] - before == expected
        assert hv.counters["single_step"] == hv.counters["ept_violation"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["/etc/app.conf", "/path1/target", "/nope"]), min_size=1, max_size=12), st.booleans())
def test_breakpoint_transparency(paths, armed):
    """With no veto, armed and disarmed runs give identical guest results."""
    results = []
    for arm in (False, armed):
        g = make_guest()
        if arm:
            for s in ("open", "close"):
                g.hv.arm_breakpoint(Site.entry(s))
            g.hv.arm_breakpoint(SYSCALL_RETURN)
        out = []
        for p in paths:
            fd = g.kernel.syscall_open(g.init, p)
            out.append(fd)
            if fd >= 0 and len(out) % 2:
                out.append(g.kernel.syscall_close(g.init, fd))
        results.append(out)
    assert results[0] == results[1]


def test_breakpoint_hit_event_is_recorded():
    g = make_guest()
    g.hv.arm_breakpoint(Site.entry("open"))
    g.kernel.syscall_open(g.init, "/etc/app.conf")
    hits = [e for e in g.hv.events if isinstance(e.kind, BreakpointHit)]
    assert len(hits) == 1 and hits[0].kind.args["path"] == "/etc/app.conf"
