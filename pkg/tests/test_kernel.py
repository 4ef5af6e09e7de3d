from hypothesis import given, settings
from hypothesis import strategies as st

from vmimon.fs import Mount
from vmimon.kernel import (
    EBADF,
    ENOENT,
    ESRCH,
    EXDEV,
    IoDirection,
    OpenMode,
    Scheduler,
    dentry_hash,
)

from conftest import make_guest


def _container(g, cid="c1", lower_files=None):
    low = g.storage.layer(f"{cid}-base")
    for p, c in (lower_files or {"/etc/passwd": b"root"}).items():
        low.add_file(p, c)
    up = g.storage.layer(f"{cid}-upper", writable=True)
    ns = g.kernel.new_namespaces()
    g.kernel.add_mount(ns.mnt_ns, Mount.overlay([low], up, cid))
    return ns, low, up


def _chain(k, proc, path):
    out, cur = [], "/"
    out.append(k.lookup(proc, "/"))
    for comp in path.strip("/").split("/"):
        cur = cur.rstrip("/") + "/" + comp
        out.append(k.lookup(proc, cur))
    return out


def _refsum(k):
    total = {}
    for e in k.log:
        for m in e.refs:
            total[m.serial] = total.get(m.serial, 0) + m.delta
    return total


def test_cold_open_creates_the_path_dentries(guest):
    k = guest.kernel
    assert k.lookup(guest.init, "/path1") == 0
    fd = k.syscall_open(guest.init, "/path1/target")
    assert fd == 0
    chain = _chain(k, guest.init, "/path1/target")
    assert len(chain) == 3 and all(chain)
    assert [k.dentry_name(d) for d in chain] == ["/", "path1", "target"]
    assert k.refcount(chain[-1]) == 1


def test_two_openers_share_one_dentry(guest):
    k = guest.kernel
    other = k.spawn_process("other", 0)
    k.syscall_open(guest.init, "/path1/target")
    n = len(k.all_dentries())
    k.syscall_open(other, "/path1/target")
    assert len(k.all_dentries()) == n
    assert k.refcount(k.lookup(other, "/path1/target")) == 2


def test_path_resolution_is_deterministic(guest):
    k = guest.kernel
    k.syscall_open(guest.init, "/path1/target")
    assert k.lookup(guest.init, "/path1/target") == k.lookup(guest.init, "/path1/target")


def test_write_open_of_lower_file_copies_up(guest):
    k = guest.kernel
    ns, low, up = _container(guest)
    sh = k.spawn_process("sh", 0, ns)
    assert "/etc/passwd" not in up.entries
    fd = k.syscall_open(sh, "/etc/passwd", OpenMode.WRITE_ONLY)
    assert fd >= 0
    layer, node = k.mounts[ns.mnt_ns].resolve("/etc/passwd")
    assert layer is up and node is not low.entries["/etc/passwd"]
    k.syscall_io(sh, fd, IoDirection.WRITE, 3, 4096, b"new")
    assert bytes(low.entries["/etc/passwd"].content) == b"root"
    assert bytes(up.entries["/etc/passwd"].content).startswith(b"new")


def test_open_close_restores_refcount(guest):
    k = guest.kernel
    k.syscall_open(guest.init, "/etc/app.conf")
    d = k.lookup(guest.init, "/etc/app.conf")
    before = k.refcount(d)
    fd = k.syscall_open(guest.init, "/etc/app.conf")
    assert k.refcount(d) == before + 1
    assert k.syscall_close(guest.init, fd) == 0
    assert k.refcount(d) == before


def test_double_close_fails_second_time(guest):
    k = guest.kernel
    fd = k.syscall_open(guest.init, "/etc/app.conf")
    d = k.lookup(guest.init, "/etc/app.conf")
    assert k.syscall_close(guest.init, fd) == 0
    assert k.syscall_close(guest.init, fd) == -EBADF
    assert k.refcount(d) == 0


def test_open_missing_file(guest):
    assert guest.kernel.syscall_open(guest.init, "/nope") == -ENOENT


def test_fd_numbers_are_smallest_free(guest):
    k = guest.kernel
    fds = [k.syscall_open(guest.init, "/etc/app.conf") for _ in range(3)]
    assert fds == [0, 1, 2]
    k.syscall_close(guest.init, 1)
    assert k.syscall_open(guest.init, "/etc/app.conf") == 1


def test_read_block_count(guest):
    k = guest.kernel
    fd = k.syscall_open(guest.init, "/etc/app.conf")
    before = guest.hv.counters["io_block"]
    assert k.syscall_io(guest.init, fd, IoDirection.READ, 1 << 20, 256 << 10) == 1 << 20
    assert guest.hv.counters["io_block"] - before == 4


def test_write_to_read_only_fd_fails(guest):
    k = guest.kernel
    fd = k.syscall_open(guest.init, "/etc/app.conf", OpenMode.READ_ONLY)
    assert k.syscall_io(guest.init, fd, IoDirection.WRITE, 10, 4096) < 0


def test_block_events_halve_as_block_size_doubles(guest):
    k = guest.kernel
    fd = k.syscall_open(guest.init, "/etc/app.conf", OpenMode.READ_WRITE)
    counts = []
    for kib in (64, 128, 256, 512, 1024, 2048):
        before = guest.hv.counters["io_block"]
        k.syscall_io(guest.init, fd, IoDirection.READ, 1 << 30, kib << 10)
        counts.append(guest.hv.counters["io_block"] - before)
    assert counts[0] == (1 << 30) // (64 << 10)
    assert all(a == 2 * b for a, b in zip(counts, counts[1:]))


def test_link_makes_two_member_alias_ring(guest):
    k = guest.kernel
    assert k.syscall_link(guest.init, "/etc/app.conf", "/tmp/b") == 0
    a = k.lookup(guest.init, "/etc/app.conf")
    ring = k.alias_ring(k.lookup(guest.init, "/tmp/b"))
    assert len(ring) == 2 and a in ring
    inode = k.raw_u(a, "dentry", "inode")
    assert k.raw_u(inode, "inode", "link_count") == 2


def test_link_to_missing_source_fails(guest):
    assert guest.kernel.syscall_link(guest.init, "/nope", "/tmp/x") < 0


def test_link_chain_ring_has_three_members(guest):
    k = guest.kernel
    assert k.syscall_link(guest.init, "/etc/app.conf", "/tmp/b") == 0
    assert k.syscall_link(guest.init, "/tmp/b", "/tmp/c") == 0
    members = {k.lookup(guest.init, p) for p in ("/etc/app.conf", "/tmp/b", "/tmp/c")}
    for d in members:
        assert set(k.alias_ring(d)) == members


def test_cross_layer_link_is_refused(guest):
    k = guest.kernel
    ns, _, _ = _container(guest)
    sh = k.spawn_process("sh", 0, ns)
    assert k.syscall_link(sh, "/etc/passwd", "/etc/pw2") == -EXDEV


def test_kill_releases_references(guest):
    k = guest.kernel
    victim = k.spawn_process("victim", 0)
    k.syscall_open(victim, "/etc/app.conf")
    k.syscall_open(victim, "/etc/app.conf")
    d = k.lookup(victim, "/etc/app.conf")
    assert k.refcount(d) == 2
    assert k.syscall_kill(guest.init, victim.pid) == 0
    assert not victim.alive and k.refcount(d) == 0
    assert k.syscall_kill(guest.init, victim.pid) == -ESRCH
    assert k.syscall_open(victim, "/etc/app.conf") == -ESRCH


def test_kill_then_reopen_matches_recount(guest):
    k = guest.kernel
    a, b = k.spawn_process("a"), k.spawn_process("b")
    for p in (a, b):
        k.syscall_open(p, "/path1/target")
    k.syscall_kill(guest.init, a.pid)
    k.syscall_open(b, "/etc/app.conf")
    assert k.recount() == k.actual_refcounts()


def test_proc_listing_hides_hidden_agent_from_container(guest):
    k = guest.kernel
    ns, _, _ = _container(guest)
    sh = k.spawn_process("sh", 0, ns)
    agent = k.spawn_process("hagent", 0, ns, hidden=True, agent=True)
    inside = k.syscall_getdents(sh, "/proc")
    outside = k.syscall_getdents(guest.init, "/proc")
    assert str(agent.pid) not in inside and str(sh.pid) in inside
    assert str(agent.pid) in outside


def test_listing_an_empty_directory(guest):
    assert guest.kernel.syscall_getdents(guest.init, "/tmp") == []


def test_prune_frees_unreferenced_dentries(guest):
    k = guest.kernel
    fd = k.syscall_open(guest.init, "/path1/target")
    k.syscall_close(guest.init, fd)
    assert k.lookup(guest.init, "/path1/target")
    k.dcache_prune()
    assert k.lookup(guest.init, "/path1/target") == 0
    assert k.lookup(guest.init, "/path1") == 0  # its only child went away


def test_mount_entries_are_logged(guest):
    assert guest.kernel.log[0].name == "mount"


def test_dentry_hash_is_deterministic():
    assert dentry_hash(0x4000, "etc", 64) == dentry_hash(0x4000, "etc", 64)
    assert 0 <= dentry_hash(0x4000, "etc", 64) < 64


FILES = {f"/data/f{i:02d}": b"x" for i in range(50)}
ops = st.lists(
    st.tuples(st.sampled_from(["open", "close", "prune", "kill"]), st.integers(0, 49), st.integers(0, 3)),
    max_size=60,
)


@settings(max_examples=40, deadline=None)
@given(ops, st.integers(0, 2**16))
def test_refcounts_match_recount_under_interleaving(script, seed):
    g = make_guest(FILES, pages=512, buckets=128)
    k = g.kernel
    procs = [k.spawn_process(f"p{i}", 0) for i in range(4)]
    sched = Scheduler(k, seed)
    for op, i, who in script:
        p = procs[who]
        if op == "open":
            sched.submit(k.start(p, "open", path=f"/data/f{i:02d}", mode=OpenMode.READ_ONLY))
        elif op == "close":
            fds = sorted(k.fd_table(p)) if p.alive else []
            sched.submit(k.start(p, "close", fd=fds[i % len(fds)] if fds else i % 4))
        elif op == "kill":
            sched.submit(k.start(g.init, "kill", pid=p.pid))
        else:
            sched.drain()
            k.dcache_prune()
        if i % 3 == 0:
            sched.tick()
    sched.drain()
    assert k.recount() == k.actual_refcounts()
    # log completeness: summed logged deltas reproduce every live refcount
    sums = _refsum(k)
    for d in k.all_dentries():
        s = k.raw_u(d, "dentry", "serial")
        assert sums.get(s, 0) == k.refcount(d)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 49)), max_size=100))
def test_prune_frees_exactly_the_unreferenced_closure(script):
    g = make_guest(FILES, pages=512, buckets=128)
    k = g.kernel
    p = k.spawn_process("p", 0)
    for is_open, i in script:
        if is_open:
            k.syscall_open(p, f"/data/f{i:02d}")
        else:
            fds = sorted(k.fd_table(p))
            if fds:
                k.syscall_close(p, fds[i % len(fds)])
    # reference: repeatedly drop refcount-0 dentries, unpinning their parents
    snap = {}
    for d in k.all_dentries():
        snap[d] = [k.refcount(d), k.raw_u(d, "dentry", "parent")]
    expected_freed = set()
    changed = True
    while changed:
        changed = False
        for d, (rc, parent) in snap.items():
            if d not in expected_freed and rc == 0:
                expected_freed.add(d)
                if parent in snap:
                    snap[parent][0] -= 1
                changed = True
    before = set(k.all_dentries())
    k.dcache_prune()
    assert before - set(k.all_dentries()) == expected_freed
