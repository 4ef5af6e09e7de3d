import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmimon.fs import FsError, Mount, Storage, components, normpath, parent_path

NAMES = ["/a", "/b", "/d/c", "/d/e"]


def _merged(layers_bottom_up):
    """Reference union view: apply layers bottom → top onto a dict."""
    view = {}
    for lid, files, whiteouts in layers_bottom_up:
        for p in whiteouts:
            view.pop(p, None)
        for p, content in files.items():
            view[p] = (lid, content)
    return view


def test_normpath_and_components():
    assert normpath("/a//b/../c/") == "/a/c"
    assert normpath("/") == "/"
    assert components("/path1/target") == ["path1", "target"]
    assert parent_path("/path1/target") == "/path1"
    assert parent_path("/x") == "/"
    with pytest.raises(ValueError):
        normpath("relative")


def test_upper_copy_wins_after_copy_up():
    st_ = Storage()
    low = st_.layer("low")
    up = st_.layer("up", writable=True)
    low.add_file("/etc/passwd", b"lower")
    m = Mount.overlay([low], up, "c")
    assert m.resolve("/etc/passwd")[0] is low
    node = m.copy_up("/etc/passwd")
    node.content[:] = b"upper"
    layer, got = m.resolve("/etc/passwd")
    assert layer is up and bytes(got.content) == b"upper"
    assert bytes(low.entries["/etc/passwd"].content) == b"lower"


def test_unlink_of_lower_file_leaves_a_whiteout():
    st_ = Storage()
    low, up = st_.layer("low"), st_.layer("up", writable=True)
    low.add_file("/f", b"x")
    m = Mount.overlay([low], up, "c")
    m.unlink("/f")
    assert m.resolve("/f") is None
    assert "/f" in low.entries


def test_list_dir_merges_layers_and_hides_whiteouts():
    st_ = Storage()
    low, up = st_.layer("low"), st_.layer("up", writable=True)
    low.add_file("/d/a")
    low.add_file("/d/b")
    up.add_file("/d/c")
    m = Mount.overlay([low], up, "c")
    m.unlink("/d/b")
    assert m.list_dir("/d") == ["a", "c"]
    with pytest.raises(FsError):
        m.list_dir("/d/a")
    with pytest.raises(FsError):
        m.list_dir("/missing")


def test_hard_link_shares_the_node():
    st_ = Storage()
    up = st_.layer("up", writable=True)
    node = up.add_file("/x", b"1")
    up.add_link("/y", node)
    assert up.entries["/y"] is node and node.nlink == 2


layer_content = st.dictionaries(st.sampled_from(NAMES), st.binary(max_size=3), max_size=4)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(layer_content, min_size=1, max_size=4),
    layer_content,
    st.lists(st.tuples(st.sampled_from(["unlink", "copy_up", "create"]), st.sampled_from(NAMES)), max_size=8),
)
def test_resolution_agrees_with_reference_union(lowers, upper_files, ops):
    st_ = Storage()
    layers = []
    for i, files in enumerate(lowers):
        layer = st_.layer(f"l{i}")
        for p, c in files.items():
            layer.add_file(p, c)
        layers.append(layer)
    up = st_.layer("up", writable=True)
    for p, c in upper_files.items():
        up.add_file(p, c)
    m = Mount.overlay(layers, up, "c")
    model_layers = [(f"l{i}", dict(f), set()) for i, f in enumerate(lowers)]
    upper = ("up", dict(upper_files), set())
    snapshot = [{p: bytes(n.content) for p, n in layer.entries.items() if not n.is_dir} for layer in layers]
    for op, path in ops:
        view = _merged(model_layers + [upper])
        if op == "unlink":
            if path not in view:
                with pytest.raises(FsError):
                    m.unlink(path)
                continue
            m.unlink(path)
            upper[1].pop(path, None)
            if any(path in f for _, f, _ in model_layers):
                upper[2].add(path)
        elif op == "copy_up":
            if path not in view:
                with pytest.raises(FsError):
                    m.copy_up(path)
                continue
            m.copy_up(path)
            upper[1][path] = view[path][1]
        else:
            m.create(path, 0o644, 0)
            upper[1][path] = b""
            upper[2].discard(path)
    view = _merged(model_layers + [upper])
    for path in NAMES:
        hit = m.resolve(path)
        if path in view:
            assert hit is not None
            assert hit[0].layer_id == view[path][0]
            assert bytes(hit[1].content) == view[path][1]
        else:
            assert hit is None
    assert sorted(m.walk_files()) == sorted(view)
    # overlay soundness: lower layers never change
    for layer, before in zip(layers, snapshot):
        assert {p: bytes(n.content) for p, n in layer.entries.items() if not n.is_dir} == before
