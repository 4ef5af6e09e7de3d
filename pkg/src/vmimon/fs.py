"""On-disk side of the guest: image layers and overlay (union) mounts.

Layers hold path → :class:`FileNode` maps.  Several paths inside one layer may
name the same node (hard links).  A :class:`Mount` stacks layers; resolution
walks them top-down, a whiteout in a higher layer hides lower entries, and
writes always land in the mount's writable layer (copy-up first when the file
lives lower).
"""

from __future__ import annotations

import itertools
import posixpath
from dataclasses import dataclass, field
from typing import Iterator, Optional


class FsError(Exception):
    def __init__(self, errno: int, msg: str = ""):
        super().__init__(msg or str(errno))
        self.errno = errno


def normpath(path: str) -> str:
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    out = posixpath.normpath(path)
    return "/" if out == "//" else out


def components(path: str) -> list[str]:
    return [c for c in normpath(path).split("/") if c]


def parent_path(path: str) -> str:
    return posixpath.dirname(normpath(path)) or "/"


@dataclass(eq=False)
class FileNode:
    nid: int
    is_dir: bool
    mode: int = 0o644
    uid: int = 0
    content: bytearray = field(default_factory=bytearray)
    nlink: int = 1
    size: int = 0


class Storage:
    """Registry of every layer and node: the VM's disk as seen from outside."""

    def __init__(self) -> None:
        self.layers: dict[str, Layer] = {}
        self.nodes: dict[int, FileNode] = {}
        self._nid = itertools.count(1)

    def new_node(self, is_dir: bool, mode: int, uid: int, content: bytes = b"") -> FileNode:
        node = FileNode(next(self._nid), is_dir, mode, uid, bytearray(content), size=len(content))
        self.nodes[node.nid] = node
        return node

    def layer(self, layer_id: str, writable: bool = False) -> "Layer":
        if layer_id not in self.layers:
            self.layers[layer_id] = Layer(self, layer_id, len(self.layers) + 1, writable)
        return self.layers[layer_id]

    def layer_by_index(self, index: int) -> "Layer":
        for layer in self.layers.values():
            if layer.index == index:
                return layer
        raise KeyError(index)


class Layer:
    def __init__(self, storage: Storage, layer_id: str, index: int, writable: bool = False):
        self.storage = storage
        self.layer_id = layer_id
        self.index = index
        self.writable = writable
        self.entries: dict[str, FileNode] = {"/": storage.new_node(True, 0o755, 0)}
        self.whiteouts: set[str] = set()

    def __repr__(self) -> str:
        return f"Layer({self.layer_id!r})"

    def mkdirs(self, path: str, mode: int = 0o755, uid: int = 0) -> FileNode:
        path = normpath(path)
        if path in self.entries:
            return self.entries[path]
        self.mkdirs(parent_path(path))
        node = self.storage.new_node(True, mode, uid)
        self.entries[path] = node
        self.whiteouts.discard(path)
        return node

    def add_file(self, path: str, content: bytes = b"", mode: int = 0o644, uid: int = 0) -> FileNode:
        path = normpath(path)
        self.mkdirs(parent_path(path))
        node = self.storage.new_node(False, mode, uid, content)
        self.entries[path] = node
        self.whiteouts.discard(path)
        return node

    def add_link(self, path: str, node: FileNode) -> None:
        self.entries[normpath(path)] = node
        node.nlink += 1

    def remove(self, path: str) -> FileNode:
        node = self.entries.pop(normpath(path))
        node.nlink -= 1
        return node


class Mount:
    """A (possibly union) mount: ``layers`` ordered top → bottom, ``upper`` writable."""

    def __init__(self, layers: list[Layer], upper: Layer, container_id: Optional[str] = None):
        self.layers = layers
        self.upper = upper
        self.container_id = container_id

    @classmethod
    def overlay(cls, lower: list[Layer], upper: Layer, container_id: str) -> "Mount":
        """``lower`` is given bottom → top, the way image layers are listed."""
        return cls([upper, *reversed(lower)], upper, container_id)

    @property
    def lower_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer is not self.upper]

    def resolve(self, path: str) -> Optional[tuple[Layer, FileNode]]:
        path = normpath(path)
        for layer in self.layers:
            if path in layer.whiteouts:
                return None
            node = layer.entries.get(path)
            if node is not None:
                return layer, node
        return None

    def list_dir(self, path: str) -> list[str]:
        path = normpath(path)
        hit = self.resolve(path)
        if hit is None:
            raise FsError(2, path)
        if not hit[1].is_dir:
            raise FsError(20, path)
        names: set[str] = set()
        prefix = path.rstrip("/") + "/"
        for layer in self.layers:
            for p in layer.entries:
                if p != "/" and p.startswith(prefix) and "/" not in p[len(prefix) :]:
                    names.add(p[len(prefix) :])
        return sorted(n for n in names if self.resolve(prefix + n) is not None)

    def copy_up(self, path: str) -> FileNode:
        """Copy a lower-layer file into the writable layer and return the new node."""
        path = normpath(path)
        hit = self.resolve(path)
        if hit is None:
            raise FsError(2, path)
        layer, node = hit
        if layer is self.upper:
            return node
        self.upper.mkdirs(parent_path(path))
        return self.upper.add_file(path, bytes(node.content), node.mode, node.uid)

    def create(self, path: str, mode: int, uid: int) -> FileNode:
        return self.upper.add_file(path, b"", mode, uid)

    def unlink(self, path: str) -> FileNode:
        path = normpath(path)
        hit = self.resolve(path)
        if hit is None:
            raise FsError(2, path)
        layer, node = hit
        if layer is self.upper:
            self.upper.remove(path)
        if any(path in lower.entries for lower in self.lower_layers):
            self.upper.whiteouts.add(path)
        return node

    def walk_files(self) -> Iterator[str]:
        seen: set[str] = set()
        for layer in self.layers:
            for p, node in layer.entries.items():
                if p not in seen and not node.is_dir:
                    seen.add(p)
                    if self.resolve(p) is not None:
                        yield p
