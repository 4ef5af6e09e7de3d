"""Simulated guest physical memory, slab-style object placement and layout profiles.

Guest memory is one flat ``bytearray`` split into fixed-size pages.  Kernel
objects (dentries, inodes, tasks, ...) are carved out of it by
:class:`SlabAllocator`, which supports two placement policies:

``Placement.DEFAULT``
    first-fit over partially filled ``SlabDefault`` pages.  Unrelated objects
    end up sharing pages, which is what makes page-granular watchpoints noisy.

``Placement.ISOLATED``
    bump allocation inside a contiguous reserved region.  Objects are packed
    back to back (they may straddle page boundaries) and never share a page
    with a default-placed object.

Field offsets never appear as literals outside this module: every consumer
goes through :meth:`LayoutProfile.field_addr`.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

PAGE_SIZE = 4096
DENTRY_SIZE = 192


class MemoryFault(Exception):
    """Hard fault of the simulation (bad address, double free, ...)."""


class OutOfMemory(MemoryFault):
    """No page (or isolated-region space) left for an allocation."""


class LayoutError(KeyError):
    """Unknown structure or field in a layout profile."""


class PageKind(Enum):
    KERNEL_CODE = "KernelCode"
    AGENT_CODE = "AgentCode"
    SLAB_DEFAULT = "SlabDefault"
    SLAB_ISOLATED = "SlabIsolated"
    DATA = "Data"
    FREE = "Free"


class Placement(Enum):
    DEFAULT = "Default"
    ISOLATED = "Isolated"


@dataclass(frozen=True)
class FieldSpec:
    offset: int
    width: int


@dataclass
class StructLayout:
    size: int
    fields: dict[str, FieldSpec]

    def validate(self, name: str) -> None:
        for fname, spec in self.fields.items():
            if spec.offset < 0 or spec.width <= 0 or spec.offset + spec.width > self.size:
                raise ValueError(f"{name}.{fname} does not fit in {self.size} bytes")
        spans = sorted((s.offset, s.offset + s.width, f) for f, s in self.fields.items())
        for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
            if start < end:
                raise ValueError(f"{name}.{a} overlaps {name}.{b}")


# Short names are stored inline (d_iname style); the 192 bytes include them.
_DEFAULT_LAYOUT: dict[str, dict[str, Any]] = {
    "dentry": {
        "size": DENTRY_SIZE,
        "fields": {
            "refcount": [0, 4],
            "serial": [4, 4],
            "parent": [8, 8],
            "inode": [16, 8],
            "hash_next": [24, 8],
            "alias_next": [32, 8],
            "alias_prev": [40, 8],
            "flags": [48, 4],
            "name_len": [52, 4],
            "name": [56, 64],
        },
    },
    "inode": {
        "size": 128,
        "fields": {
            "ino": [0, 8],
            "link_count": [8, 4],
            "mode": [12, 4],
            "uid": [16, 4],
            "owner_layer": [20, 4],
            "mtime": [24, 8],
            "atime": [32, 8],
            "data": [40, 8],
            "alias": [48, 8],
        },
    },
    "process": {
        "size": 256,
        "fields": {
            "pid": [0, 4],
            "uid": [4, 4],
            "address_space_id": [8, 8],
            "pid_namespace_id": [16, 8],
            "mnt_namespace_id": [24, 8],
            "uts_namespace_id": [32, 8],
            "ipc_namespace_id": [40, 8],
            "net_namespace_id": [48, 8],
            "user_namespace_id": [56, 8],
            "tasks_next": [64, 8],
            "tasks_prev": [72, 8],
            "fd_table": [80, 8],
            "flags": [88, 4],
            "name": [96, 16],
        },
    },
    "files": {"size": 4096, "fields": {"fd_array": [0, 4096]}},
    "file": {
        "size": 64,
        "fields": {"dentry": [0, 8], "mode": [8, 4], "flags": [12, 4], "pos": [16, 8]},
    },
}


class LayoutProfile:
    """Structure layouts: per structure, total size and field → (offset, width)."""

    def __init__(self, structs: Mapping[str, StructLayout]):
        self.structs = dict(structs)
        for name, layout in self.structs.items():
            layout.validate(name)
        if "dentry" in self.structs and self.structs["dentry"].size != DENTRY_SIZE:
            raise ValueError(f"dentry size must be {DENTRY_SIZE} bytes")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "LayoutProfile":
        structs = {}
        for name, body in doc.items():
            fields = {}
            for fname, spec in body["fields"].items():
                if isinstance(spec, Mapping):
                    fields[fname] = FieldSpec(int(spec["offset"]), int(spec["width"]))
                else:
                    off, width = spec
                    fields[fname] = FieldSpec(int(off), int(width))
            structs[name] = StructLayout(int(body["size"]), fields)
        return cls(structs)

    @classmethod
    def default(cls) -> "LayoutProfile":
        return cls.from_mapping(_DEFAULT_LAYOUT)

    @classmethod
    def load(cls, path: str | Path) -> "LayoutProfile":
        with open(path) as fh:
            return cls.from_mapping(yaml.safe_load(fh))

    def to_mapping(self) -> dict[str, Any]:
        return {
            name: {
                "size": s.size,
                "fields": {f: [v.offset, v.width] for f, v in s.fields.items()},
            }
            for name, s in self.structs.items()
        }

    def size(self, kind: str) -> int:
        try:
            return self.structs[kind].size
        except KeyError:
            raise LayoutError(f"unknown structure {kind!r}") from None

    def field(self, kind: str, name: str) -> FieldSpec:
        try:
            return self.structs[kind].fields[name]
        except KeyError:
            raise LayoutError(f"unknown field {kind}.{name}") from None

    def offset(self, kind: str, name: str) -> int:
        return self.field(kind, name).offset

    def width(self, kind: str, name: str) -> int:
        return self.field(kind, name).width

    def field_addr(self, obj: int, kind: str, name: str) -> int:
        return obj + self.field(kind, name).offset


@dataclass
class Page:
    index: int
    bytes: memoryview
    kind: PageKind


class GuestMemory:
    def __init__(self, n_pages: int = 8192, page_size: int = PAGE_SIZE):
        if page_size <= 0 or page_size & (page_size - 1):
            raise ValueError("page_size must be a power of two")
        self.page_size = page_size
        self.n_pages = n_pages
        self.data = bytearray(n_pages * page_size)
        self.kinds = [PageKind.FREE] * n_pages
        # Page 0 stays unused so that address 0 can serve as the null pointer.
        self._reserved: set[int] = {0}
        self.next_free = 1

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def pages(self) -> list[Page]:
        return [self.page(i) for i in range(self.n_pages)]

    def page(self, index: int) -> Page:
        ps = self.page_size
        view = memoryview(self.data)[index * ps : (index + 1) * ps]
        return Page(index, view, self.kinds[index])

    def page_of(self, addr: int) -> int:
        return addr // self.page_size

    def check(self, addr: int, n: int) -> None:
        if addr < 0 or n < 0 or addr + n > len(self.data):
            raise MemoryFault(f"access [{addr:#x}, +{n}) outside guest memory")

    def read(self, addr: int, n: int) -> bytes:
        self.check(addr, n)
        return bytes(self.data[addr : addr + n])

    def write(self, addr: int, data: bytes) -> None:
        self.check(addr, len(data))
        self.data[addr : addr + len(data)] = data

    def set_kind(self, index: int, kind: PageKind) -> None:
        cur = self.kinds[index]
        if cur is not PageKind.FREE and cur is not kind:
            raise MemoryFault(f"page {index} is {cur.value}, cannot become {kind.value}")
        self.kinds[index] = kind

    def claim_page(self, kind: PageKind) -> int:
        """Take the lowest free, unreserved page and tag it ``kind``."""
        i = self.next_free
        while i < self.n_pages and (self.kinds[i] is not PageKind.FREE or i in self._reserved):
            i += 1
        if i >= self.n_pages:
            raise OutOfMemory("guest memory exhausted")
        self.kinds[i] = kind
        self.next_free = i + 1
        return i

    def reserve_range(self, count: int) -> int:
        """Reserve ``count`` contiguous free pages; returns the first index."""
        start = self.next_free
        while True:
            if start + count > self.n_pages:
                raise OutOfMemory(f"no {count} contiguous free pages")
            window = range(start, start + count)
            busy = [i for i in window if self.kinds[i] is not PageKind.FREE or i in self._reserved]
            if not busy:
                self._reserved.update(window)
                return start
            start = busy[-1] + 1


@dataclass
class _DefaultPage:
    index: int
    spans: list[tuple[int, int]] = field(default_factory=list)  # sorted (start, end) offsets
    used: int = 0


@dataclass(frozen=True)
class Allocation:
    addr: int
    kind: str
    size: int
    placement: Placement


class SlabAllocator:
    """Kernel-object allocator with default (co-locating) and isolated placement.

    Isolated slots are never reused: the region is a bump allocator and is never
    compacted.  Default slots are reusable after :meth:`free`.
    """

    def __init__(self, memory: GuestMemory, profile: LayoutProfile, isolated_pages: int = 64):
        self.memory = memory
        self.profile = profile
        self.iso_first = memory.reserve_range(isolated_pages) if isolated_pages else 0
        self.iso_pages = isolated_pages
        self.iso_cursor = self.iso_first * memory.page_size
        self.iso_end = (self.iso_first + isolated_pages) * memory.page_size
        self._pages: dict[int, _DefaultPage] = {}
        self._partial: list[int] = []  # sorted page indices with any free room
        self.live: dict[int, Allocation] = {}
        self.freed_isolated: set[int] = set()

    # -- allocation -------------------------------------------------------
    def alloc_object(self, kind: str, placement: Placement = Placement.DEFAULT) -> int:
        size = self.profile.size(kind)
        if placement is Placement.ISOLATED:
            addr = self._alloc_isolated(size)
        else:
            addr = self._alloc_default(size)
        self.memory.data[addr : addr + size] = bytes(size)
        self.live[addr] = Allocation(addr, kind, size, placement)
        return addr

    alloc = alloc_object

    def _alloc_isolated(self, size: int) -> int:
        if self.iso_cursor + size > self.iso_end:
            raise OutOfMemory("isolated region exhausted")
        addr = self.iso_cursor
        self.iso_cursor += size
        ps = self.memory.page_size
        for p in range(addr // ps, (addr + size - 1) // ps + 1):
            if self.memory.kinds[p] is PageKind.FREE:
                self.memory.set_kind(p, PageKind.SLAB_ISOLATED)
        return addr

    def _alloc_default(self, size: int) -> int:
        ps = self.memory.page_size
        if size > ps:
            raise MemoryFault(f"object of {size} bytes exceeds a page")
        for index in self._partial:
            page = self._pages[index]
            if ps - page.used < size:
                continue
            off = self._first_gap(page, size)
            if off is not None:
                return self._place(page, off, size)
        index = self.memory.claim_page(PageKind.SLAB_DEFAULT)
        page = _DefaultPage(index)
        self._pages[index] = page
        bisect.insort(self._partial, index)
        return self._place(page, 0, size)

    def _first_gap(self, page: _DefaultPage, size: int) -> int | None:
        prev = 0
        for start, end in page.spans:
            if start - prev >= size:
                return prev
            prev = end
        if self.memory.page_size - prev >= size:
            return prev
        return None

    def _place(self, page: _DefaultPage, off: int, size: int) -> int:
        bisect.insort(page.spans, (off, off + size))
        page.used += size
        if self.memory.page_size - page.used < 64:
            self._drop_partial(page.index)
        return page.index * self.memory.page_size + off

    def _drop_partial(self, index: int) -> None:
        i = bisect.bisect_left(self._partial, index)
        if i < len(self._partial) and self._partial[i] == index:
            del self._partial[i]

    # -- release ----------------------------------------------------------
    def free_object(self, addr: int) -> None:
        alloc = self.live.pop(addr, None)
        if alloc is None:
            raise MemoryFault(f"free of unallocated address {addr:#x}")
        if alloc.placement is Placement.ISOLATED:
            self.freed_isolated.add(addr)
            return
        ps = self.memory.page_size
        page = self._pages[addr // ps]
        off = addr % ps
        page.spans.remove((off, off + alloc.size))
        page.used -= alloc.size
        if page.index not in self._partial:
            bisect.insort(self._partial, page.index)

    free = free_object

    # -- queries ----------------------------------------------------------
    def lookup(self, addr: int) -> Allocation:
        try:
            return self.live[addr]
        except KeyError:
            raise MemoryFault(f"no live object at {addr:#x}") from None

    def pages_of(self, addr: int) -> range:
        alloc = self.lookup(addr)
        ps = self.memory.page_size
        return range(addr // ps, (addr + alloc.size - 1) // ps + 1)

    def page_occupants(self) -> dict[int, set[Placement]]:
        """Page index → set of placements of live objects touching that page."""
        out: dict[int, set[Placement]] = {}
        for alloc in self.live.values():
            for p in self.pages_of(alloc.addr):
                out.setdefault(p, set()).add(alloc.placement)
        return out

    def default_page_count(self) -> int:
        return len(self._pages)

    def isolated_pages_used(self) -> int:
        used = self.iso_cursor - self.iso_first * self.memory.page_size
        return -(-used // self.memory.page_size)

    def in_isolated_region(self, addr: int) -> bool:
        return self.iso_first * self.memory.page_size <= addr < self.iso_end


def field_addr(profile: LayoutProfile, obj: int, kind: str, name: str) -> int:
    return profile.field_addr(obj, kind, name)
