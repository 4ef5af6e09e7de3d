"""Scenario documents: one YAML file describes a whole guest and what to run on it.

Loading is two-step: :func:`Scenario.from_mapping` parses and
:meth:`Scenario.validate` performs referential checks; both collect every
problem with a dotted position (``containers[1].layers[0]``) rather than
stopping at the first.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .fs import normpath
from .hypervisor import CostModel
from .policy import OPS, Policy, PolicyError, dump_policies, load_policies, parse_scope

WORKLOAD_KINDS = ("fileio", "startup", "memcopy")
MEMCOPY_MODES = ("MEMCPY", "DUMP", "MCBLOCK")
TRACE_OPS = (
    "open",
    "close",
    "read",
    "write",
    "link",
    "unlink",
    "kill",
    "getdents",
    "prune",
    "kernel_write",
)


class ScenarioError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{pos}: {msg}" for pos, msg in problems))


@dataclass
class MemorySpec:
    pages: int = 8192
    page_size: int = 4096
    isolated_pages: int = 64
    hash_buckets: int = 1024


@dataclass
class FileSpec:
    path: str
    content: bytes = b""
    mode: int = 0o644
    uid: int = 0


@dataclass
class FileSetSpec:
    name: str
    layer: str
    dir: str
    prefix: str
    count: int
    size: int = 0
    mode: int = 0o644
    uid: int = 0

    def paths(self) -> list[str]:
        width = max(3, len(str(self.count - 1)))
        return [f"{self.dir.rstrip('/')}/{self.prefix}{i:0{width}d}" for i in range(self.count)]


@dataclass
class LayerSpec:
    id: str
    files: list[FileSpec] = field(default_factory=list)
    dirs: list[str] = field(default_factory=list)


@dataclass
class ProcessSpec:
    name: str
    uid: int = 0


@dataclass
class ContainerSpec:
    id: str
    layers: list[str]
    upper: str
    processes: list[ProcessSpec] = field(default_factory=list)
    hidden_agent: bool = True


@dataclass
class GeneratedPolicySpec:
    fileset: str
    scope: str
    allow: list[dict]
    protect_read: bool = False
    count: Optional[int] = None


@dataclass
class WarmupSpec:
    process: str
    sample: dict[str, int]


@dataclass
class WorkloadSpec:
    name: str
    kind: str
    process: str = ""
    fileset: str = ""
    total_bytes: int = 64 * 1024 * 1024
    block_size: int = 64 * 1024
    phases: list[str] = field(default_factory=lambda: ["write", "read"])
    files: list[int] = field(default_factory=lambda: [100, 200, 300, 400, 500])
    mode: str = "MEMCPY"
    bytes: int = 16 * 1024 * 1024


@dataclass
class Scenario:
    seed: int
    name: str = "scenario"
    memory: MemorySpec = field(default_factory=MemorySpec)
    profile_path: Optional[str] = None
    cost_model: dict[str, float] = field(default_factory=dict)
    host_layer: str = "host"
    layers: list[LayerSpec] = field(default_factory=list)
    filesets: dict[str, FileSetSpec] = field(default_factory=dict)
    host_processes: list[ProcessSpec] = field(default_factory=list)
    containers: list[ContainerSpec] = field(default_factory=list)
    policy_docs: list[dict] = field(default_factory=list)
    generated_policies: list[GeneratedPolicySpec] = field(default_factory=list)
    warmup: Optional[WarmupSpec] = None
    trace: list[dict] = field(default_factory=list)
    workloads: dict[str, WorkloadSpec] = field(default_factory=dict)
    attacks: dict[str, dict] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    # ------------------------------------------------------------------
    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except OSError as e:
            raise ScenarioError([(str(path), f"cannot read: {e.strerror}")]) from None
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            pos = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
            raise ScenarioError([(pos, f"not valid YAML: {getattr(e, 'problem', e)}")]) from None
        scn = cls.from_mapping(doc, path.parent)
        if scn.name == "scenario":
            scn.name = path.stem
        return scn

    @classmethod
    def from_mapping(cls, doc: Any, base_dir: Path | str = ".") -> "Scenario":
        p = _Parser()
        scn = p.scenario(doc, Path(base_dir))
        if p.problems:
            raise ScenarioError(p.problems)
        problems = scn.check()
        if problems:
            raise ScenarioError(problems)
        return scn

    # ------------------------------------------------------------------
    def layer(self, layer_id: str) -> Optional[LayerSpec]:
        return next((layer for layer in self.layers if layer.id == layer_id), None)

    def container(self, cid: str) -> Optional[ContainerSpec]:
        return next((c for c in self.containers if c.id == cid), None)

    def process_refs(self) -> set[str]:
        refs = {"host/init"}
        refs.update(f"host/{p.name}" for p in self.host_processes)
        for c in self.containers:
            refs.update(f"{c.id}/{p.name}" for p in c.processes)
        return refs

    def layer_paths(self, layer_id: str) -> set[str]:
        out = set()
        layer = self.layer(layer_id)
        if layer:
            out.update(f.path for f in layer.files)
        for fs in self.filesets.values():
            if fs.layer == layer_id:
                out.update(fs.paths())
        return out

    def visible_paths(self, scope: str) -> set[str]:
        if scope == "Host":
            return self.layer_paths(self.host_layer)
        c = self.container(scope)
        if c is None:
            return set()
        out = set()
        for lid in [*c.layers, c.upper]:
            out |= self.layer_paths(lid)
        return out

    def policies(self) -> list[Policy]:
        """Explicit policies followed by generated ones, validated as one document."""
        docs = list(self.policy_docs)
        for g in self.generated_policies:
            fs = self.filesets[g.fileset]
            paths = fs.paths()[: g.count] if g.count is not None else fs.paths()
            for path in paths:
                entry = {"scope": "host" if g.scope == "Host" else f"container:{g.scope}", "path": path, "allow": g.allow}
                if g.protect_read:
                    entry["protect_read"] = True
                docs.append(entry)
        return load_policies({"policies": docs})

    def policy_document(self) -> str:
        return dump_policies(self.policies())

    def cost(self) -> CostModel:
        return CostModel.from_mapping(self.cost_model)

    def warmup_paths(self, seed: Optional[int] = None) -> list[str]:
        if self.warmup is None:
            return []
        rng = random.Random(self.seed if seed is None else seed)
        paths: list[str] = []
        for name in sorted(self.warmup.sample):
            pool = self.filesets[name].paths()
            paths += rng.sample(pool, min(self.warmup.sample[name], len(pool)))
        rng.shuffle(paths)
        return paths

    # ------------------------------------------------------------------
    def check(self) -> list[tuple[str, str]]:
        """Referential checks: every named layer, container, process and path exists."""
        problems: list[tuple[str, str]] = []
        layer_ids = [layer.id for layer in self.layers]
        for i, lid in enumerate(layer_ids):
            if lid in layer_ids[:i]:
                problems.append((f"layers[{i}].id", f"duplicate layer {lid!r}"))
        if self.host_layer not in layer_ids:
            problems.append(("host_layer", f"undefined layer {self.host_layer!r}"))
        used_by: dict[str, str] = {}
        cids = [c.id for c in self.containers]
        for i, c in enumerate(self.containers):
            pos = f"containers[{i}]"
            if c.id in cids[:i]:
                problems.append((f"{pos}.id", f"duplicate container {c.id!r}"))
            if c.id in ("host", "Host"):
                problems.append((f"{pos}.id", "'host' is reserved"))
            for j, lid in enumerate(c.layers):
                if lid not in layer_ids:
                    problems.append((f"{pos}.layers[{j}]", f"undefined layer {lid!r}"))
                if lid == self.host_layer:
                    problems.append((f"{pos}.layers[{j}]", "the host layer cannot be an image layer"))
            if c.upper in layer_ids:
                owner = used_by.get(c.upper)
                if c.upper == self.host_layer or c.upper in c.layers or owner is not None:
                    problems.append((f"{pos}.upper", f"layer {c.upper!r} is already in use"))
            used_by[c.upper] = c.id
            names = [p.name for p in c.processes]
            for j, n in enumerate(names):
                if n in names[:j]:
                    problems.append((f"{pos}.processes[{j}].name", f"duplicate process {n!r}"))
        for i, p in enumerate(self.host_processes):
            if p.name in [q.name for q in self.host_processes[:i]] or p.name == "init":
                problems.append((f"host_processes[{i}].name", f"duplicate process {p.name!r}"))
        for name, fs in self.filesets.items():
            if fs.layer not in layer_ids and fs.layer not in used_by:
                problems.append((f"filesets.{name}.layer", f"undefined layer {fs.layer!r}"))
        for i, g in enumerate(self.generated_policies):
            pos = f"generated_policies[{i}]"
            if g.fileset not in self.filesets:
                problems.append((f"{pos}.fileset", f"undefined fileset {g.fileset!r}"))
            if g.scope != "Host" and g.scope not in cids:
                problems.append((f"{pos}.scope", f"undefined container {g.scope!r}"))
        for i, doc in enumerate(self.policy_docs):
            scope = doc.get("scope") if isinstance(doc, dict) else None
            try:
                cid = parse_scope(scope)
            except ValueError:
                continue
            if cid != "Host" and cid not in cids:
                problems.append((f"policies[{i}].scope", f"undefined container {cid!r}"))
            elif isinstance(doc.get("path"), str):
                try:
                    path = normpath(doc["path"])
                except ValueError:
                    continue
                if path not in self.visible_paths(cid):
                    problems.append((f"policies[{i}].path", f"{path} does not exist in scope {scope}"))
        if not problems:
            try:
                self.policies()
            except PolicyError as e:
                problems.extend(e.problems)
        refs = self.process_refs()
        if self.warmup is not None:
            if self.warmup.process not in refs:
                problems.append(("warmup.process", f"undefined process {self.warmup.process!r}"))
            for name in self.warmup.sample:
                if name not in self.filesets:
                    problems.append((f"warmup.sample.{name}", f"undefined fileset {name!r}"))
        for i, step in enumerate(self.trace):
            proc = step.get("proc")
            if proc is not None and proc not in refs:
                problems.append((f"trace[{i}].proc", f"undefined process {proc!r}"))
            target = step.get("target")
            if step.get("op") == "kill" and isinstance(target, str) and target not in refs and target != "secagent" and not target.startswith("agent:"):
                problems.append((f"trace[{i}].target", f"undefined process {target!r}"))
        for name, w in self.workloads.items():
            pos = f"workloads.{name}"
            if w.kind == "fileio":
                if w.process not in refs:
                    problems.append((f"{pos}.process", f"undefined process {w.process!r}"))
                if w.fileset not in self.filesets:
                    problems.append((f"{pos}.fileset", f"undefined fileset {w.fileset!r}"))
                if w.block_size <= 0 or w.total_bytes % w.block_size:
                    problems.append((f"{pos}.total_bytes", "total bytes must be a multiple of block_size"))
            if w.kind == "memcopy" and w.process and w.process not in refs:
                problems.append((f"{pos}.process", f"undefined process {w.process!r}"))
        for name, params in self.attacks.items():
            for key in ("attacker", "reader", "host_attacker"):
                ref = params.get(key)
                if ref is not None and ref not in refs:
                    problems.append((f"attacks.{name}.{key}", f"undefined process {ref!r}"))
        return problems


# ----------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------
class _Parser:
    def __init__(self) -> None:
        self.problems: list[tuple[str, str]] = []

    def err(self, pos: str, msg: str) -> None:
        self.problems.append((pos, msg))

    def mapping(self, doc: Any, pos: str, allowed: set[str]) -> dict:
        if doc is None:
            return {}
        if not isinstance(doc, dict):
            self.err(pos, "must be a mapping")
            return {}
        for k in doc:
            if k not in allowed:
                self.err(f"{pos}.{k}" if pos else str(k), "unknown key")
        return doc

    def seq(self, doc: Any, pos: str) -> list:
        if doc is None:
            return []
        if not isinstance(doc, list):
            self.err(pos, "must be a list")
            return []
        return doc

    def integer(self, doc: dict, key: str, pos: str, default: Optional[int] = None, minimum: int = 0) -> Any:
        v = doc.get(key, default)
        if v is None:
            if default is None:
                self.err(f"{pos}.{key}" if pos else key, "is required")
            return default
        if isinstance(v, bool) or not isinstance(v, int):
            self.err(f"{pos}.{key}" if pos else key, "must be an integer")
            return default
        if v < minimum:
            self.err(f"{pos}.{key}" if pos else key, f"must be >= {minimum}")
        return v

    def string(self, doc: dict, key: str, pos: str, default: Optional[str] = None) -> Any:
        v = doc.get(key, default)
        if not isinstance(v, str) or not v:
            self.err(f"{pos}.{key}", "must be a non-empty string" if v is not None else "is required")
            return default or ""
        return v

    def path(self, v: Any, pos: str) -> str:
        try:
            return normpath(v) if isinstance(v, str) else self._bad(pos)
        except ValueError:
            return self._bad(pos)

    def _bad(self, pos: str) -> str:
        self.err(pos, "must be an absolute path")
        return "/"

    def mode(self, v: Any, pos: str, default: int) -> int:
        if v is None:
            return default
        if isinstance(v, str):
            try:
                return int(v, 8)
            except ValueError:
                pass
        elif isinstance(v, int) and not isinstance(v, bool):
            return v
        self.err(pos, "must be an octal string or integer")
        return default

    # -- sections ---------------------------------------------------------
    def scenario(self, doc: Any, base_dir: Path) -> Scenario:
        top = self.mapping(
            doc,
            "",
            {
                "seed", "name", "memory", "profile", "cost_model", "host_layer", "layers",
                "filesets", "host_processes", "containers", "policies", "generated_policies",
                "warmup", "trace", "workloads", "attacks",
            },
        )
        if doc is not None and not isinstance(doc, dict):
            return Scenario(seed=0)
        seed = top.get("seed")
        if seed is None:
            self.err("seed", "is required (runs must be reproducible)")
            seed = 0
        elif isinstance(seed, bool) or not isinstance(seed, int):
            self.err("seed", "must be an integer")
            seed = 0
        scn = Scenario(seed=seed, base_dir=base_dir)
        scn.name = str(top.get("name", "scenario"))
        scn.memory = self.memory(top.get("memory"))
        if top.get("profile") is not None:
            scn.profile_path = str(top["profile"])
        cm = self.mapping(top.get("cost_model"), "cost_model", set(CostModel.__dataclass_fields__))
        for k, v in cm.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                self.err(f"cost_model.{k}", "must be a non-negative number")
        scn.cost_model = {k: float(v) for k, v in cm.items() if isinstance(v, (int, float))}
        scn.host_layer = str(top.get("host_layer", "host"))
        scn.layers = [self.layer(d, f"layers[{i}]") for i, d in enumerate(self.seq(top.get("layers"), "layers"))]
        fsdoc = self.mapping(top.get("filesets"), "filesets", set(top.get("filesets") or {}))
        scn.filesets = {name: self.fileset(name, d) for name, d in fsdoc.items()}
        scn.host_processes = [
            self.process(d, f"host_processes[{i}]") for i, d in enumerate(self.seq(top.get("host_processes"), "host_processes"))
        ]
        scn.containers = [
            self.container(d, f"containers[{i}]") for i, d in enumerate(self.seq(top.get("containers"), "containers"))
        ]
        for i, d in enumerate(self.seq(top.get("policies"), "policies")):
            if not isinstance(d, dict):
                self.err(f"policies[{i}]", "must be a mapping")
            else:
                scn.policy_docs.append(d)
        for i, d in enumerate(self.seq(top.get("generated_policies"), "generated_policies")):
            scn.generated_policies.append(self.generated(d, f"generated_policies[{i}]"))
        if top.get("warmup") is not None:
            w = self.mapping(top["warmup"], "warmup", {"process", "sample"})
            sample = self.mapping(w.get("sample"), "warmup.sample", set(w.get("sample") or {}))
            for k, v in sample.items():
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    self.err(f"warmup.sample.{k}", "must be a non-negative integer")
            scn.warmup = WarmupSpec(self.string(w, "process", "warmup"), {k: int(v) for k, v in sample.items() if isinstance(v, int)})
        for i, step in enumerate(self.seq(top.get("trace"), "trace")):
            scn.trace.append(self.step(step, f"trace[{i}]"))
        wdoc = self.mapping(top.get("workloads"), "workloads", set(top.get("workloads") or {}))
        scn.workloads = {name: self.workload(name, d) for name, d in wdoc.items()}
        scn.attacks = self.attacks(top.get("attacks"))
        return scn

    def memory(self, doc: Any) -> MemorySpec:
        m = self.mapping(doc, "memory", {"pages", "page_size", "isolated_pages", "hash_buckets"})
        spec = MemorySpec(
            pages=self.integer(m, "pages", "memory", 8192, 16),
            page_size=self.integer(m, "page_size", "memory", 4096, 512),
            isolated_pages=self.integer(m, "isolated_pages", "memory", 64, 1),
            hash_buckets=self.integer(m, "hash_buckets", "memory", 1024, 1),
        )
        if spec.page_size & (spec.page_size - 1):
            self.err("memory.page_size", "must be a power of two")
        if spec.isolated_pages >= spec.pages:
            self.err("memory.isolated_pages", "must leave pages for everything else")
        return spec

    def layer(self, doc: Any, pos: str) -> LayerSpec:
        d = self.mapping(doc, pos, {"id", "files", "dirs"})
        spec = LayerSpec(self.string(d, "id", pos, "?"))
        for j, f in enumerate(self.seq(d.get("files"), f"{pos}.files")):
            fpos = f"{pos}.files[{j}]"
            if isinstance(f, str):
                spec.files.append(FileSpec(self.path(f, fpos)))
                continue
            fd = self.mapping(f, fpos, {"path", "content", "mode", "uid"})
            content = fd.get("content", "")
            if not isinstance(content, (str, bytes)):
                self.err(f"{fpos}.content", "must be a string")
                content = ""
            spec.files.append(
                FileSpec(
                    self.path(fd.get("path"), f"{fpos}.path"),
                    content.encode() if isinstance(content, str) else content,
                    self.mode(fd.get("mode"), f"{fpos}.mode", 0o644),
                    self.integer(fd, "uid", fpos, 0),
                )
            )
        spec.dirs = [self.path(p, f"{pos}.dirs[{j}]") for j, p in enumerate(self.seq(d.get("dirs"), f"{pos}.dirs"))]
        return spec

    def fileset(self, name: str, doc: Any) -> FileSetSpec:
        pos = f"filesets.{name}"
        d = self.mapping(doc, pos, {"layer", "dir", "prefix", "count", "size", "mode", "uid"})
        return FileSetSpec(
            name=name,
            layer=self.string(d, "layer", pos, "?"),
            dir=self.path(d.get("dir"), f"{pos}.dir"),
            prefix=self.string(d, "prefix", pos, "f"),
            count=self.integer(d, "count", pos, None, 1) or 1,
            size=self.integer(d, "size", pos, 0),
            mode=self.mode(d.get("mode"), f"{pos}.mode", 0o644),
            uid=self.integer(d, "uid", pos, 0),
        )

    def process(self, doc: Any, pos: str) -> ProcessSpec:
        if isinstance(doc, str):
            return ProcessSpec(doc)
        d = self.mapping(doc, pos, {"name", "uid"})
        name = self.string(d, "name", pos, "?")
        if "/" in name:
            self.err(f"{pos}.name", "must not contain '/'")
        return ProcessSpec(name, self.integer(d, "uid", pos, 0))

    def container(self, doc: Any, pos: str) -> ContainerSpec:
        d = self.mapping(doc, pos, {"id", "layers", "upper", "processes", "hidden_agent"})
        cid = self.string(d, "id", pos, "?")
        layers = [str(x) for x in self.seq(d.get("layers"), f"{pos}.layers")]
        if not layers:
            self.err(f"{pos}.layers", "needs at least one image layer")
        procs = [self.process(p, f"{pos}.processes[{j}]") for j, p in enumerate(self.seq(d.get("processes"), f"{pos}.processes"))]
        return ContainerSpec(cid, layers, str(d.get("upper", f"{cid}-upper")), procs, bool(d.get("hidden_agent", True)))

    def generated(self, doc: Any, pos: str) -> GeneratedPolicySpec:
        d = self.mapping(doc, pos, {"fileset", "scope", "allow", "protect_read", "count"})
        try:
            scope = parse_scope(d.get("scope"))
        except ValueError as e:
            self.err(f"{pos}.scope", str(e))
            scope = "Host"
        allow = self.seq(d.get("allow"), f"{pos}.allow")
        count = d.get("count")
        if count is not None and (isinstance(count, bool) or not isinstance(count, int) or count < 0):
            self.err(f"{pos}.count", "must be a non-negative integer")
            count = None
        return GeneratedPolicySpec(self.string(d, "fileset", pos, "?"), scope, allow, bool(d.get("protect_read", False)), count)

    def step(self, doc: Any, pos: str) -> dict:
        d = self.mapping(
            doc,
            pos,
            {"op", "proc", "path", "mode", "placement", "create", "as", "fd", "nbytes", "block_size",
             "data", "existing", "newpath", "target", "sig", "symbol", "bytes", "expect"},
        )
        op = d.get("op")
        if op not in TRACE_OPS:
            self.err(f"{pos}.op", f"must be one of {list(TRACE_OPS)}")
            return dict(d)
        if op != "prune" and "proc" not in d:
            self.err(f"{pos}.proc", "is required")
        if op in ("open", "unlink", "getdents"):
            self.path(d.get("path"), f"{pos}.path")
        if op == "open" and "mode" in d:
            if d["mode"] not in ("r", "w", "rw"):
                self.err(f"{pos}.mode", "must be r, w or rw")
        if op in ("read", "write"):
            if "fd" not in d:
                self.err(f"{pos}.fd", "is required")
            nb = d.get("nbytes", len(str(d.get("data", ""))))
            bs = d.get("block_size", 4096)
            if not isinstance(bs, int) or bs <= 0 or not isinstance(nb, int) or nb < 0:
                self.err(f"{pos}.block_size", "nbytes and block_size must be positive integers")
        if op == "link":
            self.path(d.get("existing"), f"{pos}.existing")
            self.path(d.get("newpath"), f"{pos}.newpath")
        if op == "kill" and "target" not in d:
            self.err(f"{pos}.target", "is required")
        if op == "kernel_write" and "symbol" not in d:
            self.err(f"{pos}.symbol", "is required")
        return dict(d)

    def workload(self, name: str, doc: Any) -> WorkloadSpec:
        pos = f"workloads.{name}"
        d = self.mapping(
            doc, pos, {"kind", "process", "fileset", "total_bytes", "block_size", "phases", "files", "mode", "bytes"}
        )
        kind = d.get("kind", name)
        if kind not in WORKLOAD_KINDS:
            self.err(f"{pos}.kind", f"must be one of {list(WORKLOAD_KINDS)}")
        w = WorkloadSpec(name, kind)
        w.process = str(d.get("process", ""))
        w.fileset = str(d.get("fileset", ""))
        w.total_bytes = self.integer(d, "total_bytes", pos, w.total_bytes, 0)
        w.block_size = self.integer(d, "block_size", pos, w.block_size, 1)
        phases = self.seq(d.get("phases", w.phases), f"{pos}.phases")
        if any(p not in OPS for p in phases):
            self.err(f"{pos}.phases", "must be drawn from [read, write]")
        w.phases = [str(p) for p in phases]
        files = self.seq(d.get("files", w.files), f"{pos}.files")
        if any(isinstance(n, bool) or not isinstance(n, int) or n < 0 for n in files):
            self.err(f"{pos}.files", "must be non-negative integers")
        w.files = [int(n) for n in files if isinstance(n, int)]
        w.mode = str(d.get("mode", w.mode))
        if w.mode not in MEMCOPY_MODES:
            self.err(f"{pos}.mode", f"must be one of {list(MEMCOPY_MODES)}")
        w.bytes = self.integer(d, "bytes", pos, w.bytes, 0)
        return w

    def attacks(self, doc: Any) -> dict[str, dict]:
        from .bench import ATTACKS  # local import: bench depends on this module

        if doc is None:
            return {}
        if isinstance(doc, list):
            doc = {name: {} for name in doc}
        out = {}
        d = self.mapping(doc, "attacks", set(ATTACKS))
        for name, params in d.items():
            if name not in ATTACKS:
                continue
            out[name] = dict(self.mapping(params, f"attacks.{name}", {"attacker", "reader", "host_attacker", "path", "link"}))
        return out
