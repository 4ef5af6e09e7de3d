"""Per-file access policies and their YAML document format.

A document looks like::

    policies:
      - scope: host
        path: /usr/bin/runc
        allow:
          - {process: "*", uid: "*", ops: [read]}
      - scope: container:web
        path: /www/target.html
        allow:
          - {process: httpd, ops: [read]}

Anything not allowed is denied.  ``protect_read: true`` additionally makes
stray reads of the file's cached metadata trap.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Union

import yaml

from .fs import normpath
from .introspection import HOST, UNKNOWN, ProcessInfo

OPS = ("read", "write")


class PolicyError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{pos}: {msg}" for pos, msg in problems))


@dataclass(frozen=True)
class AllowRule:
    process: str = "*"
    uid: Union[str, int] = "*"
    ops: frozenset[str] = frozenset(OPS)
    container: Optional[str] = None

    def matches(self, subject: ProcessInfo, op: str) -> bool:
        if op not in self.ops:
            return False
        if self.container is not None and subject.container_id != self.container:
            return False
        if self.uid != "*" and subject.uid != self.uid:
            return False
        return fnmatch.fnmatchcase(subject.name, self.process)

    def to_mapping(self) -> dict:
        out: dict[str, Any] = {"process": self.process, "uid": self.uid, "ops": sorted(self.ops)}
        if self.container is not None:
            out["container"] = self.container
        return out


@dataclass(frozen=True)
class Policy:
    scope: str  # HOST or a container id
    path: str
    allow: tuple[AllowRule, ...] = ()
    protect_read: bool = False

    @property
    def target(self) -> tuple[str, str]:
        return (self.scope, self.path)

    def permits(self, subject: ProcessInfo, op: str) -> bool:
        if subject.container_id == UNKNOWN:
            return False
        return any(rule.matches(subject, op) for rule in self.allow)

    def permits_all(self, subject: ProcessInfo, ops: Iterable[str]) -> bool:
        return all(self.permits(subject, op) for op in ops)

    def to_mapping(self) -> dict:
        out: dict[str, Any] = {
            "scope": "host" if self.scope == HOST else f"container:{self.scope}",
            "path": self.path,
            "allow": [r.to_mapping() for r in self.allow],
        }
        if self.protect_read:
            out["protect_read"] = True
        return out


def parse_scope(text: Any) -> str:
    if text == "host":
        return HOST
    if isinstance(text, str) and text.startswith("container:") and len(text) > len("container:"):
        return text[len("container:") :]
    raise ValueError(f"scope must be 'host' or 'container:<id>', got {text!r}")


def _parse_rule(doc: Any, pos: str, problems: list) -> Optional[AllowRule]:
    if not isinstance(doc, dict):
        problems.append((pos, "allow entry must be a mapping"))
        return None
    unknown = set(doc) - {"process", "uid", "ops", "container"}
    if unknown:
        problems.append((pos, f"unknown keys {sorted(unknown)}"))
    process = doc.get("process", "*")
    if not isinstance(process, str) or not process:
        problems.append((f"{pos}.process", "must be a non-empty string"))
        process = "*"
    uid = doc.get("uid", "*")
    if not (uid == "*" or (isinstance(uid, int) and not isinstance(uid, bool) and uid >= 0)):
        problems.append((f"{pos}.uid", "must be '*' or a non-negative integer"))
        uid = "*"
    ops = doc.get("ops", list(OPS))
    if not isinstance(ops, list) or any(op not in OPS for op in ops):
        problems.append((f"{pos}.ops", f"must be a list drawn from {list(OPS)}"))
        ops = []
    container = doc.get("container")
    if container is not None and not isinstance(container, str):
        problems.append((f"{pos}.container", "must be a string"))
        container = None
    return AllowRule(process, uid, frozenset(ops), container)


def load_policies(document: Any) -> list[Policy]:
    """Parse a policy document (YAML text, mapping or list); errors carry positions."""
    if isinstance(document, str):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as e:
            raise PolicyError([("<document>", f"not valid YAML: {e}")]) from None
    if document is None:
        return []
    if isinstance(document, dict):
        entries = document.get("policies") or []
    else:
        entries = document
    if not isinstance(entries, list):
        raise PolicyError([("policies", "must be a list")])
    problems: list[tuple[str, str]] = []
    out: list[Policy] = []
    seen: dict[tuple[str, str], int] = {}
    for i, doc in enumerate(entries):
        pos = f"policies[{i}]"
        if not isinstance(doc, dict):
            problems.append((pos, "must be a mapping"))
            continue
        unknown = set(doc) - {"scope", "path", "allow", "protect_read"}
        if unknown:
            problems.append((pos, f"unknown keys {sorted(unknown)}"))
        try:
            scope = parse_scope(doc.get("scope"))
        except ValueError as e:
            problems.append((f"{pos}.scope", str(e)))
            continue
        path = doc.get("path")
        try:
            path = normpath(path) if isinstance(path, str) else None
        except ValueError:
            path = None
        if path is None:
            problems.append((f"{pos}.path", "must be an absolute path"))
            continue
        allow_doc = doc.get("allow", [])
        if not isinstance(allow_doc, list):
            problems.append((f"{pos}.allow", "must be a list"))
            allow_doc = []
        rules = [_parse_rule(r, f"{pos}.allow[{j}]", problems) for j, r in enumerate(allow_doc)]
        policy = Policy(scope, path, tuple(r for r in rules if r), bool(doc.get("protect_read", False)))
        if policy.target in seen:
            problems.append((f"{pos}.path", f"conflicts with policies[{seen[policy.target]}] for {path}"))
            continue
        seen[policy.target] = i
        out.append(policy)
    if problems:
        raise PolicyError(problems)
    return out


def dump_policies(policies: Iterable[Policy]) -> str:
    return yaml.safe_dump({"policies": [p.to_mapping() for p in policies]}, sort_keys=False)


@dataclass
class PolicySet:
    """Policies indexed by target for O(1) lookup."""

    policies: list[Policy] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.by_target = {p.target: p for p in self.policies}

    def get(self, scope: str, path: str) -> Optional[Policy]:
        return self.by_target.get((scope, normpath(path)))

    def for_scope(self, scope: str) -> list[Policy]:
        return [p for p in self.policies if p.scope == scope]

    def __len__(self) -> int:
        return len(self.policies)

    def __iter__(self):
        return iter(self.policies)
