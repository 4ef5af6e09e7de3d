"""In-guest helpers that materialize watched dentries by opening the files.

The security agent runs on the host.  It reads the policy document shipped in
the guest image, opens every host-scope target read-only with isolated
placement, and spawns one hidden agent per container which does the same for
that container's targets from inside the container's mount namespace.  Each
agent reports its (fd, path) pairs to the monitor over Monitor_Syscall and
keeps the files open for good.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .introspection import HOST
from .kernel import Kernel, NamespaceSet, OpenMode, Process
from .memory import Placement
from .policy import load_policies

POLICY_IMAGE_PATH = "/etc/vmimon/policies.yaml"


@dataclass
class AgentReport:
    pid: int
    scope: str
    opened: list[tuple[int, str]] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    reply: dict = field(default_factory=dict)


def _call(kernel: Kernel, proc: Process, msg: dict) -> dict:
    raw = kernel.monitor_syscall(proc, json.dumps(msg, sort_keys=True).encode())
    return json.loads(raw.decode()) if raw else {}


def _open_all(kernel: Kernel, proc: Process, paths: list[str], placement: Placement, report: AgentReport) -> None:
    for path in paths:
        fd = kernel.syscall_open(proc, path, OpenMode.READ_ONLY, placement)
        if fd < 0:
            report.failed.append(path)
        else:
            report.opened.append((fd, path))


class HiddenAgent:
    def __init__(self, kernel: Kernel, container_id: str, namespaces: NamespaceSet, uid: int = 0):
        self.kernel = kernel
        self.container_id = container_id
        self.proc = kernel.spawn_process(
            "hagent", uid, namespaces, hidden=True, agent=True, container_id=container_id
        )

    def start(self, placement: Placement = Placement.ISOLATED) -> AgentReport:
        report = AgentReport(self.proc.pid, self.container_id)
        files = _call(self.kernel, self.proc, {"op": "poll", "container": self.container_id}).get("files", [])
        _open_all(self.kernel, self.proc, files, placement, report)
        report.reply = _call(
            self.kernel,
            self.proc,
            {
                "op": "register",
                "pid": self.proc.pid,
                "container": self.container_id,
                "files": report.opened,
                "failed": report.failed,
            },
        )
        return report


class SecurityAgent:
    def __init__(self, kernel: Kernel, policy_path: str = POLICY_IMAGE_PATH):
        self.kernel = kernel
        self.policy_path = policy_path
        self.proc = kernel.spawn_process("secagent", 0, agent=True)
        self.hidden: dict[str, HiddenAgent] = {}

    def read_policy_document(self) -> str:
        hit = self.kernel.mounts[self.proc.namespaces.mnt_ns].resolve(self.policy_path)
        return bytes(hit[1].content).decode() if hit else ""

    def start(
        self,
        containers: dict[str, NamespaceSet],
        placement: Placement = Placement.ISOLATED,
    ) -> list[AgentReport]:
        policies = load_policies(self.read_policy_document())
        report = AgentReport(self.proc.pid, HOST)
        host_paths = [p.path for p in policies if p.scope == HOST]
        _open_all(self.kernel, self.proc, host_paths, placement, report)
        report.reply = _call(
            self.kernel,
            self.proc,
            {"op": "register", "pid": self.proc.pid, "container": None, "files": report.opened, "failed": report.failed},
        )
        reports = [report]
        for cid in sorted(containers):
            agent = HiddenAgent(self.kernel, cid, containers[cid])
            self.hidden[cid] = agent
            reports.append(agent.start(placement))
        return reports

    @property
    def pids(self) -> list[int]:
        return [self.proc.pid] + [a.proc.pid for a in self.hidden.values()]

    def hidden_agent(self, container_id: str) -> Optional[HiddenAgent]:
        return self.hidden.get(container_id)
