"""Command line entry point: ``vmimon validate|simulate|bench|attack``.

Everything a run needs comes from the scenario document; flags only pick the
command, a subset of it and the output format.  Exit status is 0 on success,
1 when a run finished but something it checks failed (a trace expectation, a
self-check, an attack that got through) and 2 for unusable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from contextlib import contextmanager
from typing import Iterator, Optional, TextIO

from .bench import ATTACKS, compare_strategies, run_attacks
from .scenario import Scenario, ScenarioError
from .sim import Simulation, Strategy

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_files(text: str) -> list[int]:
    """``100..500`` (step = first value), ``100..500:50`` or ``100,250,400``."""
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (int(x) for x in span.split(".."))
            step_n = int(step) if step else lo
            if lo <= 0 or hi < lo or step_n <= 0:
                raise ValueError
            return list(range(lo, hi + 1, step_n))
        values = [int(x) for x in text.split(",")]
        if any(v <= 0 for v in values):
            raise ValueError
        return values
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad file-count selector {text!r}") from None


def _load(path: str) -> Scenario:
    return Scenario.load(path)


@contextmanager
def _output(path: Optional[str]) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _strategies(sel: str) -> list[Strategy]:
    return list(Strategy) if sel == "all" else [Strategy.parse(sel)]


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_validate(args: argparse.Namespace) -> int:
    scn = _load(args.scenario)
    print(f"ok: scenario {scn.name!r} ({len(scn.policies())} policies, {len(scn.containers)} containers)")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    scn = _load(args.scenario)
    strategy = Strategy.parse(args.strategy)
    if strategy in (Strategy.NONE, Strategy.INTERCEPT):
        raise UsageError("simulate needs a monitoring strategy (sharedpage or isolated)")
    sim = Simulation.build(scn, strategy, args.seed)
    trace = sim.run_trace()
    with _output(args.out) as out:
        for line in sim.monitor.event_lines():
            out.write(line + "\n")
    status = EXIT_OK
    for rec in trace:
        if rec.get("ok") is False:
            print(f"trace step {rec['step']} ({rec['op']} by {rec['proc']}): got {rec['result']!r}, "
                  f"expected {rec['expect']!r}", file=sys.stderr)
            status = EXIT_FAILED
    for problem in sim.self_check() + sim.monitor.failures:
        print(f"self-check: {problem}", file=sys.stderr)
        status = EXIT_FAILED
    for w in sim.monitor.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return status


def cmd_bench(args: argparse.Namespace) -> int:
    scn = _load(args.scenario)
    names = list(scn.workloads) if args.workload == "all" else [args.workload]
    for name in names:
        if name not in scn.workloads:
            raise UsageError(f"unknown workload {name!r}; scenario defines {sorted(scn.workloads)}")
    strategies = _strategies(args.strategy)
    with _output(args.out) as out:
        for name in names:
            spec = scn.workloads[name]
            if args.files is not None and spec.kind == "startup":
                spec = dataclasses.replace(spec, files=args.files)
            if args.block_size is not None and spec.kind == "fileio":
                if spec.total_bytes % args.block_size:
                    raise UsageError("--block-size must divide the workload's total bytes")
                spec = dataclasses.replace(spec, block_size=args.block_size)
            scn_w = dataclasses.replace(scn, workloads={**scn.workloads, name: spec})
            report = compare_strategies(scn_w, name, strategies, args.seed)
            if args.format == "records":
                out.writelines(line + "\n" for line in report.records())
            else:
                out.write(report.table())
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    scn = _load(args.scenario)
    outcomes = run_attacks(scn, args.name or None, args.seed)
    with _output(args.out) as out:
        for o in outcomes:
            if args.format == "records":
                out.write(json.dumps(o.to_record(), sort_keys=True) + "\n")
            else:
                out.write(f"{o.name:<16}{o.verdict:<11}content_unchanged={o.content_unchanged} legit_ok={o.legit_ok}\n")
    return EXIT_OK if all(o.blocked and o.content_unchanged for o in outcomes) else EXIT_FAILED


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmimon", description="VMI container file monitoring simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, out: bool = True) -> None:
        sp.add_argument("--scenario", required=True, metavar="PATH", help="scenario document (YAML)")
        if out:
            sp.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
            sp.add_argument("--seed", type=int, help="override the scenario seed")

    sp = sub.add_parser("validate", help="schema and referential checks only")
    common(sp, out=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="boot, arm the monitor, run the scripted trace, write the event log")
    common(sp)
    sp.add_argument("--strategy", default="isolated", choices=["sharedpage", "isolated"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bench", help="compare monitoring strategies on a workload")
    common(sp)
    sp.add_argument("--workload", required=True, help="workload name from the scenario, or 'all'")
    sp.add_argument("--strategy", default="all", choices=[s.value for s in Strategy] + ["all"])
    sp.add_argument("--format", default="table", choices=["table", "records"])
    sp.add_argument("--files", type=parse_files, help="startup file counts, e.g. 100..500")
    sp.add_argument("--block-size", type=int, help="override the file-IO block size in bytes")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("attack", help="run the attack corpus against the isolated monitor")
    common(sp)
    sp.add_argument("--name", action="append", choices=list(ATTACKS), help="attack to run (repeatable)")
    sp.add_argument("--format", default="table", choices=["table", "records"])
    sp.set_defaults(func=cmd_attack)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        for pos, msg in e.problems:
            print(f"error: {pos}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
