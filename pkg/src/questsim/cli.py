"""``questsim validate | simulate | analyze``.

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import CHECKS, run_checks
from .engine import EngineInvariantViolation, run
from .scenario import ScenarioError, load_scenario
from .trace import export, load_trace

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_INPUT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _checks(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in CHECKS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"choose from {','.join(CHECKS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="questsim", description="Separation-kernel partitioning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and debug output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("--scenario", required=True)

    s = sub.add_parser("simulate", help="run a scenario and export its trace")
    s.add_argument("--scenario", required=True)
    s.add_argument("--until", type=int, help="override run.until_us")
    s.add_argument("--seed", type=int, help="override run.seed")
    s.add_argument("--out", required=True, help="output file (json) or directory (csv)")
    s.add_argument("--format", choices=("json", "csv"), default="json")

    a = sub.add_parser("analyze", help="audit a scenario run or an exported trace")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario")
    src.add_argument("--trace")
    a.add_argument("--checks", type=_checks, default=list(CHECKS), help="comma list of " + ",".join(CHECKS))
    a.add_argument("--until", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--report", help="write the check results as JSON here")
    return p


def _load(args):
    sc = load_scenario(args.scenario)
    if getattr(args, "until", None) is not None or getattr(args, "seed", None) is not None:
        sc = sc.with_overrides(args.until, args.seed)
    return sc


def _summary(trace) -> list[str]:
    c = trace.counters
    lines = [f"simulated {trace.meta['until_us']} us of '{trace.meta['scenario']}' (seed {trace.meta['seed']})"]
    lines.append("monitor entries: " + ", ".join(f"sandbox {k}={v}" for k, v in sorted(c["monitor_entries"].items())))
    for k in ("violations", "irqs_delivered", "irqs_dropped", "pci_allows", "pci_denies",
              "faults_injected", "faults_contained", "channels"):
        lines.append(f"{k}: {c[k]}")
    return lines


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            sc = _load(args)
            print(f"{args.scenario}: ok ({len(sc.sandboxes)} sandboxes, digest {sc.digest()})")
            return EXIT_OK

        if args.command == "simulate":
            trace = run(_load(args))
            export(trace, args.format, args.out)
            print("\n".join(_summary(trace)))
            print(f"trace written to {args.out}")
            return EXIT_OK

        if args.trace:
            trace = load_trace(args.trace)
            if not trace.meta:
                raise ValueError("trace has no meta block")
        else:
            trace = run(_load(args))
        results = run_checks(trace, args.checks)
        for r in results:
            print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}")
            for line in r.lines:
                print(f"    {line}")
        if args.report:
            Path(args.report).write_text(json.dumps([r.to_dict() for r in results], indent=1, sort_keys=True) + "\n")
        return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except EngineInvariantViolation as e:
        print(f"engine error: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
