"""Command-line entry point.

    jkolab run CONFIG.json
    jkolab convergence CONFIG.json
    jkolab ot-selftest [BATTERY.json]
    jkolab harnack TRAJECTORY_DIR

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error,
3 runtime failure inside the numerics.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import JkoLabError

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("jkolab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _thread_limit():
    """Honor ``JKO_THREADS`` (0 or unset means library default)."""
    raw = os.environ.get("JKO_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"JKO_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("JKO_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(path):
    from .config import load_config

    return load_config(path)


def _print_reports(out: Path, names) -> None:
    for name in names:
        txt = out / "reports" / f"{name}.txt"
        if txt.exists():
            print(txt.read_text().splitlines()[0])


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args.config)
    out = Path(args.out or cfg.output_dir)

    def progress(k, diag):
        log.info("step %d/%d: %d iterations, entropy %.6g", k, cfg.N, diag.iterations, diag.entropy)

    summary = run_experiment(cfg, out, progress=progress)
    for name, ok in summary.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"artifacts in {out}")
    return EXIT_OK if summary.passed else EXIT_VIOLATION


def cmd_convergence(args) -> int:
    from .experiment import _write_convergence_csv, convergence_report
    from .io import write_dat, write_json

    cfg = _load(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = convergence_report(cfg)
    _write_convergence_csv(out / "convergence.csv", rep.rows)
    write_json(out / "convergence.json", rep)
    write_dat(out / "plots" / "convergence.dat",
              {k: [r[k] for r in rep.rows] for k in ("N", "l1_gap", "linf_gap")})
    print(rep.to_text())
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def cmd_ot_selftest(args) -> int:
    from .io import write_json
    from .selftest import instance_by_name, load_battery, run_battery

    battery = load_battery(args.battery)
    rep = run_battery(battery)
    print(rep.to_text() if args.verbose else rep.to_text().splitlines()[0])
    if not rep.passed:
        out = Path(args.out or ".")
        path = write_json(out / "ot_selftest_worst.json",
                          {"row": next(r for r in rep.rows if r.name == rep.worst),
                           "instance": instance_by_name(battery, rep.worst)})
        print(f"worst instance written to {path}")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_harnack(args) -> int:
    from .experiment import recheck_directory

    directory = Path(args.directory)
    if not directory.is_dir():
        raise ValueError(f"{directory} is not a directory")
    out = Path(args.out) if args.out else None
    summary = recheck_directory(directory, out)
    for name, ok in summary.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if summary.passed else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jkolab", description="JKO scheme for the heat equation on the torus, "
                                           "with Harnack-type checks.")
    p.add_argument("-v", "--verbose", action="store_true", help="more output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a trajectory and the configured checks")
    r.add_argument("config", help="experiment config (JSON)")
    r.add_argument("-o", "--out", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("convergence", help="L1 gap to the exact heat flow for each N")
    c.add_argument("config")
    c.add_argument("-o", "--out")
    c.set_defaults(func=cmd_convergence)

    s = sub.add_parser("ot-selftest", help="exact vs entropic transport oracle battery")
    s.add_argument("battery", nargs="?", help="battery JSON (default: bundled)")
    s.add_argument("-o", "--out", help="where to dump the worst instance on failure")
    s.set_defaults(func=cmd_ot_selftest)

    h = sub.add_parser("harnack", help="re-check a stored trajectory directory")
    h.add_argument("directory")
    h.add_argument("-o", "--out")
    h.set_defaults(func=cmd_harnack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except JkoLabError as exc:
        if isinstance(exc, ValueError) and exc.step is None:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
