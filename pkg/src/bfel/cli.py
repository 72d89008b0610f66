"""Command line: ``bfel run|sweep|verify|inspect-block|export-metrics|presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import preset_names, resolve
from .errors import BFELError
from .experiment import export_metrics, run_experiment, sweep, verify_artifacts
from .ledger import ChainFileError, read_chain_file


def _cmd_run(args) -> int:
    cfg = resolve(args.config)
    overrides = dict(_parse_set(s) for s in args.set or [])
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    out = Path(args.out or f"runs/{cfg.name}")
    res = run_experiment(cfg, out)
    print(res.summary_line() + f" out={out}")
    return 2 if res.summary["halted"] else 0


def _cmd_sweep(args) -> int:
    cfg = resolve(args.config)
    values = [yaml.safe_load(v) for v in args.values]
    out = Path(args.out or f"runs/{cfg.name}-sweep-{args.param}")
    rows = sweep(cfg, args.param, values, out, jobs=args.jobs)
    print(f"{args.param},final_accuracy,compression_ratio,total_bytes,simulated_time_ms")
    for value, acc, ratio, _, nbytes, t in rows:
        print(f"{value},{acc:.4f},{ratio:.2f},{nbytes},{t}")
    print(f"comparison table: {out / 'comparison.csv'}")
    return 0


def _cmd_verify(args) -> int:
    report = verify_artifacts(args.run_dir)
    for line in report.lines():
        print(line)
    print("OK" if report.ok else "VERIFICATION FAILED")
    return 0 if report.ok else 1


def _cmd_inspect(args) -> int:
    try:
        blocks = read_chain_file(args.chain_file)
    except ChainFileError as exc:
        print(f"error: {exc} (block height {exc.height})", file=sys.stderr)
        return 1
    if not 0 <= args.height < len(blocks):
        print(f"error: chain has heights 0..{len(blocks) - 1}", file=sys.stderr)
        return 1
    print(json.dumps(blocks[args.height].describe(), indent=1))
    return 0


def _cmd_export(args) -> int:
    text = export_metrics(args.run_dir, args.format, args.task)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_presets(args) -> int:
    for name in preset_names():
        print(f"preset:{name}")
    return 0


def _parse_set(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key, yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bfel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="config YAML path or preset:<name>")
    r.add_argument("--out", help="run directory (default runs/<name>)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. compression.rho=1")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="one run per parameter value")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted config key or alias (rho, theta, ...)")
    s.add_argument("--values", required=True, nargs="+")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1, help="parallel processes")
    s.set_defaults(func=_cmd_sweep)

    v = sub.add_parser("verify", help="re-verify a run directory")
    v.add_argument("run_dir")
    v.set_defaults(func=_cmd_verify)

    i = sub.add_parser("inspect-block", help="print one block as JSON")
    i.add_argument("chain_file")
    i.add_argument("height", type=int)
    i.set_defaults(func=_cmd_inspect)

    e = sub.add_parser("export-metrics", help="print a run's metrics")
    e.add_argument("run_dir")
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    e.add_argument("--task", help="only this training subchain, e.g. t1")
    e.add_argument("--out")
    e.set_defaults(func=_cmd_export)

    ls = sub.add_parser("presets", help="list bundled presets")
    ls.set_defaults(func=_cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BFELError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
