"""Command line entry point: ``calderon-lab run <config.toml>``."""

import argparse
import csv
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import experiments as ex

EXIT_PASS, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 1, 2, 3


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ex.ConfigError("config", f"file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ex.ConfigError("config", f"cannot parse {path}: {exc}") from exc


def write_outputs(result, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    for name, (header, rows) in sorted(result.tables.items()):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    (out / "summary.txt").write_text(result.summary() + "\n")


def cmd_run(args):
    try:
        cfg = load_config(args.config)
        out = args.out or cfg.get("output", {}).get("dir") or f"results/{cfg.get('name', 'run')}"
        result = ex.run_experiment(cfg, args.tol_scale)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ex.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_outputs(result, out)
    print(result.summary())
    print(f"outputs written to {out}")
    return EXIT_PASS if result.passed else EXIT_TOLERANCE


def cmd_list(args):
    if args.json:
        print(json.dumps([{"kind": k, "description": v} for k, v in ex.CATALOG.items()], indent=2))
    else:
        for k, v in ex.CATALOG.items():
            print(f"{k:<13} {v}")
    return EXIT_PASS


def build_parser():
    p = argparse.ArgumentParser(prog="calderon-lab", description="Configuration-driven experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a TOML config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: results/<name>)")
    r.add_argument("--tol-scale", type=float, default=1.0, help="widen every tolerance by this factor")
    r.set_defaults(func=cmd_run)
    ls = sub.add_parser("list-experiments", help="print the experiment catalog")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; report them as validation errors
        return EXIT_VALIDATION if exc.code else EXIT_PASS
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
