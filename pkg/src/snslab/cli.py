"""Command line: ``snslab run | report | validate``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, fingerprint, load_config


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snslab", description="Stochastic Navier-Stokes / Euler experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute the suite named in a config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None)
    run.add_argument("--threads", type=int, default=1)
    rep = sub.add_parser("report", help="aggregate the outputs of a finished run")
    rep.add_argument("--manifest", required=True)
    rep.add_argument("--format", choices=("csv", "json", "summary_text"), default="summary_text")
    val = sub.add_parser("validate", help="check a config and print its fingerprint")
    val.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command in ("run", "validate"):
        try:
            cfg = load_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if args.command == "validate":
            print(fingerprint(cfg))
            return 0
        from .experiments import run_suite

        try:
            manifest = run_suite(cfg, args.out, args.threads)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for stage, status in manifest["stages"].items():
            print(f"{stage}: {status}")
        print(f"manifest: {json.dumps(manifest['config_fingerprint'])} exit={manifest['exit_code']}")
        return manifest["exit_code"]
    from .experiments import report

    try:
        for path in report(args.manifest, args.format):
            print(path)
    except (OSError, ValueError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
