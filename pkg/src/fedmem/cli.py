"""Command line entry point: ``fedmem run|validate|export-scenario``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .errors import FedMemError
from .harness import export_scenario, run_scenario, write_manifest, write_outputs

log = logging.getLogger("fedmem")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    run = cfg.run
    if getattr(args, "seed", None) is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if getattr(args, "out", None) is not None:
        run = dataclasses.replace(run, out=args.out)
    return cfg.replace(run=run)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(cfg.run.out)
    log.info("running scenario %s (seed %d) -> %s", cfg.scenario, cfg.seed, out)
    try:
        result = run_scenario(cfg)
    except Exception as exc:  # runtime failure: flag it in the manifest and exit nonzero
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", cfg, "failed", [], {}, error=f"{type(exc).__name__}: {exc}")
        print(f"fedmem: scenario {cfg.scenario} failed: {exc}", file=sys.stderr)
        return 2
    for name in write_outputs(result, cfg, out):
        print(out / name)
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"{args.config}: ok (scenario {cfg.scenario})")
    return 0


def cmd_export(args) -> int:
    cfg = _load(args)
    out = Path(args.out or Path(cfg.run.out) / "scenario")
    paths = export_scenario(cfg, out)
    print(f"wrote {len(paths)} client files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmem", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the scenario described by a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override [run] seed")
    r.add_argument("--out", default=None, help="override [run] out directory")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="parse and check a config file")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    e = sub.add_parser("export-scenario", help="write per-client binary data files")
    e.add_argument("config")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None, help="target directory (default <out>/scenario)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedmem: {exc}", file=sys.stderr)
        return 1
    except FedMemError as exc:
        print(f"fedmem: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
