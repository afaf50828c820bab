"""Command-line entry point: ``ddswarm run | compare | validate | list-scenarios``.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .experiments import (SCENARIOS, ConfigError, ExperimentConfig, IncompatibleRunsError,
                          RunFailure, compare_runs, run_experiment, shipped_config_path)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4

log = logging.getLogger("ddswarm")


def _load_config(ref: str, seed: int | None = None, snapshots: int | None = None,
                 out_dir: str | None = None) -> ExperimentConfig:
    """Config from a YAML path, or the shipped default when ``ref`` names a scenario."""
    path = Path(ref)
    if not path.exists() and ref in SCENARIOS:
        path = shipped_config_path(ref)
    if not path.exists():
        raise ConfigError(f"no such config file: {ref}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if snapshots is not None:
        raw["snapshots"] = snapshots
    if out_dir is not None:
        raw["output_dir"] = out_dir
    return ExperimentConfig.from_dict(raw)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed, args.snapshots, args.out_dir)
    log.info("running %s (engine=%s, seed=%d, horizon=%g)", cfg.scenario, cfg.engine, cfg.seed,
             cfg.horizon)
    manifest = run_experiment(cfg)
    print(manifest.run_dir)
    summary = manifest.data.get("summary", {})
    if summary:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def _cmd_compare(args) -> int:
    report = compare_runs(args.run_a, args.run_b, args.out)
    print(json.dumps(report["summary"], indent=2, sort_keys=True))
    if args.out:
        print(f"table written to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = _load_config(args.config)
    print(f"ok: {cfg.scenario} (engine={cfg.engine}, horizon={cfg.horizon:g}, "
          f"dds steps={cfg.dds_steps()[0]}, fd steps={cfg.fd_steps()[0]})")
    return EXIT_OK


def _cmd_list(args) -> int:
    for name, text in SCENARIOS.items():
        print(f"{name:26s} {text}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddswarm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a config (path or shipped scenario name)")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out-dir", help="parent directory for the run directory")
    r.add_argument("--snapshots", type=int, help="override the snapshot count")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="compare two run directories or manifests")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", help="write the per-snapshot table to this CSV")
    c.set_defaults(func=_cmd_compare)

    v = sub.add_parser("validate", help="validate a config without running it")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)

    ls = sub.add_parser("list-scenarios", help="list the shipped scenarios")
    ls.set_defaults(func=_cmd_list)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunFailure as exc:
        print(f"run failed: {exc} (manifest: {exc.manifest_path})", file=sys.stderr)
        return EXIT_RUNTIME
    except (IncompatibleRunsError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
