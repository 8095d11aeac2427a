"""Command-line entry point.

    kg2mmkg <stage> --config cfg.toml [--seed N] [--heads-only]
    kg2mmkg compare --config cfg.toml --manifest name=path ... [--reals DIR]

Exit codes: 0 ok, 2 config error, 3 upstream artifact missing, 4 backend
hard failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import BackendError, build_backend
from .pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    PipelineError,
    UpstreamMissingError,
    compare_methods,
    run_stage,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_BACKEND = 4

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kg2mmkg",
        description="Build a multi-modal knowledge graph from a conventional one.",
    )
    parser.add_argument("stage", choices=list(STAGES) + ["compare"])
    parser.add_argument("--config", required=True, help="TOML pipeline configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--output", default=None, help="override the output directory")
    parser.add_argument(
        "--heads-only", action="store_true",
        help="restrict the target set to entities with outgoing train edges",
    )
    parser.add_argument(
        "--paired-only", action="store_true",
        help="compare: restrict to entities whose selections differ (default on)",
    )
    parser.add_argument(
        "--all-entities", action="store_true",
        help="compare: keep entities even when selections agree",
    )
    parser.add_argument(
        "--manifest", action="append", default=[], metavar="NAME=PATH",
        help="compare: labelled manifest, repeatable",
    )
    parser.add_argument("--reals", default=None, help="compare: directory of real images")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load_config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output is not None:
        overrides["output_dir"] = args.output
    if args.heads_only:
        overrides["heads_only"] = True
    return PipelineConfig.from_toml(args.config, overrides=overrides)


def _cmd_compare(args, cfg: PipelineConfig) -> int:
    manifests = {}
    for item in args.manifest:
        name, _, path = item.partition("=")
        if not name or not path:
            raise ConfigError(f"--manifest expects NAME=PATH, got {item!r}")
        manifests[name] = Path(path)
    if len(manifests) < 2:
        raise ConfigError("compare needs at least two --manifest entries")
    reals = Path(args.reals) if args.reals else cfg.reals_dir
    embedder = build_backend(cfg.backends["embed"])
    report = compare_methods(
        manifests, reals, embedder, paired_only=not args.all_entities
    )
    out = Path(cfg.output_dir) / "comparison_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report["pairs"], indent=2, sort_keys=True))
    print(f"comparison report written to {out}", file=sys.stderr)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args)
        if args.stage == "compare":
            return _cmd_compare(args, cfg)
        result = run_stage(args.stage, cfg)
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UpstreamMissingError as exc:
        print(f"upstream missing: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
