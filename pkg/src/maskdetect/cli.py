"""Command-line runner: ``maskdetect <stage> [--config PATH] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import PRESETS, ConfigError, ExperimentConfig
from .pipeline import COMMANDS, STAGES, MissingArtifact, Run, run_all


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskdetect", description=__doc__)
    ap.add_argument("command", choices=STAGES + ["all", "show-config"])
    ap.add_argument("--config", help="JSON experiment config (default: the chosen preset)")
    ap.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    ap.add_argument("--out", default="run", help="run directory")
    ap.add_argument("--seed", type=int, default=None, help="override the root seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker threads for attack generation")
    ap.add_argument("--exclude-failed-adv", action="store_true",
                    help="drop unsuccessful adversarial examples from the detection sets")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else PRESETS[args.preset]()
    over = {"seed": args.seed}
    if args.exclude_failed_adv:
        over["exclude_failed_adv"] = True
    return cfg.with_overrides(**over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_json())
            return 0
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        run = Run(cfg, args.out, args.jobs)
        if args.command == "all":
            run_all(run)
        else:
            COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error[missing-artifact]: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
