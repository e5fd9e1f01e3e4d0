"""Command line entry point.

Exit codes: 0 success, 1 configuration or precondition problem, 2 stage
finished but with partial failures (rejected features, unsuccessful attacks,
accuracy below floor), 3 unexpected error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .exceptions import AdvFusionError, ConfigValidationError, MissingArtifactError
from .stages import (
    resolve_out_dir,
    stage_attack,
    stage_evaluate,
    stage_extract,
    stage_report,
    stage_train_autoencoder,
    stage_train_models,
    validate_summary,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_ERROR = 3

STAGES = {
    "train-ae": stage_train_autoencoder,
    "train-models": stage_train_models,
    "extract": stage_extract,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
    "report": stage_report,
}

log = logging.getLogger("advfusion")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfusion",
        description="robust-feature fusion attacks: train, extract, attack, evaluate",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", required=True, help="path to the experiment config JSON")
        p.add_argument("--out", default=None, help="run directory (overrides config and env)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    sub.add_parser("validate", help="check a config, echo effective settings").add_argument(
        "--config", required=True
    )
    for verb, help_text in [
        ("train-ae", "train the autoencoder"),
        ("train-models", "train surrogate and held-out classifiers"),
        ("extract", "extract robust class features"),
        ("attack", "run fusion attacks over the attack split"),
        ("evaluate", "recompute metrics from stored artifacts"),
        ("report", "render summary tables and plots from stored reports"),
    ]:
        common(sub.add_parser(verb, help=help_text))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})

        if args.verb == "validate":
            print(json.dumps(validate_summary(cfg), indent=2, sort_keys=True))
            return EXIT_OK

        out = resolve_out_dir(cfg, args.out)
        summary = STAGES[args.verb](cfg, Path(out))
        for failure in summary.failures:
            log.warning("partial: %s", failure)
        if summary.details:
            print(json.dumps({"stage": summary.stage, **summary.details}, sort_keys=True))
        else:
            print(json.dumps({"stage": summary.stage, "status": "ok"}))
        return EXIT_PARTIAL if summary.partial else EXIT_OK

    except ConfigValidationError as err:
        for pointer, message in err.violations:
            print(f"config error at {pointer or '/'}: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"precondition: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except AdvFusionError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:  # argparse SystemExit passes through untouched
        log.exception("unexpected failure")
        print(f"unexpected failure: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
