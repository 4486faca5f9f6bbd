"""Command line front end for the experiment harness.

Exit codes: 0 on success, 2 for configuration problems, 3 when a model
is too large to enumerate, 4 when the experiment ran but one of its own
validation checks failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from powerlab.harness import EXPERIMENTS, ConfigError, run_experiment
from powerlab.power import ResourceLimitError

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RESOURCE = 3
EXIT_CHECK = 4

_HELP = {
    "synth-odds": "tempered versus powered next-token odds on a synthetic model",
    "synth-sis": "one-step and sequential importance sampling diagnostics",
    "distill": "offline distillation from a powered teacher",
    "cov-sweep": "reward gain versus integrated covariance",
    "mh-validate": "Metropolis-Hastings power sampler validation",
    "model-info": "model shape and normalizer summary",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="powerlab",
        description="Exact experiments on powered autoregressive distributions.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="command")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument(
            "--out",
            default=None,
            help="output directory (default: the config's out_dir, else out/<command>)",
        )
        p.add_argument(
            "--seed",
            type=int,
            default=None,
            help="override the config's seed field",
        )
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="worker budget; overrides POWERLAB_THREADS (results do not depend on it)",
        )
    return parser


def _resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value = flag
    else:
        env = os.environ.get("POWERLAB_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(
                f"POWERLAB_THREADS: expected an integer, got {env!r}"
            ) from None
    if value < 1:
        raise ConfigError(f"threads: must be at least 1, got {value}")
    return value


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path!r}: expected a JSON object at top level")
    return doc


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _resolve_threads(args.threads)
        doc = _load_config(args.config)
        out_dir = args.out or doc.get("out_dir") or os.path.join("out", args.experiment)
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir: expected a string")
        report = run_experiment(
            doc,
            out_dir,
            expected_experiment=args.experiment,
            seed_override=args.seed,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE

    for name in report.files:
        print(f"wrote {report.out_dir / name}")
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.detail}")
    for key in sorted(report.stats):
        print(f"stat {key} = {report.stats[key]}")
    if not report.all_passed:
        print("validation checks failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
