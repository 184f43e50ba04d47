"""Command line entry point: ``fedselect --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import config_from_dict
from .exceptions import BadConfig, FedSelectError
from .experiment import run_experiment
from .reporting import emit_metrics_csv

log = logging.getLogger("fedselect")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; those are config errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise BadConfig(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedselect", description="Run a federated select simulation.")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.add_argument("--rounds", type=int, help="override training.rounds")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    return p


def resolve(args):
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as err:
        raise BadConfig(f"cannot read config {args.config}: {err}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise BadConfig(f"config is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise BadConfig("config must be a JSON object")
    training = dict(raw.get("training") or {})
    if args.seed is not None:
        training["seed"] = args.seed
    if args.rounds is not None:
        training["rounds"] = args.rounds
    if training:
        raw["training"] = training
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    return config_from_dict(raw)


def run_cli(argv=None) -> int:
    """Parse flags, run the experiment and write results; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
    except BadConfig as err:
        print(f"fedselect: config error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(cfg.to_json(), encoding="utf-8")
        rows = run_experiment(cfg)
        emit_metrics_csv(rows, out / "metrics.csv")
    except (FedSelectError, OSError, ValueError) as err:
        print(f"fedselect: run failed: {err}", file=sys.stderr)
        return 2
    if not args.quiet:
        final = [r for r in rows if r.phase == "test"]
        for r in final:
            print(f"trial {r.trial} round {r.round} test {r.metric} = {r.value:.4f}")
        print(f"wrote {out / 'metrics.csv'}")
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
