"""Command line entry point.

Exit codes: 0 success, 2 configuration error (including missing inputs),
3 numerical failure, 4 empty cone intersection.
"""

from __future__ import annotations

import argparse
import sys

from . import config as C
from . import pipeline
from .autodiff import NonFiniteError
from .model import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_EMPTY = 0, 2, 3, 4

COMMANDS = {
    "gen-data": pipeline.cmd_gen_data,
    "train": pipeline.cmd_train,
    "experiment1": pipeline.cmd_experiment1,
    "predict": pipeline.cmd_predict,
    "probe": pipeline.cmd_probe,
    "aperture": pipeline.cmd_aperture,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lightcone", description="Light-cone video synthesis in a hyperbolic latent space.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key=value configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--full-scale", action="store_true", help="10,000 sequences and 100,000 synthesis samples")
    return p


def _summary(command: str, result) -> str:
    if command == "aperture":
        return f"slope = {result!r}"
    if command == "gen-data":
        return f"dataset written to {result}"
    if command == "train":
        return f"step {result.model.step}: loss {result.initial_loss:.2f} -> {result.final_loss:.2f}, checkpoint {result.checkpoint}"
    if command == "experiment1":
        return "acceptance " + ", ".join(f"t={t:g}: {r:.4f}" for t, r in zip(result.times, result.rates))
    if command == "predict":
        return f"{len(result.predictions)} predictions, {len(result.steps)} cones sampled"
    if command == "probe":
        return f"{len(result.events)} states in the gallery"
    return "done"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config, {"seed": args.seed, "out": args.out})
        if args.full_scale:
            cfg = C.full_scale(cfg)
        result = COMMANDS[args.command](cfg)
    except C.ConfigError as exc:
        print(f"lightcone: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"lightcone: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except pipeline.EmptyIntersection as exc:
        print(f"lightcone: empty intersection: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except OSError as exc:
        print(f"lightcone: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(_summary(args.command, result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
