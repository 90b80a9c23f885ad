"""``sobbo generate|train|evaluate|optimize|ablate --config FILE``.

Exit codes: 0 success, 2 configuration or missing-input error, 3 numeric failure.
The default output root is ``$SOBBO_OUTPUT_ROOT`` (``./runs`` when unset);
an absolute ``output_dir`` in the config wins.
"""

from __future__ import annotations

import argparse
import sys

from .autodiff import NonFiniteError
from .experiment import COMMANDS, ConfigError, load_config
from .training import TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sobbo", description="Offline gradient estimation experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--force", action="store_true", help="overwrite this stage's existing outputs")
    p.add_argument("--workers", type=int, default=1, help="worker processes for repeats and grid points")
    p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = COMMANDS[args.command](cfg, force=args.force, workers=args.workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.command}: wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
