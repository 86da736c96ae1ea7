"""Command line for the CNN marking harness."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .config import ExperimentConfig
from .harness import run_experiment
from .marking import CliMissingError


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="model-lab",
                                     description="Train a small CNN on marked data and export audit records.")
    parser.add_argument("--config", type=str, help="ExperimentConfig JSON file")
    parser.add_argument("--workdir", type=str, required=True)
    parser.add_argument("--seed", type=int)
    args = parser.parse_args(argv)

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        results = run_experiment(cfg, args.workdir)
    except CliMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface the failure with exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for arm in results["arms"]:
        tag = "aug" if arm["augment"] else "no-aug"
        print(f"[{tag}] tpr@0%fpr={arm['tpr_at_0_fpr']:.3f} "
              f"acc drop={arm['accuracy_drop'] * 100:.2f}pp "
              f"clean={arm['clean_test_accuracy'] * 100:.2f}% marked={arm['marked_test_accuracy'] * 100:.2f}%")
    print(f"ssim={results['ssim_marked_vs_original']:.4f} "
          f"marked fraction per user={results['marked_fraction_per_user'] * 100:.3f}%")
    print(json.dumps({"workdir": args.workdir}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
