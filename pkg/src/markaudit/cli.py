"""Command-line entry point for marking, auditing, and lab simulations.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation
error. Every subcommand is deterministic given its flags and seeds, and
every run writes its fully-resolved configuration next to its outputs.
Machine-readable results go to files; stdout carries a short summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional

from . import audit, lab, marking
from .img import ImageError, load_image, save_image
from .marking import MarkSpec, canonical_json

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Validation failure that maps to exit code 2."""


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, config: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    for variant in (key, key.replace("-", "_")):
        if variant in config:
            return config[variant]
    return default


def _write_run_config(path: str, resolved: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(resolved) + "\n")


# ---------------------------------------------------------------------------
# gen-ood


def _cmd_gen_ood(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    seed = _resolve(args, config, "seed")
    height = _resolve(args, config, "height", 32)
    width = _resolve(args, config, "width", 32)
    out = _resolve(args, config, "out")
    if seed is None or out is None:
        raise UsageError("gen-ood requires --seed and --out")
    if width < marking.NUM_STRIPES:
        raise UsageError(f"--width must be >= {marking.NUM_STRIPES}")
    if height < 1:
        raise UsageError("--height must be >= 1")

    pattern, image = marking.gen_stripe_feature(int(seed), int(height), int(width))
    save_image(image, out)
    record = {
        "palette_version": marking.PALETTE_VERSION,
        "colors": list(pattern.colors),
        "orientation": "vertical",
        "seed": int(seed),
        "height": int(height),
        "width": int(width),
    }
    stem = os.path.splitext(out)[0]
    with open(stem + ".pattern.json", "w", encoding="utf-8") as fh:
        fh.write(canonical_json(record) + "\n")
    _write_run_config(stem + ".config.json", {"subcommand": "gen-ood", **record, "out": out})
    print(f"wrote {out} and {stem}.pattern.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# mark


def _ablation_flags(ablation: str) -> tuple[bool, bool]:
    if ablation not in lab.ABLATIONS:
        raise UsageError(f"--ablation must be one of {', '.join(lab.ABLATIONS)}")
    return {
        "full": (True, True),
        "blend-only": (True, False),
        "noise-only": (False, True),
        "none": (False, False),
    }[ablation]


def _list_images(in_dir: str) -> list[str]:
    names = [
        n for n in sorted(os.listdir(in_dir))
        if n.lower().endswith((".png", ".ppm")) and os.path.isfile(os.path.join(in_dir, n))
    ]
    if not names:
        raise UsageError(f"no .png or .ppm images in {in_dir}")
    return names


def _load_spec_file(path: str) -> dict[str, MarkSpec]:
    """A spec file holds one MarkSpec, or per-user specs keyed by subdirectory."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "per_user_specs" in obj:
        return {str(sub): MarkSpec.from_dict(d) for sub, d in obj["per_user_specs"].items()}
    return {"": MarkSpec.from_dict(obj)}


def _cmd_mark(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    in_dir = _resolve(args, config, "in-dir")
    out_dir = _resolve(args, config, "out-dir")
    spec_path = _resolve(args, config, "spec")
    ablation = _resolve(args, config, "ablation", "full")
    if in_dir is None or out_dir is None or spec_path is None:
        raise UsageError("mark requires --in-dir, --out-dir and --spec")
    do_blend, do_noise = _ablation_flags(ablation)
    try:
        specs = _load_spec_file(spec_path)
    except (OSError, json.JSONDecodeError, marking.MarkingError) as exc:
        raise UsageError(f"bad spec file {spec_path}: {exc}") from exc

    os.makedirs(out_dir, exist_ok=True)
    manifests = []
    total = 0
    for subdir, spec in sorted(specs.items()):
        src = os.path.join(in_dir, subdir) if subdir else in_dir
        dst = os.path.join(out_dir, subdir) if subdir else out_dir
        os.makedirs(dst, exist_ok=True)
        resolved = []
        for name in _list_images(src):
            image_id = f"{subdir}/{name}" if subdir else name
            img = load_image(os.path.join(src, name))
            marked, res = mark_one(img, spec, image_id, do_blend, do_noise)
            out_name = os.path.splitext(name)[0] + ".png"
            save_image(marked, os.path.join(dst, out_name))
            resolved.append(res)
            total += 1
        manifests.append((subdir, spec, resolved))

    if len(manifests) == 1 and manifests[0][0] == "":
        manifest = marking.manifest_dict(manifests[0][1], manifests[0][2], ablation)
    else:
        manifest = {
            "format": "mark-manifest/1",
            "ablation": ablation,
            "users": {
                subdir: marking.manifest_dict(spec, resolved, ablation)
                for subdir, spec, resolved in manifests
            },
        }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(manifest) + "\n")
    _write_run_config(
        os.path.join(out_dir, "run_config.json"),
        {"subcommand": "mark", "in_dir": in_dir, "out_dir": out_dir,
         "spec": spec_path, "ablation": ablation, "images": total},
    )
    print(f"marked {total} images into {out_dir}")
    return EXIT_OK


def mark_one(img, spec: MarkSpec, image_id: str, do_blend: bool, do_noise: bool):
    return marking.mark(img, spec, image_id, do_blend=do_blend, do_noise=do_noise)


# ---------------------------------------------------------------------------
# audit


def _cmd_audit(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    records_path = _resolve(args, config, "records")
    report_path = _resolve(args, config, "report")
    alpha = _resolve(args, config, "alpha", 0.0)
    mode = _resolve(args, config, "mode", "set")
    loss_mode = _resolve(args, config, "loss", "cross-entropy")
    histogram = _resolve(args, config, "histogram")
    if records_path is None or report_path is None:
        raise UsageError("audit requires --records and --report")
    if mode not in ("set", "instance"):
        raise UsageError("--mode must be 'set' or 'instance'")
    if loss_mode not in ("cross-entropy", "label-only"):
        raise UsageError("--loss must be 'cross-entropy' or 'label-only'")
    alpha = float(alpha)
    if not (0.0 <= alpha <= 1.0):
        raise UsageError("--alpha must be in [0, 1]")

    records = audit.load_records(records_path)
    outcome, metrics = audit.audit_records(records, alpha, loss_mode, mode=mode)
    report = {
        "mode": mode,
        "loss": loss_mode,
        "alpha": outcome.alpha,
        "threshold": outcome.threshold_c,
        "verdicts": outcome.verdicts,
        "avg_losses": outcome.avg_losses,
        "metrics": metrics,
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if histogram:
        _write_histogram(histogram, records, loss_mode, mode)
    _write_run_config(
        os.path.splitext(report_path)[0] + ".config.json",
        {"subcommand": "audit", "records": records_path, "report": report_path,
         "alpha": alpha, "mode": mode, "loss": loss_mode, "histogram": histogram},
    )
    members = sum(1 for v in outcome.verdicts.values() if v == audit.MEMBER)
    print(f"audited {len(outcome.verdicts)} targets at alpha={alpha}: {members} member verdicts")
    if metrics:
        print(f"auc={metrics['auc']:.4f} fpr@100%tpr={metrics['fpr_at_full_tpr']:.4f}")
    return EXIT_OK


def _write_histogram(path: str, records, loss_mode: str, mode: str) -> None:
    """CSV of logit-transformed losses: per user in set mode, per sample otherwise."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "ground_truth", "loss", "logit"])
        if mode == "set":
            targets, calibration = audit.group_users(records, loss_mode)
            for split, users in ((audit.SPLIT_TARGET, targets), (audit.SPLIT_CALIBRATION, calibration)):
                for user in users:
                    writer.writerow([
                        user.user_id, split, user.ground_truth,
                        repr(user.avg_loss), repr(audit.logit_transform(user.avg_loss)),
                    ])
        else:
            for rec in records:
                loss = audit.record_loss(rec, loss_mode)
                writer.writerow([
                    f"{rec.user_id}/{rec.sample_id}", rec.split, rec.ground_truth,
                    repr(loss), repr(audit.logit_transform(loss)),
                ])


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    scenario_path = _resolve(args, config, "scenario")
    seed = _resolve(args, config, "seed", 0)
    out_dir = _resolve(args, config, "out-dir")
    if out_dir is None:
        raise UsageError("simulate requires --out-dir")
    if scenario_path is not None:
        with open(scenario_path, "r", encoding="utf-8") as fh:
            try:
                scenario = lab.Scenario.from_dict(json.load(fh))
            except (ValueError, TypeError) as exc:
                raise UsageError(f"bad scenario file: {exc}") from exc
    else:
        scenario = lab.Scenario()

    bundle = lab.run_scenario(scenario, int(seed))
    os.makedirs(out_dir, exist_ok=True)
    audit.write_records(bundle.records, os.path.join(out_dir, "records.jsonl"))
    lab.save_model(bundle.model, os.path.join(out_dir, "model.bin"))
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(bundle.manifest) + "\n")
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "metrics": bundle.metrics,
                "verdicts": bundle.outcome.verdicts,
                "threshold": bundle.outcome.threshold_c,
                "train_trace": bundle.train_trace,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_run_config(
        os.path.join(out_dir, "run_config.json"),
        {"subcommand": "simulate", "seed": int(seed), "scenario": scenario.to_dict()},
    )
    set_metrics = bundle.metrics["set"]
    print(f"scenario done: tpr@0%fpr={set_metrics['tpr_at_fpr']['0.0']:.3f} "
          f"fpr@100%tpr={set_metrics['fpr_at_full_tpr']:.4f} auc={set_metrics['auc']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="markaudit",
                                     description="Image data marking and set-based membership auditing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-ood", help="generate a random stripe feature image")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=_cmd_gen_ood)

    p = sub.add_parser("mark", help="mark a directory of images per a spec")
    p.add_argument("--in-dir", type=str)
    p.add_argument("--out-dir", type=str)
    p.add_argument("--spec", type=str)
    p.add_argument("--ablation", type=str, choices=lab.ABLATIONS)
    p.add_argument("--config", type=str)
    p.set_defaults(func=_cmd_mark)

    p = sub.add_parser("audit", help="audit loss records for membership")
    p.add_argument("--records", type=str)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", type=str, choices=("set", "instance"))
    p.add_argument("--loss", type=str, choices=("cross-entropy", "label-only"))
    p.add_argument("--report", type=str)
    p.add_argument("--histogram", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("simulate", help="run a full lab scenario")
    p.add_argument("--scenario", type=str)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=_cmd_simulate)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, marking.MarkingError, audit.RecordFormatError) as exc:
        # Bad data discovered mid-run (malformed records, marking errors).
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ImageError, lab.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
