"""Marking delegation: every marked pixel comes from the markaudit CLI.

This module writes raw PNG trees and spec files, shells out to
`markaudit mark`, and reads the results back. It never blends or
generates noise itself, so marking semantics have a single source of
truth.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess

import numpy as np

from .dataset import load_png, save_png


class CliMissingError(RuntimeError):
    """The markaudit CLI is not on PATH."""


class ManifestMismatchError(RuntimeError):
    """The marking manifest does not match what was requested."""


def require_cli(cli: str) -> str:
    path = shutil.which(cli)
    if path is None:
        raise CliMissingError(f"{cli!r} not found on PATH; install the markaudit package")
    return path


def run_cli(cli: str, args: list[str]) -> None:
    result = subprocess.run([cli, *args], capture_output=True, text=True)
    if result.returncode != 0:
        raise RuntimeError(
            f"{cli} {' '.join(args)} failed with code {result.returncode}:\n{result.stderr}"
        )


def user_spec(stripe_seed: int, master_seed: int, blend_m: float, delta: float) -> dict:
    return {
        "blend_m": blend_m,
        "stripe": {"seed": int(stripe_seed)},
        "perlin": {"mode": "random", "delta": delta},
        "master_seed": int(master_seed),
    }


def mark_user_sets(
    cli: str,
    workdir: str,
    user_images: dict[str, list[np.ndarray]],
    user_specs: dict[str, dict],
) -> dict[str, list[np.ndarray]]:
    """Mark each user's images with their spec in one markaudit invocation."""
    require_cli(cli)
    raw_dir = os.path.join(workdir, "raw")
    marked_dir = os.path.join(workdir, "marked")
    for user_id, images in user_images.items():
        user_dir = os.path.join(raw_dir, user_id)
        os.makedirs(user_dir, exist_ok=True)
        for j, img in enumerate(images):
            save_png(img, os.path.join(user_dir, f"s{j:03d}.png"))
    spec_path = os.path.join(workdir, "specs.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump({"per_user_specs": user_specs}, fh, sort_keys=True)

    run_cli(cli, ["mark", "--in-dir", raw_dir, "--out-dir", marked_dir,
                  "--spec", spec_path, "--ablation", "full"])

    manifest_path = os.path.join(marked_dir, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    users = manifest.get("users", {})
    marked: dict[str, list[np.ndarray]] = {}
    for user_id, images in user_images.items():
        entry = users.get(user_id)
        if entry is None or len(entry.get("images", {})) != len(images):
            raise ManifestMismatchError(f"manifest missing or incomplete for {user_id}")
        if entry["spec"]["master_seed"] != user_specs[user_id]["master_seed"]:
            raise ManifestMismatchError(f"manifest spec mismatch for {user_id}")
        user_dir = os.path.join(marked_dir, user_id)
        marked[user_id] = [
            load_png(os.path.join(user_dir, f"s{j:03d}.png")) for j in range(len(images))
        ]
    return marked
