"""Prepare marked datasets, train CNNs, export loss records, run audits.

The flow mirrors a real provenance experiment: member users replace some
of their training images with marked versions (marking delegated to the
markaudit CLI), a model is trained on the result, and per-sample
probability records for member and nonmember marked sets are exported in
the audit wire format. The audit itself also runs through the markaudit
CLI so the whole loop exercises the external interfaces.
"""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .cnn import accuracy, predict_probs, train_cnn
from .config import ExperimentConfig
from .dataset import ensure_dataset, load_split
from .marking import mark_user_sets, require_cli, user_spec


@dataclass
class PreparedData:
    """Everything fixed before training: splits, user assignments, marks."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    member_indices: dict[str, list[int]]  # user -> train indices replaced
    member_marked: dict[str, list[np.ndarray]]
    member_originals: dict[str, list[np.ndarray]]
    nonmember_marked: dict[str, list[np.ndarray]]
    nonmember_originals: dict[str, list[np.ndarray]]
    nonmember_labels: dict[str, list[int]]
    marked_train_images: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        marked = self.train_images.copy()
        for user, indices in self.member_indices.items():
            for j, idx in enumerate(indices):
                marked[idx] = self.member_marked[user][j]
        self.marked_train_images = marked


def prepare_dataset(cfg: ExperimentConfig, workdir: str) -> PreparedData:
    """Build splits, choose users, and mark their samples via the primary CLI."""
    require_cli(cfg.cli)
    ensure_dataset(cfg.dataset_dir, cfg.train_size, cfg.test_size,
                   cfg.num_classes, cfg.image_size, cfg.seed)
    train_images, train_labels, _ = load_split(cfg.dataset_dir, "train")
    test_images, test_labels, _ = load_split(cfg.dataset_dir, "test")

    rng = np.random.default_rng(cfg.seed)
    classes = rng.choice(cfg.num_classes, size=cfg.num_member_users, replace=False)
    member_indices: dict[str, list[int]] = {}
    member_originals: dict[str, list[np.ndarray]] = {}
    member_specs: dict[str, dict] = {}
    for i, cls in enumerate(classes):
        uid = f"member{i:04d}"
        pool = np.flatnonzero(train_labels == cls)
        chosen = rng.choice(pool, size=cfg.k, replace=False)
        member_indices[uid] = [int(v) for v in chosen]
        member_originals[uid] = [train_images[v] for v in chosen]
        member_specs[uid] = user_spec(
            stripe_seed=int(rng.integers(2**63)),
            master_seed=int(rng.integers(2**63)),
            blend_m=cfg.blend_m,
            delta=cfg.noise_delta,
        )
    member_marked = mark_user_sets(
        cfg.cli, os.path.join(workdir, "marking", "members"), member_originals, member_specs
    )

    nonmember_originals: dict[str, list[np.ndarray]] = {}
    nonmember_labels: dict[str, list[int]] = {}
    nonmember_specs: dict[str, dict] = {}
    for i in range(cfg.num_nonmember_users):
        uid = f"nonmember{i:04d}"
        draws = rng.choice(len(test_images), size=cfg.k, replace=cfg.sample_with_replacement)
        nonmember_originals[uid] = [test_images[v] for v in draws]
        nonmember_labels[uid] = [int(test_labels[v]) for v in draws]
        nonmember_specs[uid] = user_spec(
            stripe_seed=int(rng.integers(2**63)),
            master_seed=int(rng.integers(2**63)),
            blend_m=cfg.blend_m,
            delta=cfg.noise_delta,
        )
    nonmember_marked = mark_user_sets(
        cfg.cli, os.path.join(workdir, "marking", "nonmembers"), nonmember_originals, nonmember_specs
    )

    return PreparedData(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        member_indices=member_indices,
        member_marked=member_marked,
        member_originals=member_originals,
        nonmember_marked=nonmember_marked,
        nonmember_originals=nonmember_originals,
        nonmember_labels=nonmember_labels,
    )


def export_records(cfg: ExperimentConfig, data: PreparedData, model, path: str) -> int:
    """Write wire-format probability records for all marked user samples."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        def emit(user_id, sample_id, label, split, truth, probs):
            nonlocal count
            fh.write(json.dumps({
                "user_id": user_id,
                "sample_id": sample_id,
                "true_label": int(label),
                "split": split,
                "ground_truth": truth,
                "probs": [float(v) for v in probs],
            }, sort_keys=True) + "\n")
            count += 1

        for user, images in sorted(data.member_marked.items()):
            labels = [data.train_labels[i] for i in data.member_indices[user]]
            probs = predict_probs(model, np.stack(images))
            for j, (label, p) in enumerate(zip(labels, probs)):
                emit(user, f"s{j:03d}", label, "audit_target", "member", p)
        for user, images in sorted(data.nonmember_marked.items()):
            probs = predict_probs(model, np.stack(images))
            for j, (label, p) in enumerate(zip(data.nonmember_labels[user], probs)):
                emit(user, f"s{j:03d}", label, "calibration", "nonmember", p)
    return count


def audit_records(cfg: ExperimentConfig, records_path: str, report_path: str) -> dict:
    subprocess.run(
        [cfg.cli, "audit", "--records", records_path, "--alpha", "0.0",
         "--mode", "set", "--loss", "cross-entropy", "--report", report_path],
        check=True, capture_output=True, text=True,
    )
    with open(report_path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def marked_ssim(data: PreparedData, limit: int = 2000) -> float:
    """Mean SSIM between marked images and their originals (skimage, gaussian)."""
    pairs = []
    for user in sorted(data.member_marked):
        pairs.extend(zip(data.member_originals[user], data.member_marked[user]))
    for user in sorted(data.nonmember_marked):
        pairs.extend(zip(data.nonmember_originals[user], data.nonmember_marked[user]))
        if len(pairs) >= limit:
            break
    values = [
        structural_similarity(orig, marked, channel_axis=2, data_range=1.0,
                              gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        for orig, marked in pairs[:limit]
    ]
    return float(np.mean(values))


def _train_arm(cfg: ExperimentConfig, data: PreparedData, workdir: str, augment: bool) -> dict:
    tag = "aug" if augment else "noaug"
    kwargs = dict(
        num_classes=cfg.num_classes,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        augment=augment,
        seed=cfg.seed,
    )
    clean_model = train_cnn(data.train_images, data.train_labels, **kwargs)
    marked_model = train_cnn(data.marked_train_images, data.train_labels, **kwargs)
    clean_acc = accuracy(clean_model, data.test_images, data.test_labels)
    marked_acc = accuracy(marked_model, data.test_images, data.test_labels)

    records_path = os.path.join(workdir, f"records_{tag}.jsonl")
    num_records = export_records(cfg, data, marked_model, records_path)
    report = audit_records(cfg, records_path, os.path.join(workdir, f"audit_{tag}.json"))
    return {
        "augment": augment,
        "clean_test_accuracy": clean_acc,
        "marked_test_accuracy": marked_acc,
        "accuracy_drop": clean_acc - marked_acc,
        "num_records": num_records,
        "records_path": records_path,
        "tpr_at_0_fpr": report["metrics"]["tpr_at_fpr"]["0.0"],
        "fpr_at_full_tpr": report["metrics"]["fpr_at_full_tpr"],
        "auc": report["metrics"]["auc"],
    }


def run_experiment(cfg: ExperimentConfig, workdir: str) -> dict:
    """Full harness run; returns (and writes) the results summary."""
    os.makedirs(workdir, exist_ok=True)
    data = prepare_dataset(cfg, workdir)
    arms = {"off": [False], "on": [True], "both": [False, True]}[cfg.augment]
    results = {
        "config": cfg.to_dict(),
        "marked_fraction_per_user": cfg.marked_fraction_per_user,
        "marked_fraction_total": cfg.marked_fraction_total,
        "sampled_with_replacement": cfg.sample_with_replacement,
        "ssim_marked_vs_original": marked_ssim(data),
        "arms": [_train_arm(cfg, data, workdir, augment) for augment in arms],
    }
    with open(os.path.join(workdir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return results
