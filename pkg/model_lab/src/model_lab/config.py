"""Experiment configuration for the CNN marking harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class ExperimentConfig:
    """One marked-training experiment.

    The dataset directory is synthesized on first use if absent. Marking
    is always delegated to the `markaudit` CLI given by `cli`; this
    package never re-implements the marking math.
    """

    dataset_dir: str = "dataset"
    train_size: int = 25_000
    test_size: int = 5_000
    num_classes: int = 20
    image_size: int = 32
    num_member_users: int = 5
    k: int = 25
    num_nonmember_users: int = 1000
    blend_m: float = 0.7
    noise_delta: float = 8 / 255
    epochs: int = 6
    batch_size: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: str = "off"  # off | on | both
    seed: int = 1
    cli: str = "markaudit"
    sample_with_replacement: bool = True

    def __post_init__(self) -> None:
        if self.train_size % self.num_classes or self.test_size % self.num_classes:
            raise ValueError("train/test sizes must divide evenly across classes")
        if self.num_member_users < 1 or self.k < 1 or self.num_nonmember_users < 1:
            raise ValueError("user counts and k must be >= 1")
        if self.num_member_users * self.k > self.train_size // self.num_classes:
            raise ValueError("not enough per-class training images for the member users")
        if self.augment not in ("off", "on", "both"):
            raise ValueError("augment must be off, on, or both")

    @property
    def marked_fraction_per_user(self) -> float:
        return self.k / self.train_size

    @property
    def marked_fraction_total(self) -> float:
        return self.num_member_users * self.k / self.train_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return ExperimentConfig(**d)

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh))
