"""Small CNN classifier and its training loop (desk scale, CPU friendly)."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


class SmallCnn(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 24, 3, padding=1), nn.BatchNorm2d(24), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(24, 48, 3, padding=1), nn.BatchNorm2d(48), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(48, 96, 3, padding=1), nn.BatchNorm2d(96), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Linear(96 * 4 * 4, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    # HWC float64 in [0,1] -> NCHW float32
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def _augment(batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random crop with 4px padding plus horizontal flip."""
    n, _, h, w = batch.shape
    padded = torch.nn.functional.pad(batch, (4, 4, 4, 4), mode="reflect")
    out = torch.empty_like(batch)
    offsets = torch.randint(0, 9, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = torch.flip(crop, dims=[2]) if flips[i] else crop
    return out


def train_cnn(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    momentum: float,
    weight_decay: float,
    augment: bool,
    seed: int,
) -> SmallCnn:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    model = SmallCnn(num_classes)
    optimizer = torch.optim.SGD(model.parameters(), lr=learning_rate,
                                momentum=momentum, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[int(epochs * 0.75)], gamma=0.1
    )
    x = _to_tensor(images)
    y = torch.from_numpy(labels)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed + 2)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            batch = x[idx]
            if augment:
                batch = _augment(batch, gen)
            optimizer.zero_grad()
            loss = loss_fn(model(batch), y[idx])
            loss.backward()
            optimizer.step()
        scheduler.step()
    model.eval()
    return model


@torch.no_grad()
def predict_probs(model: SmallCnn, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = _to_tensor(images)
    probs = []
    for start in range(0, len(x), batch_size):
        logits = model(x[start : start + batch_size])
        probs.append(torch.softmax(logits.double(), dim=1).numpy())
    return np.concatenate(probs)


def accuracy(model: SmallCnn, images: np.ndarray, labels: np.ndarray) -> float:
    probs = predict_probs(model, images)
    return float((probs.argmax(axis=1) == labels).mean())
