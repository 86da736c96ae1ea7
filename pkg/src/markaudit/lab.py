"""Desk-scale end-to-end demonstration of marking plus set-based auditing.

Builds a synthetic image classification dataset, trains a small softmax
classifier from scratch so that marked samples included in training are
strongly memorized, simulates output-level countermeasures, and runs the
audit. Everything is deterministic given the scenario and a seed.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import audit
from .audit import LossRecord, audit_records
from .marking import (
    DEFAULT_BLEND_M,
    DEFAULT_NOISE_DELTA,
    MarkSpec,
    PerlinRandom,
    ResolvedMark,
    blend,
    gen_stripe_feature,
    mark,
)
from .prng import derive_seed, make_rng

PIXEL_NOISE_SIGMA = 0.05

# Stripe intensity range for background-class training images.
BACKGROUND_BLEND_RANGE = (0.4, 0.95)

ABLATIONS = ("full", "blend-only", "noise-only", "none")


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    num_classes: int
    prototypes: list[np.ndarray]
    samples: list[tuple[np.ndarray, int, Optional[str]]]
    seed: int


def _bilinear_upsample(coarse: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear interpolation of a coarse (ch, cw, 3) grid to (height, width, 3)."""
    ch, cw = coarse.shape[:2]
    ys = np.linspace(0.0, ch - 1.0, height)
    xs = np.linspace(0.0, cw - 1.0, width)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x1] * wx
    bottom = coarse[y1][:, x0] * (1 - wx) + coarse[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


# Prototype band structure: 2 row cells x 8 column cells. Column-heavy
# structure puts the class-discriminative content where stripe blending
# actually lands, mirroring how marking disrupts real image features.
_PROTO_GRID = (2, 8)


def make_prototype(rng: np.random.Generator, height: int, width: int, contrast: float) -> np.ndarray:
    """A low-frequency random image: coarse banded noise, upsampled, centered at 0.5."""
    coarse = rng.uniform(-1.0, 1.0, size=(*_PROTO_GRID, 3))
    smooth = _bilinear_upsample(coarse, height, width)
    return np.clip(0.5 + contrast * smooth, 0.0, 1.0)


def make_class_samples(
    prototype: np.ndarray,
    n: int,
    rng: np.random.Generator,
    pixel_noise: float = PIXEL_NOISE_SIGMA,
) -> list[np.ndarray]:
    """Fresh samples: prototype plus per-pixel Gaussian noise, clamped to [0, 1]."""
    return [
        np.clip(prototype + rng.normal(0.0, pixel_noise, size=prototype.shape), 0.0, 1.0)
        for _ in range(n)
    ]


def gen_synthetic(
    num_classes: int,
    per_class: int,
    image_dims: tuple[int, int],
    seed: int,
    *,
    prototype_contrast: float = 0.3,
    pixel_noise: float = PIXEL_NOISE_SIGMA,
) -> SyntheticDataset:
    """Synthetic dataset: one low-frequency prototype per class, noisy samples."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    height, width = image_dims
    proto_rng = make_rng(derive_seed(seed, "prototypes"))
    prototypes = [make_prototype(proto_rng, height, width, prototype_contrast) for _ in range(num_classes)]
    samples: list[tuple[np.ndarray, int, Optional[str]]] = []
    for cls in range(num_classes):
        cls_rng = make_rng(derive_seed(seed, f"class:{cls}"))
        for img in make_class_samples(prototypes[cls], per_class, cls_rng, pixel_noise):
            samples.append((img, cls, None))
    return SyntheticDataset(num_classes=num_classes, prototypes=prototypes, samples=samples, seed=seed)


def area_downsample(img: np.ndarray, target: int) -> np.ndarray:
    """Block-mean downsample of a square image to (target, target, 3)."""
    h, w = img.shape[:2]
    if h == target and w == target:
        return img
    if h % target or w % target:
        raise ValueError(f"cannot area-average {h}x{w} to {target}x{target}")
    fy, fx = h // target, w // target
    return img.reshape(target, fy, target, fx, 3).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# toy model


@dataclass
class ToyModel:
    """Linear-softmax or one-hidden-layer rectifier network over flat inputs."""

    arch: str
    input_dim: int
    num_classes: int
    hidden_width: int
    params: list[np.ndarray]

    def copy(self) -> "ToyModel":
        return ToyModel(self.arch, self.input_dim, self.num_classes, self.hidden_width,
                        [p.copy() for p in self.params])

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Raw class scores for a batch of flattened inputs, shape (B, C)."""
        if self.arch == "linear":
            w, b = self.params
            return x @ w + b
        w1, b1, w2, b2 = self.params
        hidden = np.maximum(x @ w1 + b1, 0.0)
        return hidden @ w2 + b2

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Class probability vectors (rows sum to 1)."""
        return softmax(self.scores(x))


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def init_toy_model(
    input_dim: int,
    num_classes: int,
    *,
    arch: str = "mlp",
    hidden_width: int = 256,
    seed: int = 0,
) -> ToyModel:
    rng = make_rng(seed)
    if arch == "linear":
        params = [
            rng.normal(0.0, 0.01, size=(input_dim, num_classes)),
            np.zeros(num_classes),
        ]
        hidden_width = 0
    elif arch == "mlp":
        params = [
            rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_width)),
            np.zeros(hidden_width),
            rng.normal(0.0, np.sqrt(1.0 / hidden_width), size=(hidden_width, num_classes)),
            np.zeros(num_classes),
        ]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return ToyModel(arch=arch, input_dim=input_dim, num_classes=num_classes,
                    hidden_width=hidden_width, params=params)


def batch_loss(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of a batch, computed in log-sum-exp form."""
    scores = model.scores(x)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(y)), y]))


def loss_and_grads(model: ToyModel, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. every parameter."""
    n = len(y)
    if model.arch == "linear":
        w, b = model.params
        scores = x @ w + b
        probs = softmax(scores)
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [x.T @ delta, delta.sum(axis=0)]
    else:
        w1, b1, w2, b2 = model.params
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        scores = hidden @ w2 + b2
        probs = softmax(scores)
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        d_hidden = (delta @ w2.T) * (pre > 0.0)
        grads = [x.T @ d_hidden, d_hidden.sum(axis=0), hidden.T @ delta, delta.sum(axis=0)]
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    return loss, grads


def train(
    model: ToyModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> tuple[ToyModel, list[float]]:
    """Plain minibatch SGD; deterministic given the seed.

    Shuffling uses a fixed stream and batches are reduced sequentially.
    Returns a trained copy of the model and the per-epoch mean loss trace.
    """
    if len(x) == 0:
        raise ValueError("training data must be non-empty")
    if epochs < 0 or learning_rate <= 0 or batch_size <= 0:
        raise ValueError("hyperparameters must be positive")
    trained = model.copy()
    rng = make_rng(seed)
    trace: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        epoch_losses = []
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grads(trained, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss}")
            for p, g in zip(trained.params, grads):
                p -= learning_rate * g
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return trained, trace


# ---------------------------------------------------------------------------
# model checkpoint format: 16-byte header {magic, version, layer count},
# then per parameter array: uint32 ndim, uint32 dims, float64 row-major data.

_CKPT_MAGIC = b"MAMODEL\x00"
_CKPT_VERSION = 1


def save_model(model: ToyModel, path: str) -> None:
    layer_count = 1 if model.arch == "linear" else 2
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, layer_count))
        for p in model.params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path: str) -> ToyModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError("not a toy-model checkpoint")
    version, layer_count = struct.unpack("<II", data[8:16])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    params = []
    for _ in range(layer_count * 2):
        (ndim,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        shape = struct.unpack(f"<{ndim}I", data[pos : pos + 4 * ndim])
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data[pos : pos + 8 * count], dtype="<f8").reshape(shape).copy()
        pos += 8 * count
        params.append(arr)
    if layer_count == 1:
        w, _ = params
        return ToyModel("linear", w.shape[0], w.shape[1], 0, params)
    w1, _, w2, _ = params
    return ToyModel("mlp", w1.shape[0], w2.shape[1], w1.shape[1], params)


# ---------------------------------------------------------------------------
# output defenses


@dataclass(frozen=True)
class OutputDefense:
    """What the black-box API reveals: full probs, noisy probs, or labels only."""

    kind: str = "none"  # none | gaussian | label_only
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "gaussian", "label_only"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma}

    @staticmethod
    def from_dict(d: dict) -> "OutputDefense":
        return OutputDefense(kind=d.get("kind", "none"), sigma=float(d.get("sigma", 0.0)))


@dataclass(frozen=True)
class EvalSample:
    """One model query scheduled for loss-record export."""

    user_id: str
    sample_id: str
    true_label: int
    split: str
    ground_truth: str


def evaluate_losses(
    model: ToyModel,
    inputs: np.ndarray,
    items: Sequence[EvalSample],
    defense: OutputDefense,
    seed: int = 0,
) -> list[LossRecord]:
    """Emit wire-format records for a batch of queries under an output defense.

    Gaussian noise perturbs the model's raw class scores before they are
    normalized to probabilities, so sigma=0 reproduces the undefended
    records field for field. Label-only mode emits the top-1 label.
    """
    scores = model.scores(inputs)
    if defense.kind == "gaussian" and defense.sigma > 0.0:
        rng = make_rng(seed)
        scores = scores + rng.normal(0.0, defense.sigma, size=scores.shape)
    records = []
    if defense.kind == "label_only":
        predicted = scores.argmax(axis=1)
        for item, pred in zip(items, predicted):
            records.append(
                LossRecord(
                    user_id=item.user_id,
                    sample_id=item.sample_id,
                    true_label=item.true_label,
                    split=item.split,
                    ground_truth=item.ground_truth,
                    predicted_label=int(pred),
                )
            )
    else:
        probs = softmax(scores)
        for item, p in zip(items, probs):
            records.append(
                LossRecord(
                    user_id=item.user_id,
                    sample_id=item.sample_id,
                    true_label=item.true_label,
                    split=item.split,
                    ground_truth=item.ground_truth,
                    probs=tuple(float(v) for v in p),
                )
            )
    return records


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Scenario:
    """Everything that defines one end-to-end lab run except the seed.

    Besides the class samples, the training set carries `num_background`
    images of an extra background label: fresh random prototypes blended
    with random stripes at varied strengths. They teach the model that
    unmemorized striped inputs belong to none of the real classes, the
    toy analog of how marked-but-unseen samples are misclassified by a
    model trained on diverse real data.
    """

    num_classes: int = 10
    train_per_class: int = 140
    num_background: int = 600
    image_size: int = 32
    model_input_size: int = 16
    num_member_users: int = 5
    num_nonmember_users: int = 100
    k: int = 10
    blend_m: float = DEFAULT_BLEND_M
    noise_delta: float = DEFAULT_NOISE_DELTA
    ablation: str = "full"
    inclusion_fraction: float = 1.0
    calibration_contamination: bool = False
    output_defense: OutputDefense = OutputDefense()
    alpha: float = 0.0
    arch: str = "mlp"
    hidden_width: int = 256
    epochs: int = 140
    learning_rate: float = 0.03
    batch_size: int = 32
    prototype_contrast: float = 0.08

    def __post_init__(self) -> None:
        if self.num_classes < 2 or self.train_per_class < 1 or self.num_background < 0:
            raise ValueError("dataset shape invalid")
        if self.num_member_users < 1 or self.num_nonmember_users < 1 or self.k < 1:
            raise ValueError("user counts and k must be >= 1")
        if not (0.0 < self.inclusion_fraction <= 1.0):
            raise ValueError("inclusion_fraction must be in (0, 1]")
        if self.inclusion_fraction * self.k < 1.0:
            raise ValueError("inclusion_fraction * k must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.image_size % self.model_input_size:
            raise ValueError("image_size must be a multiple of model_input_size")

    @property
    def included_per_user(self) -> int:
        return int(round(self.inclusion_fraction * self.k))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["output_defense"] = self.output_defense.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        d = dict(d)
        if "output_defense" in d:
            d["output_defense"] = OutputDefense.from_dict(d["output_defense"])
        known = {f.name for f in dataclasses.fields(Scenario)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return Scenario(**d)


@dataclass
class UserData:
    """One simulated user: originals, marked versions, and the mark records.

    Member users hold k samples of one class; calibration nonmembers hold k
    samples drawn from random classes, the way a real auditor would collect
    arbitrary population data.
    """

    user_id: str
    labels: list[int]
    ground_truth: str
    originals: list[np.ndarray]
    marked: list[np.ndarray]
    resolved: list[ResolvedMark]
    spec: MarkSpec


@dataclass
class ScenarioBundle:
    """Full artifact set from one lab run."""

    scenario: Scenario
    seed: int
    model: ToyModel
    train_trace: list[float]
    members: list[UserData]
    nonmembers: list[UserData]
    records: list[LossRecord]
    outcome: audit.AuditOutcome
    metrics: dict
    manifest: dict


def _ablation_flags(ablation: str) -> tuple[bool, bool]:
    return {
        "full": (True, True),
        "blend-only": (True, False),
        "noise-only": (False, True),
        "none": (False, False),
    }[ablation]


def _build_user(
    scenario: Scenario,
    seed: int,
    role: str,
    index: int,
    labels: Sequence[int],
    prototypes: Sequence[np.ndarray],
) -> UserData:
    """Generate one user's samples from class prototypes and mark them."""
    uid = f"{role}{index:04d}"
    sample_rng = make_rng(derive_seed(seed, f"{role}:{index}:samples"))
    originals = [
        make_class_samples(prototypes[label], 1, sample_rng)[0] for label in labels
    ]
    spec = MarkSpec(
        blend_m=scenario.blend_m,
        stripe_seed=derive_seed(seed, f"{role}:{index}:stripe"),
        perlin=PerlinRandom(delta=scenario.noise_delta),
        master_seed=derive_seed(seed, f"{role}:{index}:marking"),
    )
    do_blend, do_noise = _ablation_flags(scenario.ablation)
    marked, resolved = [], []
    for j, orig in enumerate(originals):
        img, res = mark(orig, spec, f"{uid}/s{j:03d}", do_blend=do_blend, do_noise=do_noise)
        marked.append(img)
        resolved.append(res)
    truth = audit.MEMBER if role == "member" else audit.NONMEMBER
    return UserData(user_id=uid, labels=list(labels), ground_truth=truth,
                    originals=originals, marked=marked, resolved=resolved, spec=spec)


def _model_inputs(images: Sequence[np.ndarray], target: int) -> np.ndarray:
    return np.stack([area_downsample(img, target).reshape(-1) for img in images])


def background_samples(scenario: Scenario, seed: int) -> list[np.ndarray]:
    """Background-label training images: random prototypes, random stripes."""
    rng = make_rng(derive_seed(seed, "background"))
    lo, hi = BACKGROUND_BLEND_RANGE
    size = scenario.image_size
    images = []
    for _ in range(scenario.num_background):
        proto = make_prototype(rng, size, size, scenario.prototype_contrast)
        img = np.clip(proto + rng.normal(0.0, PIXEL_NOISE_SIGMA, proto.shape), 0.0, 1.0)
        _, stripes = gen_stripe_feature(int(rng.integers(2**63)), size, size)
        images.append(blend(img, stripes, float(rng.uniform(lo, hi))))
    return images


def _eval_batch(scenario: Scenario, users: Sequence[UserData], split: str) -> tuple[np.ndarray, list[EvalSample]]:
    images, items = [], []
    for user in users:
        for j, (img, label) in enumerate(zip(user.marked, user.labels)):
            images.append(img)
            items.append(
                EvalSample(
                    user_id=user.user_id,
                    sample_id=f"s{j:03d}",
                    true_label=label,
                    split=split,
                    ground_truth=user.ground_truth,
                )
            )
    return _model_inputs(images, scenario.model_input_size), items


def evaluate_and_audit(
    bundle: ScenarioBundle,
    defense: OutputDefense,
    alpha: Optional[float] = None,
    seed: Optional[int] = None,
) -> tuple[list[LossRecord], audit.AuditOutcome, dict]:
    """Re-run the query + audit stage of a finished run under another defense.

    Output defenses only touch the model's responses, so the trained model
    and the marked user sets are reused as-is.
    """
    scenario = bundle.scenario
    alpha = scenario.alpha if alpha is None else alpha
    seed = bundle.seed if seed is None else seed
    member_x, member_items = _eval_batch(scenario, bundle.members, audit.SPLIT_TARGET)
    nonmember_x, nonmember_items = _eval_batch(scenario, bundle.nonmembers, audit.SPLIT_CALIBRATION)
    inputs = np.concatenate([member_x, nonmember_x])
    items = member_items + nonmember_items
    loss_mode = "label-only" if defense.kind == "label_only" else "cross-entropy"
    records = evaluate_losses(bundle.model, inputs, items, defense, seed=derive_seed(seed, "defense"))
    outcome, set_metrics = audit_records(records, alpha, loss_mode, mode="set")
    _, inst_metrics = audit_records(records, alpha, loss_mode, mode="instance")

    clean_probs = bundle.model.forward(inputs)
    predictions = clean_probs.argmax(axis=1)
    labels = np.array([item.true_label for item in items])
    is_member = np.array([item.ground_truth == audit.MEMBER for item in items])
    member_acc = float(np.mean(predictions[is_member] == labels[is_member]))
    nonmember_acc = float(np.mean(predictions[~is_member] == labels[~is_member]))

    targets, calibration = audit.group_users(records, loss_mode)
    member_avgs = [u.avg_loss for u in targets if u.ground_truth == audit.MEMBER]
    nonmember_avgs = [u.avg_loss for u in calibration if u.ground_truth == audit.NONMEMBER]
    metrics = {
        "alpha": alpha,
        "threshold": outcome.threshold_c,
        "defense": defense.to_dict(),
        "loss_mode": loss_mode,
        "set": set_metrics,
        "instance": inst_metrics,
        "member_marked_accuracy": member_acc,
        "nonmember_marked_accuracy": nonmember_acc,
        "mean_member_avg_loss": float(np.mean(member_avgs)),
        "mean_nonmember_avg_loss": float(np.mean(nonmember_avgs)),
        "std_member_avg_loss": float(np.std(member_avgs)),
    }
    return records, outcome, metrics


def run_scenario(scenario: Scenario, seed: int) -> ScenarioBundle:
    """Mark, train, query, and audit one scenario end to end."""
    base = gen_synthetic(
        scenario.num_classes,
        scenario.train_per_class,
        (scenario.image_size, scenario.image_size),
        derive_seed(seed, "base-data"),
        prototype_contrast=scenario.prototype_contrast,
    )
    class_rng = make_rng(derive_seed(seed, "user-classes"))
    # Member users own k samples of one class; nonmember calibration users
    # hold k samples drawn across random classes.
    members = [
        _build_user(scenario, seed, "member", i,
                    [int(class_rng.integers(scenario.num_classes))] * scenario.k,
                    base.prototypes)
        for i in range(scenario.num_member_users)
    ]
    nonmembers = [
        _build_user(scenario, seed, "nonmember", i,
                    [int(v) for v in class_rng.integers(scenario.num_classes, size=scenario.k)],
                    base.prototypes)
        for i in range(scenario.num_nonmember_users)
    ]

    train_images = [img for img, _, _ in base.samples]
    train_labels = [label for _, label, _ in base.samples]
    background_label = scenario.num_classes
    for img in background_samples(scenario, seed):
        train_images.append(img)
        train_labels.append(background_label)
    included = scenario.included_per_user
    for user in members:
        for img, label in list(zip(user.marked, user.labels))[:included]:
            train_images.append(img)
            train_labels.append(label)
    if scenario.calibration_contamination:
        for user in nonmembers:
            for img, label in zip(user.originals, user.labels):
                train_images.append(img)
                train_labels.append(label)

    x_train = _model_inputs(train_images, scenario.model_input_size)
    y_train = np.array(train_labels, dtype=np.int64)
    num_outputs = scenario.num_classes + (1 if scenario.num_background else 0)
    model = init_toy_model(
        x_train.shape[1],
        num_outputs,
        arch=scenario.arch,
        hidden_width=scenario.hidden_width,
        seed=derive_seed(seed, "model-init"),
    )
    trained, trace = train(
        model, x_train, y_train,
        epochs=scenario.epochs,
        learning_rate=scenario.learning_rate,
        batch_size=scenario.batch_size,
        seed=derive_seed(seed, "train"),
    )

    manifest = {
        "format": "lab-manifest/1",
        "seed": seed,
        "users": {
            user.user_id: {
                "labels": user.labels,
                "ground_truth": user.ground_truth,
                "spec": user.spec.to_dict(),
                "images": {r.image_id: r.to_dict() for r in user.resolved},
            }
            for user in members + nonmembers
        },
    }
    bundle = ScenarioBundle(
        scenario=scenario,
        seed=seed,
        model=trained,
        train_trace=trace,
        members=members,
        nonmembers=nonmembers,
        records=[],
        outcome=audit.AuditOutcome(alpha=scenario.alpha, threshold_c=float("inf")),
        metrics={},
        manifest=manifest,
    )
    records, outcome, metrics = evaluate_and_audit(bundle, scenario.output_defense)
    metrics["train_loss_final"] = trace[-1] if trace else None
    metrics["inclusion_fraction"] = scenario.inclusion_fraction
    metrics["ablation"] = scenario.ablation
    bundle.records = records
    bundle.outcome = outcome
    bundle.metrics = metrics
    return bundle
