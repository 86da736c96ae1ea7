"""Set-based membership auditing, instance baseline, and evaluation metrics.

The auditing unit is a user with k per-sample losses from a black-box
model. A calibration population of known nonmember users fixes a decision
threshold at the alpha-percentile of their average-loss distribution;
a target user is declared a member iff their average loss falls strictly
below it. With the floor-based order statistic and the strict comparison,
the empirical false-positive rate on the calibration users themselves is
provably <= alpha.

Score convention throughout: score = -(average loss), higher means more
member-like.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

LOSS_EPS = 1e-12  # floor for probabilities inside cross-entropy
LOGIT_EPS = 1e-9  # clamp for the logit transform used in histogram exports

MEMBER = "member"
NONMEMBER = "nonmember"
UNKNOWN = "unknown"

SPLIT_TARGET = "audit_target"
SPLIT_CALIBRATION = "calibration"


class RecordFormatError(ValueError):
    """A loss record violates the wire-format schema."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# loss functions


def cross_entropy_loss(probs: Sequence[float], label: int) -> float:
    """-ln(probs[label]), floored at LOSS_EPS; probs must sum to 1 within 1e-4."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.isfinite(p).all():
        raise ValueError("probability vector must be 1-D, non-empty and finite")
    if abs(float(p.sum()) - 1.0) > 1e-4:
        raise ValueError(f"probability vector sums to {p.sum():.6f}, not 1")
    if not (0 <= label < p.size):
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-math.log(max(float(p[label]), LOSS_EPS)))


def label_only_loss(predicted_label: int, true_label: int) -> float:
    """0 for a correct prediction, 1 otherwise."""
    return 0.0 if predicted_label == true_label else 1.0


def logit_transform(loss: float) -> float:
    """ln(p / (1-p)) with p = exp(-loss) clamped to [LOGIT_EPS, 1-LOGIT_EPS]."""
    p = min(max(math.exp(-loss), LOGIT_EPS), 1.0 - LOGIT_EPS)
    return math.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class UserLossSet:
    """One auditing unit: a user id, k losses, and ground truth when known."""

    user_id: str
    losses: tuple[float, ...]
    ground_truth: str = UNKNOWN

    def __post_init__(self) -> None:
        if len(self.losses) < 1:
            raise ValueError("a user needs at least one loss value")
        if not all(math.isfinite(v) and v >= 0 for v in self.losses):
            raise ValueError("losses must be finite and >= 0")
        if self.ground_truth not in (MEMBER, NONMEMBER, UNKNOWN):
            raise ValueError(f"bad ground truth {self.ground_truth!r}")

    @property
    def avg_loss(self) -> float:
        return math.fsum(self.losses) / len(self.losses)


@dataclass(frozen=True)
class CalibrationSet:
    """Nonmember users whose average losses calibrate the threshold."""

    users: tuple[UserLossSet, ...]

    def __post_init__(self) -> None:
        if len(self.users) < 1:
            raise ValueError("calibration set must be non-empty")

    def avg_losses(self) -> np.ndarray:
        return np.array([u.avg_loss for u in self.users], dtype=np.float64)


@dataclass
class AuditOutcome:
    """Threshold, per-user verdicts, and the alpha that produced them."""

    alpha: float
    threshold_c: float
    verdicts: dict[str, str] = field(default_factory=dict)
    avg_losses: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# threshold calibration and verdicts


def percentile_threshold(values: Sequence[float], alpha: float) -> float:
    """Floor-based alpha-percentile: sorted()[floor(alpha*n)], +inf past the end."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise ValueError("cannot derive a threshold from no values")
    idx = math.floor(alpha * arr.size)
    if idx > arr.size - 1:
        return math.inf
    return float(arr[idx])


def derive_threshold(cal: CalibrationSet, alpha: float) -> float:
    """Threshold c at the alpha-percentile of calibration users' average losses."""
    return percentile_threshold(cal.avg_losses(), alpha)


def audit_user(target: UserLossSet, c: float) -> str:
    """Member iff the target's average loss is strictly below c."""
    return MEMBER if target.avg_loss < c else NONMEMBER


def set_audit(targets: Sequence[UserLossSet], cal: CalibrationSet, alpha: float) -> AuditOutcome:
    """Run the set-based audit for every target user against one calibration set."""
    c = derive_threshold(cal, alpha)
    outcome = AuditOutcome(alpha=alpha, threshold_c=c)
    for user in targets:
        outcome.verdicts[user.user_id] = audit_user(user, c)
        outcome.avg_losses[user.user_id] = user.avg_loss
    return outcome


def instance_audit(
    target_losses: dict[str, float],
    calibration_losses: Sequence[float],
    alpha: float,
) -> AuditOutcome:
    """Per-sample baseline: the same percentile machinery on individual losses.

    `target_losses` maps a sample key (e.g. "user/sample") to its loss.
    """
    if len(target_losses) == 0 or len(calibration_losses) == 0:
        raise ValueError("instance audit needs target and calibration losses")
    c = percentile_threshold(calibration_losses, alpha)
    outcome = AuditOutcome(alpha=alpha, threshold_c=c)
    for key, loss in target_losses.items():
        outcome.verdicts[key] = MEMBER if loss < c else NONMEMBER
        outcome.avg_losses[key] = float(loss)
    return outcome


# ---------------------------------------------------------------------------
# ROC metrics


@dataclass
class RocMetrics:
    """Threshold-sweep metrics over member/nonmember score sets."""

    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    auc: float
    fpr_at_full_tpr: float

    def tpr_at_fpr(self, max_fpr: float) -> float:
        """Highest TPR over all thresholds whose FPR is <= max_fpr."""
        # Rule: predict member iff score >= t. Among thresholds with
        # FPR <= max_fpr, the loosest admissible one maximizes TPR.
        nm = np.sort(self.nonmember_scores)
        allowed = math.floor(max_fpr * nm.size)  # nonmembers we may admit
        if allowed >= nm.size:
            return 1.0
        # Loosest t admitting at most `allowed` nonmembers: just above the
        # (allowed+1)-th largest nonmember score.
        cutoff = nm[nm.size - allowed - 1]
        tpr = float(np.mean(self.member_scores > cutoff))
        return tpr


def roc_metrics(member_scores: Sequence[float], nonmember_scores: Sequence[float]) -> RocMetrics:
    """AUC (pairwise, ties worth 0.5), FPR@100%TPR, and TPR@FPR via exact sweep."""
    members = np.asarray(member_scores, dtype=np.float64)
    nonmembers = np.asarray(nonmember_scores, dtype=np.float64)
    if members.size == 0 or nonmembers.size == 0:
        raise ValueError("both score sets must be non-empty")

    # Tie-aware AUC via average ranks over the pooled scores; identical to
    # counting pairs with half credit for ties.
    pooled = np.concatenate([members, nonmembers])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(pooled.size, dtype=np.float64)
    ranks[order] = np.arange(1, pooled.size + 1, dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    member_rank_sum = float(ranks[: members.size].sum())
    auc = (member_rank_sum - members.size * (members.size + 1) / 2.0) / (members.size * nonmembers.size)

    weakest_member = members.min()
    fpr_full = float(np.mean(nonmembers >= weakest_member))
    return RocMetrics(
        member_scores=members,
        nonmember_scores=nonmembers,
        auc=float(auc),
        fpr_at_full_tpr=fpr_full,
    )


def scores_from_losses(losses: Iterable[float]) -> np.ndarray:
    """Map losses to scores: higher score = more member-like."""
    return -np.asarray(list(losses), dtype=np.float64)


# ---------------------------------------------------------------------------
# wire format


@dataclass(frozen=True)
class LossRecord:
    """One JSON line: a sample's model output plus auditing metadata."""

    user_id: str
    sample_id: str
    true_label: int
    split: str
    ground_truth: str = UNKNOWN
    probs: Optional[tuple[float, ...]] = None
    predicted_label: Optional[int] = None

    def to_dict(self) -> dict:
        d = {
            "user_id": self.user_id,
            "sample_id": self.sample_id,
            "true_label": self.true_label,
            "split": self.split,
            "ground_truth": self.ground_truth,
        }
        if self.probs is not None:
            d["probs"] = list(self.probs)
        if self.predicted_label is not None:
            d["predicted_label"] = self.predicted_label
        return d


def parse_record(obj: dict, line: Optional[int] = None) -> LossRecord:
    try:
        user_id = str(obj["user_id"])
        sample_id = str(obj["sample_id"])
        true_label = int(obj["true_label"])
        split = str(obj["split"])
    except KeyError as exc:
        raise RecordFormatError(f"missing field {exc.args[0]!r}", line) from exc
    ground_truth = str(obj.get("ground_truth", UNKNOWN))
    if split not in (SPLIT_TARGET, SPLIT_CALIBRATION):
        raise RecordFormatError(f"bad split {split!r}", line)
    if ground_truth not in (MEMBER, NONMEMBER, UNKNOWN):
        raise RecordFormatError(f"bad ground_truth {ground_truth!r}", line)
    probs = obj.get("probs")
    predicted = obj.get("predicted_label")
    if (probs is None) == (predicted is None):
        raise RecordFormatError("record needs exactly one of 'probs' or 'predicted_label'", line)
    return LossRecord(
        user_id=user_id,
        sample_id=sample_id,
        true_label=true_label,
        split=split,
        ground_truth=ground_truth,
        probs=tuple(float(v) for v in probs) if probs is not None else None,
        predicted_label=int(predicted) if predicted is not None else None,
    )


def read_records(lines: Iterable[str]) -> list[LossRecord]:
    """Parse JSONL records; format errors report the 1-based line number."""
    records = []
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"invalid JSON: {exc}", line_no) from exc
        if not isinstance(obj, dict):
            raise RecordFormatError("record must be a JSON object", line_no)
        records.append(parse_record(obj, line_no))
    return records


def load_records(path: str) -> list[LossRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return read_records(fh)


def write_records(records: Iterable[LossRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def record_loss(rec: LossRecord, loss_mode: str) -> float:
    """Compute the loss of one record under 'cross-entropy' or 'label-only'."""
    if loss_mode == "cross-entropy":
        if rec.probs is None:
            raise RecordFormatError(
                f"record {rec.user_id}/{rec.sample_id} has no probs for cross-entropy mode"
            )
        return cross_entropy_loss(rec.probs, rec.true_label)
    if loss_mode == "label-only":
        if rec.predicted_label is None:
            raise RecordFormatError(
                f"record {rec.user_id}/{rec.sample_id} has no predicted_label for label-only mode"
            )
        return label_only_loss(rec.predicted_label, rec.true_label)
    raise ValueError(f"unknown loss mode {loss_mode!r}")


def group_users(records: Sequence[LossRecord], loss_mode: str) -> tuple[list[UserLossSet], list[UserLossSet]]:
    """Group records into (target users, calibration users).

    Per-user losses are ordered by sample_id so the grouping is independent
    of record order in the file.
    """
    by_user: dict[tuple[str, str], dict[str, tuple[str, float]]] = {}
    truths: dict[tuple[str, str], str] = {}
    for rec in records:
        key = (rec.split, rec.user_id)
        samples = by_user.setdefault(key, {})
        if rec.sample_id in samples:
            raise RecordFormatError(f"duplicate sample {rec.user_id}/{rec.sample_id}")
        samples[rec.sample_id] = (rec.ground_truth, record_loss(rec, loss_mode))
        prev = truths.setdefault(key, rec.ground_truth)
        if prev != rec.ground_truth:
            raise RecordFormatError(f"inconsistent ground truth for user {rec.user_id}")
    targets, calibration = [], []
    for (split, user_id), samples in sorted(by_user.items()):
        losses = tuple(loss for _, (_, loss) in sorted(samples.items()))
        user = UserLossSet(user_id=user_id, losses=losses, ground_truth=truths[(split, user_id)])
        (targets if split == SPLIT_TARGET else calibration).append(user)
    return targets, calibration


# ---------------------------------------------------------------------------
# record-level drivers

ROC_FPR_GRID = (0.0, 0.001, 0.01, 0.1)


def _roc_summary(member_losses: Sequence[float], nonmember_losses: Sequence[float]) -> dict:
    roc = roc_metrics(scores_from_losses(member_losses), scores_from_losses(nonmember_losses))
    return {
        "auc": roc.auc,
        "tpr_at_fpr": {str(f): roc.tpr_at_fpr(f) for f in ROC_FPR_GRID},
        "fpr_at_full_tpr": roc.fpr_at_full_tpr,
        "num_members": len(member_losses),
        "num_nonmembers": len(nonmember_losses),
    }


def audit_records(records: Sequence[LossRecord], alpha: float, loss_mode: str, mode: str = "set"):
    """Audit wire-format records end to end.

    Returns (outcome, metrics) where metrics holds the ROC summary over
    ground-truth members vs nonmembers when both are present (else None).
    In instance mode the percentile machinery runs on individual sample
    losses instead of per-user averages.
    """
    targets, calibration = group_users(records, loss_mode)
    if not calibration:
        raise RecordFormatError("no calibration records present")
    if mode == "set":
        outcome = set_audit(targets, CalibrationSet(tuple(calibration)), alpha)
        member_losses = [u.avg_loss for u in targets if u.ground_truth == MEMBER]
        nonmember_losses = [u.avg_loss for u in targets + calibration if u.ground_truth == NONMEMBER]
    elif mode == "instance":
        target_losses = {
            f"{rec.user_id}/{rec.sample_id}": record_loss(rec, loss_mode)
            for rec in records
            if rec.split == SPLIT_TARGET
        }
        cal_losses = [record_loss(rec, loss_mode) for rec in records if rec.split == SPLIT_CALIBRATION]
        outcome = instance_audit(target_losses, cal_losses, alpha)
        member_losses = [
            record_loss(rec, loss_mode) for rec in records if rec.ground_truth == MEMBER
        ]
        nonmember_losses = [
            record_loss(rec, loss_mode) for rec in records if rec.ground_truth == NONMEMBER
        ]
    else:
        raise ValueError(f"unknown audit mode {mode!r}")
    metrics = _roc_summary(member_losses, nonmember_losses) if member_losses and nonmember_losses else None
    return outcome, metrics
