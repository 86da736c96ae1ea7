"""Loss functions, threshold calibration, verdicts, and ROC metrics.

roc_brute_force below is the independent oracle: it enumerates every
threshold explicitly and scans all score pairs, with none of the sorting
shortcuts the implementation uses.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markaudit.audit import (
    MEMBER,
    NONMEMBER,
    CalibrationSet,
    RecordFormatError,
    UserLossSet,
    audit_records,
    audit_user,
    cross_entropy_loss,
    derive_threshold,
    group_users,
    instance_audit,
    label_only_loss,
    load_records,
    logit_transform,
    parse_record,
    percentile_threshold,
    read_records,
    roc_metrics,
    scores_from_losses,
    set_audit,
    write_records,
    LossRecord,
)


def users(avgs, truth=NONMEMBER):
    return tuple(UserLossSet(f"u{i}", (float(v),), truth) for i, v in enumerate(avgs))


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_examples():
    uniform = [0.1] * 10
    assert cross_entropy_loss(uniform, 3) == pytest.approx(math.log(10), abs=1e-12)
    one_hot = [0.0] * 5 + [1.0] + [0.0] * 4
    assert cross_entropy_loss(one_hot, 5) == 0.0
    assert cross_entropy_loss(one_hot, 0) == pytest.approx(-math.log(1e-12), abs=1e-9)


def test_cross_entropy_validation():
    with pytest.raises(ValueError):
        cross_entropy_loss([0.5, 0.6], 0)  # sums to 1.1
    with pytest.raises(ValueError):
        cross_entropy_loss([0.5, 0.5], 2)
    with pytest.raises(ValueError):
        cross_entropy_loss([], 0)


def test_label_only_loss():
    assert label_only_loss(3, 3) == 0.0
    assert label_only_loss(3, 7) == 1.0
    for lbl in range(10):
        assert label_only_loss(lbl, lbl) == 0.0


def test_logit_transform():
    assert logit_transform(math.log(2)) == pytest.approx(0.0, abs=1e-12)
    assert logit_transform(0.0) == pytest.approx(math.log((1 - 1e-9) / 1e-9), abs=1e-6)
    grid = np.linspace(0.0, 30.0, 200)
    vals = [logit_transform(v) for v in grid]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    # Strictly decreasing wherever the epsilon clamps are not saturated.
    interior = np.linspace(1e-5, 20.0, 200)
    ivals = [logit_transform(v) for v in interior]
    assert all(a > b for a, b in zip(ivals, ivals[1:]))


# ---------------------------------------------------------------------------
# thresholds and verdicts


def test_derive_threshold_examples():
    cal = CalibrationSet(users([0.9, 1.1, 1.3, 1.5, 2.0]))
    assert derive_threshold(cal, 0.0) == 0.9
    # floor(0.2 * 5) = 1 -> second smallest
    assert derive_threshold(cal, 0.2) == 1.1
    assert derive_threshold(cal, 1.0) == math.inf
    single = CalibrationSet(users([0.42]))
    assert derive_threshold(single, 0.0) == 0.42
    assert derive_threshold(single, 0.5) == 0.42


def test_derive_threshold_empty_and_bad_alpha():
    with pytest.raises(ValueError):
        CalibrationSet(())
    with pytest.raises(ValueError):
        percentile_threshold([1.0], -0.1)


def test_audit_user_strictness():
    member_like = UserLossSet("a", (0.2,), MEMBER)
    assert audit_user(member_like, 0.9) == MEMBER
    tie = UserLossSet("b", (0.9,), NONMEMBER)
    assert audit_user(tie, 0.9) == NONMEMBER
    assert audit_user(tie, math.inf) == MEMBER


def test_user_loss_set_validation():
    with pytest.raises(ValueError):
        UserLossSet("u", ())
    with pytest.raises(ValueError):
        UserLossSet("u", (-1.0,))
    with pytest.raises(ValueError):
        UserLossSet("u", (float("nan"),))
    with pytest.raises(ValueError):
        UserLossSet("u", (1.0,), "maybe")


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=400),
    st.sampled_from([0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 0.9]),
)
def test_calibration_guarantee(values, alpha):
    """Auditing the calibration users with their own threshold: rate <= alpha."""
    cal = CalibrationSet(users(values))
    c = derive_threshold(cal, alpha)
    rate = sum(1 for u in cal.users if audit_user(u, c) == MEMBER) / len(values)
    assert rate <= alpha


def test_instance_audit_examples():
    out = instance_audit({"m/0": 0.0}, [0.5, 0.6, 0.9], alpha=0.0)
    assert out.verdicts["m/0"] == MEMBER
    tie = instance_audit({"m/0": 0.5}, [0.5, 0.6, 0.9], alpha=0.0)
    assert tie.verdicts["m/0"] == NONMEMBER
    with pytest.raises(ValueError):
        instance_audit({}, [0.5], alpha=0.0)


def test_set_beats_instance_on_interleaved_losses():
    """Averaging separates users even when individual losses interleave."""
    rng = np.random.default_rng(0)
    k = 25
    member_losses = rng.gamma(2.0, 0.05, (20, k))
    nonmember_losses = rng.gamma(2.0, 0.10, (200, k))
    set_fpr = roc_metrics(
        scores_from_losses(member_losses.mean(axis=1)),
        scores_from_losses(nonmember_losses.mean(axis=1)),
    ).fpr_at_full_tpr
    inst_fpr = roc_metrics(
        scores_from_losses(member_losses.ravel()),
        scores_from_losses(nonmember_losses.ravel()),
    ).fpr_at_full_tpr
    assert inst_fpr > set_fpr


# ---------------------------------------------------------------------------
# ROC metrics vs brute force


def roc_brute_force(members, nonmembers):
    """Exhaustive sweep over every candidate threshold; O(n^2) on purpose."""
    thresholds = sorted(set(members) | set(nonmembers))
    points = []
    for t in thresholds + [math.inf]:
        tpr = sum(1 for s in members if s >= t) / len(members)
        fpr = sum(1 for s in nonmembers if s >= t) / len(nonmembers)
        points.append((fpr, tpr))
    points.append((1.0, 1.0))  # threshold -inf

    def tpr_at(f):
        return max(tpr for fpr, tpr in points if fpr <= f)

    pairs = 0.0
    for m in members:
        for n in nonmembers:
            if m > n:
                pairs += 1.0
            elif m == n:
                pairs += 0.5
    auc = pairs / (len(members) * len(nonmembers))
    weakest = min(members)
    fpr_full = sum(1 for n in nonmembers if n >= weakest) / len(nonmembers)
    return auc, tpr_at, fpr_full


def test_roc_examples():
    roc = roc_metrics([-0.1, -0.2], [-1.0, -2.0, -3.0])
    assert roc.tpr_at_fpr(0.0) == 1.0
    assert roc.auc == 1.0
    assert roc.fpr_at_full_tpr == 0.0

    tie = roc_metrics([1.0], [1.0])
    assert tie.auc == 0.5

    # member avg losses {0.1, 0.5}, nonmember {0.3, 0.8, 0.9}
    roc2 = roc_metrics(scores_from_losses([0.1, 0.5]), scores_from_losses([0.3, 0.8, 0.9]))
    assert roc2.fpr_at_full_tpr == pytest.approx(1 / 3)

    with pytest.raises(ValueError):
        roc_metrics([], [1.0])


def test_roc_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(60):
        m = int(rng.integers(1, 30))
        n = int(rng.integers(1, 30))
        # Quantized scores force plenty of ties.
        members = list(np.round(rng.normal(0, 1, m), 1))
        nonmembers = list(np.round(rng.normal(0, 1, n), 1))
        roc = roc_metrics(members, nonmembers)
        auc, tpr_at, fpr_full = roc_brute_force(members, nonmembers)
        assert roc.auc == auc
        assert roc.fpr_at_full_tpr == fpr_full
        for f in (0.0, 0.01, 0.1, 0.25, 0.5, 1.0):
            assert roc.tpr_at_fpr(f) == tpr_at(f)


def test_tpr_at_fpr_monotone():
    rng = np.random.default_rng(2)
    roc = roc_metrics(rng.normal(1, 1, 50), rng.normal(0, 1, 80))
    grid = np.linspace(0, 1, 101)
    vals = [roc.tpr_at_fpr(f) for f in grid]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_set_averaging_dominates_instance_on_gaussians():
    """k-averaged scores separate Gaussian populations better than raw ones."""
    rng = np.random.default_rng(3)
    k, n_users = 25, 10_000
    member = rng.normal(1.0, 1.0, (n_users, k))
    nonmember = rng.normal(2.0, 1.0, (n_users, k))
    auc_instance = roc_metrics(
        scores_from_losses(member[:200].ravel()), scores_from_losses(nonmember[:200].ravel())
    ).auc
    auc_set = roc_metrics(
        scores_from_losses(member.mean(axis=1)), scores_from_losses(nonmember.mean(axis=1))
    ).auc
    assert auc_set >= auc_instance + 0.2


# ---------------------------------------------------------------------------
# wire format


def make_record(user, sample, split, truth, probs=None, predicted=None):
    return LossRecord(
        user_id=user, sample_id=sample, true_label=0, split=split,
        ground_truth=truth, probs=probs, predicted_label=predicted,
    )


def test_parse_record_schema():
    good = {
        "user_id": "u1", "sample_id": "s1", "true_label": 1,
        "split": "calibration", "ground_truth": "nonmember", "probs": [0.5, 0.5],
    }
    rec = parse_record(good)
    assert rec.probs == (0.5, 0.5)

    for broken, err in [
        ({**good, "split": "bogus"}, "split"),
        ({**good, "ground_truth": "perhaps"}, "ground_truth"),
        ({k: v for k, v in good.items() if k != "user_id"}, "user_id"),
    ]:
        with pytest.raises(RecordFormatError, match=err):
            parse_record(broken)

    both = {**good, "predicted_label": 1}
    with pytest.raises(RecordFormatError):
        parse_record(both)
    neither = {k: v for k, v in good.items() if k != "probs"}
    with pytest.raises(RecordFormatError):
        parse_record(neither)


def test_read_records_reports_line_numbers():
    lines = ['{"user_id": "u"', ""]
    with pytest.raises(RecordFormatError, match="line 1"):
        read_records(lines)
    lines = [
        '{"user_id":"u","sample_id":"s","true_label":0,"split":"calibration","ground_truth":"nonmember","probs":[1.0]}',
        '{"user_id":"u2","sample_id":"s"}',
    ]
    with pytest.raises(RecordFormatError, match="line 2"):
        read_records(lines)


def test_write_load_round_trip(tmp_path):
    records = [
        make_record("m1", "s0", "audit_target", MEMBER, probs=(0.9, 0.1)),
        make_record("c1", "s0", "calibration", NONMEMBER, predicted=1),
    ]
    path = str(tmp_path / "r.jsonl")
    write_records(records, path)
    assert load_records(path) == records


def test_group_users_order_independent():
    records = []
    for u in range(3):
        for s in range(4):
            records.append(
                make_record(f"c{u}", f"s{s}", "calibration", NONMEMBER,
                            probs=(0.1 * (s + 1), 1 - 0.1 * (s + 1)))
            )
    fwd_targets, fwd_cal = group_users(records, "cross-entropy")
    rev_targets, rev_cal = group_users(records[::-1], "cross-entropy")
    assert fwd_targets == rev_targets
    assert fwd_cal == rev_cal


def test_group_users_mode_mismatch():
    records = [make_record("c", "s", "calibration", NONMEMBER, probs=(1.0,))]
    with pytest.raises(RecordFormatError, match="label-only"):
        group_users(records, "label-only")
    records = [make_record("c", "s", "calibration", NONMEMBER, predicted=0)]
    with pytest.raises(RecordFormatError, match="cross-entropy"):
        group_users(records, "cross-entropy")


def test_audit_records_set_and_instance():
    records = []
    for i, loss_p in enumerate([0.9, 0.8]):
        records.append(make_record(f"m{i}", "s0", "audit_target", MEMBER, probs=(loss_p, 1 - loss_p)))
    for i, loss_p in enumerate([0.3, 0.2, 0.1]):
        records.append(make_record(f"c{i}", "s0", "calibration", NONMEMBER, probs=(loss_p, 1 - loss_p)))
    outcome, metrics = audit_records(records, alpha=0.0, loss_mode="cross-entropy", mode="set")
    assert outcome.verdicts == {"m0": MEMBER, "m1": MEMBER}
    assert metrics["fpr_at_full_tpr"] == 0.0
    assert metrics["tpr_at_fpr"]["0.0"] == 1.0

    inst_outcome, inst_metrics = audit_records(records, 0.0, "cross-entropy", mode="instance")
    assert set(inst_outcome.verdicts) == {"m0/s0", "m1/s0"}
    assert inst_metrics["num_members"] == 2

    with pytest.raises(RecordFormatError, match="calibration"):
        audit_records(records[:2], 0.0, "cross-entropy")


def test_streamed_and_batch_loaded_records_agree(tmp_path):
    rng = np.random.default_rng(4)
    records = []
    for u in range(5):
        for s in range(3):
            p = float(rng.uniform(0.05, 0.95))
            split = "audit_target" if u < 2 else "calibration"
            truth = MEMBER if u < 2 else NONMEMBER
            records.append(make_record(f"u{u}", f"s{s}", split, truth, probs=(p, 1 - p)))
    path = str(tmp_path / "r.jsonl")
    write_records(records, path)
    with open(path) as fh:
        streamed = read_records(iter(fh.readline, ""))
    batch = load_records(path)
    assert streamed == batch
    out_a, met_a = audit_records(streamed, 0.0, "cross-entropy")
    out_b, met_b = audit_records(batch, 0.0, "cross-entropy")
    assert out_a.verdicts == out_b.verdicts and met_a == met_b


def test_set_audit_ties_go_nonmember():
    cal = CalibrationSet(users([0.9, 1.0, 1.1]))
    targets = (UserLossSet("t", (0.9,), MEMBER),)
    outcome = set_audit(targets, cal, alpha=0.0)
    assert outcome.threshold_c == 0.9
    assert outcome.verdicts["t"] == NONMEMBER
