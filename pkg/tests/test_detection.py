import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manlab.attacks import AttackConfig
from manlab.detection import (
    MASKING_CHECKS,
    DetectionScore,
    accuracy_table,
    auroc,
    detect_score,
    detection_run,
    masking_battery,
    random_ball_misclassified,
    transfer_evaluate,
)
from manlab.models import TargetClassifier, TransitionNetwork, anti_diagonal
from manlab.training import TrainConfigError, evaluate_accuracy


def brute_auroc(scores, pos):
    """All-pairs count, ties one half."""
    s = np.asarray(scores, float)
    pos = np.asarray(pos, bool)
    total = 0.0
    for a, b in itertools.product(s[pos], s[~pos]):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (pos.sum() * (~pos).sum())


def fixed_matrix_transition(m, d=2):
    c = m.shape[0]
    net = TransitionNetwork(d, c, hidden=())
    net.params["layer0.weight"].data[:] = 0
    net.params["layer0.bias"].data = (m.ravel() * 1000.0 - 500.0)[None, :]
    return net


def biased_target(c, k, d=2):
    t = TargetClassifier(d, c, hidden=())
    t.params["layer0.weight"].data[:] = 0
    b = np.zeros((1, c))
    b[0, k] = 5.0
    t.params["layer0.bias"].data = b
    return t


# scores

def test_identity_matrix_scores_zero():
    trans = fixed_matrix_transition(np.eye(3))
    for k in range(3):
        s = detect_score(np.array([0.2, 0.7]), biased_target(3, k), trans)
        assert isinstance(s, DetectionScore)
        assert s.predicted == k and s.score == 0.0 and not s.flagged


def test_anti_diagonal_scores_one():
    trans = fixed_matrix_transition(anti_diagonal(4))
    s = detect_score(np.array([0.5, 0.5]), biased_target(4, 1), trans)
    assert s.p == 0.0 and s.score == 1.0


def test_scores_in_unit_interval_and_pure():
    rng = np.random.default_rng(0)
    target, trans = TargetClassifier(2, 4, seed=1), TransitionNetwork(2, 4, seed=2)
    x = rng.uniform(0, 1, (200, 2))
    a = detect_score(x, target, trans)
    b = detect_score(x, target, trans)
    assert [s.score for s in a] == [s.score for s in b]
    assert all(0.0 <= s.score <= 1.0 for s in a)
    # batch and single-instance paths agree up to BLAS summation order
    assert detect_score(x[7], target, trans).score == pytest.approx(a[7].score, abs=1e-12)


def test_comparative_rule_flags_smaller_diagonal_entry():
    m = np.eye(3)
    m[1] = [1.0, 0.0, 0.0]
    s = detect_score(np.array([0.5, 0.5]), biased_target(3, 1), fixed_matrix_transition(m))
    assert s.flagged and s.score == 1.0


def test_bad_truth_label():
    with pytest.raises(ValueError):
        detect_score(np.zeros((1, 2)), TargetClassifier(2, 2), TransitionNetwork(2, 2), truth="maybe")


# auroc

def test_auroc_worked_examples():
    assert auroc([0.2, 0.6, 0.4, 0.8], [False, False, True, True]) == 0.75
    assert auroc([0.1] * 5 + [0.9] * 5, [False] * 5 + [True] * 5) == 1.0
    assert auroc([0.3] * 6, [False, True] * 3) == 0.5


def test_auroc_on_score_objects():
    scores = [DetectionScore(0, 0, 0.8, 0.2), DetectionScore(1, 0, 0.4, 0.6),
              DetectionScore(2, 0, 0.6, 0.4, "adversarial"), DetectionScore(3, 0, 0.2, 0.8, "adversarial")]
    assert auroc(scores) == 0.75


def test_auroc_single_class_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [True, True])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [False, False])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 1000), st.integers(0, 10_000), st.booleans())
def test_auroc_matches_brute_force(n, seed, coarse):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 1, n)
    if coarse:
        s = np.round(s, 1)  # plenty of ties
    pos = rng.uniform(0, 1, n) < 0.5
    pos[0], pos[1] = True, False
    assert auroc(s, pos) == brute_auroc(s, pos)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_transform_and_flip(seed):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(0, 1, 80), 2)
    pos = rng.uniform(0, 1, 80) < 0.4
    pos[:2] = (True, False)
    a = auroc(s, pos)
    assert auroc(np.exp(3 * s) + 7, pos) == a
    assert auroc(s, ~pos) == pytest.approx(1 - a, abs=1e-15)


# evaluation tables

def test_empty_attack_list_gives_none_row(joint_models, blobs):
    target, trans = joint_models
    rows = accuracy_table(target, trans, blobs.test, [])
    assert [r["attack"] for r in rows] == ["None"]
    assert rows[0]["accuracy"] == evaluate_accuracy(target, trans, blobs.test)


def test_rows_follow_config_order(joint_models, blobs):
    target, trans = joint_models
    attacks = [AttackConfig(epsilon=0.1, steps=5, objective=o, name=o) for o in ("dual", "combined", "target_only")]
    rows = accuracy_table(target, trans, blobs.test, attacks)
    assert [r["attack"] for r in rows] == ["None", "dual", "combined", "target_only"]


def test_self_transfer_reproduces_table_and_mutates_nothing(joint_models, blobs):
    target, trans = joint_models
    before = (target.params.snapshot(), trans.params.snapshot())
    attacks = [AttackConfig(epsilon=0.1, steps=10)]
    assert transfer_evaluate(trans, target, blobs.test, attacks) == accuracy_table(target, trans, blobs.test, attacks)
    for m, snap in zip((target, trans), before):
        assert all(v.tobytes() == snap[k].tobytes() for k, v in m.params.snapshot().items())


def test_transfer_class_mismatch():
    with pytest.raises(TrainConfigError):
        transfer_evaluate(TransitionNetwork(2, 3), TargetClassifier(2, 4), None, [])


# trained-model behaviour

def test_adversarial_scores_exceed_natural(joint_models, blobs):
    target, trans = joint_models
    scores, value = detection_run(target, trans, blobs.test, AttackConfig(epsilon=0.1, steps=20),
                                  np.random.default_rng(0))
    nat = np.mean([s.score for s in scores if s.truth == "natural"])
    adv = np.mean([s.score for s in scores if s.truth == "adversarial"])
    assert adv > nat and value > 0.5


def test_random_ball_sampling_counts():
    target = biased_target(3, 2)
    trans = fixed_matrix_transition(np.eye(3))
    cfg = AttackConfig(epsilon=0.1)
    assert random_ball_misclassified(target, trans, np.array([0.5, 0.5]), 2, cfg, 1000, np.random.default_rng(0)) == 0
    assert random_ball_misclassified(target, trans, np.array([0.5, 0.5]), 0, cfg, 1000, np.random.default_rng(0)) == 1000


def test_battery_reports_five_named_checks(natural_model, blobs):
    report = masking_battery(natural_model, None, blobs, 0.1, n_random=500, max_robust_points=3,
                             surrogate=natural_model.copy())
    assert [c["name"] for c in report["checks"]] == list(MASKING_CHECKS)
    by_name = {c["name"]: c for c in report["checks"]}
    assert by_name["unbounded"]["passed"]  # an undefended model falls to an unbounded attack
    assert all(isinstance(c["passed"], bool) for c in report["checks"])


def test_zero_budget_sweep_starts_at_natural_accuracy(natural_model, blobs):
    report = masking_battery(natural_model, None, blobs, 0.0, n_random=10, max_robust_points=1,
                             surrogate=natural_model.copy())
    sweep = report["checks"][-1]["values"]["accuracies"]
    assert sweep[0] == evaluate_accuracy(natural_model, None, blobs.test)
