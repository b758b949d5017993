import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manlab.attacks import (
    AttackConfig,
    AttackConfigError,
    assign_adversarial_label,
    attack_loss,
    default_step_size,
    fgsm,
    pgd,
    read_target_matrix,
    resolve_targets,
)
from manlab.models import TargetClassifier, TransitionNetwork, anti_diagonal, predict
from manlab.tensor import Tensor


class IdentityTransition(TransitionNetwork):
    """Transition network whose matrices are exactly the identity."""

    def __init__(self, d, c):
        super().__init__(d, c, hidden=())
        self.params["layer0.weight"].data[:] = 0
        self.params["layer0.bias"].data = (np.eye(c).ravel() * 800.0 - 400.0)[None, :]


def models(d=2, c=3, seed=0):
    return TargetClassifier(d, c, (8,), seed=seed), TransitionNetwork(d, c, (8,), seed=seed + 1)


def test_config_validation():
    with pytest.raises(AttackConfigError):
        AttackConfig(norm="l1")
    with pytest.raises(AttackConfigError):
        AttackConfig(steps=0)
    with pytest.raises(AttackConfigError):
        AttackConfig(objective="matrix")  # needs target_matrix mode
    with pytest.raises(AttackConfigError):
        AttackConfig(target_matrix=[[0.5, 0.6], [0.5, 0.5]], objective="matrix", mode="target_matrix")


def test_default_step_sizes():
    assert default_step_size(0.1, 10) == pytest.approx(0.025)
    assert default_step_size(8 / 255, 40) == pytest.approx(0.007)
    assert default_step_size(0.2, 1) == 0.2


def test_objective_without_transition_is_config_error():
    target, _ = models()
    x = Tensor(np.full((2, 2), 0.5))
    with pytest.raises(AttackConfigError):
        attack_loss(x, np.eye(3)[[0, 1]], AttackConfig(objective="combined"), target, None)


def test_combined_with_identity_transition_equals_plain_ce():
    target, _ = models()
    ident = IdentityTransition(2, 3)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (20, 2))
    y = np.eye(3)[rng.integers(0, 3, 20)]
    comb = attack_loss(Tensor(x), y, AttackConfig(objective="combined"), target, ident).item()
    plain = attack_loss(Tensor(x), y, AttackConfig(objective="target_only"), target, None).item()
    assert comb == pytest.approx(plain, abs=1e-12)


def test_matrix_objective_zero_at_target_matrix():
    c = 4
    net = TransitionNetwork(2, c, hidden=())
    net.params["layer0.weight"].data[:] = 0
    net.params["layer0.bias"].data = (anti_diagonal(c).ravel() * 1000.0 - 500.0)[None, :]
    target, _ = models(c=c)
    cfg = AttackConfig(objective="matrix", mode="target_matrix")
    val = attack_loss(Tensor(np.full((3, 2), 0.4)), np.eye(c)[[0, 1, 2]], cfg, target, net).item()
    assert val == 0.0


def test_dual_objective_is_sum_of_terms():
    target, trans = models(seed=3)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (15, 2))
    y = np.eye(3)[rng.integers(0, 3, 15)]
    terms = {o: attack_loss(Tensor(x), y, AttackConfig(objective=o), target, trans).item()
             for o in ("dual", "combined", "target_only")}
    assert terms["dual"] == pytest.approx(terms["combined"] + terms["target_only"], abs=1e-12)


def test_targeted_objectives_negate_ce_against_target():
    target, trans = models(seed=4)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (10, 2))
    yi = rng.integers(0, 3, 10)
    ys = (yi + 1) % 3
    y = np.eye(3)[yi]
    comb_t = attack_loss(Tensor(x), y, AttackConfig(objective="combined", mode="target"), target, trans, ys).item()
    comb_vs_star = attack_loss(Tensor(x), np.eye(3)[ys], AttackConfig(objective="combined"), target, trans).item()
    assert comb_t == pytest.approx(-comb_vs_star, abs=1e-12)
    dual_t = attack_loss(Tensor(x), y, AttackConfig(objective="dual", mode="target"), target, trans, ys).item()
    plain = attack_loss(Tensor(x), y, AttackConfig(objective="target_only"), target, trans).item()
    assert dual_t == pytest.approx(-comb_vs_star + plain, abs=1e-12)


def test_least_likely_target_differs_from_label():
    target, trans = models(seed=5)
    x = np.random.default_rng(3).uniform(0, 1, (50, 2))
    y = predict(target, trans, x)
    ys = resolve_targets(x, y, AttackConfig(objective="combined", mode="target"), target, trans)
    assert np.all(ys != y)


def test_fgsm_closed_form_on_linear_model():
    rng = np.random.default_rng(4)
    target = TargetClassifier(2, 3, hidden=(), seed=6)
    x = rng.uniform(0, 1, (25, 2))
    yi = rng.integers(0, 3, 25)
    W, b = target.params["layer0.weight"].data, target.params["layer0.bias"].data
    z = x @ W + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    grad_x = (p - np.eye(3)[yi]) @ W.T
    eps = 0.05
    expected = np.clip(x + eps * np.sign(grad_x), 0, 1)
    cfg = AttackConfig(epsilon=eps, steps=1, step_size=eps, random_start=False, objective="target_only")
    np.testing.assert_allclose(pgd(x, yi, cfg, target), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_zero_budget_is_identity(norm):
    target, trans = models()
    x = np.random.default_rng(5).uniform(0, 1, (10, 2))
    y = np.zeros(10, dtype=int)
    cfg = AttackConfig(norm=norm, epsilon=0.0, steps=5, random_start=True)
    assert pgd(x, y, cfg, target, trans, np.random.default_rng(0)).tobytes() == x.tobytes()
    assert fgsm(x, y, 0.0, target, trans).tobytes() == x.tobytes()


@pytest.mark.parametrize("objective", ["combined", "target_only", "dual"])
def test_fgsm_equals_pgd1_bitwise(objective):
    target, trans = models(seed=7)
    x = np.random.default_rng(6).uniform(0, 1, (30, 2))
    y = np.random.default_rng(7).integers(0, 3, 30)
    cfg = AttackConfig(epsilon=0.07, steps=1, step_size=0.07, random_start=False, objective=objective)
    assert fgsm(x, y, 0.07, target, trans, objective).tobytes() == pgd(x, y, cfg, target, trans).tobytes()


def test_pgd_rejects_out_of_box_inputs():
    target, trans = models()
    with pytest.raises(ValueError):
        pgd(np.array([[1.5, 0.2]]), np.array([0]), AttackConfig(random_start=False), target, trans)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["linf", "l2"]),
    st.floats(0.0, 0.6),
    st.integers(1, 6),
    st.sampled_from(["combined", "dual", "target_only"]),
    st.integers(0, 10_000),
)
def test_budget_feasibility(norm, eps, steps, objective, seed):
    rng = np.random.default_rng(seed)
    target, trans = models(seed=seed % 7)
    x = rng.uniform(0, 1, (12, 2))
    y = rng.integers(0, 3, 12)
    cfg = AttackConfig(norm=norm, epsilon=eps, steps=steps, objective=objective)
    xa = pgd(x, y, cfg, target, trans, rng)
    assert np.all((xa >= 0) & (xa <= 1))
    dist = np.abs(xa - x).max(1) if norm == "linf" else np.linalg.norm(xa - x, axis=1)
    assert np.all(dist <= eps + 1e-9)


def test_l2_zero_gradient_keeps_iterate():
    target = TargetClassifier(2, 3, hidden=(), seed=0)
    for _, t in target.params.items():
        t.data = np.zeros_like(t.data)  # constant model: gradient is exactly zero
    x = np.array([[0.3, 0.6]])
    cfg = AttackConfig(norm="l2", epsilon=0.2, steps=3, random_start=False, objective="target_only")
    assert pgd(x, np.array([1]), cfg, target).tobytes() == x.tobytes()


def test_pgd_is_deterministic_given_seed():
    target, trans = models(seed=8)
    x = np.random.default_rng(8).uniform(0, 1, (20, 2))
    y = np.zeros(20, dtype=int)
    cfg = AttackConfig(epsilon=0.1, steps=5)
    a = pgd(x, y, cfg, target, trans, np.random.default_rng(42))
    b = pgd(x, y, cfg, target, trans, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_adversarial_label_tie_break_and_argmax():
    target = TargetClassifier(2, 4, hidden=(), seed=0)
    target.params["layer0.weight"].data[:] = 0
    assert assign_adversarial_label(np.array([[0.1, 0.2]]), target)[0] == 0
    target.params["layer0.bias"].data = np.array([[0.0, 0.0, 3.0, 0.0]])
    assert assign_adversarial_label(np.array([[0.1, 0.2]]), target)[0] == 2


def test_target_matrix_file(tmp_path):
    p = tmp_path / "tstar.txt"
    p.write_text("0 0 1\n0 1 0\n1 0 0\n")
    m = read_target_matrix(p)
    np.testing.assert_array_equal(m, anti_diagonal(3))
    AttackConfig(objective="matrix", mode="target_matrix", target_matrix=m)


# empirical checks on trained blob models (fixtures in conftest)

def test_pgd40_breaks_undefended_model_at_large_budget(natural_model, blobs):
    cfg = AttackConfig(epsilon=0.3, steps=40, objective="target_only")
    xa = pgd(blobs.test.x, blobs.test.y, cfg, natural_model, None, np.random.default_rng(0))
    assert np.mean(predict(natural_model, None, xa) == blobs.test.y) < 0.05


def test_successful_attack_relabels(natural_model, blobs):
    cfg = AttackConfig(epsilon=0.3, steps=20, objective="target_only")
    xa = pgd(blobs.test.x, blobs.test.y, cfg, natural_model, None, np.random.default_rng(1))
    labels = assign_adversarial_label(xa, natural_model)
    fooled = predict(natural_model, None, xa) != blobs.test.y
    assert fooled.any()
    assert np.all(labels[fooled] != blobs.test.y[fooled])


def test_success_rate_monotone_in_budget(natural_model, blobs):
    accs = []
    for eps in (0.05, 0.1, 0.2, 0.4):
        cfg = AttackConfig(epsilon=eps, steps=20, random_start=False, objective="target_only")
        xa = pgd(blobs.test.x, blobs.test.y, cfg, natural_model)
        accs.append(np.mean(predict(natural_model, None, xa) == blobs.test.y))
    assert all(a >= b for a, b in zip(accs, accs[1:])), accs
