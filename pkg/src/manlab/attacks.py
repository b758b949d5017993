"""Gradient-based attacks on the target model and on the combined defense.

Objectives (all are maximized by the attacker; ``p`` is softmax(h(x)) and
``T`` the transition matrices at the attacked point):

* ``combined``    -- CE(p T, y); targeted: -CE(p T, y*)
* ``matrix``      -- -MSE(T, T*) averaged over all C*C entries
* ``dual``        -- combined term + CE(p, y), weighted (1, 1) by default
* ``target_only`` -- CE(p, y); targeted: -CE(p, y*)
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as tn
from .models import (
    TargetClassifier,
    TransitionNetwork,
    anti_diagonal,
    infer_natural_posterior,
    predict_proba,
    target_forward,
    transition_forward,
)

NORMS = ("linf", "l2")
MODES = ("nontarget", "target", "target_matrix")
OBJECTIVES = ("combined", "matrix", "dual", "target_only")

# PGD-40 at eps=8/255 used step 0.007; keep that step/eps ratio when eps changes
LONG_STEP_RATIO = 0.007 / (8 / 255)


class AttackConfigError(ValueError):
    pass


def default_step_size(epsilon: float, steps: int) -> float:
    if steps == 1:
        return epsilon
    if steps <= 10:
        return epsilon / 4
    return epsilon * LONG_STEP_RATIO


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.1
    steps: int = 10
    step_size: Optional[float] = None
    random_start: bool = True
    mode: str = "nontarget"
    objective: str = "combined"
    target_label: Optional[int] = None
    target_matrix: Optional[np.ndarray] = None
    dual_weights: tuple = (1.0, 1.0)
    name: Optional[str] = None

    def __post_init__(self):
        self.norm = self.norm.lower()
        if self.norm not in NORMS:
            raise AttackConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.mode not in MODES:
            raise AttackConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.objective not in OBJECTIVES:
            raise AttackConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be non-negative")
        if int(self.steps) < 1:
            raise AttackConfigError("steps must be >= 1")
        self.steps = int(self.steps)
        if self.step_size is None:
            self.step_size = default_step_size(self.epsilon, self.steps)
        if self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0):
            raise AttackConfigError("step_size must be positive")
        if (self.objective == "matrix") != (self.mode == "target_matrix"):
            raise AttackConfigError("the matrix objective goes with mode 'target_matrix' and only with it")
        if self.target_matrix is not None:
            m = np.asarray(self.target_matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise AttackConfigError("target_matrix must be square")
            if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
                raise AttackConfigError("target_matrix must be row-stochastic")
            self.target_matrix = m
        self.dual_weights = tuple(float(w) for w in self.dual_weights)
        if self.name is None:
            self.name = f"{self.objective}-{self.norm}-pgd{self.steps}"

    @property
    def uses_transition(self) -> bool:
        return self.objective != "target_only"

    def with_(self, **changes) -> "AttackConfig":
        # step_size re-derives from the new budget unless given explicitly
        if ("epsilon" in changes or "steps" in changes) and "step_size" not in changes:
            changes["step_size"] = None
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "norm": self.norm, "epsilon": self.epsilon, "steps": self.steps,
            "step_size": self.step_size, "random_start": self.random_start, "mode": self.mode,
            "objective": self.objective, "target_label": self.target_label,
            "dual_weights": list(self.dual_weights),
        }
        d["target_matrix"] = None if self.target_matrix is None else self.target_matrix.tolist()
        return d


def read_target_matrix(path) -> np.ndarray:
    """C x C values, whitespace-separated, one row per line."""
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def resolve_targets(x: np.ndarray, y: np.ndarray, cfg: AttackConfig, target: TargetClassifier,
                    trans: Optional[TransitionNetwork]) -> np.ndarray:
    """Attack target labels: the configured label, else the least-likely class != y."""
    n_classes = target.n_classes
    if cfg.target_label is not None:
        k = int(cfg.target_label)
        if not 0 <= k < n_classes:
            raise AttackConfigError(f"target label {k} outside 0..{n_classes - 1}")
        return np.full(len(y), k, dtype=np.intp)
    probs = predict_proba(target, trans if cfg.uses_transition else None, x)
    probs = probs.copy()
    probs[np.arange(len(y)), y] = np.inf
    return np.argmin(probs, axis=1)


def attack_loss(x_adv: tn.Tensor, y_onehot: np.ndarray, cfg: AttackConfig, target: TargetClassifier,
                trans: Optional[TransitionNetwork] = None, y_target: Optional[np.ndarray] = None) -> tn.Tensor:
    """Batch-mean attack objective to be maximized over ``x_adv``."""
    if cfg.uses_transition and trans is None:
        raise AttackConfigError(f"objective {cfg.objective!r} needs a transition network")
    targeted = cfg.mode == "target"
    if targeted and y_target is None:
        raise AttackConfigError("targeted attack needs target labels")
    n_classes = target.n_classes
    yt = tn.one_hot(y_target, n_classes) if targeted else None

    if cfg.objective == "matrix":
        T = transition_forward(trans, x_adv, track_params=False)
        star = cfg.target_matrix if cfg.target_matrix is not None else anti_diagonal(n_classes)
        if star.shape != (n_classes, n_classes):
            raise AttackConfigError(f"target matrix shape {star.shape} != ({n_classes}, {n_classes})")
        return tn.neg(tn.mse(T, np.broadcast_to(star, T.shape)))

    p = tn.softmax(target_forward(target, x_adv, track_params=False), axis=-1)
    if cfg.objective == "target_only":
        return tn.neg(tn.cross_entropy(p, yt)) if targeted else tn.cross_entropy(p, y_onehot)

    T = transition_forward(trans, x_adv, track_params=False)
    post = infer_natural_posterior(p, T)
    combined = tn.neg(tn.cross_entropy(post, yt)) if targeted else tn.cross_entropy(post, y_onehot)
    if cfg.objective == "combined":
        return combined
    w_comb, w_tar = cfg.dual_weights
    return tn.add(tn.mul(combined, w_comb), tn.mul(tn.cross_entropy(p, y_onehot), w_tar))


def input_gradient(x_adv: np.ndarray, y_onehot, cfg, target, trans, y_target=None) -> np.ndarray:
    xt = tn.Tensor(x_adv, requires_grad=True)
    loss = attack_loss(xt, y_onehot, cfg, target, trans, y_target)
    tn.backward(loss)
    return xt.grad


def project(x_adv: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Project onto the epsilon-ball around ``x`` then clip to the unit box."""
    delta = x_adv - x
    if cfg.norm == "linf":
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    else:
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        over = norms > cfg.epsilon
        scale = np.where(over, cfg.epsilon / np.where(over, norms, 1.0), 1.0)
        delta = delta * scale
    return np.clip(x + delta, 0.0, 1.0)


def random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.norm == "linf":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        direction = rng.standard_normal(size=x.shape)
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = direction / np.where(norms > 0, norms, 1.0)
        delta = direction * rng.uniform(0.0, cfg.epsilon, size=(x.shape[0], 1))
    return project(x + delta, x, cfg)


def pgd(x: np.ndarray, y: np.ndarray, cfg: AttackConfig, target: TargetClassifier,
        trans: Optional[TransitionNetwork] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Projected gradient ascent on :func:`attack_loss` within the configured ball.

    A row whose L2 gradient is exactly zero keeps its iterate for that step.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    if cfg.uses_transition and trans is None:
        raise AttackConfigError(f"objective {cfg.objective!r} needs a transition network")
    y_onehot = tn.one_hot(y, target.n_classes)
    y_target = resolve_targets(x, y, cfg, target, trans) if cfg.mode == "target" else None

    if cfg.random_start:
        if rng is None:
            raise ValueError("random start needs an explicit rng")
        x_adv = random_start(x, cfg, rng)
    else:
        x_adv = x.copy()
    if cfg.epsilon == 0:
        return x.copy()

    for _ in range(cfg.steps):
        g = input_gradient(x_adv, y_onehot, cfg, target, trans, y_target)
        if cfg.norm == "linf":
            step = np.sign(g)
        else:
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            step = np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)
        x_adv = project(x_adv + cfg.step_size * step, x, cfg)
    return x_adv


def fgsm(x: np.ndarray, y: np.ndarray, epsilon: float, target: TargetClassifier,
         trans: Optional[TransitionNetwork] = None, objective: str = "combined", norm: str = "linf") -> np.ndarray:
    cfg = AttackConfig(norm=norm, epsilon=epsilon, steps=1, step_size=epsilon,
                       random_start=False, objective=objective, name="FGSM")
    return pgd(x, y, cfg, target, trans)


def assign_adversarial_label(x_adv: np.ndarray, target: TargetClassifier) -> np.ndarray:
    """argmax of softmax(h(x)); np.argmax resolves ties to the lowest class index."""
    return np.argmax(target.raw_numpy(np.atleast_2d(x_adv)), axis=1)

