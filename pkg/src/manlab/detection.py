"""Detection from the transition-matrix diagonal, AUROC, transfer evaluation
and sanity checks for gradient masking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackConfig, fgsm, pgd
from .datasets import DataSplit, Dataset
from .models import TargetClassifier, TransitionNetwork, predict, transition_numpy
from .training import TrainConfig, TrainConfigError, evaluate_accuracy, train

TRUTH = ("natural", "adversarial")


@dataclass
class DetectionScore:
    index: int
    predicted: int
    p: float
    score: float
    truth: str = "natural"
    flagged: bool = False  # comparative rule: indexed diagonal entry is not the largest one

    def as_row(self) -> dict:
        return {"id": self.index, "predicted": self.predicted, "p": repr(self.p),
                "score": repr(self.score), "truth": self.truth}


def detect_score(x: np.ndarray, target: TargetClassifier, trans: TransitionNetwork,
                 truth: str = "natural", start_id: int = 0):
    """Score ``1 - T[k, k]`` with k the target's predicted label.

    A single instance (1-D ``x``) gives one DetectionScore, a batch gives a list.
    """
    if truth not in TRUTH:
        raise ValueError(f"truth must be one of {TRUTH}")
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    k = np.argmax(target.raw_numpy(x), axis=1)
    diag = np.diagonal(transition_numpy(trans, x), axis1=1, axis2=2)
    p = np.clip(diag[np.arange(len(k)), k], 0.0, 1.0)
    flagged = p < diag.max(axis=1)
    out = [DetectionScore(start_id + i, int(k[i]), float(p[i]), float(1.0 - p[i]), truth, bool(flagged[i]))
           for i in range(len(k))]
    return out[0] if single else out


def auroc(scores, is_adversarial=None) -> float:
    """P(random adversarial outscores random natural), ties counted one half.

    Accepts a list of DetectionScore, or raw scores plus a boolean mask.
    """
    if is_adversarial is None:
        s = np.array([d.score for d in scores], dtype=np.float64)
        pos = np.array([d.truth == "adversarial" for d in scores])
    else:
        s = np.asarray(scores, dtype=np.float64)
        pos = np.asarray(is_adversarial, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both natural and adversarial instances")
    # midranks are half-integers, so the count below is exact for any realistic size
    ranks = rankdata(s, method="average")
    wins = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(wins / (n_pos * n_neg))


def detection_run(target: TargetClassifier, trans: TransitionNetwork, data: Dataset,
                  attack: AttackConfig, rng: Optional[np.random.Generator] = None):
    """Score every natural test instance and its PGD counterpart. Returns (scores, auroc)."""
    return detection_scores(target, trans, data.x, pgd(data.x, data.y, attack, target, trans, rng))


def detection_scores(target, trans, x_nat: np.ndarray, x_adv: np.ndarray):
    """Naturals get ids 0..n-1, adversarials continue from n."""
    scores = (detect_score(x_nat, target, trans, "natural", 0)
              + detect_score(x_adv, target, trans, "adversarial", len(x_nat)))
    return scores, auroc(scores)


def attack_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def accuracy_table(target: TargetClassifier, trans: Optional[TransitionNetwork], data: Dataset,
                   attacks: Sequence[AttackConfig], seed: int = 0) -> list[dict]:
    """One row per attack, preceded by the clean "None" row.

    ``accuracy`` is the combined model, ``model_t`` the target alone on the same
    perturbed inputs. Attack i draws its random start from ``attack_rng(seed, i)``.
    """
    rows = []
    acc, acc_t = evaluate_accuracy(target, trans, data, return_target_only=True)
    rows.append({"attack": "None", "accuracy": acc, "model_t": acc_t})
    for i, cfg in enumerate(attacks):
        acc, acc_t = evaluate_accuracy(target, trans, data, cfg, attack_rng(seed, i), return_target_only=True)
        rows.append({"attack": cfg.name, "accuracy": acc, "model_t": acc_t})
    return rows


def transfer_evaluate(trans: TransitionNetwork, target_b: TargetClassifier, data: Dataset,
                      attacks: Sequence[AttackConfig], seed: int = 0) -> list[dict]:
    """Accuracy table for ``target_b`` composed with a transition network trained elsewhere."""
    if trans.n_classes != target_b.n_classes or trans.input_dim != target_b.input_dim:
        raise TrainConfigError(
            f"transition network ({trans.input_dim} -> {trans.n_classes} classes) does not fit "
            f"target ({target_b.input_dim} -> {target_b.n_classes} classes)")
    return accuracy_table(target_b, trans, data, attacks, seed)


# gradient-masking battery

MASKING_CHECKS = ("fgsm_vs_pgd", "black_box", "unbounded", "random_sampling", "budget_sweep")


def _check(name: str, passed: bool, **values) -> dict:
    return {"name": name, "passed": bool(passed), "values": values}


def random_ball_misclassified(target, trans, x: np.ndarray, y: int, cfg: AttackConfig, n_samples: int,
                              rng: np.random.Generator, chunk: int = 20_000) -> int:
    """How many of ``n_samples`` uniform draws from the clipped eps-ball around x are misclassified."""
    wrong = 0
    d = x.shape[0]
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        if cfg.norm == "linf":
            delta = rng.uniform(-cfg.epsilon, cfg.epsilon, (m, d))
        else:
            u = rng.standard_normal((m, d))
            u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
            delta = u * cfg.epsilon * rng.uniform(0, 1, (m, 1)) ** (1.0 / d)
        xs = np.clip(x[None, :] + delta, 0.0, 1.0)
        wrong += int(np.sum(predict(target, trans, xs) != y))
        left -= m
    return wrong


def train_surrogate(data: DataSplit, attack: AttackConfig, epochs: int = 60, seed: int = 1000,
                    hidden: tuple = (64, 64)) -> TargetClassifier:
    """Adversarially trained stand-in model with its own seeds, used to craft black-box inputs."""
    cfg = TrainConfig(regime="at_baseline", epochs=epochs, attack=attack, seed=seed)
    model, _, _ = train(cfg, data, hidden=hidden, init_seeds=(seed + 1, seed + 2), eval_every=0)
    return model


def robust_mask(target, trans, data: Dataset, attack: AttackConfig, rng: np.random.Generator) -> dict:
    """Per-instance worst case of the attack from a random start and from the natural point.

    With a random start alone, sign steps on the composed posterior sometimes
    settle in a corner that does not flip the label while the one-step
    attack finds one that does, so both starts are tried.
    """
    starts = {"random": attack.with_(random_start=True, step_size=attack.step_size),
              "natural": attack.with_(random_start=False, step_size=attack.step_size)}
    ok = {k: predict(target, trans, pgd(data.x, data.y, cfg, target, trans, rng)) == data.y
          for k, cfg in starts.items()}
    return {"robust": ok["random"] & ok["natural"],
            "random_start_accuracy": float(ok["random"].mean()),
            "natural_start_accuracy": float(ok["natural"].mean())}


def masking_battery(target: TargetClassifier, trans: Optional[TransitionNetwork], data: DataSplit,
                    base_eps: float, attack: Optional[AttackConfig] = None,
                    surrogate: Optional[TargetClassifier] = None, surrogate_epochs: int = 60,
                    n_random: int = 100_000, max_robust_points: int = 20, seed: int = 0) -> dict:
    """Five checks whose failure would point at obfuscated gradients rather than robustness.

    ``attack`` is the white-box reference (default: adaptive PGD-40 at
    ``base_eps``), scored per instance as the worst of a random and a natural
    start (:func:`robust_mask`). Each check reports ``passed`` plus the numbers
    behind it. A missing surrogate is adversarially trained here with its own seeds.
    """
    test = data.test
    if attack is None:
        attack = AttackConfig(epsilon=base_eps, steps=40, objective="combined" if trans is not None else "target_only")
    attack = attack.with_(epsilon=base_eps)
    checks = []

    wb = robust_mask(target, trans, test, attack, attack_rng(seed, 0))
    robust = wb["robust"]
    acc_wb = float(robust.mean())

    x_fgsm = fgsm(test.x, test.y, base_eps, target, trans, attack.objective, attack.norm)
    acc_fgsm = float(np.mean(predict(target, trans, x_fgsm) == test.y))
    checks.append(_check("fgsm_vs_pgd", acc_wb <= acc_fgsm, fgsm_accuracy=acc_fgsm, pgd_accuracy=acc_wb,
                         pgd_random_start_accuracy=wb["random_start_accuracy"],
                         pgd_natural_start_accuracy=wb["natural_start_accuracy"], pgd_steps=attack.steps))

    if surrogate is None:
        surrogate = train_surrogate(data, attack.with_(objective="target_only", steps=10),
                                    surrogate_epochs, seed=seed + 1000, hidden=tuple(target.hidden))
    bb_cfg = attack.with_(objective="target_only", mode="nontarget", step_size=attack.step_size)
    x_bb = pgd(test.x, test.y, bb_cfg, surrogate, None, attack_rng(seed, 1))
    acc_bb = float(np.mean(predict(target, trans, x_bb) == test.y))
    checks.append(_check("black_box", acc_bb >= acc_wb, black_box_accuracy=acc_bb, white_box_accuracy=acc_wb))

    big = robust_mask(target, trans, test, attack.with_(epsilon=1.0), attack_rng(seed, 2))
    acc_big = float(big["robust"].mean())
    checks.append(_check("unbounded", acc_big <= 0.05, accuracy=acc_big, epsilon=1.0, threshold=0.05))

    rng = attack_rng(seed, 3)
    idx = np.flatnonzero(robust)
    if len(idx) > max_robust_points:
        idx = np.sort(rng.choice(idx, max_robust_points, replace=False))
    hits = [random_ball_misclassified(target, trans, test.x[i], int(test.y[i]), attack, n_random, rng) for i in idx]
    broken = int(sum(h > 0 for h in hits))
    frac = broken / len(idx) if len(idx) else 0.0
    checks.append(_check("random_sampling", frac < 0.01, robust_points_checked=int(len(idx)),
                         points_broken=broken, misclassified_samples=int(sum(hits)),
                         samples_per_point=n_random))

    eps_list = [base_eps * m for m in (1, 2, 4, 8)]
    accs = [float(robust_mask(target, trans, test, attack.with_(epsilon=e), attack_rng(seed, 4))["robust"].mean())
            for e in eps_list]
    monotone = all(b <= a for a, b in zip(accs, accs[1:]))
    checks.append(_check("budget_sweep", monotone, epsilons=eps_list, accuracies=accs))

    return {"base_eps": base_eps, "attack": attack.to_dict(), "checks": checks,
            "all_passed": all(c["passed"] for c in checks)}
