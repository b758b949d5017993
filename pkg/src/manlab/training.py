"""Joint training of the target model and the transition network, plus baselines.

Regimes:

``joint``          both networks trained on mixture batches, adaptive inner attack
``at_baseline``    target alone, plain CE on mixture batches, attack on h only
``natural``        target alone on natural data (undefended reference)
``frozen_target``  transition network only; inner attack aims at the fixed target
``man_minus``      transition network only; fixed pre-trained target, adaptive attack

``joint`` starts with a few natural epochs on the target (``warmup_epochs``).
From a fresh initialization h predicts one class for every input of a small
low-dimensional problem, so every adversarial label is that class; the
transition network then learns to classify on its own and h never recovers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .attacks import AttackConfig, assign_adversarial_label, pgd
from .datasets import DataSplit, Dataset
from .models import (
    TargetClassifier,
    TransitionNetwork,
    infer_natural_posterior,
    predict,
    row_select,
    target_forward,
    transition_forward,
)

log = logging.getLogger(__name__)

REGIMES = ("joint", "at_baseline", "natural", "frozen_target", "man_minus")


class TrainConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, record: "RunRecord"):
        super().__init__(msg)
        self.record = record


@dataclass
class TrainConfig:
    regime: str = "joint"
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (0.75, 0.9)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.1, steps=10, objective="combined"))
    include_failed: bool = True
    joint_flow: bool = False
    warmup_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise TrainConfigError("epochs and warmup_epochs must be >= 0")
        if self.regime in ("at_baseline", "frozen_target") and self.attack.uses_transition:
            self.attack = self.attack.with_(objective="target_only", mode="nontarget", step_size=self.attack.step_size)
        if self.regime in ("joint", "man_minus") and not self.attack.uses_transition:
            raise TrainConfigError(f"regime {self.regime!r} needs an adaptive attack objective")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for frac in self.lr_milestones:
            if epoch >= int(round(frac * self.epochs)):
                lr *= self.lr_decay
        return lr

    @property
    def n_warmup(self) -> int:
        return self.warmup_epochs if self.regime == "joint" else 0

    @property
    def trains_target(self) -> bool:
        return self.regime in ("joint", "at_baseline", "natural")

    @property
    def trains_transition(self) -> bool:
        return self.regime in ("joint", "frozen_target", "man_minus")


@dataclass
class EpochRow:
    epoch: int
    loss_T: float
    loss_tar: float
    nat_acc: float
    adv_acc: float
    n_natural: int = 0
    n_adversarial: int = 0


@dataclass
class RunRecord:
    regime: str
    seed: int
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


@dataclass
class MixtureBatch:
    """Structure-of-arrays view of mixture triplets: naturals first, then adversarials."""
    x: np.ndarray
    y_mix: np.ndarray
    y_nat: np.ndarray
    adversarial: np.ndarray

    def __len__(self) -> int:
        return len(self.y_nat)

    def triplets(self):
        for xi, ym, yn, adv in zip(self.x, self.y_mix, self.y_nat, self.adversarial):
            yield xi, int(ym), int(yn), "adversarial" if adv else "natural"


def build_mixture_batch(x: np.ndarray, y: np.ndarray, target: TargetClassifier,
                        trans: Optional[TransitionNetwork], attack: AttackConfig,
                        rng: Optional[np.random.Generator] = None, include_failed: bool = True) -> MixtureBatch:
    """Attack each natural pair and return the 2m mixture triplets.

    With ``include_failed=False`` adversarial rows whose label was not
    flipped are dropped, so the batch may be shorter than 2m.
    """
    if attack.uses_transition and trans is None:
        raise TrainConfigError(f"attack objective {attack.objective!r} needs a transition network")
    if x.shape[1] != target.input_dim:
        raise TrainConfigError(f"batch width {x.shape[1]} != model input width {target.input_dim}")
    x_adv = pgd(x, y, attack, target, trans, rng)
    y_adv = assign_adversarial_label(x_adv, target)
    keep = np.ones(len(y), dtype=bool) if include_failed else y_adv != y
    m = len(y)
    return MixtureBatch(
        x=np.concatenate([x, x_adv[keep]]),
        y_mix=np.concatenate([y, y_adv[keep]]),
        y_nat=np.concatenate([y, y[keep]]),
        adversarial=np.concatenate([np.zeros(m, bool), np.ones(int(keep.sum()), bool)]),
    )


def loss_transition(batch: MixtureBatch, trans: TransitionNetwork, T: Optional[tn.Tensor] = None) -> tn.Tensor:
    """Mean CE between the mixture-label row of T(x') and the natural label."""
    if T is None:
        T = transition_forward(trans, batch.x)
    c = trans.n_classes
    rows = row_select(tn.one_hot(batch.y_mix, c), T)
    return tn.cross_entropy(rows, tn.one_hot(batch.y_nat, c))


def loss_target(batch: MixtureBatch, target: TargetClassifier, trans: TransitionNetwork,
                T: Optional[tn.Tensor] = None, through_transition: bool = False) -> tn.Tensor:
    """Mean CE between T(x')^T softmax(h(x')) and the natural label.

    By default T enters as a constant so this loss only drives the target
    parameters; ``through_transition`` lets its gradient reach the
    transition network as well.
    """
    if T is None:
        T = transition_forward(trans, batch.x)
    if not through_transition:
        T = tn.constant(T.data)
    p = tn.softmax(target_forward(target, batch.x), axis=-1)
    post = infer_natural_posterior(p, T)
    return tn.cross_entropy(post, tn.one_hot(batch.y_nat, target.n_classes))


def plain_target_loss(batch: MixtureBatch, target: TargetClassifier) -> tn.Tensor:
    p = tn.softmax(target_forward(target, batch.x), axis=-1)
    return tn.cross_entropy(p, tn.one_hot(batch.y_nat, target.n_classes))


def evaluate_accuracy(target: TargetClassifier, trans: Optional[TransitionNetwork], data: Dataset,
                      attack: Optional[AttackConfig] = None, rng: Optional[np.random.Generator] = None,
                      return_target_only: bool = False):
    """Accuracy of argmax of the combined posterior (or of h alone when ``trans`` is None).

    Under an attack each instance is perturbed first. Without a transition
    network, adaptive objectives fall back to attacking h directly: the
    composition is then the identity. ``return_target_only`` also returns
    the accuracy of h alone on the same perturbed inputs.
    """
    x = data.x
    if attack is not None:
        cfg = attack
        if trans is None and cfg.uses_transition:
            if cfg.objective == "matrix":
                raise TrainConfigError("matrix attack needs a transition network")
            cfg = cfg.with_(objective="target_only", step_size=cfg.step_size)
        x = pgd(data.x, data.y, cfg, target, trans, rng)
    acc = float(np.mean(predict(target, trans, x) == data.y))
    if return_target_only:
        return acc, float(np.mean(predict(target, None, x) == data.y))
    return acc


def train(config: TrainConfig, data: DataSplit, target: Optional[TargetClassifier] = None,
          trans: Optional[TransitionNetwork] = None, hidden: tuple = (64, 64),
          init_seeds: tuple = (1, 2), eval_attack: Optional[AttackConfig] = None,
          eval_rng_seed: int = 0, on_epoch: Optional[Callable[[EpochRow], None]] = None,
          eval_every: int = 1):
    """Run one training regime; returns ``(target, trans, record)``.

    Networks passed in are trained in place. Regimes with a fixed target
    require ``target`` (a pre-trained model). Per-epoch adversarial accuracy
    is measured on the test split with ``eval_attack`` (default: the
    training attack with 40 steps).
    """
    train_set = data.train
    d, c = train_set.dim, train_set.n_classes
    if config.regime in ("frozen_target", "man_minus") and target is None:
        raise TrainConfigError(f"regime {config.regime!r} needs a pre-trained target model")
    if target is None:
        target = TargetClassifier(d, c, hidden, seed=init_seeds[0])
    if target.n_classes != c or target.input_dim != d:
        raise TrainConfigError("target model does not match the dataset's width or class count")
    if not config.trains_transition:
        trans = None
    elif trans is None:
        trans = TransitionNetwork(d, c, hidden, seed=init_seeds[1])
    elif trans.n_classes != c or trans.input_dim != d:
        raise TrainConfigError("transition network does not match the dataset's width or class count")

    rng = np.random.default_rng(config.seed)
    if eval_attack is None:
        eval_attack = config.attack.with_(steps=40)
    record = RunRecord(config.regime, config.seed)
    n = len(train_set)

    n_warm = config.n_warmup
    for epoch in range(n_warm + config.epochs):
        warm = epoch < n_warm
        lr = config.lr if warm else config.lr_at(epoch - n_warm)
        order = rng.permutation(n)
        sums = np.zeros(2)
        count = 0
        n_nat = n_adv = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = train_set.x[idx], train_set.y[idx]
            if config.regime == "natural" or warm:
                batch = MixtureBatch(xb, yb, yb, np.zeros(len(yb), bool))
            else:
                batch = build_mixture_batch(xb, yb, target, trans, config.attack, rng, config.include_failed)
            lt, ltar = _step(config, batch, target, None if warm else trans, lr)
            if not all(math.isfinite(v) for v in (lt, ltar) if v is not None):
                record.final["error"] = f"non-finite loss at epoch {epoch}, batch {bi}"
                raise DivergenceError(record.final["error"], record)
            sums += (math.nan if lt is None else lt, ltar)
            count += 1
            n_adv += int(batch.adversarial.sum())
            n_nat += len(batch) - int(batch.adversarial.sum())
        row = EpochRow(epoch, *(sums / max(count, 1)), math.nan, math.nan, n_nat, n_adv)
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == n_warm + config.epochs - 1):
            row.nat_acc = evaluate_accuracy(target, trans, data.test)
            row.adv_acc = evaluate_accuracy(target, trans, data.test, eval_attack,
                                            np.random.default_rng(eval_rng_seed))
        record.epochs.append(row)
        log.info("epoch %d lr %.4g loss_T %.4f loss_tar %.4f nat %.3f adv %.3f",
                 epoch, lr, row.loss_T, row.loss_tar, row.nat_acc, row.adv_acc)
        if on_epoch is not None:
            on_epoch(row)
    return target, trans, record


def _step(config: TrainConfig, batch: MixtureBatch, target: TargetClassifier,
          trans: Optional[TransitionNetwork], lr: float) -> tuple[Optional[float], float]:
    """One forward pass, both losses, then the parameter updates. Returns (loss_T, loss_tar)."""
    if trans is None:
        loss = plain_target_loss(batch, target)
        tn.backward(loss)
        tn.sgd_step(target.params, lr, config.momentum, config.weight_decay)
        return None, loss.item()

    train_target = config.trains_target
    T = transition_forward(trans, batch.x)
    l_T = loss_transition(batch, trans, T)
    if train_target:
        l_tar = loss_target(batch, target, trans, T, through_transition=config.joint_flow)
        tn.backward(tn.add(l_T, l_tar))
        tn.sgd_step(target.params, lr, config.momentum, config.weight_decay)
        tar_value = l_tar.item()
    else:
        tn.backward(l_T)
        p = tn.constant(tn.softmax(target_forward(target, batch.x, track_params=False)).data)
        post = infer_natural_posterior(p, tn.constant(T.data))
        tar_value = tn.cross_entropy(post, tn.one_hot(batch.y_nat, target.n_classes)).item()
    tn.sgd_step(trans.params, lr, config.momentum, config.weight_decay)
    return l_T.item(), tar_value


def fine_tune_transition(trans: TransitionNetwork, target_b: TargetClassifier, data: DataSplit,
                         config: TrainConfig, **kw) -> tuple[TransitionNetwork, RunRecord]:
    """Continue training a copy of ``trans`` with ``target_b`` held fixed.

    The inner attack is adaptive on (target_b, trans) unless ``config`` asks
    for the ``frozen_target`` regime, in which case it aims at target_b alone.
    """
    if trans.n_classes != target_b.n_classes:
        raise TrainConfigError(
            f"transition network has {trans.n_classes} classes, target has {target_b.n_classes}")
    tuned = trans.copy()
    for k in tuned.params.momentum:
        tuned.params.momentum[k][...] = 0.0
    regime = config.regime if config.regime in ("frozen_target", "man_minus") else "man_minus"
    cfg = replace(config, regime=regime)
    _, tuned, record = train(cfg, data, target=target_b, trans=tuned, **kw)
    return tuned, record
