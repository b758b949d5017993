"""Command-line driver: ``manlab {train,eval,detect,transfer,masking}``.

Every command resolves the config, writes it next to its outputs as
``resolved_config.yaml`` and derives all randomness from the config seed,
so rerunning with the same config and seed reproduces every metric file
bitwise. Wall-clock time goes to ``timing.json`` only.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from . import plotting
from .attacks import AttackConfig, AttackConfigError, pgd
from .datasets import DatasetConfigError, TableParseError
from .detection import (
    accuracy_table,
    attack_rng,
    detection_scores,
    masking_battery,
    train_surrogate,
    transfer_evaluate,
)
from .models import TargetClassifier, load_model, save_model, transition_numpy
from .training import (
    DivergenceError,
    TrainConfig,
    TrainConfigError,
    evaluate_accuracy,
    fine_tune_transition,
    train,
)

log = logging.getLogger("manlab")

ENV_OUT = "MANLAB_OUT"
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_FAILED = 1

METRIC_FIELDS = ("epoch", "loss_T", "loss_tar", "nat_acc", "adv_acc", "n_natural", "n_adversarial")
TABLE_FIELDS = ("attack", "accuracy", "model_t")


class OutputError(RuntimeError):
    pass


# file helpers

def _num(v):
    """Floats as repr (round-trips exactly); NaN as 'nan'."""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_atomic(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, fields, rows) -> None:
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _num(r[k]) for k in fields})
    os.replace(tmp, path)


class MetricLog:
    """Append-only ``metrics.csv.partial``; renamed to ``metrics.csv`` only when the run finishes."""

    def __init__(self, path: Path):
        self.final = path
        self.partial = path.with_name(path.name + ".partial")
        self.fh = self.partial.open("w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=list(METRIC_FIELDS), lineterminator="\n")
        self.w.writeheader()
        self.fh.flush()

    def __call__(self, row) -> None:
        self.w.writerow({k: _num(v) for k, v in asdict(row).items()})
        self.fh.flush()

    def close(self, finished: bool) -> None:
        self.fh.close()
        if finished:
            os.replace(self.partial, self.final)


# setup shared by all commands

def prepare_output(out: Path | None, command: str, cfg_hash: str, default_parent: Path | None = None) -> Path:
    if out is None:
        root = Path(os.environ.get(ENV_OUT, "runs")) if default_parent is None else default_parent
        out = root / f"{command}-{cfg_hash[:12]}"
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise OutputError(f"output directory {out} is not empty; pick a fresh --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_checkpoints(run_dir: Path, need_transition: bool = False):
    run_dir = Path(run_dir)
    tpath = run_dir / "target.json" if run_dir.is_dir() else run_dir
    if not tpath.exists():
        raise FileNotFoundError(f"no target checkpoint at {tpath}")
    target = load_model(tpath)
    trans_path = tpath.with_name("transition.json")
    trans = load_model(trans_path) if trans_path.exists() else None
    if need_transition and trans is None:
        raise TrainConfigError(f"{run_dir} has no transition.json; this command needs a transition network")
    return target, trans


def check_compatible(data, *models) -> None:
    for m in models:
        if m is None:
            continue
        if m.n_classes != data.n_classes or m.input_dim != data.dim:
            raise TrainConfigError(
                f"checkpoint expects {m.input_dim} features and {m.n_classes} classes, "
                f"config dataset has {data.dim} and {data.n_classes}")


def train_config(cfg: dict, seeds: dict, regime: str | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            regime=regime or t["regime"], epochs=t["epochs"] if epochs is None else epochs,
            batch_size=t["batch_size"], lr=t["lr"], lr_milestones=tuple(t["lr_milestones"]),
            lr_decay=t["lr_decay"], momentum=t["momentum"], weight_decay=t["weight_decay"],
            attack=C.to_attack(cfg["attack"]), include_failed=t["include_failed"], joint_flow=t["joint_flow"],
            warmup_epochs=t["warmup_epochs"], seed=seeds["shuffle"])
    except TrainConfigError as exc:
        raise C.ConfigError("train", str(exc)) from None


def pretrain_target(cfg: dict, data, seeds: dict) -> TargetClassifier:
    tc = train_config(cfg, seeds, regime="natural", epochs=cfg["train"]["pretrain_epochs"])
    hidden = tuple(cfg["model"]["hidden"])
    target, _, _ = train(tc, data, hidden=hidden, init_seeds=(seeds["init_target"], seeds["init_trans"]),
                         eval_every=0)
    return target


def eval_attacks(cfg: dict) -> list[AttackConfig]:
    return [C.to_attack(a) for a in cfg["eval"]["attacks"]]


# commands

def cmd_train(cfg: dict, out: Path, seeds: dict) -> dict:
    data = C.build_dataset(cfg, seeds["data"])
    tc = train_config(cfg, seeds)
    hidden = tuple(cfg["model"]["hidden"])
    target = None
    if tc.regime in ("frozen_target", "man_minus"):
        ckpt = cfg["train"]["target_checkpoint"]
        if ckpt:
            target, _ = load_checkpoints(Path(ckpt))
            check_compatible(data, target)
        else:
            target = pretrain_target(cfg, data, seeds)
    attacks = eval_attacks(cfg)
    metrics = MetricLog(out / "metrics.csv")
    try:
        target, trans, record = train(
            tc, data, target=target, hidden=hidden, init_seeds=(seeds["init_target"], seeds["init_trans"]),
            eval_attack=attacks[0] if attacks else None, eval_rng_seed=seeds["attack"],
            on_epoch=metrics, eval_every=cfg["train"]["eval_every"])
    except DivergenceError as exc:
        metrics.close(finished=False)
        write_json(out / "summary.partial.json", {
            "error": str(exc), "config_hash": C.config_hash(cfg), "seed": cfg["seed"],
            "epochs": [asdict(r) for r in exc.record.epochs]})
        raise
    metrics.close(finished=True)

    save_model(target, out / "target.json", seed=seeds["init_target"])
    if trans is not None:
        save_model(trans, out / "transition.json", seed=seeds["init_trans"])
    table = accuracy_table(target, trans, data.test, attacks, seed=seeds["attack"])
    rows = [asdict(r) for r in record.epochs]
    write_json(out / "summary.json", {
        "config_hash": C.config_hash(cfg), "seed": cfg["seed"], "seeds": seeds, "regime": tc.regime,
        "epochs_run": len(rows), "warmup_epochs": tc.n_warmup, "last_epoch": rows[-1] if rows else None,
        "final": table})
    write_csv(out / "final.csv", TABLE_FIELDS, table)
    plotting.training_curves(rows, out / "training_curves.png")
    plotting.accuracy_bars(table, out / "final_accuracy.png", f"{tc.regime}: test accuracy")
    return {"final": table}


def cmd_eval(cfg: dict, out: Path, seeds: dict, checkpoint: Path) -> dict:
    data = C.build_dataset(cfg, seeds["data"])
    target, trans = load_checkpoints(checkpoint)
    check_compatible(data, target, trans)
    table = accuracy_table(target, trans, data.test, eval_attacks(cfg), seed=seeds["attack"])
    write_csv(out / "eval.csv", TABLE_FIELDS, table)

    sweep_cfg = C.to_attack(cfg["eval"]["sweep_attack"])
    sweep = []
    for i, eps in enumerate(cfg["eval"]["sweep_epsilons"]):
        acc, acc_t = evaluate_accuracy(target, trans, data.test, sweep_cfg.with_(epsilon=float(eps)),
                                       attack_rng(seeds["attack"], 1000 + i), return_target_only=True)
        sweep.append({"epsilon": float(eps), "accuracy": acc, "model_t": acc_t})
    write_csv(out / "sweep.csv", ("epsilon", "accuracy", "model_t"), sweep)

    plotting.accuracy_bars(table, out / "eval.png", "accuracy per attack")
    if sweep:
        plotting.epsilon_sweep([r["epsilon"] for r in sweep],
                               {"combined": [r["accuracy"] for r in sweep],
                                "target alone": [r["model_t"] for r in sweep]}, out / "sweep.png")
    return {"eval": table}


def cmd_detect(cfg: dict, out: Path, seeds: dict, checkpoint: Path) -> dict:
    data = C.build_dataset(cfg, seeds["data"])
    target, trans = load_checkpoints(checkpoint, need_transition=True)
    check_compatible(data, target, trans)
    attack = C.to_attack(cfg["detect"]["attack"])
    x_adv = pgd(data.test.x, data.test.y, attack, target, trans, attack_rng(seeds["attack"], 0))
    scores, value = detection_scores(target, trans, data.test.x, x_adv)
    write_csv(out / "detect.csv", ("id", "predicted", "p", "score", "truth"), [s.as_row() for s in scores])

    s = np.array([d.score for d in scores])
    adv = np.array([d.truth == "adversarial" for d in scores])
    flagged = np.array([d.flagged for d in scores])
    summary = {"auroc": value, "n_natural": int((~adv).sum()), "n_adversarial": int(adv.sum()),
               "mean_score_natural": float(s[~adv].mean()), "mean_score_adversarial": float(s[adv].mean()),
               "flagged_natural": float(flagged[~adv].mean()), "flagged_adversarial": float(flagged[adv].mean()),
               "attack": attack.to_dict()}
    write_json(out / "detect_summary.json", summary)

    plotting.roc_curve(s, adv, out / "roc.png", value)
    plotting.matrix_heatmaps({"natural": transition_numpy(trans, data.test.x).mean(0),
                              "adversarial": transition_numpy(trans, x_adv).mean(0)},
                             out / "transition_matrices.png")
    return summary


def cmd_transfer(cfg: dict, out: Path, seeds: dict, checkpoint: Path) -> dict:
    data = C.build_dataset(cfg, seeds["data"])
    target_a, trans = load_checkpoints(checkpoint, need_transition=True)
    check_compatible(data, target_a, trans)
    tcfg = cfg["transfer"]
    if tcfg["target_checkpoint"]:
        target_b, _ = load_checkpoints(Path(tcfg["target_checkpoint"]))
        check_compatible(data, target_b)
    else:
        # independent target: its own init and shuffle streams
        aux = np.random.SeedSequence(seeds["aux"]).generate_state(2)
        b_seeds = dict(seeds, init_target=int(aux[0]), shuffle=int(aux[1]))
        target_b, _, _ = train(train_config(cfg, b_seeds, regime="natural", epochs=tcfg["target_epochs"]), data,
                               hidden=tuple(cfg["model"]["hidden"]), init_seeds=(b_seeds["init_target"], 0),
                               eval_every=0)
    attacks = eval_attacks(cfg)
    rows = []
    for setting, t, m in (("source", target_a, trans), ("undefended_b", target_b, None)):
        rows += [dict(r, setting=setting) for r in accuracy_table(t, m, data.test, attacks, seeds["attack"])]
    rows += [dict(r, setting="transfer") for r in transfer_evaluate(trans, target_b, data.test, attacks, seeds["attack"])]
    if tcfg["fine_tune_epochs"] > 0:
        ft = train_config(cfg, seeds, regime=tcfg["fine_tune_regime"], epochs=tcfg["fine_tune_epochs"])
        tuned, _ = fine_tune_transition(trans, target_b, data, ft, eval_every=0)
        save_model(tuned, out / "transition_finetuned.json")
        rows += [dict(r, setting="fine_tuned")
                 for r in transfer_evaluate(tuned, target_b, data.test, attacks, seeds["attack"])]
    save_model(target_b, out / "target_b.json")
    write_csv(out / "transfer.csv", ("setting",) + TABLE_FIELDS, rows)
    first = attacks[0].name if attacks else "None"
    plotting.accuracy_bars([dict(r, attack=r["setting"]) for r in rows if r["attack"] == first],
                           out / "transfer.png", f"transfer under {first}")
    return {"transfer": rows}


def cmd_masking(cfg: dict, out: Path, seeds: dict, checkpoint: Path) -> dict:
    data = C.build_dataset(cfg, seeds["data"])
    target, trans = load_checkpoints(checkpoint)
    check_compatible(data, target, trans)
    m = cfg["masking"]
    attack = AttackConfig(epsilon=m["base_eps"], steps=m["steps"],
                          objective="combined" if trans is not None else "target_only")
    surrogate = train_surrogate(data, attack.with_(objective="target_only", steps=10), m["surrogate_epochs"],
                                seed=seeds["aux"], hidden=tuple(target.hidden))
    report = masking_battery(target, trans, data, m["base_eps"], attack=attack, surrogate=surrogate,
                             n_random=m["n_random"], max_robust_points=m["max_robust_points"],
                             seed=seeds["attack"])
    write_json(out / "masking.json", report)
    sweep = report["checks"][-1]["values"]
    plotting.epsilon_sweep(sweep["epsilons"], {"white-box accuracy": sweep["accuracies"]}, out / "masking.png")
    return report


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "detect": cmd_detect, "transfer": cmd_transfer,
            "masking": cmd_masking}

ARTIFACTS = {
    "train": ["resolved_config.yaml", "metrics.csv", "summary.json", "final.csv", "target.json",
              "training_curves.png", "final_accuracy.png"],
    "eval": ["resolved_config.yaml", "eval.csv", "sweep.csv", "eval.png"],
    "detect": ["resolved_config.yaml", "detect.csv", "detect_summary.json", "roc.png", "transition_matrices.png"],
    "transfer": ["resolved_config.yaml", "transfer.csv", "target_b.json", "transfer.png"],
    "masking": ["resolved_config.yaml", "masking.json", "masking.png"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML/JSON run config")
        sp.add_argument("--out", type=Path, help=f"output directory (default: ${ENV_OUT} or ./runs, "
                                                 "or a subfolder of --checkpoint)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name != "train":
            sp.add_argument("--checkpoint", type=Path, required=True,
                            help="run directory holding target.json (and transition.json)")
    return p


def resolve_config(args) -> dict:
    if args.config is not None:
        raw_path = args.config
    elif getattr(args, "checkpoint", None) is not None and (Path(args.checkpoint) / "resolved_config.yaml").exists():
        raw_path = Path(args.checkpoint) / "resolved_config.yaml"
    else:
        raise C.ConfigError("<file>", "no --config given and the checkpoint has no resolved_config.yaml")
    try:
        raw = yaml.safe_load(Path(raw_path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise C.ConfigError("<file>", str(exc)) from None
    if args.seed is not None:
        if not isinstance(raw, dict):
            raise C.ConfigError("<root>", "config must be a mapping")
        raw["seed"] = args.seed
    return C.resolve(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    try:
        cfg = resolve_config(args)
        h = C.config_hash(cfg)
        parent = None if args.out or cmd == "train" else Path(args.checkpoint)
        out = prepare_output(args.out, cmd, h, parent)
        C.dump(cfg, out / "resolved_config.yaml")
        seeds = C.component_seeds(cfg)
        start = time.perf_counter()
        extra = {} if cmd == "train" else {"checkpoint": Path(args.checkpoint)}
        COMMANDS[cmd](cfg, out, seeds, **extra)
        write_json(out / "timing.json", {"command": cmd, "wall_clock_seconds": time.perf_counter() - start})
    except (C.ConfigError, OutputError) as exc:
        print(f"manlab {cmd}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"manlab {cmd}: training diverged: {exc} (partial record kept)", file=sys.stderr)
        return EXIT_DIVERGED
    except (TrainConfigError, AttackConfigError, DatasetConfigError, TableParseError, FileNotFoundError,
            ValueError) as exc:
        print(f"manlab {cmd}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    missing = [a for a in ARTIFACTS[cmd] if not (out / a).exists()]
    if missing:
        print(f"manlab {cmd}: missing outputs {missing}", file=sys.stderr)
        return EXIT_FAILED
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
