"""Command-line front end.

Subcommands: search, train, attack, eval, transfer, report. Every run writes
the fully resolved config into its output directory; exit statuses are
category-coded (0 ok, 2 config error, 3 data error, 4 numeric divergence).
All written artifacts are deterministic functions of config and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attacks import transfer_attack
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_network_state,
    network_state,
)
from .config import (
    ConfigError,
    apply_overrides,
    attack_config_from,
    canonical_json,
    dataset_spec_from,
    eval_attacks_from,
    load_config,
    schedule_from,
    supernet_config_from,
    train_config_from,
)
from .data import DataError, load_dataset
from .genotypes import (
    SupernetConfig,
    genotype_from_text,
    genotype_to_text,
    load_genotype,
    save_genotype,
)
from .search import run_search
from .supernet import DiscreteNetwork
from .train import TrainingDivergence, adversarial_train, evaluate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robnas",
        description="Differentiable search, adversarial training, and attack "
                    "evaluation for robust convolutional architectures.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (merged over defaults)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override any config field, e.g. "
                            "--set search.epochs=12")
        return p

    common(sub.add_parser("search", help="run the two-stage architecture search"))

    p_train = common(sub.add_parser(
        "train", help="adversarially train a discretized genotype"))
    p_train.add_argument("--genotype", required=True,
                         help="genotype file produced by search")

    p_attack = common(sub.add_parser(
        "attack", help="run one attack against a trained checkpoint"))
    p_attack.add_argument("--checkpoint", required=True)

    p_eval = common(sub.add_parser(
        "eval", help="evaluate a checkpoint under the configured attacks"))
    p_eval.add_argument("--checkpoint", required=True)

    p_tr = common(sub.add_parser(
        "transfer", help="black-box transfer between two checkpoints"))
    p_tr.add_argument("--source", required=True)
    p_tr.add_argument("--target", required=True)

    p_rep = sub.add_parser("report", help="re-render a metrics log as a table")
    p_rep.add_argument("--metrics", required=True,
                       help="metrics.jsonl written by search or train")
    return parser


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.out is not None:
        cfg["output_dir"] = args.out
    return cfg


def _prepare_out(cfg: dict) -> str:
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(canonical_json(cfg))
    return out


def _write_jsonl(path: str, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _network_dtype(cfg: dict):
    return np.float32 if cfg.get("precision") == "float32" else np.float64


def _cmd_search(args) -> int:
    cfg = _resolve(args)
    schedule = schedule_from(cfg)
    net_config = supernet_config_from(cfg)
    dataset = load_dataset(dataset_spec_from(cfg))
    out = _prepare_out(cfg)
    result = run_search(schedule, net_config, dataset,
                        log=lambda row: print(
                            f"epoch {row['epoch']:3d} stage {row['stage']} "
                            f"val_adv {row['val_adversarial_loss']:.4f} "
                            f"val_nat {row['val_natural_loss']:.4f}",
                            file=sys.stderr))
    _write_jsonl(os.path.join(out, "metrics.jsonl"), result.metrics)
    geno_dir = os.path.join(out, "genotypes")
    os.makedirs(geno_dir, exist_ok=True)
    for epoch, genotype in result.genotype_history:
        save_genotype(genotype,
                      os.path.join(geno_dir, f"epoch_{epoch:04d}.genotype"))
    if result.genotype_history:
        save_genotype(result.final_genotype,
                      os.path.join(out, "genotype_final.genotype"))
    _write_selection_report(os.path.join(out, "selection_report.txt"), result)
    if result.diverged:
        print(f"search diverged: {result.divergence_message}",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _write_selection_report(path: str, result) -> None:
    """Per-epoch summary supporting manual rollback of a degraded search."""
    lines = ["epoch  stage  val_natural  val_adversarial  genotype_file"]
    for row in result.metrics:
        e = row["epoch"]
        lines.append(
            f"{e:5d}  {row['stage']:5d}  {row['val_natural_loss']:11.4f}  "
            f"{row['val_adversarial_loss']:15.4f}  "
            f"genotypes/epoch_{e:04d}.genotype")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _cmd_train(args) -> int:
    cfg = _resolve(args)
    genotype = load_genotype(args.genotype)
    train_cfg = train_config_from(cfg)
    net_config = supernet_config_from(cfg)
    dataset = load_dataset(dataset_spec_from(cfg))
    out = _prepare_out(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    network = DiscreteNetwork(genotype, net_config, rng=rng,
                              dtype=_network_dtype(cfg))
    meta = {"genotype": genotype_to_text(genotype),
            "supernet_config": net_config.to_dict(),
            "precision": cfg.get("precision", "float64")}
    try:
        result = adversarial_train(
            network, dataset, train_cfg, meta=meta,
            log=lambda row: print(
                f"epoch {row['epoch']:3d} adv_loss "
                f"{row['train_adversarial_loss']:.4f} test_acc "
                f"{row['test_natural_accuracy']:.4f}", file=sys.stderr))
    except TrainingDivergence as e:
        if e.checkpoint is not None:
            _save_train_outputs(out, e.checkpoint, [])
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    _save_train_outputs(out, result.checkpoint, result.curves)
    return EXIT_OK


def _save_train_outputs(out: str, ckpt: Checkpoint, curves: list[dict]) -> None:
    from .checkpoint import save_checkpoint
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(ckpt_dir, "final.ckpt"))
    _write_jsonl(os.path.join(out, "metrics.jsonl"), curves)


def _load_network_from_checkpoint(path: str) -> tuple[DiscreteNetwork, Checkpoint]:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if "genotype" not in meta or "supernet_config" not in meta:
        raise CheckpointError(
            f"checkpoint {path!r} does not embed a genotype and layout")
    genotype = genotype_from_text(meta["genotype"])
    net_config = SupernetConfig.from_dict(meta["supernet_config"])
    dtype = np.float32 if meta.get("precision") == "float32" else np.float64
    network = DiscreteNetwork(genotype, net_config,
                              rng=np.random.default_rng(0), dtype=dtype)
    load_network_state(network, ckpt.arrays)
    return network, ckpt


def _cmd_attack(args) -> int:
    cfg = _resolve(args)
    network, _ = _load_network_from_checkpoint(args.checkpoint)
    attack_cfg = attack_config_from(cfg)
    dataset = load_dataset(dataset_spec_from(cfg))
    out = _prepare_out(cfg)
    report = evaluate(network, dataset.test_x, dataset.test_y, [attack_cfg])
    _write_report(out, "attack", report)
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    network, _ = _load_network_from_checkpoint(args.checkpoint)
    dataset = load_dataset(dataset_spec_from(cfg))
    out = _prepare_out(cfg)
    report = evaluate(network, dataset.test_x, dataset.test_y,
                      eval_attacks_from(cfg))
    _write_report(out, "eval", report)
    return EXIT_OK


def _write_report(out: str, name: str, report) -> None:
    rep_dir = os.path.join(out, "reports")
    os.makedirs(rep_dir, exist_ok=True)
    text = report.render_text()
    with open(os.path.join(rep_dir, f"{name}.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(rep_dir, f"{name}.json"), "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    sys.stdout.write(text)


def _cmd_transfer(args) -> int:
    cfg = _resolve(args)
    source, _ = _load_network_from_checkpoint(args.source)
    target, _ = _load_network_from_checkpoint(args.target)
    attack_cfg = attack_config_from(cfg)
    dataset = load_dataset(dataset_spec_from(cfg))
    out = _prepare_out(cfg)
    rep = transfer_attack(source, target, dataset.test_x, dataset.test_y,
                          attack_cfg)
    rep_dir = os.path.join(out, "reports")
    os.makedirs(rep_dir, exist_ok=True)
    doc = {
        "natural_accuracy": rep.natural_accuracy,
        "adversarial_accuracy": rep.adversarial_accuracy,
        "natural_correct": rep.natural_correct,
        "adversarial_correct": rep.adversarial_correct,
        "total": rep.total,
    }
    with open(os.path.join(rep_dir, "transfer.json"), "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"natural {rep.natural_accuracy:.4f} "
          f"({rep.natural_correct}/{rep.total})")
    print(f"transfer-adversarial {rep.adversarial_accuracy:.4f} "
          f"({rep.adversarial_correct}/{rep.total})")
    return EXIT_OK


def _cmd_report(args) -> int:
    if not os.path.exists(args.metrics):
        raise DataError(f"metrics file {args.metrics!r} does not exist")
    rows = []
    with open(args.metrics) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    if not rows:
        print("(empty metrics log)")
        return EXIT_OK
    keys = sorted({k for row in rows for k in row})
    keys = ["epoch"] + [k for k in keys if k != "epoch"]
    print("  ".join(f"{k:>22}" for k in keys))
    for row in rows:
        cells = []
        for k in keys:
            v = row.get(k)
            if isinstance(v, float):
                cells.append(f"{v:>22.6f}")
            else:
                cells.append(f"{str(v):>22}")
        print("  ".join(cells))
    return EXIT_OK


_COMMANDS = {
    "search": _cmd_search,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "transfer": _cmd_transfer,
    "report": _cmd_report,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
