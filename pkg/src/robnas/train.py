"""Adversarial training and attack evaluation of discrete networks.

Each minibatch is replaced by its PGD counterpart (crafted in eval mode)
before the SGD step; the step-decay schedule and optimizer follow the final
training protocol. Checkpoints capture parameters, optimizer state, and the
rng stream so an interrupted run resumes bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackConfig,
    AttackDivergence,
    TRAIN_ATTACK,
    accuracy,
    attack_batch,
    predictions,
)
from .autodiff import Tensor, backward, cross_entropy, no_grad
from .blocks import Block, bn_stats_frozen
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_network_state,
    network_state,
    rng_from_json,
    rng_state_to_json,
)
from .data import DataError, Dataset, batch_indices
from .optim import SGDMomentum, step_lr


class TrainingDivergence(RuntimeError):
    """Non-finite training loss; the last good checkpoint is preserved."""

    def __init__(self, message: str, checkpoint: Checkpoint | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Final-training protocol for a discretized network."""

    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple[int, ...] = (100, 150)
    decay_factor: float = 0.1
    attack: AttackConfig = TRAIN_ATTACK
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError(
                f"decay epochs must be strictly increasing, "
                f"got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError(
                f"decay epochs {self.decay_epochs} must lie before "
                f"epoch {self.epochs}")
        self.attack.validate()

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
            "attack": self.attack.to_dict(), "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(
            epochs=int(d.get("epochs", 200)),
            batch_size=int(d.get("batch_size", 32)),
            lr=float(d.get("lr", 0.1)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            decay_epochs=tuple(int(e) for e in d.get("decay_epochs", (100, 150))),
            decay_factor=float(d.get("decay_factor", 0.1)),
            attack=AttackConfig.from_dict(d.get("attack", {})),
            rng_seed=int(d.get("rng_seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    curves: list[dict]
    checkpoint: Checkpoint
    diverged: bool = False
    divergence_message: str = ""


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return step_lr(cfg.lr, epoch, cfg.decay_epochs, cfg.decay_factor)


def _assert_pixel_range(x: np.ndarray) -> None:
    if x.min() < 0.0 or x.max() > 1.0:
        raise DataError("pixels left the [0, 1] range before the attack; "
                        "normalization must happen inside the model")


def _make_checkpoint(network: Block, optimizer: SGDMomentum, epoch: int,
                     cfg: TrainConfig, rng: np.random.Generator,
                     meta: dict) -> Checkpoint:
    arrays = dict(network_state(network))
    arrays.update({f"opt.{k}": v for k, v in optimizer.state_arrays().items()})
    return Checkpoint(
        epoch=epoch,
        arrays={k: v.copy() for k, v in arrays.items()},
        config=cfg.to_dict(),
        rng_state=rng_state_to_json(rng),
        meta=meta,
    )


def restore_training(network: Block, optimizer: SGDMomentum,
                     ckpt: Checkpoint) -> np.random.Generator:
    load_network_state(network, ckpt.arrays)
    optimizer.load_state_arrays(
        {k[len("opt."):]: v for k, v in ckpt.arrays.items()
         if k.startswith("opt.")})
    if ckpt.rng_state is None:
        raise CheckpointError("checkpoint carries no rng state")
    return rng_from_json(ckpt.rng_state)


def adversarial_train(network: Block, dataset: Dataset, cfg: TrainConfig,
                      resume_from: Checkpoint | None = None,
                      meta: dict | None = None,
                      log=None) -> TrainResult:
    """Train on PGD counterparts of every minibatch; return curves + checkpoint."""
    cfg.validate()
    meta = meta or {}
    optimizer = SGDMomentum(momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay)
    if resume_from is not None:
        rng = restore_training(network, optimizer, resume_from)
        start_epoch = resume_from.epoch
    else:
        rng = np.random.default_rng(cfg.rng_seed)
        start_epoch = 0

    curves: list[dict] = []
    last_good = _make_checkpoint(network, optimizer, start_epoch, cfg, rng,
                                 meta)
    x_all, y_all = dataset.train_x, dataset.train_y
    _assert_pixel_range(x_all)
    dtype = next(iter(network.parameters())).data.dtype

    for epoch in range(start_epoch, cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        nat_losses, adv_losses = [], []
        for idx in batch_indices(x_all.shape[0], cfg.batch_size, rng):
            xb = x_all[idx].astype(dtype)
            yb = y_all[idx]
            if cfg.attack.epsilon > 0.0:
                x_adv = attack_batch(network, xb, yb, cfg.attack, rng=rng)
            else:
                x_adv = xb
            network.train(True)
            logits = network(Tensor(x_adv))
            loss = cross_entropy(logits, yb)
            adv_loss = loss.item()
            if not np.isfinite(adv_loss):
                raise TrainingDivergence(
                    f"non-finite adversarial loss at epoch {epoch + 1}",
                    checkpoint=last_good)
            grads = backward(loss)
            optimizer.step(network, grads, lr)
            adv_losses.append(adv_loss)
            with no_grad(), bn_stats_frozen():
                nat_losses.append(
                    cross_entropy(network(Tensor(xb)), yb).item())
        network.eval()
        test_acc = (accuracy(network, dataset.test_x.astype(dtype),
                             dataset.test_y)
                    if dataset.test_x.shape[0] else float("nan"))
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_adversarial_loss": float(np.mean(adv_losses)),
            "train_natural_loss": float(np.mean(nat_losses)),
            "test_natural_accuracy": test_acc,
        }
        curves.append(row)
        if log is not None:
            log(row)
        last_good = _make_checkpoint(network, optimizer, epoch + 1, cfg, rng,
                                     meta)
    return TrainResult(curves=curves, checkpoint=last_good)


@dataclass
class EvalRow:
    label: str
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def render_text(self) -> str:
        width = max((len(r.label) for r in self.rows), default=10)
        lines = [f"{'attack':<{width}}  accuracy  correct/total",
                 "-" * (width + 26)]
        for r in self.rows:
            lines.append(
                f"{r.label:<{width}}  {r.accuracy:8.4f}  "
                f"{r.correct}/{r.total}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": [{"label": r.label, "correct": r.correct,
                          "total": r.total, "accuracy": r.accuracy}
                         for r in self.rows]}


def evaluate(network: Block, x: np.ndarray, y: np.ndarray,
             attack_configs: list[AttackConfig],
             batch_size: int = 64) -> EvalReport:
    """Natural accuracy plus one adversarial accuracy per requested attack."""
    _assert_pixel_range(x)
    dtype = next(iter(network.parameters())).data.dtype
    x = x.astype(dtype)
    y = np.asarray(y)
    report = EvalReport()
    nat_correct = int((predictions(network, x, batch_size) == y).sum())
    report.rows.append(EvalRow("natural", nat_correct, x.shape[0]))
    for cfg in attack_configs:
        cfg.validate()
        correct = 0
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            yb = y[start:start + batch_size]
            x_adv = attack_batch(network, xb, yb, cfg)
            pred_ok = _batch_predictions(network, x_adv) == yb
            correct += int(pred_ok.sum())
        label = (f"{cfg.kind}^{cfg.steps}" if cfg.kind == "pgd" else cfg.kind)
        report.rows.append(EvalRow(label, correct, x.shape[0]))
    return report


def _batch_predictions(network: Block, x: np.ndarray) -> np.ndarray:
    was_training = network.training
    network.eval()
    with no_grad():
        logits = network(Tensor(x))
    network.train(was_training)
    return logits.data.argmax(axis=1)


__all__ = [
    "TrainConfig", "TrainResult", "TrainingDivergence", "adversarial_train",
    "restore_training", "evaluate", "EvalReport", "EvalRow",
    "AttackDivergence",
]
