"""FGSM and PGD attacks under an L-infinity budget, plus transfer evaluation.

Attacks are pure functions of (model snapshot, batch, config, seed): they
craft perturbations with the model in eval mode (running batchnorm
statistics), differentiate with respect to the input only, and restore the
model's mode before returning. Outputs always satisfy both the epsilon ball
around the original pixels and the [0, 1] box.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, backward, cross_entropy, no_grad


class AttackDivergence(RuntimeError):
    """Non-finite loss encountered while crafting a perturbation."""


@dataclass(frozen=True)
class AttackConfig:
    """L-infinity attack description; pixel units throughout."""

    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 0.01
    steps: int = 7
    random_init: bool = True
    rng_seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.step_size < 0.0:
            raise ValueError(f"negative step size {self.step_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kind == "fgsm" and self.steps != 1:
            raise ValueError("fgsm is single-step; steps must be 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon,
                "step_size": self.step_size, "steps": self.steps,
                "random_init": self.random_init, "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        cfg = cls(kind=str(d.get("kind", "pgd")),
                  epsilon=float(d.get("epsilon", 8 / 255)),
                  step_size=float(d.get("step_size", 0.01)),
                  steps=int(d.get("steps", 7)),
                  random_init=bool(d.get("random_init", True)),
                  rng_seed=int(d.get("rng_seed", 0)))
        cfg.validate()
        return cfg


# Perturbation budgets quoted in the experimental protocol. The final
# training step size is reported both as 2/255 and as 0.01 in adjacent
# settings paragraphs; both are exposed and the evaluation-settings value
# (0.01) is the default.
SEARCH_ATTACK = AttackConfig(kind="pgd", epsilon=2 / 255, step_size=1 / 510,
                             steps=7, random_init=True)
TRAIN_ATTACK = AttackConfig(kind="pgd", epsilon=8 / 255, step_size=0.01,
                            steps=7, random_init=True)
TRAIN_ATTACK_ALT = replace(TRAIN_ATTACK, step_size=2 / 255)
EVAL_PGD20 = AttackConfig(kind="pgd", epsilon=8 / 255, step_size=2 / 255,
                          steps=20, random_init=True)


def _input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xt = Tensor(x, grad_required=True)
    loss = cross_entropy(model(xt), y)
    if not np.isfinite(loss.data).all():
        raise AttackDivergence("non-finite loss while crafting perturbation")
    return backward(loss, wrt=[xt])[xt].data


class _eval_mode:
    """Temporarily put the model in eval mode (crafting must not touch stats)."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)
        return False


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Single sign-gradient step of size epsilon, clamped to the pixel box."""
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("input pixels must lie in [0, 1]")
    with _eval_mode(model):
        g = _input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated sign-gradient ascent projected onto the epsilon ball and box.

    Random initialization draws a uniform point in the epsilon ball. The
    perturbation is re-projected after every step, so the L-infinity bound
    holds exactly on every output pixel.
    """
    cfg.validate()
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("input pixels must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    lo = np.maximum(x - cfg.epsilon, 0.0)
    hi = np.minimum(x + cfg.epsilon, 1.0)
    if cfg.random_init:
        x_adv = np.clip(
            x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(x.dtype),
            lo, hi)
    else:
        x_adv = x.copy()
    with _eval_mode(model):
        for k in range(1, cfg.steps + 1):
            try:
                g = _input_gradient(model, x_adv, y)
            except AttackDivergence as e:
                raise AttackDivergence(f"{e} (attack step {k})") from e
            x_adv = np.clip(x_adv + cfg.step_size * np.sign(g), lo, hi)
    return x_adv


def attack_batch(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    cfg.validate()
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon)
    return pgd(model, x, y, cfg, rng=rng)


def predictions(model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions, computed without recording gradients."""
    out = []
    with _eval_mode(model), no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = model(Tensor(x[start:start + batch_size]))
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(model, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    """Exact ratio of correct integer counts."""
    correct = int((predictions(model, x, batch_size) == np.asarray(y)).sum())
    return correct / x.shape[0]


@dataclass(frozen=True)
class TransferReport:
    natural_accuracy: float
    adversarial_accuracy: float
    natural_correct: int
    adversarial_correct: int
    total: int


def transfer_attack(source, target, x: np.ndarray, y: np.ndarray,
                    cfg: AttackConfig, batch_size: int = 64) -> TransferReport:
    """Craft against ``source`` with PGD, evaluate ``target`` on the result."""
    if x.ndim != 4:
        raise ValueError(f"expected an image batch, got shape {x.shape}")
    adv_chunks = []
    for start in range(0, x.shape[0], batch_size):
        adv_chunks.append(pgd(source, x[start:start + batch_size],
                              y[start:start + batch_size], cfg))
    x_adv = np.concatenate(adv_chunks)
    y = np.asarray(y)
    nat_correct = int((predictions(target, x, batch_size) == y).sum())
    adv_correct = int((predictions(target, x_adv, batch_size) == y).sum())
    n = x.shape[0]
    return TransferReport(
        natural_accuracy=nat_correct / n,
        adversarial_accuracy=adv_correct / n,
        natural_correct=nat_correct,
        adversarial_correct=adv_correct,
        total=n,
    )
