"""Optimizers and learning-rate schedules for weights and architecture.

Network weights use momentum SGD with the cosine schedule; architecture
parameters use bias-corrected Adam with classic L2 weight decay folded into
the gradient. Parameter updates build replacement tensors, never mutating
the old ones.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import GradientMap, Tensor
from .blocks import Block


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """base_lr * (1 + cos(pi * epoch / total)) / 2, annealing to zero."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def step_lr(base_lr: float, epoch: int, decay_epochs, factor: float) -> float:
    """Piecewise-constant schedule: multiply by ``factor`` at each decay epoch."""
    lr = base_lr
    for boundary in decay_epochs:
        if epoch >= boundary:
            lr *= factor
    return lr


def sgd_momentum_update(param: np.ndarray, grad: np.ndarray,
                        velocity: np.ndarray, lr: float, momentum: float,
                        weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """v' = momentum * v + grad + weight_decay * param; param' = param - lr * v'."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}")
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                v: np.ndarray, t: int, lr: float, betas: tuple[float, float],
                weight_decay: float, eps: float = 1e-8
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bias-corrected Adam with L2 decay added to the gradient.

    g      = grad + weight_decay * param
    m'     = beta1 * m + (1 - beta1) * g
    v'     = beta2 * v + (1 - beta2) * g^2
    param' = param - lr * (m' / (1 - beta1^t)) / (sqrt(v' / (1 - beta2^t)) + eps)

    ``t`` is the 1-based step index.
    """
    if param.shape != grad.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    b1, b2 = betas
    g = grad + weight_decay * param
    m_new = b1 * m + (1.0 - b1) * g
    v_new = b2 * v + (1.0 - b2) * g * g
    m_hat = m_new / (1.0 - b1 ** t)
    v_hat = v_new / (1.0 - b2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m_new, v_new


class SGDMomentum:
    """Momentum SGD over a block's named parameters."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 3e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, block: Block, grads: GradientMap, lr: float) -> None:
        updates: dict[str, Tensor] = {}
        for name, p in block.named_parameters():
            g = grads.get(p)
            if g is None:
                continue
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            new_data, v = sgd_momentum_update(p.data, g.data, v, lr,
                                              self.momentum, self.weight_decay)
            self.velocities[name] = v
            updates[name] = Tensor(new_data, grad_required=True, name=p.name)
        block.replace_parameters(updates)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in self.velocities.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.velocities = {
            k[len("velocity."):]: v.copy()
            for k, v in arrays.items() if k.startswith("velocity.")
        }


class Adam:
    """Adam over an explicit list of (name, tensor) pairs (used for alpha)."""

    def __init__(self, betas: tuple[float, float] = (0.5, 0.999),
                 weight_decay: float = 1e-3, eps: float = 1e-8):
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params: list[tuple[str, Tensor]],
             grads: dict[str, np.ndarray], lr: float) -> dict[str, Tensor]:
        """One update over all parameters; returns replacement tensors."""
        self.t += 1
        updates: dict[str, Tensor] = {}
        for name, p in named_params:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            new_data, m, v = adam_update(p.data, g, m, v, self.t, lr,
                                         self.betas, self.weight_decay,
                                         self.eps)
            self.m[name] = m
            self.v[name] = v
            updates[name] = Tensor(new_data, grad_required=True, name=p.name)
        return updates

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m.{k}": v for k, v in self.m.items()}
        out.update({f"adam_v.{k}": v for k, v in self.v.items()})
        out["adam_t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = {k[len("adam_m."):]: v.copy()
                  for k, v in arrays.items() if k.startswith("adam_m.")}
        self.v = {k[len("adam_v."):]: v.copy()
                  for k, v in arrays.items() if k.startswith("adam_v.")}
        if "adam_t" in arrays:
            self.t = int(arrays["adam_t"][0])
