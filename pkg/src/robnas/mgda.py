"""Two-objective gradient combination via the min-norm point of a segment.

Given the architecture gradients of the natural validation loss and the
adversarial validation loss, the combiner solves

    gamma* = argmin_{0 <= gamma <= 1} || gamma * theta + (1 - gamma) * theta_bar ||^2

in closed form and returns the combined direction. The minimizer is a common
descent direction for both objectives, or the zero vector at Pareto-stationary
points, so a small step along its negative never increases either loss to
first order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GradientPair:
    """Flat gradients of the two objectives: natural first, adversarial second."""

    theta: np.ndarray
    theta_bar: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        theta_bar = np.asarray(self.theta_bar, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_bar", theta_bar)
        if theta.shape != theta_bar.shape:
            raise ValueError(
                f"gradient lengths differ: {theta.shape} vs {theta_bar.shape}")
        if not (np.isfinite(theta).all() and np.isfinite(theta_bar).all()):
            raise ValueError("non-finite gradient entries")


@dataclass(frozen=True)
class CombineResult:
    gamma: float
    direction: np.ndarray


def compute_gamma(pair: GradientPair) -> float:
    """Closed-form minimizer of the mixture norm, clamped to [0, 1].

    gamma* = clamp(((theta_bar - theta) . theta_bar) / ||theta - theta_bar||^2, 0, 1)

    When the two gradients are identical the objective is constant in gamma;
    0.5 is returned by convention.
    """
    diff = pair.theta - pair.theta_bar
    denom = float(diff @ diff)
    if denom == 0.0:
        return 0.5
    raw = float((pair.theta_bar - pair.theta) @ pair.theta_bar) / denom
    return min(max(raw, 0.0), 1.0)


def combine(pair: GradientPair, normalize: bool = False) -> CombineResult:
    """Combined direction gamma * theta + (1 - gamma) * theta_bar.

    ``normalize`` rescales each gradient to unit norm before solving (a known
    variant); it is off by default so the closed form applies to the raw
    gradients.
    """
    if normalize:
        def unit(v: np.ndarray) -> np.ndarray:
            n = float(np.linalg.norm(v))
            return v / n if n > 0 else v
        pair = GradientPair(unit(pair.theta), unit(pair.theta_bar))
    gamma = compute_gamma(pair)
    direction = gamma * pair.theta + (1.0 - gamma) * pair.theta_bar
    return CombineResult(gamma=gamma, direction=direction)


def descent_certificate(pair: GradientPair,
                        result: CombineResult) -> tuple[float, float]:
    """Margins of <d, theta> >= ||d||^2 and <d, theta_bar> >= ||d||^2.

    Both margins are non-negative (up to float error) because the combined
    direction is the min-norm point of the segment between the gradients.
    """
    d = result.direction
    dd = float(d @ d)
    return (float(d @ pair.theta) - dd, float(d @ pair.theta_bar) - dd)


def mgda_step(arch, pair: GradientPair, lr: float):
    """Plain gradient step along the combined direction.

    Returns replacement architecture parameters alpha - lr * direction,
    reshaped back into the per-kind matrices. A Pareto-stationary pair
    (zero combined direction) leaves the parameters unchanged.
    """
    flat = arch.flatten()
    if pair.theta.size != flat.size:
        raise ValueError(
            f"gradient length {pair.theta.size} does not match "
            f"{flat.size} architecture parameters")
    direction = combine(pair).direction
    return arch.with_flat(flat - lr * direction)
