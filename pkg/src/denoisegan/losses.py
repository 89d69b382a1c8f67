"""Adversarial, L1, perturbed and cascade losses and their weighted sum.

All reductions are means so the weights do not depend on resolution.
Discriminator scores are clamped to [SCORE_EPS, 1 - SCORE_EPS] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import DimensionError, Tensor, abs_, add, clamp, log, mean, mul, no_grad, sub

SCORE_EPS = 1e-7


@dataclass
class LossWeights:
    gamma: float = 100.0
    theta_p: float = 1.0
    sigma_c: float = 1.0
    lambdas: list[float] = field(default_factory=lambda: [0.2] * 5)

    def __post_init__(self):
        for name in ("gamma", "theta_p", "sigma_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if any(l < 0 for l in self.lambdas):
            raise ValueError(f"cascade level weights must be >= 0, got {self.lambdas}")


@dataclass
class LossBundle:
    adv_d: float = 0.0
    adv_g: float = 0.0
    l1: float = 0.0
    perturbed: float = 0.0
    cascade: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0


def _clamped(score: Tensor) -> Tensor:
    return clamp(score, SCORE_EPS, 1.0 - SCORE_EPS)


def _neg_log_mean(x: Tensor) -> Tensor:
    return mul(mean(log(x)), -1.0)


def adversarial_losses(d_real: Tensor, d_fake: Tensor, saturating: bool = False) -> tuple[Tensor, Tensor]:
    """(adv_d, adv_g) from per-sample discriminator scores in (0, 1).

    adv_d = -[log D(real) + log(1 - D(fake))]; adv_g = -log D(fake), or
    log(1 - D(fake)) with ``saturating``. Both are averaged over the batch.
    """
    real = _clamped(d_real)
    fake = _clamped(d_fake)
    adv_d = add(_neg_log_mean(real), _neg_log_mean(sub(1.0, fake)))
    if saturating:
        adv_g = mean(log(sub(1.0, fake)))
    else:
        adv_g = _neg_log_mean(fake)
    return adv_d, adv_g


def generator_adversarial(d_fake: Tensor, saturating: bool = False) -> Tensor:
    fake = _clamped(d_fake)
    return mean(log(sub(1.0, fake))) if saturating else _neg_log_mean(fake)


def discriminator_adversarial(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return add(_neg_log_mean(_clamped(d_real)), _neg_log_mean(sub(1.0, _clamped(d_fake))))


def l1_loss(output: Tensor, target: Tensor) -> Tensor:
    if output.shape != target.shape:
        raise DimensionError(f"l1_loss: shape mismatch {output.shape} vs {target.shape}")
    return mean(abs_(sub(output, target)))


def draw_alpha(batch: int, rng: Rng) -> np.ndarray:
    return rng.uniform(batch)


def perturb_mix(fake: Tensor, real: Tensor, alpha=None, rng: Rng | None = None) -> Tensor:
    """alpha * fake + (1 - alpha) * real.

    ``alpha`` may be a scalar or one value per batch element; when omitted it
    is drawn Uniform(0, 1) per batch element from ``rng``.
    """
    if fake.shape != real.shape:
        raise DimensionError(f"perturb_mix: shape mismatch {fake.shape} vs {real.shape}")
    if alpha is None:
        if rng is None:
            raise ValueError("perturb_mix needs alpha or an rng to draw it")
        alpha = draw_alpha(fake.shape[0], rng)
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if a.ndim == 1:
        a = a.reshape(-1, *([1] * (fake.ndim - 1)))
    a = a.astype(fake.dtype)
    # endpoints are exact because 0*x == 0 and 1*x == x for finite x
    return add(mul(fake, Tensor(a)), mul(real, Tensor((1 - a).astype(fake.dtype))))


def perturbed_loss(d: Callable[[Tensor, Tensor], Tensor], condition: Tensor, x_hat: Tensor) -> Tensor:
    """-log(1 - D(condition, x_hat)) averaged over the batch (D-side term)."""
    score = d(condition, x_hat)
    return perturbed_from_score(score)


def perturbed_from_score(score: Tensor) -> Tensor:
    return _neg_log_mean(sub(1.0, _clamped(score)))


def cascade_loss(phi: Callable[[Tensor], Sequence[Tensor]], output: Tensor, target: Tensor,
                 lambdas: Sequence[float]) -> Tensor:
    """sum_n lambda_n * L1(phi_n(target), phi_n(output)); the target side is constant."""
    if output.shape != target.shape:
        raise DimensionError(f"cascade_loss: shape mismatch {output.shape} vs {target.shape}")
    with no_grad():
        ref = [f.detach() for f in phi(target)]
    feats = phi(output)
    if len(lambdas) != len(feats):
        raise ValueError(f"{len(lambdas)} level weights for {len(feats)} cascade levels")
    total = None
    for lam, f, r in zip(lambdas, feats, ref):
        term = mul(l1_loss(f, r), float(lam))
        total = term if total is None else add(total, term)
    return total


def total_objective(adv_g: float, l1: float, cascade: float, adv_d: float, perturbed: float,
                    w: LossWeights) -> LossBundle:
    """Weighted totals, summed left to right:

    total_g = (adv_g + gamma * l1) + sigma_c * cascade
    total_d = adv_d + theta_p * perturbed
    """
    for name in ("gamma", "theta_p", "sigma_c"):
        if getattr(w, name) < 0:
            raise ValueError(f"negative loss weight {name}")
    total_g = adv_g + w.gamma * l1 + w.sigma_c * cascade
    total_d = adv_d + w.theta_p * perturbed
    return LossBundle(adv_d=adv_d, adv_g=adv_g, l1=l1, perturbed=perturbed, cascade=cascade,
                      total_g=total_g, total_d=total_d)
