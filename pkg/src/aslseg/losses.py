"""Training losses on per-pixel foreground probabilities.

All losses take probability tensors (not logits) of any matching shape and are
differentiable through torch autograd. Probabilities are clamped to
``[EPS, 1 - EPS]`` before any logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ValidationError

EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the unlabeled consistency term, the R-Drop KL term and the adapter CE term."""

    lambda_u: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_u", "alpha", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_target(target, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(target, dtype=like.dtype, device=like.device)


def cross_entropy(pred: torch.Tensor, target, eps: float = EPS) -> torch.Tensor:
    """Binary cross entropy averaged over pixels."""
    t = _as_target(target, pred)
    _check_shapes(pred, t)
    p = pred.clamp(eps, 1.0 - eps)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def dice_loss(pred: torch.Tensor, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` over all elements."""
    t = _as_target(target, pred)
    _check_shapes(pred, t)
    return 1.0 - (2.0 * (pred * t).sum() + smooth) / (pred.sum() + t.sum() + smooth)


def _binary_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return p * torch.log(p / q) + (1.0 - p) * torch.log((1.0 - p) / (1.0 - q))


def symmetric_kl(p: torch.Tensor, q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over pixels of ``(KL(p||q) + KL(q||p)) / 2`` for two-class distributions.

    The two directions are summed elementwise, so swapping arguments gives a
    bit-identical result.
    """
    _check_shapes(p, q)
    p = p.clamp(eps, 1.0 - eps)
    q = q.clamp(eps, 1.0 - eps)
    return (0.5 * (_binary_kl(p, q) + _binary_kl(q, p))).mean()


def rdrop_supervised_loss(pred1: torch.Tensor, pred2: torch.Tensor, target, w: LossWeights) -> torch.Tensor:
    """Two-pass cross entropy plus ``alpha`` times the symmetric KL between the passes."""
    return (cross_entropy(pred1, target) + cross_entropy(pred2, target)) + w.alpha * symmetric_kl(pred1, pred2)


def total_ssl_loss(labeled_term, unlabeled_term, w: LossWeights):
    return labeled_term + w.lambda_u * unlabeled_term


def adaptation_loss(pred: torch.Tensor, target, w: LossWeights) -> torch.Tensor:
    """Dice loss plus ``gamma`` times cross entropy."""
    return dice_loss(pred, target) + w.gamma * cross_entropy(pred, target)


def ramp_weight(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear 0 -> 1 ramp over the first ``warmup_fraction`` of training."""
    warm = warmup_fraction * total_steps
    if warm <= 0:
        return 1.0
    return min(1.0, step / warm)


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / total_steps) ** power
