"""Training objectives: location regression, patch existence, label BCE,
and their weighted combination.

All loss functions build on the autodiff tensor ops so they can sit at the
root of a backward pass; ``.item()`` gives the plain value. Confidences are
clamped to [EPS, 1-EPS] before any logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    sigma_factor: float = 0.5
    sigma_mode: str = "squash"  # "squash" or "literal"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.sigma_factor <= 1:
            raise ValueError("sigma_factor must be in (0,1]")
        if self.sigma_mode not in ("squash", "literal"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")


@dataclass
class LossBreakdown:
    l_r: float
    l_p: float
    l_l_object: float
    l_l_context: float
    total: float


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else T.constant(x)


def smooth_l1(x) -> Tensor:
    """0.5 x^2 inside |x|<1, |x|-0.5 outside; elementwise."""
    return T.smooth_l1(_as_tensor(x))


def location_loss(t_hat, t_star) -> Tensor:
    """Sum of smooth-L1 over (dx,dy,dw,dh); mean over rows when batched."""
    t_hat = _as_tensor(t_hat)
    t_star = _as_tensor(t_star)
    if t_hat.shape != t_star.shape:
        raise T.ShapeError(f"location_loss: {t_hat.shape} vs {t_star.shape}")
    out = T.tsum(T.smooth_l1(t_hat - t_star))
    if len(t_hat.shape) == 2:
        out = out * (1.0 / t_hat.shape[0])
    return out


def bce_from_probs(q, targets) -> Tensor:
    """-[t ln q + (1-t) ln(1-q)] summed over entries, q clamped to (0,1)."""
    q = T.clamp(_as_tensor(q), EPS, 1.0 - EPS)
    t = np.asarray(targets, dtype=np.float64)
    one = T.constant(np.ones_like(q.data))
    pos = T.mul(T.constant(t), T.log(q))
    neg = T.mul(T.constant(1.0 - t), T.log(one - q))
    return T.mul_scalar(T.tsum(pos + neg), -1.0)


def patch_loss(p_hat, p_star) -> Tensor:
    """Binary cross-entropy on existence confidences; mean when batched."""
    p_hat = _as_tensor(p_hat)
    n = max(p_hat.data.size, 1)
    return bce_from_probs(p_hat, p_star) * (1.0 / n)


def label_loss(scores, y_star, config: LossConfig | None = None) -> Tensor:
    """Multi-label BCE over the category vector.

    squash mode (default): scores are raw head outputs, squashed by the
    logistic before the BCE. literal mode: scores are confidences in (0,1)
    scaled by sigma_factor inside both log terms.
    """
    config = config or LossConfig()
    scores = _as_tensor(scores)
    if config.sigma_mode == "squash":
        q = T.logistic(scores)
    else:
        scaled = scores.data * config.sigma_factor
        if (scaled <= 0).any() or (scaled >= 1).any():
            raise ValueError("literal mode: sigma * score must lie in (0,1)")
        q = scores * config.sigma_factor
    return bce_from_probs(q, y_star)


def combine_losses(l_r: Tensor, l_p: Tensor, l_l_object: Tensor, l_l_context: Tensor,
                   config: LossConfig) -> Tensor:
    """Weighted total as a differentiable tensor."""
    return l_r + config.alpha * l_p + config.beta * l_l_object + config.gamma * l_l_context


def total_loss(l_r, l_p, l_l_object, l_l_context, config: LossConfig) -> LossBreakdown:
    """Assemble the per-part breakdown; total = l_r + a*l_p + b*l_o + g*l_c."""
    parts = [x.item() if isinstance(x, Tensor) else float(x)
             for x in (l_r, l_p, l_l_object, l_l_context)]
    if min(parts) < 0:
        raise ValueError("loss parts must be non-negative")
    total = parts[0] + config.alpha * parts[1] + config.beta * parts[2] + config.gamma * parts[3]
    return LossBreakdown(*parts, total=total)
