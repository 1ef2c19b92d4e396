"""Scalar training objectives.

Reconstruction is the per-feature mean squared error summed over the two
branches; the input-weight penalty is lambda * ||W||_p; classification is
label cross-entropy over both branches; the contrastive term is the margin
form over index-aligned embedding pairs.  The combined objectives are

    self  = reconstruction + penalty
    semi  = self + alpha * classification + beta * contrastive
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

# probabilities are clamped at 1e-12 before the log
MAX_NLL = -math.log(1e-12)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    p: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    margin: float = 2.0

    def __post_init__(self):
        for name in ("lam", "alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        if self.p not in (1, 2):
            raise ValueError(f"norm order p must be 1 or 2, got {self.p}")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class LossReport:
    step: int
    reconstruction: float
    classification: float
    contrastive: float
    penalty: float
    total: float


def reconstruction_loss(
    x1: torch.Tensor,
    xhat1: torch.Tensor,
    x2: torch.Tensor,
    xhat2: torch.Tensor,
) -> torch.Tensor:
    """Mean over pairs of the two branches' per-feature MSE."""
    if x1.shape != xhat1.shape or x2.shape != xhat2.shape or x1.shape != x2.shape:
        raise ValueError("reconstruction batches must share one shape")
    per_pair = ((x1 - xhat1) ** 2).mean(dim=-1) + ((x2 - xhat2) ** 2).mean(dim=-1)
    return per_pair.mean()


def regularization_penalty(w: torch.Tensor, lam: float, p: int) -> torch.Tensor:
    """lambda * (sum_j |w_j|^p)^(1/p) for p in {1, 2}."""
    if p == 1:
        return lam * w.abs().sum()
    if p == 2:
        sumsq = (w * w).sum()
        # clamp keeps the sqrt backward finite at the origin; the where
        # restores the exact zero value there
        return lam * torch.where(sumsq == 0, sumsq, sumsq.clamp_min(1e-300).sqrt())
    raise ValueError(f"norm order p must be 1 or 2, got {p}")


def self_loss(reconstruction: torch.Tensor, penalty: torch.Tensor) -> torch.Tensor:
    return reconstruction + penalty


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class, capped at -log(1e-12)."""
    n_classes = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll.clamp_max(MAX_NLL).mean()


def classification_loss(
    logits1: torch.Tensor,
    logits2: torch.Tensor,
    y1: torch.Tensor,
    y2: torch.Tensor,
) -> torch.Tensor:
    """Cross-entropy summed over the two branches, averaged over the batch."""
    return cross_entropy(logits1, y1) + cross_entropy(logits2, y2)


def contrastive_loss(
    z1: torch.Tensor,
    z2: torch.Tensor,
    y1: torch.Tensor,
    y2: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """Margin loss over index-aligned pairs.

    A pair is similar when its labels match; similar pairs pay half the
    squared distance, dissimilar ones half the squared hinge max(0, m - d).
    Every row must carry a label (callers pre-filter unlabeled rows).
    """
    if z1.shape != z2.shape:
        raise ValueError("paired embedding batches must share one shape")
    if (y1 < 0).any() or (y2 < 0).any():
        raise ValueError("contrastive pairs require labels on every row")
    same = (y1 == y2).to(z1.dtype)
    dsq = ((z1 - z2) ** 2).sum(dim=-1)
    # clamp keeps the sqrt backward finite when a pair coincides exactly
    d = dsq.clamp_min(1e-300).sqrt()
    hinge = torch.relu(margin - d)
    per_pair = same * 0.5 * dsq + (1.0 - same) * 0.5 * hinge * hinge
    return per_pair.mean()


def semi_loss(
    self_term: torch.Tensor,
    classification: torch.Tensor,
    contrastive: torch.Tensor,
    alpha: float,
    beta: float,
) -> torch.Tensor:
    return self_term + alpha * classification + beta * contrastive


def combined_total(report: LossReport, config: LossConfig, mode: str) -> float:
    """Recompute a report's total from its components (audit helper)."""
    self_term = report.reconstruction + report.penalty
    if mode == "self":
        return self_term
    return self_term + config.alpha * report.classification + config.beta * report.contrastive
