"""Joint soft-Dice + cross-entropy segmentation loss.

Used both for 2D fine-tuning on concatenated grids and as the supervised /
pseudo-label terms of the 3D re-training stage; the formula is dimension
agnostic (logits of shape (K, *spatial)).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def _check_inputs(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.ndim != target.ndim + 1:
        raise ValueError(
            f"logits shape {tuple(logits.shape)} incompatible with target "
            f"shape {tuple(target.shape)}"
        )
    if logits.shape[1:] != target.shape:
        raise ValueError(
            f"spatial dims differ: logits {tuple(logits.shape[1:])} vs "
            f"target {tuple(target.shape)}"
        )
    k = logits.shape[0]
    if target.numel():
        lo, hi = int(target.min()), int(target.max())
        if lo < 0 or hi >= k:
            raise ValueError(f"target labels [{lo}, {hi}] out of range for K={k}")


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over all K classes of the smoothed soft Dice coefficient."""
    _check_inputs(logits, target)
    k = logits.shape[0]
    probs = F.softmax(logits, dim=0).reshape(k, -1)
    onehot = F.one_hot(target.reshape(-1).long(), num_classes=k).T.to(probs.dtype)
    inter = (probs * onehot).sum(dim=1)
    denom = probs.sum(dim=1) + onehot.sum(dim=1)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log p(target class)."""
    _check_inputs(logits, target)
    k = logits.shape[0]
    return F.cross_entropy(logits.reshape(k, -1).T, target.reshape(-1).long())


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """0.5 * (soft Dice loss + cross entropy), the joint segmentation loss."""
    return 0.5 * (soft_dice_loss(logits, target) + cross_entropy_loss(logits, target))
