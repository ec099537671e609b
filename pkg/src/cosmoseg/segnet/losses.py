"""Dice + cross-entropy segmentation loss with voxel masking.

Both terms average only over non-ignored voxels, so masked voxels have
exactly zero gradient contribution.  The soft Dice term is computed per
batch item over the foreground classes and then averaged.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import AllIgnored

DICE_SMOOTH = 1e-5


def _keep_mask(target: torch.Tensor, ignore_mask: torch.Tensor | None) -> torch.Tensor:
    if ignore_mask is None:
        return torch.ones_like(target, dtype=torch.bool)
    keep = ~ignore_mask
    if not keep.any():
        raise AllIgnored("every voxel of the patch is masked out")
    return keep


def cross_entropy_loss(scores, target, ignore_mask=None):
    """Mean cross-entropy over non-ignored voxels."""
    keep = _keep_mask(target, ignore_mask)
    safe_target = torch.where(keep, target, torch.zeros_like(target))
    logp = F.log_softmax(scores, dim=1)
    nll = -logp.gather(1, safe_target.unsqueeze(1)).squeeze(1)
    return nll[keep].mean()


def soft_dice_loss(scores, target, ignore_mask=None):
    """1 - mean soft Dice over foreground classes, per item then averaged."""
    keep = _keep_mask(target, ignore_mask)
    probs = F.softmax(scores, dim=1)
    keep_f = keep.to(probs.dtype)
    batch, num_classes = scores.shape[0], scores.shape[1]
    per_item = []
    for b in range(batch):
        dices = []
        for c in range(1, num_classes):
            p = probs[b, c] * keep_f[b]
            t = ((target[b] == c) & keep[b]).to(probs.dtype)
            inter = (p * t).sum()
            dices.append((2 * inter + DICE_SMOOTH) / (p.sum() + t.sum() + DICE_SMOOTH))
        per_item.append(1 - torch.stack(dices).mean())
    return torch.stack(per_item).mean()


def dice_ce_loss(scores, target, ignore_mask=None):
    """Combined soft-Dice + cross-entropy loss.

    scores: (B, C, D, H, W) raw class scores, any float dtype.
    target: (B, D, H, W) integer class ids, valid in {0..C-1} where kept.
    ignore_mask: optional (B, D, H, W) bool, True = excluded from the loss.
    """
    if scores.shape[0] != target.shape[0] or scores.shape[2:] != target.shape[1:]:
        raise ValueError(f"scores {tuple(scores.shape)} vs target {tuple(target.shape)}")
    return soft_dice_loss(scores, target, ignore_mask) + cross_entropy_loss(
        scores, target, ignore_mask
    )
