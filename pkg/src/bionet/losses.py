"""Training objectives for the biomarker regressor and the segmentation cascade.

All losses take probabilities (not logits) and return a scalar tensor.
Batched inputs are averaged over the batch, then over pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_multilayers: float = 1.0
    w_choroid: float = 1.0
    w_bio: float = 0.01

    def __post_init__(self):
        for name in ("w_multilayers", "w_choroid", "w_bio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def bio_mae_loss(pred_thickness, target_thickness) -> torch.Tensor:
    """Mean absolute error between predicted and reference thickness."""
    pred = _t(pred_thickness).reshape(-1)
    target = _t(target_thickness, pred).reshape(-1).to(pred.dtype)
    if pred.numel() == 0 or pred.shape != target.shape:
        raise ValueError(f"batch size mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise ValueError("non-finite thickness values")
    return (pred - target).abs().mean()


def _labels_tensor(gt, device=None) -> tuple[torch.Tensor, int | None]:
    num_classes = getattr(gt, "num_classes", None)
    labels = getattr(gt, "labels", gt)
    if not isinstance(labels, torch.Tensor):
        labels = np.array(labels, dtype=np.int64)
    labels = torch.as_tensor(labels, device=device).long()
    return labels, num_classes


def multilayer_ce_loss(pred_probs: torch.Tensor, gt, variant: str = "categorical") -> torch.Tensor:
    """Cross entropy of a per-pixel class distribution against a layer map.

    ``pred_probs`` is ``L x H x W`` or ``N x L x H x W``; ``gt`` a
    :class:`LayerLabelMap`, or an ``H x W`` / ``N x H x W`` integer tensor.

    ``variant="categorical"`` scores ``-ln p[true class]`` per pixel.
    ``variant="binary"`` sums a per-channel binary cross entropy over the L
    channels, matching the one-vs-rest form.
    """
    probs = pred_probs if pred_probs.dim() == 4 else pred_probs.unsqueeze(0)
    labels, num_classes = _labels_tensor(gt, probs.device)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    n, L, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"label shape {tuple(labels.shape)} does not match predictions {(n, h, w)}")
    if num_classes is not None and num_classes != L:
        raise ValueError(f"{L} probability channels for {num_classes} classes")
    if labels.numel() and (labels.min() < 0 or labels.max() >= L):
        raise ValueError(f"label ids must lie in [0, {L})")
    p = probs.clamp(EPS, 1 - EPS)
    if variant == "categorical":
        picked = p.gather(1, labels.unsqueeze(1)).squeeze(1)
        return -picked.log().mean()
    if variant == "binary":
        onehot = torch.nn.functional.one_hot(labels, L).permute(0, 3, 1, 2).to(p.dtype)
        per_channel = onehot * p.log() + (1 - onehot) * (1 - p).log()
        return -per_channel.sum(dim=1).mean()
    raise ValueError(f"unknown cross entropy variant {variant!r}")


def choroid_bce_loss(pred_prob: torch.Tensor, gt) -> torch.Tensor:
    """Binary cross entropy between a choroid probability map and the reference mask."""
    target = getattr(gt, "mask", gt)
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(np.array(target, dtype=np.float64))
    target = target.to(pred_prob.device, pred_prob.dtype)
    p = pred_prob
    if p.dim() == 4 and p.shape[1] == 1:
        p = p[:, 0]
    if target.dim() == 4 and target.shape[1] == 1:
        target = target[:, 0]
    if p.dim() > target.dim() and p.shape[1:] == target.shape:
        target = target.expand_as(p)
    if p.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs mask {tuple(target.shape)}")
    p = p.clamp(EPS, 1 - EPS)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def bio_regularizer_loss(pred_choroid_prob: torch.Tensor, target_thickness, frozen_bio_net) -> torch.Tensor:
    """|B(choroid map) - target| averaged over the batch, B frozen."""
    from .networks import is_frozen

    if not is_frozen(frozen_bio_net):
        raise ValueError("biomarker network must be frozen before it is used as a regularizer")
    x = pred_choroid_prob
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x.unsqueeze(1)
    pred = frozen_bio_net(x).reshape(-1)
    target = _t(target_thickness, pred).to(pred.dtype).reshape(-1)
    if target.numel() == 1 and pred.numel() > 1:
        target = target.expand_as(pred)
    return bio_mae_loss(pred, target)


def total_loss(l_multilayers, l_choroid, l_bio, weights: LossWeights = LossWeights()):
    return (
        weights.w_multilayers * l_multilayers
        + weights.w_choroid * l_choroid
        + weights.w_bio * l_bio
    )
