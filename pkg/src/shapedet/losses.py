"""Differentiable loss kernels for detection and correspondence training.

Three kernels cover the whole pipeline: a penalty-reduced focal loss for
the center heatmap, a masked MSE for the radius map, and a shared
sigmoid-weighted squared error used for the offset map and for both
correspondence losses.  All kernels are written as explicit formulas on
torch tensors so gradients come off the autograd tape exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatch

# Heatmap predictions are clipped into [EPS, 1 - EPS] before the logs.
HEATMAP_CLIP_EPS = 1e-5
# Treat a ground-truth voxel as positive at/above this value (the renderer
# writes exactly 1.0 at center voxels; the slack survives float32 I/O).
_POSITIVE_THRESHOLD = 1.0 - 1e-6
# Keeps sqrt differentiable at zero error without moving the loss value.
_NORM_GUARD = 1e-24


@dataclass(frozen=True)
class DetectionLossParams:
    """Hyperparameters of the heatmap and sigmoid-weighted kernels."""

    alpha: float = 3.0
    beta: float = 4.0
    a: float = 10.0
    c: float = 0.2

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.a <= 0 or self.c < 0:
            raise ValueError(f"invalid loss params {self}")


DEFAULT_LOSS_PARAMS = DetectionLossParams()


def heatmap_focal_loss(
    pred: torch.Tensor, gt: torch.Tensor, params: DetectionLossParams = DEFAULT_LOSS_PARAMS
) -> torch.Tensor:
    """Penalty-reduced focal loss over one sample's heatmap.

    At positive voxels (gt == 1): (1 - p)^alpha * log(p); elsewhere the
    penalty-reduced term (1 - gt)^beta * p^alpha * log(1 - p).  The sum is
    negated and divided by the number of positive voxels (at least 1).
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred.clamp(HEATMAP_CLIP_EPS, 1.0 - HEATMAP_CLIP_EPS)
    positive = gt >= _POSITIVE_THRESHOLD
    pos_term = (1.0 - p) ** params.alpha * torch.log(p)
    neg_term = (1.0 - gt) ** params.beta * p**params.alpha * torch.log(1.0 - p)
    n_pos = positive.sum().clamp(min=1).to(pred.dtype)
    total = torch.where(positive, pos_term, neg_term).sum()
    return -total / n_pos


def radius_masked_mse(
    pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean squared radius error over supervised center voxels only.

    pred/gt are (3, ...) maps and mask a (...) boolean grid; each masked
    voxel contributes the squared norm of its 3-vector error.  An empty
    mask yields exactly zero.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if mask.shape != pred.shape[1:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs map {tuple(pred.shape)}")
    n = int(mask.sum())
    if n == 0:
        return pred.sum() * 0.0
    sq = ((pred - gt) ** 2).sum(dim=0)
    return (sq * mask.to(pred.dtype)).sum() / n


def sigmoid_weighted_mse(
    pred: torch.Tensor,
    gt: torch.Tensor,
    params: DetectionLossParams = DEFAULT_LOSS_PARAMS,
) -> torch.Tensor:
    """Squared error weighted by a logistic gate on the per-element error.

    Elements are the rows of (N, 3) inputs; each contributes
    e^2 / (1 + exp(a * (c - e))) with e its Euclidean error.  Small errors
    (e < c) are down-weighted, errors past the threshold keep nearly full
    weight; the gate sits at exactly 1/2 when e == c.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.shape[-1] != 3:
        raise ShapeMismatch(f"expected (..., 3) point arrays, got {tuple(pred.shape)}")
    sq = ((pred - gt) ** 2).sum(dim=-1)
    err = torch.sqrt(sq + _NORM_GUARD)
    weight = 1.0 / (1.0 + torch.exp(params.a * (params.c - err)))
    return (sq * weight).mean()


def offset_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    mask: torch.Tensor,
    params: DetectionLossParams = DEFAULT_LOSS_PARAMS,
) -> torch.Tensor:
    """Sigmoid-weighted offset error over supervised center voxels.

    Gathers the (3,) offset vectors at masked voxels and applies the shared
    sigmoid-weighted kernel; empty mask yields exactly zero.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if mask.shape != pred.shape[1:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs map {tuple(pred.shape)}")
    if int(mask.sum()) == 0:
        return pred.sum() * 0.0
    sel = mask.bool()
    pred_vecs = pred[:, sel].transpose(0, 1)  # (n, 3)
    gt_vecs = gt[:, sel].transpose(0, 1)
    return sigmoid_weighted_mse(pred_vecs, gt_vecs, params)
