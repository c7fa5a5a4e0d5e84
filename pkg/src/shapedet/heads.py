"""Correspondence heads.

The local head is a single MLP shared across anatomies (class identity is
carried by the one-hot part of the ROI feature).  It predicts per-point
displacements from the box-centered template, squashed through tanh and
scaled by twice the largest box radius, so no coordinate can stray farther
than that from its template point.

World correspondences are obtained by rigidly aligning the predicted local
points onto the anatomy's world template.  The alignment is differentiable:
gradients flow through both the aligned points and the fitted transform via
a closed-form backward pass, with a transform-held-constant fallback when
the alignment spectrum is too degenerate to differentiate.
"""

import numpy as np
import torch
from torch import nn

from .backbone import RoiFeature, he_init
from .errors import (
    AnatomyMismatch,
    MismatchedCardinality,
    NearDegenerateSpectrum,
)
from .geometry import (
    CorrespondenceSet,
    Frame,
    TemplateShape,
    apply_transform,
    center_at,
    detached_transform_gradient,
    procrustes_align,
    procrustes_backward,
    rigid_align_points,
)
from .losses import DEFAULT_LOSS_PARAMS, sigmoid_weighted_mse

DEFAULT_HIDDEN_WIDTH = 512


def displacement_scale(radii):
    """Bound for every displacement coordinate: twice the largest box radius."""
    d = 2.0 * float(np.max(np.asarray(radii, dtype=float)))
    if d <= 0.0:
        raise ValueError(f"displacement scale must be positive, got {d}")
    return d


class CorrespondenceMlp(nn.Module):
    """Two hidden layers mapping ROI vector + class one-hot to 3M outputs."""

    def __init__(self, roi_length, num_classes, num_points, hidden_width=DEFAULT_HIDDEN_WIDTH):
        super().__init__()
        self.roi_length = int(roi_length)
        self.num_classes = int(num_classes)
        self.num_points = int(num_points)
        self.mlp = nn.Sequential(
            nn.Linear(self.roi_length + self.num_classes, hidden_width),
            nn.SiLU(),
            nn.Linear(hidden_width, hidden_width),
            nn.SiLU(),
            nn.Linear(hidden_width, 3 * self.num_points),
        )
        self.apply(he_init)

    def forward(self, roi):
        if isinstance(roi, RoiFeature):
            x = torch.cat([roi.vector, roi.anatomy_onehot.to(roi.vector.dtype)])
        else:
            x = roi
        if x.shape[-1] != self.roi_length + self.num_classes:
            raise MismatchedCardinality(
                f"roi vector length {x.shape[-1]}, head expects {self.roi_length + self.num_classes}"
            )
        return self.mlp(x)


class LocalHead(CorrespondenceMlp):
    """Predicts bounded displacements from the box-centered local template."""


class DirectWorldHead(CorrespondenceMlp):
    """Ablation head: regresses world points straight from ROI features,
    bypassing the rigid-alignment stage."""


def predict_local_points(head, roi, center, radii, template_local_points):
    """Differentiable local prediction: centered template + d * tanh(mlp)."""
    raw = head(roi).reshape(head.num_points, 3)
    d = displacement_scale(radii)
    base = torch.as_tensor(
        np.asarray(template_local_points, dtype=float) + np.asarray(center, dtype=float),
        dtype=raw.dtype,
    )
    return base + d * torch.tanh(raw)


def predict_direct_world_points(head, roi, radii, world_template_points):
    """Ablation path: world template + d * tanh(mlp), no alignment stage."""
    raw = head(roi).reshape(head.num_points, 3)
    d = displacement_scale(radii)
    base = torch.as_tensor(np.asarray(world_template_points, dtype=float), dtype=raw.dtype)
    return base + d * torch.tanh(raw)


def _check_anatomy(head, roi, box, template):
    if template.anatomy != box.anatomy:
        raise AnatomyMismatch(f"template anatomy {template.anatomy} vs box anatomy {box.anatomy}")
    if isinstance(roi, RoiFeature) and roi.anatomy != box.anatomy:
        raise AnatomyMismatch(f"roi one-hot class {roi.anatomy} vs box anatomy {box.anatomy}")
    if template.num_points != head.num_points:
        raise MismatchedCardinality(
            f"template has {template.num_points} points, head predicts {head.num_points}"
        )


def predict_local(head, roi, box, template):
    """Inference wrapper returning an image-frame CorrespondenceSet."""
    _check_anatomy(head, roi, box, template)
    with torch.no_grad():
        pts = predict_local_points(
            head, roi, box.center, box.radii, template.local_template.points
        )
    return CorrespondenceSet(
        points=pts.cpu().numpy().astype(float), frame=Frame.LOCAL, anatomy=box.anatomy
    )


def _as_point_tensor(value, dtype=torch.float64):
    if isinstance(value, CorrespondenceSet):
        return torch.as_tensor(value.points, dtype=dtype)
    return value if torch.is_tensor(value) else torch.as_tensor(np.asarray(value), dtype=dtype)


def _correspondence_loss(pred, gt, params):
    if isinstance(pred, CorrespondenceSet) and isinstance(gt, CorrespondenceSet):
        if pred.anatomy != gt.anatomy:
            raise AnatomyMismatch(f"pred anatomy {pred.anatomy} vs gt anatomy {gt.anatomy}")
    p = _as_point_tensor(pred)
    g = _as_point_tensor(gt, dtype=p.dtype)
    if p.shape != g.shape:
        raise MismatchedCardinality(f"point sets {tuple(p.shape)} vs {tuple(g.shape)}")
    return sigmoid_weighted_mse(p, g, params)


def local_loss(pred, gt, params=DEFAULT_LOSS_PARAMS):
    """Sigmoid-weighted squared error between local correspondence sets."""
    return _correspondence_loss(pred, gt, params)


def world_loss(pred, gt, params=DEFAULT_LOSS_PARAMS):
    """Sigmoid-weighted squared error between world correspondence sets."""
    return _correspondence_loss(pred, gt, params)


def predict_world(local_pred, template):
    """Rigidly align predicted locals onto the world template (inference)."""
    if local_pred.num_points != template.world_template.num_points:
        raise MismatchedCardinality(
            f"locals have {local_pred.num_points} points, "
            f"world template has {template.world_template.num_points}"
        )
    t = procrustes_align(local_pred, template.world_template)
    return apply_transform(t, local_pred, frame=Frame.WORLD)


class _RigidAlignFn(torch.autograd.Function):
    """Aligns points onto a fixed target; backward differentiates through
    the fitted transform, falling back to a transform-held-constant gradient
    when the alignment spectrum is near-degenerate."""

    @staticmethod
    def forward(ctx, points, target, counter):
        x = points.detach().cpu().numpy().astype(np.float64)
        z = np.asarray(target, dtype=np.float64)
        rotation, translation = rigid_align_points(x, z)
        ctx.source = x
        ctx.target = z
        ctx.rotation = rotation
        ctx.counter = counter
        return torch.as_tensor(x @ rotation.T + translation, dtype=points.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        g = grad_output.detach().cpu().numpy().astype(np.float64)
        try:
            grad = procrustes_backward(ctx.source, ctx.target, g)
        except NearDegenerateSpectrum:
            grad = detached_transform_gradient(ctx.rotation, g)
            if ctx.counter is not None:
                ctx.counter["fallbacks"] = ctx.counter.get("fallbacks", 0) + 1
        return torch.as_tensor(grad, dtype=grad_output.dtype), None, None


def align_to_world_points(points, world_template_points, fallback_counter=None):
    """Differentiable rigid alignment of (M, 3) points onto the world template."""
    return _RigidAlignFn.apply(points, world_template_points, fallback_counter)
