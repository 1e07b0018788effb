"""Attention analysis: Grad-CAM heatmaps, anatomical region masks, overlays,
and cohort-level regional statistics.

The class-discriminative heatmap weights each feature channel by the spatial
mean of its gradient, rectifies the weighted sum, upsamples bilinearly and
min-max normalizes to [0, 1] (an all-zero map stays zero).

Region geometry is defined on a 224x224 reference frame and scaled by
(w/224, h/224): an iris ellipse with semi-axes 55x45 at the frame center, a
scleral band between a 100x80 ellipse and a radius-60 circle, and everything
else as periphery. The three masks partition the frame exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .evalstat import dunn_posthoc, kruskal_wallis
from .filters import resize_bilinear_array
from .imgcore import BitMask, ImageRGB8, Tensor32
from .pipeline import CLASSES

REGIONS = ("iris", "sclera", "periphery")

REFERENCE_SIZE = 224
IRIS_SEMI_AXES = (55.0, 45.0)  # (x, y) at the reference frame
SCLERA_OUTER_SEMI_AXES = (100.0, 80.0)
SCLERA_INNER_RADIUS = 60.0


def grad_cam(features: Tensor32, gradients: Tensor32, out_h: int, out_w: int) -> Tensor32:
    """Channel-weighted rectified attention map.

    features/gradients: (K, h, w) tensors of identical shape. The per-channel
    weight is the spatial mean of the gradient; the rectified weighted sum is
    bilinearly upsampled to (out_h, out_w) and min-max normalized."""
    a = features.data.astype(np.float64)
    g = gradients.data.astype(np.float64)
    if a.ndim != 3 or a.shape[0] < 1:
        raise ValidationError(f"features must be (K, h, w), got {features.shape}")
    if a.shape != g.shape:
        raise ValidationError(f"gradients shape {gradients.shape} != features shape {features.shape}")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")
    alpha = g.mean(axis=(1, 2))
    raw = np.maximum((alpha[:, None, None] * a).sum(axis=0), 0.0)
    up = resize_bilinear_array(raw, out_h, out_w)
    lo = float(up.min())
    hi = float(up.max())
    if hi <= lo:
        # constant map: all-zero stays zero, constant positive maps to 1
        out = np.zeros_like(up) if hi == 0.0 else np.ones_like(up)
    else:
        out = (up - lo) / (hi - lo)
    return Tensor32(out)


def region_masks(height: int, width: int) -> dict:
    """Iris / sclera / periphery masks partitioning a (height, width) frame."""
    if height < 8 or width < 8:
        raise ValidationError(f"frame must be at least 8x8, got {width}x{height}")
    sx = width / REFERENCE_SIZE
    sy = height / REFERENCE_SIZE
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    yy, xx = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    dy = yy - cy
    dx = xx - cx

    def inside_ellipse(ax_x, ax_y):
        return (dx / (ax_x * sx)) ** 2 + (dy / (ax_y * sy)) ** 2 <= 1.0

    iris = inside_ellipse(*IRIS_SEMI_AXES)
    outer = inside_ellipse(*SCLERA_OUTER_SEMI_AXES)
    inner = inside_ellipse(SCLERA_INNER_RADIUS, SCLERA_INNER_RADIUS)
    sclera = outer & ~inner & ~iris
    periphery = ~(iris | sclera)
    return {
        "iris": BitMask(iris),
        "sclera": BitMask(sclera),
        "periphery": BitMask(periphery),
    }


def regional_attention(attention: Tensor32, masks=None) -> dict:
    """Mean heatmap value inside each region mask."""
    a = attention.data.astype(np.float64)
    if a.ndim != 2:
        raise ValidationError(f"attention map must be rank 2, got {attention.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValidationError("attention map values must lie in [0, 1]")
    if masks is None:
        masks = region_masks(a.shape[0], a.shape[1])
    out = {}
    for name in REGIONS:
        mask = masks[name]
        if (mask.height, mask.width) != a.shape:
            raise ValidationError(f"mask {name} does not match map shape {a.shape}")
        sel = mask.data
        if not sel.any():
            raise ValidationError(f"region {name} is empty")
        out[name] = float(a[sel].mean())
    return out


def jet_colorize(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear jet colormap; values in [0,1] -> float RGB in [0,1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(img: ImageRGB8, attention: Tensor32, alpha: float = 0.4) -> ImageRGB8:
    """Blend the colorized heatmap over the image: (1-alpha)*img + alpha*color."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    a = attention.data.astype(np.float64)
    if a.ndim != 2:
        raise ValidationError(f"attention map must be rank 2, got {attention.shape}")
    if a.shape != (img.height, img.width):
        a = resize_bilinear_array(a, img.height, img.width)
    color = jet_colorize(np.clip(a, 0.0, 1.0)) * 255.0
    blended = (1.0 - alpha) * img.data.astype(np.float64) + alpha * color
    return ImageRGB8(np.clip(np.rint(blended), 0, 255).astype(np.uint8))


def attention_cohort_report(labels, attentions) -> dict:
    """Regional attention statistics across a labeled cohort.

    labels: class name per image; attentions: dict region->mean per image.
    Requires at least two classes and >= 2 images per present class. Emits
    per-class mean/sd per region, a Kruskal-Wallis test and Dunn's post hoc
    per region, and a flag for whether the class means follow the canonical
    severity order."""
    labels = list(labels)
    attentions = list(attentions)
    if len(labels) != len(attentions) or not labels:
        raise ValidationError("labels and attentions must be non-empty and aligned")
    for lab in labels:
        if lab not in CLASSES:
            raise ValidationError(f"unknown class label {lab!r}")
    present = [c for c in CLASSES if labels.count(c) > 0]
    if len(present) < 2:
        raise ValidationError("insufficient samples: need at least two classes")
    for c in present:
        if labels.count(c) < 2:
            raise ValidationError(f"insufficient samples: class {c} has fewer than 2 images")

    report = {"n_images": len(labels), "classes": {c: labels.count(c) for c in present}, "per_region": {}}
    for region in REGIONS:
        groups = []
        stats = {}
        for c in present:
            vals = np.array(
                [att[region] for att, lab in zip(attentions, labels) if lab == c], dtype=np.float64
            )
            groups.append(vals)
            stats[c] = {
                "n": int(vals.size),
                "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)),
            }
        kw = kruskal_wallis(groups)
        dunn = dunn_posthoc(groups, group_names=list(present))
        means = [stats[c]["mean"] for c in present]
        ordered = len(present) == len(CLASSES) and all(
            means[i] < means[i + 1] for i in range(len(means) - 1)
        )
        report["per_region"][region] = {
            "class_stats": stats,
            "kruskal_wallis": kw.to_dict(),
            "dunn": [d.to_dict() for d in dunn],
            "severity_ordered": ordered,
        }
    return report
