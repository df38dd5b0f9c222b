"""Segmentation metrics: DSC, HD95, NSD.

Boundary voxels are foreground voxels with at least one six-connected
background neighbor (volume border counts as background).  Surface distances
are Euclidean between voxel centers in physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import InputError

UNDEFINED = float("nan")


@dataclass
class MetricReport:
    """Per-class metric values plus means over classes where each is defined."""

    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        vals = [m[name] for m in self.per_class.values() if not math.isnan(m[name])]
        return float(np.mean(vals)) if vals else UNDEFINED

    def to_json(self) -> dict:
        def clean(x):
            return None if math.isnan(x) else x

        return {
            "per_class": {
                str(k): {n: clean(v) for n, v in m.items()} for k, m in self.per_class.items()
            },
            "mean": {n: clean(self.mean(n)) for n in ("dsc", "hd95", "nsd")},
        }


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a six-connected background neighbor (border included)."""
    mask = mask.astype(bool)
    padded = np.pad(mask, 1)
    eroded = ndimage.binary_erosion(
        padded, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )[1:-1, 1:-1, 1:-1]
    return mask & ~eroded


def _directed_distances(src_surface: np.ndarray, dst_surface: np.ndarray, spacing) -> np.ndarray:
    """Distance from every src surface voxel to the nearest dst surface voxel."""
    dist_to_dst = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist_to_dst[src_surface]


def surface_distances(pred: np.ndarray, gt: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    ps = boundary_voxels(pred)
    gs = boundary_voxels(gt)
    if not ps.any() or not gs.any():
        raise InputError("surface distance requires two nonempty masks")
    return _directed_distances(ps, gs, spacing), _directed_distances(gs, ps, spacing)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of pooled symmetric surface distances."""
    if not pred.astype(bool).any() or not gt.astype(bool).any():
        return UNDEFINED
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


def nsd(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), tau: float = 1.0) -> float:
    """Fraction of each surface within tau of the other, averaged over both directions."""
    if not pred.astype(bool).any() or not gt.astype(bool).any():
        return UNDEFINED
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    return float(((d_pg <= tau).mean() + (d_gp <= tau).mean()) / 2.0)


def evaluate_labels(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    n_classes: int,
    spacing=(1.0, 1.0, 1.0),
    tau: float = 1.0,
) -> MetricReport:
    """Per-class DSC/HD95/NSD; classes absent from both volumes are skipped."""
    report = MetricReport()
    for k in range(1, n_classes + 1):
        p = pred_labels == k
        g = gt_labels == k
        if not p.any() and not g.any():
            continue
        report.per_class[k] = {
            "dsc": dsc(p, g),
            "hd95": hd95(p, g, spacing),
            "nsd": nsd(p, g, spacing, tau),
        }
    return report
