"""Click handling: centroid seeding, multi-round feature accumulation, round
fusion, and the simulated-click protocol used for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .core import (
    CenterStatus,
    Click,
    ClusterCenter,
    InputError,
    LabelVolume,
    MaskScoreVolume,
    Polarity,
)

CLICK_CAPACITY = 20
MAX_REFINE_ROUNDS = 15
DEFAULT_BETA = 0.8


class ClickCapacityError(RuntimeError):
    pass


def sample_point_feature(
    features: torch.Tensor, position: tuple[int, int], stride: int
) -> torch.Tensor:
    """Feature vector at a full-resolution pixel position; integer-divided by stride."""
    row, col = position
    _, fh, fw = features.shape
    if not (0 <= row < fh * stride and 0 <= col < fw * stride):
        raise InputError(f"position {position} outside slice bounds")
    fr, fc = row // stride, col // stride
    if fr >= fh or fc >= fw:
        raise InputError(f"position {position} maps outside the feature map")
    return features[:, fr, fc]


def adaptive_combine(
    o_current: torch.Tensor, o_accumulated_prev: torch.Tensor | None, beta: float
) -> torch.Tensor:
    """Exponentially decaying accumulation of per-round click features."""
    if not 0.0 <= beta <= 1.0:
        raise InputError(f"beta must lie in [0, 1], got {beta}")
    if o_accumulated_prev is None:
        return o_current
    return o_current + beta * o_accumulated_prev


def init_center_from_click(model, o_hat: torch.Tensor, click: Click) -> ClusterCenter:
    """Project an accumulated point feature into a click-seeded cluster center."""
    embedding = model.click_ffn(o_hat)
    class_id = click.class_id if click.polarity == Polarity.POSITIVE else 0
    return ClusterCenter(
        embedding=embedding,
        status=CenterStatus.CLICK_SEEDED,
        class_id=class_id,
        source_round=click.round,
    )


def combine_rounds(per_round: list[tuple[np.ndarray, np.ndarray | float]]) -> np.ndarray:
    """Per-voxel max over rounds of (mask score x class score)."""
    if not per_round:
        raise InputError("combine_rounds needs at least one round")
    products = []
    shape = np.asarray(per_round[0][0]).shape
    for mask_scores, class_score in per_round:
        mask_scores = np.asarray(mask_scores)
        if mask_scores.shape != shape:
            raise InputError("round score shapes disagree")
        cs = np.asarray(class_score)
        if cs.ndim == 1:  # per-slice class score, broadcast over H, W
            cs = cs.reshape(-1, *([1] * (mask_scores.ndim - 1)))
        products.append(mask_scores * cs)
    return np.max(np.stack(products), axis=0)


def _distance_center(mask2d: np.ndarray) -> tuple[int, int]:
    """Interior point maximizing distance to the mask boundary; first index wins ties."""
    padded = np.pad(mask2d.astype(bool), 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist[~mask2d.astype(bool)] = -1.0
    flat = int(np.argmax(dist))
    return np.unravel_index(flat, mask2d.shape)


def simulate_first_click(
    gt_mask: np.ndarray, class_id: int, slice_index: int = 0, rng=None, jitter: int = 0
) -> Click:
    """Positive click near the object center (distance-transform argmax).

    Optional jitter displaces the click uniformly within the mask-constrained
    window, for robustness testing; deterministic when jitter == 0.
    """
    if not gt_mask.any():
        raise InputError("cannot click an empty mask")
    row, col = _distance_center(gt_mask)
    if jitter > 0 and rng is not None:
        for _ in range(20):
            r = int(row + rng.integers(-jitter, jitter + 1))
            c = int(col + rng.integers(-jitter, jitter + 1))
            if 0 <= r < gt_mask.shape[0] and 0 <= c < gt_mask.shape[1] and gt_mask[r, c]:
                row, col = r, c
                break
    return Click(slice_index=slice_index, position=(int(row), int(col)), class_id=class_id)


def simulate_refine_click(
    pred_labels: LabelVolume, gt_labels: LabelVolume, round: int = 1
) -> Click | None:
    """Click at the center of the largest connected error component.

    False negatives produce positive clicks for the missed class; false
    positives produce negative clicks.  Returns None when prediction equals
    ground truth (refinement converged).
    """
    pred = pred_labels.labels
    gt = gt_labels.labels
    if pred.shape != gt.shape:
        raise InputError("prediction and ground truth shapes disagree")
    structure = ndimage.generate_binary_structure(3, 1)
    best = None  # (size, class_id, polarity, component mask)
    for k in range(1, gt_labels.n_classes + 1):
        for err, polarity in (
            ((gt == k) & (pred != k), Polarity.POSITIVE),
            ((pred == k) & (gt != k), Polarity.NEGATIVE),
        ):
            if not err.any():
                continue
            comp, n = ndimage.label(err, structure=structure)
            sizes = np.bincount(comp.ravel())[1:]
            top = int(np.argmax(sizes)) + 1
            size = int(sizes[top - 1])
            if best is None or size > best[0]:
                best = (size, k, polarity, comp == top)
    if best is None:
        return None
    _, class_id, polarity, mask = best
    areas = mask.sum(axis=(1, 2))
    t = int(np.argmax(areas))
    row, col = _distance_center(mask[t])
    return Click(
        slice_index=t,
        position=(int(row), int(col)),
        class_id=class_id,
        polarity=polarity,
        round=round,
    )


@dataclass
class RoundRecord:
    click: Click
    o_hat: torch.Tensor
    scores: MaskScoreVolume | None = None


@dataclass
class InteractionSession:
    """Strictly sequential multi-round refinement state for one volume.

    Accumulated point features are tracked per (class, polarity) stream; click
    count per class is capped so each click can seed a distinct center slot.
    """

    beta: float = DEFAULT_BETA
    click_capacity: int = CLICK_CAPACITY
    rounds: list[RoundRecord] = field(default_factory=list)
    accumulators: dict[tuple[int, Polarity], torch.Tensor] = field(default_factory=dict)
    clicks_per_class: dict[int, int] = field(default_factory=dict)

    @property
    def round_count(self) -> int:
        return len(self.rounds)

    def add_click(self, click: Click, point_feature: torch.Tensor) -> torch.Tensor:
        """Register a click, returning the accumulated feature for its stream."""
        count = self.clicks_per_class.get(click.class_id, 0)
        if count >= self.click_capacity:
            raise ClickCapacityError(
                f"click capacity reached for class {click.class_id} "
                f"({self.click_capacity} clicks)"
            )
        key = (click.class_id, click.polarity)
        o_hat = adaptive_combine(point_feature, self.accumulators.get(key), self.beta)
        self.accumulators[key] = o_hat
        self.clicks_per_class[click.class_id] = count + 1
        self.rounds.append(RoundRecord(click=click, o_hat=o_hat))
        return o_hat
