"""Bipartite matching between predicted centers and ground-truth masks.

Matching cost follows the set-prediction convention: weighted sum of a
classification term, a soft-Dice term, and a mean binary cross-entropy term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import CenterSet, CenterStatus, ClusterCenter, InputError

LAMBDA_CLS = 2.0
LAMBDA_DICE = 5.0
LAMBDA_BCE = 5.0


class InfeasibleMatchingError(ValueError):
    pass


@dataclass
class Matching:
    """pred index -> target slot; every target matched exactly once."""

    pred_to_target: dict[int, int]
    total_cost: float

    @property
    def matched_preds(self) -> list[int]:
        return sorted(self.pred_to_target)


def soft_dice(pred_prob: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    inter = (pred_prob * gt).sum()
    return (2 * inter + eps) / (pred_prob.sum() + gt.sum() + eps)


def match_cost(
    pred_mask_logits: torch.Tensor,
    pred_class_logits: torch.Tensor,
    gt_mask: torch.Tensor,
    gt_class: int,
) -> float:
    """Cost of pairing one predicted center with one ground-truth mask."""
    if pred_mask_logits.shape != gt_mask.shape:
        raise InputError(
            f"mask shape mismatch {tuple(pred_mask_logits.shape)} vs {tuple(gt_mask.shape)}"
        )
    with torch.no_grad():
        p_class = torch.softmax(pred_class_logits, dim=-1)[gt_class]
        prob = torch.sigmoid(pred_mask_logits)
        bce = torch.nn.functional.binary_cross_entropy_with_logits(
            pred_mask_logits, gt_mask.to(pred_mask_logits.dtype), reduction="mean"
        )
        cost = (
            LAMBDA_CLS * (1.0 - p_class)
            + LAMBDA_DICE * (1.0 - soft_dice(prob, gt_mask.to(prob.dtype)))
            + LAMBDA_BCE * bce
        )
    return float(cost)


def hungarian_match(cost_matrix: np.ndarray) -> Matching:
    """Minimum-cost injection of K targets into N >= K predictions."""
    cost_matrix = np.asarray(cost_matrix, dtype=np.float64)
    if cost_matrix.ndim != 2:
        raise InputError("cost matrix must be 2D (N predictions x K targets)")
    n, k = cost_matrix.shape
    if n < k:
        raise InfeasibleMatchingError(f"need N >= K, got N={n} targets K={k}")
    if not np.all(np.isfinite(cost_matrix)):
        raise InputError("cost matrix contains non-finite values")
    rows, cols = linear_sum_assignment(cost_matrix)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return Matching(pred_to_target=mapping, total_cost=float(cost_matrix[rows, cols].sum()))


def build_cost_matrix(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    gt_masks: list[torch.Tensor],
    gt_classes: list[int],
    candidate_rows: list[int] | None = None,
) -> np.ndarray:
    """Cost of every (candidate center, ground-truth mask) pair."""
    rows = list(range(mask_logits.shape[0])) if candidate_rows is None else list(candidate_rows)
    cost = np.zeros((len(rows), len(gt_masks)))
    for i, r in enumerate(rows):
        for j, (m, c) in enumerate(zip(gt_masks, gt_classes)):
            cost[i, j] = match_cost(mask_logits[r], class_logits[r], m, c)
    return cost


def select_foreground_train(centers: CenterSet, matching: Matching) -> CenterSet:
    """Keep exactly the matched centers, in target-slot order, marked propagated."""
    by_target = sorted(matching.pred_to_target.items(), key=lambda kv: kv[1])
    kept = []
    for pred_idx, _ in by_target:
        src = centers.centers[pred_idx]
        kept.append(
            ClusterCenter(
                embedding=src.embedding,
                status=CenterStatus.PROPAGATED,
                class_id=src.class_id,
                source_round=src.source_round,
                track_id=src.track_id,
            )
        )
    return CenterSet(centers=kept, per_class_capacity=centers.per_class_capacity)


def select_foreground_infer(
    centers: CenterSet, class_logits: torch.Tensor, keep_threshold: float = 0.5
) -> CenterSet:
    """Keep centers whose argmax class is foreground with probability >= threshold."""
    probs = torch.softmax(class_logits.detach(), dim=-1)
    kept = []
    for n, center in enumerate(centers.centers):
        cls = int(torch.argmax(probs[n]))
        if cls == 0 or float(probs[n, cls]) < keep_threshold:
            continue
        kept.append(
            ClusterCenter(
                embedding=center.embedding,
                status=CenterStatus.PROPAGATED,
                class_id=cls,
                source_round=center.source_round,
                track_id=center.track_id,
            )
        )
    return CenterSet(centers=kept, per_class_capacity=centers.per_class_capacity)
