"""Recurrent centroid aggregation: one fused history vector per tracked object.

The fused vector has constant size regardless of how many slices contributed,
so the carried state never grows with volume depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class MemoryState:
    fused: torch.Tensor  # (D,)
    step: int = 1


def fuse_memory(model, h_prev: MemoryState | None, c_new: torch.Tensor) -> MemoryState:
    """Merge a freshly decoded centroid into the running history vector."""
    prev = h_prev.fused if h_prev is not None else None
    fused = model.memory.fuse(prev, c_new)
    return MemoryState(fused=fused, step=(h_prev.step + 1 if h_prev is not None else 1))


def init_next_center(model, c_decoded: torch.Tensor, h: MemoryState | None) -> torch.Tensor:
    """Initial centroid for the next slice: decoded center queried against memory.

    Without history (first propagation step) the center passes through
    unchanged.
    """
    if h is None:
        return c_decoded
    return model.memory.query(c_decoded, h.fused)
