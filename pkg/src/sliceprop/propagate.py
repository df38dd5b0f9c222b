"""Slice-to-volume sweep drivers for automatic and interactive inference.

A sweep walks slices in order, decoding each with the current center set:
carried foreground centers (optionally conditioned on their history vector)
plus learned centers topped up to the model's center count.  Carried state is
O(N x D) regardless of volume depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    CenterStatus,
    Click,
    InputError,
    MaskScoreVolume,
    Polarity,
    Volume,
)
from .interaction import InteractionSession, init_center_from_click, sample_point_feature
from .memory_agg import MemoryState, fuse_memory, init_next_center
from .model import SegModel, upsample_mask_logits


@dataclass(frozen=True)
class SweepOptions:
    propagate: bool = True
    use_memory: bool = True
    keep_threshold: float = 0.5


@dataclass
class _Track:
    embedding: torch.Tensor  # initial value for the next decode
    class_id: int
    track_id: int
    memory: MemoryState | None = None
    seeded: bool = False


class _StatePool:
    """Fixed-capacity storage for carried center embeddings and memory vectors.

    Allocated once per sweep at the model's center capacity; live tracks are
    compacted into the leading rows after every slice, so the carried state
    occupies the same number of bytes whatever the volume depth.
    """

    def __init__(self, capacity: int, d_model: int, dtype=torch.float32):
        self.embeddings = torch.zeros(capacity, d_model, dtype=dtype)
        self.memories = torch.zeros(capacity, d_model, dtype=dtype)

    def compact(self, tracks: list[_Track]) -> None:
        for i, track in enumerate(tracks):
            self.embeddings[i] = track.embedding
            track.embedding = self.embeddings[i]
            if track.memory is not None:
                self.memories[i] = track.memory.fused
                track.memory = MemoryState(fused=self.memories[i])

    def state_bytes(self) -> int:
        return (
            self.embeddings.numel() * self.embeddings.element_size()
            + self.memories.numel() * self.memories.element_size()
        )


class FeatureCache:
    """Per-slice backbone features, computed at most once per slice."""

    def __init__(self, model: SegModel, volume: Volume):
        self.model = model
        self.volume = volume
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        self.hits = 0
        self.misses = 0

    def get(self, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        if t in self._cache:
            self.hits += 1
        else:
            self.misses += 1
            slice2d = torch.from_numpy(np.ascontiguousarray(self.volume.voxels[t])).float()
            with torch.no_grad():
                self._cache[t] = self.model.encode_slice(slice2d)
        return self._cache[t]


def _sweep(
    model: SegModel,
    volume: Volume,
    order: list[int],
    seeds: list[_Track],
    options: SweepOptions,
    cache: FeatureCache | None = None,
    stats: dict | None = None,
) -> np.ndarray:
    """Run one directional sweep; returns per-class scores (K, C, H, W)."""
    cfg = model.cfg
    c_slices, h, w = volume.shape
    scores = np.zeros((cfg.n_classes, c_slices, h, w), dtype=np.float32)
    cache = cache or FeatureCache(model, volume)
    carried: list[_Track] = list(seeds)
    next_track_id = max([t.track_id for t in carried], default=-1) + 1
    pool = _StatePool(cfg.n_centers, cfg.d_model) if options.propagate else None
    if pool is not None:
        pool.compact(carried)
    with torch.no_grad():
        for t in order:
            features, pixel_emb = cache.get(t)
            carried = carried[: cfg.n_centers]
            n_prop = len(carried)
            learned = model.learned_centers[: cfg.n_centers - n_prop]
            if n_prop:
                centers = torch.cat([torch.stack([tr.embedding for tr in carried]), learned])
            else:
                centers = learned
            if centers.shape[1] != cfg.d_model:
                raise InputError(
                    f"center dimension {centers.shape[1]} does not match model {cfg.d_model}"
                )
            out = model.decode(features, pixel_emb, centers)
            probs = torch.softmax(out.class_logits, dim=-1)
            sig = torch.sigmoid(upsample_mask_logits(out.mask_logits, (h, w))).numpy()
            kept: list[tuple[int, _Track]] = []  # (decode row, continuing track)
            for n in range(centers.shape[0]):
                if n < n_prop and carried[n].seeded:
                    track = carried[n]
                    if track.class_id >= 1:
                        p = float(probs[n, track.class_id])
                        np.maximum(
                            scores[track.class_id - 1, t], sig[n] * p,
                            out=scores[track.class_id - 1, t],
                        )
                    kept.append((n, track))
                    continue
                cls = int(torch.argmax(probs[n]))
                p = float(probs[n, cls])
                if cls == 0 or p < options.keep_threshold:
                    continue
                np.maximum(scores[cls - 1, t], sig[n] * p, out=scores[cls - 1, t])
                if n < n_prop:
                    track = carried[n]
                    track.class_id = cls
                else:
                    track = _Track(
                        embedding=centers[n], class_id=cls, track_id=next_track_id
                    )
                    next_track_id += 1
                kept.append((n, track))
            if options.propagate:
                new_carried = []
                per_class_counts: dict[int, int] = {}
                for n, track in kept:
                    count = per_class_counts.get(track.class_id, 0)
                    if count >= cfg.per_class_centers and not track.seeded:
                        continue
                    per_class_counts[track.class_id] = count + 1
                    c_hat = out.centers[n]
                    if options.use_memory:
                        track.embedding = init_next_center(model, c_hat, track.memory)
                        track.memory = fuse_memory(model, track.memory, c_hat)
                    else:
                        track.embedding = c_hat
                    new_carried.append(track)
                carried = new_carried
                pool.compact(carried)
            else:
                carried = []
            if stats is not None:
                state_bytes = pool.state_bytes() if pool is not None else 0
                stats["peak_state_bytes"] = max(stats.get("peak_state_bytes", 0), state_bytes)
                stats["peak_carried"] = max(stats.get("peak_carried", 0), len(carried))
    return scores


def propagate_volume_auto(
    model: SegModel,
    volume: Volume,
    options: SweepOptions = SweepOptions(),
    stats: dict | None = None,
) -> MaskScoreVolume:
    """Automatic protocol: forward and backward z-sweeps fused by per-voxel max.

    A directional sweep only has history on one side of each structure, so it
    resolves the exit tip of an ambiguous organ but not its entry tip; the
    opposite direction covers the other end.  Backbone features are shared
    through the cache, so each slice is still encoded once.
    """
    cache = FeatureCache(model, volume)
    order = list(range(volume.n_slices))
    scores = _sweep(model, volume, order, [], options, cache=cache, stats=stats)
    if len(order) > 1 and options.propagate:
        back = _sweep(model, volume, order[::-1], [], options, cache=cache, stats=stats)
        scores = np.maximum(scores, back)
    return MaskScoreVolume(scores=np.clip(scores, 0.0, 1.0), provenance="automatic")


def propagate_volume_interactive(
    model: SegModel,
    volume: Volume,
    clicks: list[Click],
    options: SweepOptions = SweepOptions(),
    session: InteractionSession | None = None,
    cache: FeatureCache | None = None,
    stats: dict | None = None,
) -> MaskScoreVolume:
    """One refinement round: seed centers from clicks, broadcast bidirectionally.

    Each (class, polarity) stream touched by this call seeds one center from
    its accumulated point feature.  Forward and backward sweeps share the
    seeds and are fused by per-voxel max.
    """
    if not clicks:
        raise InputError("interactive propagation needs at least one click")
    for click in clicks:
        click.validate_against(volume.shape)
    session = session or InteractionSession()
    cache = cache or FeatureCache(model, volume)
    touched: list[tuple[int, Polarity]] = []
    for click in clicks:
        features, _ = cache.get(click.slice_index)
        point = sample_point_feature(features, click.position, model.cfg.stride)
        session.add_click(click, point)
        key = (click.class_id, click.polarity)
        if key not in touched:
            touched.append(key)
    seeds = []
    with torch.no_grad():
        for i, key in enumerate(touched):
            o_hat = session.accumulators[key]
            click = next(c for c in clicks if (c.class_id, c.polarity) == key)
            center = init_center_from_click(model, o_hat, click)
            seeds.append(
                _Track(
                    embedding=center.embedding,
                    class_id=center.class_id,
                    track_id=i,
                    seeded=True,
                )
            )
    anchor = clicks[0].slice_index
    forward = list(range(anchor, volume.n_slices))
    backward = list(range(anchor, -1, -1))

    def fresh_seeds():
        return [
            _Track(embedding=s.embedding, class_id=s.class_id, track_id=s.track_id, seeded=True)
            for s in seeds
        ]

    scores = _sweep(model, volume, forward, fresh_seeds(), options, cache=cache, stats=stats)
    if len(backward) > 1:
        back = _sweep(model, volume, backward, fresh_seeds(), options, cache=cache, stats=stats)
        scores = np.maximum(scores, back)
    return MaskScoreVolume(scores=np.clip(scores, 0.0, 1.0), provenance="interactive")


def refinement_loop(
    model: SegModel,
    volume: Volume,
    gt_labels,
    n_rounds: int,
    options: SweepOptions = SweepOptions(),
    beta: float = 0.8,
    threshold: float = 0.5,
):
    """Simulated click refinement: click the worst error region, sweep, fuse.

    Refinement starts from the automatic sweep, as in the service: each round
    clicks the largest error region of the current prediction and max-fuses
    the resulting scores in.  Yields (round, fused MaskScoreVolume, click)
    after every round; stops early once prediction matches ground truth.
    """
    from .core import argmax_labeling
    from .interaction import simulate_refine_click

    session = InteractionSession(beta=beta)
    cache = FeatureCache(model, volume)
    fused = np.clip(
        _sweep(model, volume, list(range(volume.n_slices)), [], options, cache=cache),
        0.0, 1.0,
    )
    results = []
    for r in range(1, n_rounds + 1):
        pred = argmax_labeling(
            MaskScoreVolume(scores=fused, provenance="interactive"), threshold
        ).labels
        from .core import LabelVolume

        click = simulate_refine_click(
            LabelVolume(labels=pred, n_classes=gt_labels.n_classes), gt_labels, round=r
        )
        if click is None:
            break
        round_scores = propagate_volume_interactive(
            model, volume, [click], options, session=session, cache=cache
        ).scores
        fused = np.maximum(fused, round_scores)
        results.append(
            (r, MaskScoreVolume(scores=fused.copy(), provenance="interactive"), click)
        )
    return results
