"""Unified automatic/interactive training.

Each step samples a short ascending chain of slices per volume, decodes them in
order with centers propagated (and memory-conditioned) between slices, and
applies matched CE + Dice + BCE losses with deep supervision on every decoder
layer.  Classes present in the chain's first slice are click-seeded with
probability ``click_init_prob`` so one model learns both modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import LabelVolume, Volume, argmax_labeling, load_labels, load_volume
from .interaction import adaptive_combine, sample_point_feature, simulate_first_click
from .matching import (
    LAMBDA_BCE,
    LAMBDA_CLS,
    LAMBDA_DICE,
    build_cost_matrix,
    hungarian_match,
    soft_dice,
)
from .memory_agg import fuse_memory, init_next_center
from .metrics import evaluate_labels
from .model import ModelConfig, SegModel, save_checkpoint, upsample_mask_logits
from .propagate import SweepOptions, propagate_volume_auto
from .synth import load_manifest, preprocess


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.02
    lr_decay_steps: tuple[int, ...] = (1400, 1800)
    lr_decay_factor: float = 0.1
    backbone_lr_multiplier: float = 0.1
    click_init_prob: float = 0.5
    slices_per_volume: int = 5
    crop_size: tuple[int, int] = (64, 64)
    scale_range: tuple[float, float] = (0.5, 1.75)
    eos_coef: float = 0.1
    max_click_rounds: int = 3
    beta: float = 0.8
    seed: int = 0
    eval_interval: int = 500
    eval_volumes: int = 5
    num_threads: int = 4

    def __post_init__(self):
        if not 0.0 <= self.click_init_prob <= 1.0:
            raise ValueError("click_init_prob must lie in [0, 1]")
        if self.slices_per_volume < 2:
            raise ValueError("propagation training needs at least 2 slices per volume")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        for key in ("lr_decay_steps", "crop_size", "scale_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return TrainConfig(**obj)


# ----------------------------------------------------------------- sampling

def _augment(slices: np.ndarray, labels: np.ndarray, rng, cfg: TrainConfig):
    """Shared scale / crop / flip for a stack of slices and their labels."""
    s = rng.uniform(*cfg.scale_range)
    imgs = torch.from_numpy(slices).float()[:, None]
    labs = torch.from_numpy(labels).float()[:, None]
    new_h = max(8, int(round(imgs.shape[2] * s)))
    new_w = max(8, int(round(imgs.shape[3] * s)))
    imgs = F.interpolate(imgs, size=(new_h, new_w), mode="bilinear", align_corners=False)
    labs = F.interpolate(labs, size=(new_h, new_w), mode="nearest")
    ch, cw = cfg.crop_size
    pad_h = max(0, ch - new_h)
    pad_w = max(0, cw - new_w)
    if pad_h or pad_w:
        imgs = F.pad(imgs, (0, pad_w, 0, pad_h))
        labs = F.pad(labs, (0, pad_w, 0, pad_h))
        new_h, new_w = max(new_h, ch), max(new_w, cw)
    top = int(rng.integers(0, new_h - ch + 1))
    left = int(rng.integers(0, new_w - cw + 1))
    imgs = imgs[:, 0, top : top + ch, left : left + cw]
    labs = labs[:, 0, top : top + ch, left : left + cw]
    if rng.random() < 0.5:
        imgs = torch.flip(imgs, dims=[2])
        labs = torch.flip(labs, dims=[2])
    return imgs.contiguous(), labs.long().contiguous()


def build_training_sample(
    volume: Volume, labels: LabelVolume, rng, cfg: TrainConfig
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Sample a contiguous ascending slice window and apply shared augmentation.

    Windows are contiguous because inference propagates centers slice to
    slice; training on gapped chains teaches the wrong transition dynamics.
    """
    c = volume.n_slices
    if c < cfg.slices_per_volume:
        raise ValueError(f"volume too short ({c} < {cfg.slices_per_volume} slices)")
    start = int(rng.integers(0, c - cfg.slices_per_volume + 1))
    idx = np.arange(start, start + cfg.slices_per_volume)
    imgs, labs = _augment(volume.voxels[idx], labels.labels[idx], rng, cfg)
    return [(imgs[i], labs[i]) for i in range(len(idx))]


def maybe_click_init(model, label2d: torch.Tensor, features: torch.Tensor, rng, cfg: TrainConfig):
    """Click-seeded centers for classes present in the slice, each with prob p.

    Simulates 1..max_click_rounds jittered clicks per seeded class and
    accumulates their point features so the click FFN sees the same input
    distribution it will meet during multi-round refinement.
    """
    lab = label2d.numpy()
    seeds = []  # (class_id, embedding)
    for k in np.unique(lab):
        if k == 0:
            continue
        if rng.random() >= cfg.click_init_prob:
            continue
        mask = lab == k
        n_rounds = int(rng.integers(1, cfg.max_click_rounds + 1))
        o_hat = None
        for _ in range(n_rounds):
            click = simulate_first_click(mask, int(k), rng=rng, jitter=3)
            point = sample_point_feature(features, click.position, model.cfg.stride)
            o_hat = adaptive_combine(point, o_hat, cfg.beta)
        embedding = model.click_ffn(o_hat)
        seeds.append((int(k), embedding))
    return seeds


# ------------------------------------------------------------------- losses

def _slice_targets(label2d: torch.Tensor):
    masks, classes = [], []
    for k in torch.unique(label2d):
        if int(k) == 0:
            continue
        masks.append((label2d == k).float())
        classes.append(int(k))
    return masks, classes


def _layer_loss(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    gt_masks: list[torch.Tensor],
    gt_classes: list[int],
    seeded_classes: list[int],
    n_classes: int,
    eos_coef: float,
    out_hw: tuple[int, int],
):
    """Matched loss for one decoder layer on one slice.

    Seeded rows (the first len(seeded_classes) rows) are force-matched to their
    class's mask; remaining targets are Hungarian-matched over the rest.
    """
    n = mask_logits.shape[0]
    n_seeded = len(seeded_classes)
    up = upsample_mask_logits(mask_logits, out_hw)
    class_targets = torch.zeros(n, dtype=torch.long)
    pairs: list[tuple[int, int]] = []  # (row, target idx)
    taken_targets = set()
    for row, cls in enumerate(seeded_classes):
        class_targets[row] = cls
        for j, (m, c) in enumerate(zip(gt_masks, gt_classes)):
            if c == cls and j not in taken_targets:
                pairs.append((row, j))
                taken_targets.add(j)
                break
    free_targets = [j for j in range(len(gt_masks)) if j not in taken_targets]
    free_rows = list(range(n_seeded, n))
    if free_targets and free_rows:
        cost = build_cost_matrix(
            up,
            class_logits,
            [gt_masks[j] for j in free_targets],
            [gt_classes[j] for j in free_targets],
            candidate_rows=free_rows,
        )
        matching = hungarian_match(cost)
        for ri, tj in matching.pred_to_target.items():
            row = free_rows[ri]
            j = free_targets[tj]
            pairs.append((row, j))
            class_targets[row] = gt_classes[j]
    weights = torch.ones(n_classes + 1, dtype=class_logits.dtype)
    weights[0] = eos_coef
    loss = LAMBDA_CLS * F.cross_entropy(class_logits, class_targets, weight=weights)
    if pairs:
        dice_terms, bce_terms = [], []
        for row, j in pairs:
            gt = gt_masks[j].to(up.dtype)
            prob = torch.sigmoid(up[row])
            dice_terms.append(1.0 - soft_dice(prob, gt))
            bce_terms.append(F.binary_cross_entropy_with_logits(up[row], gt))
        loss = loss + LAMBDA_DICE * torch.stack(dice_terms).mean()
        loss = loss + LAMBDA_BCE * torch.stack(bce_terms).mean()
    return loss, pairs


def chain_loss(
    model: SegModel,
    sample: list[tuple[torch.Tensor, torch.Tensor]],
    rng,
    cfg: TrainConfig,
    use_memory: bool = True,
):
    """Loss for one slice chain with center propagation between slices."""
    mcfg = model.cfg
    total = None
    tracks: list[dict] = []  # {"embedding", "class_id" or None, "seeded", "memory"}
    for i, (img, lab) in enumerate(sample):
        features, pixel_emb = model.encode_slice(img)
        if i == 0:
            for cls, emb in maybe_click_init(model, lab, features, rng, cfg):
                tracks.append({"embedding": emb, "class_id": cls, "seeded": True, "memory": None})
        tracks = tracks[: mcfg.n_centers]
        n_prop = len(tracks)
        learned = model.learned_centers[: mcfg.n_centers - n_prop]
        if n_prop:
            centers = torch.cat([torch.stack([t["embedding"] for t in tracks]), learned])
        else:
            centers = learned
        out = model.decode(features, pixel_emb, centers)
        gt_masks, gt_classes = _slice_targets(lab)
        seeded_classes = [t["class_id"] for t in tracks if t["seeded"]]
        final_pairs = None
        for mask_logits, class_logits in out.per_layer_aux:
            layer_loss, pairs = _layer_loss(
                mask_logits,
                class_logits,
                gt_masks,
                gt_classes,
                seeded_classes,
                mcfg.n_classes,
                cfg.eos_coef,
                tuple(img.shape),
            )
            total = layer_loss if total is None else total + layer_loss
            final_pairs = pairs
        # propagate foreground-matched centers (plus all seeded ones) to the next slice
        if i + 1 < len(sample):
            matched_rows = {row for row, _ in (final_pairs or [])}
            new_tracks = []
            for n in range(centers.shape[0]):
                old = tracks[n] if n < n_prop else None
                seeded = bool(old and old["seeded"])
                if n not in matched_rows and not seeded:
                    continue
                c_hat = out.centers[n]
                mem = old["memory"] if old else None
                cls = old["class_id"] if old else None
                if n in matched_rows:
                    j = next(j for row, j in final_pairs if row == n)
                    cls = gt_classes[j]
                if use_memory:
                    emb = init_next_center(model, c_hat, mem)
                    mem = fuse_memory(model, mem, c_hat)
                else:
                    emb = c_hat
                new_tracks.append(
                    {"embedding": emb, "class_id": cls, "seeded": seeded, "memory": mem}
                )
            tracks = new_tracks
    return total


# ------------------------------------------------------------------- driver

@dataclass
class Dataset:
    volumes: list[Volume]
    labels: list[LabelVolume]
    train_ids: list[int]
    val_ids: list[int]
    n_classes: int


def load_dataset(data_dir: Path) -> Dataset:
    manifest = load_manifest(data_dir)
    data_dir = Path(data_dir)
    n_classes = manifest["config"]["n_classes"]
    volumes, labels = [], []
    for i in sorted(int(k) for k in manifest["volumes"]):
        entry = manifest["volumes"][str(i)]
        vol = preprocess(load_volume(data_dir / entry["volume"]))
        volumes.append(vol)
        labels.append(load_labels(data_dir / entry["labels"], n_classes))
    return Dataset(
        volumes=volumes,
        labels=labels,
        train_ids=manifest["train"],
        val_ids=manifest["val"],
        n_classes=n_classes,
    )


def validate(model: SegModel, dataset: Dataset, max_volumes: int = 5,
             options: SweepOptions = SweepOptions()) -> float:
    model.eval()
    dscs = []
    for i in dataset.val_ids[:max_volumes]:
        scores = propagate_volume_auto(model, dataset.volumes[i], options)
        pred = argmax_labeling(scores, 0.5)
        report = evaluate_labels(pred.labels, dataset.labels[i].labels, dataset.n_classes)
        dscs.append(report.mean("dsc"))
    model.train()
    return float(np.mean(dscs)) if dscs else float("nan")


def _make_optimizer(model: SegModel, cfg: TrainConfig):
    backbone = list(model.encoder.parameters())
    # the memory aggregator is recurrent: inference unrolls it far deeper than
    # any training chain, so its conditioning is kept mild with a reduced lr
    slow = backbone + list(model.memory.parameters())
    slow_ids = {id(p) for p in slow}
    rest = [p for p in model.parameters() if id(p) not in slow_ids]
    return torch.optim.AdamW(
        [
            {"params": slow, "lr": cfg.lr * cfg.backbone_lr_multiplier},
            {"params": rest, "lr": cfg.lr},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: Dataset,
    out_dir: Path | None = None,
    log_fn=None,
) -> tuple[SegModel, list[dict]]:
    """Run the full step loop; reproducible given the seeds in both configs."""
    torch.set_num_threads(train_cfg.num_threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = SegModel(model_cfg)
    model.train()
    optimizer = _make_optimizer(model, train_cfg)
    log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_good = None
    for it in range(1, train_cfg.iterations + 1):
        if it in train_cfg.lr_decay_steps:
            for group in optimizer.param_groups:
                group["lr"] *= train_cfg.lr_decay_factor
        optimizer.zero_grad()
        batch_loss = None
        for _ in range(train_cfg.batch_size):
            vid = int(rng.choice(dataset.train_ids))
            sample = build_training_sample(
                dataset.volumes[vid], dataset.labels[vid], rng, train_cfg
            )
            loss = chain_loss(model, sample, rng, train_cfg)
            batch_loss = loss if batch_loss is None else batch_loss + loss
        batch_loss = batch_loss / train_cfg.batch_size
        if not torch.isfinite(batch_loss):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}"
                + (f"; last good checkpoint: {last_good}" if last_good else "")
            )
        batch_loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
        optimizer.step()
        entry = {"iter": it, "loss": float(batch_loss.detach())}
        if it % train_cfg.eval_interval == 0 or it == train_cfg.iterations:
            entry["val_dsc"] = validate(model, dataset, train_cfg.eval_volumes)
            if out_dir is not None:
                ckpt = out_dir / "checkpoint.zip"
                save_checkpoint(model, ckpt, iteration=it)
                last_good = ckpt
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.zip", iteration=train_cfg.iterations)
        with (out_dir / "metrics.jsonl").open("w") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")
    return model, log
