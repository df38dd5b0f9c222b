"""Synthetic multi-organ volume generation and intensity preprocessing.

Organs are ellipsoids so every foreground structure spans several consecutive
slices with smoothly varying cross-sections; that z-coherence is what center
propagation exploits.  Each class sits in its own intensity band on one side of
the background, but every instance draws a per-instance contrast factor, so a
faint instance's thin end sections fall below what a single noisy slice can
detect.  Those sections are only recoverable by tracking the structure from
its clearly visible middle slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .core import InputError, LabelVolume, Modality, Volume, save_labels, save_volume


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_volumes: int = 50
    shape: tuple[int, int, int] = (32, 64, 64)
    n_classes: int = 4
    blobs_per_class: tuple[int, int] = (1, 1)
    radius_range: tuple[float, float] = (5.5, 9.5)       # in-plane, voxels
    z_radius_range: tuple[float, float] = (8.0, 14.0)    # along z, voxels
    background_mean: float = 100.0
    intensity_contrast: float = 40.0                     # band step from background
    contrast_jitter: tuple[float, float] = (0.75, 1.0)   # per-instance factor
    noise_sigma: float = 10.0
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        c, h, w = self.shape
        if self.radius_range[1] * 2 >= min(h, w):
            raise InputError("in-plane radii do not fit within the slice")
        if self.n_classes < 0:
            raise InputError("n_classes must be >= 0")

    def intensity_level(self, class_id: int) -> int:
        """Signed band index: class 1 -> +1, 2 -> -1, 3 -> +2, 4 -> -2, ..."""
        if class_id == 0:
            return 0
        magnitude = (class_id + 1) // 2
        return magnitude if class_id % 2 == 1 else -magnitude

    def class_mean(self, class_id: int) -> float:
        """Nominal (full-contrast) mean of the class's intensity band."""
        return self.background_mean + self.intensity_level(class_id) * self.intensity_contrast

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "SynthConfig":
        obj = dict(obj)
        for key in ("shape", "blobs_per_class", "radius_range", "z_radius_range",
                    "contrast_jitter"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return SynthConfig(**obj)


def _place_blob(rng, shape, rxy, rz, occupied, retries=200):
    """Find an ellipsoid placement that does not overlap previously placed organs."""
    c, h, w = shape
    z_lo, z_hi = rz * 0.6, c - rz * 0.6
    if z_lo >= z_hi:
        # volume shallower than the blob: center it in depth
        z_lo = z_hi = c / 2.0
    for _ in range(retries):
        zc = rng.uniform(z_lo, z_hi) if z_lo < z_hi else z_lo
        yc = rng.uniform(rxy + 1, h - rxy - 1)
        xc = rng.uniform(rxy + 1, w - rxy - 1)
        zz, yy, xx = np.ogrid[:c, :h, :w]
        mask = ((zz - zc) / rz) ** 2 + ((yy - yc) / rxy) ** 2 + ((xx - xc) / rxy) ** 2 <= 1.0
        if not np.any(mask & occupied):
            return mask
    return None


def generate_volume(config: SynthConfig, index: int) -> tuple[Volume, LabelVolume]:
    """Deterministically generate volume ``index``; pure function of (config, index)."""
    if index >= config.n_volumes:
        raise InputError(f"index {index} >= n_volumes {config.n_volumes}")
    rng = np.random.default_rng([config.seed, index])
    shape = config.shape
    labels = np.zeros(shape, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    voxels = np.full(shape, config.background_mean, dtype=np.float32)
    for k in range(1, config.n_classes + 1):
        n_blobs = rng.integers(config.blobs_per_class[0], config.blobs_per_class[1] + 1)
        for _ in range(n_blobs):
            rxy = rng.uniform(*config.radius_range)
            rz = rng.uniform(*config.z_radius_range)
            mask = _place_blob(rng, shape, rxy, rz, occupied)
            if mask is None:
                raise GenerationError(f"could not place a blob for class {k}")
            labels[mask] = k
            occupied |= mask
            u = rng.uniform(*config.contrast_jitter)
            offset = config.intensity_level(k) * config.intensity_contrast * u
            voxels[mask] = config.background_mean + offset
    voxels += rng.normal(0.0, config.noise_sigma, size=shape).astype(np.float32)
    return (
        Volume(voxels=voxels, modality=Modality.SYNTH),
        LabelVolume(labels=labels, n_classes=config.n_classes),
    )


def preprocess(volume: Volume) -> Volume:
    """Clip/rescale intensities into [0, 255] according to modality.

    CT uses the fixed [-175, 250] HU window; MR clips at the 0.5/99.5 intensity
    percentiles of the image; SYNTH rescales min->0, max->255.  A constant
    volume maps to all zeros rather than erroring.
    """
    v = volume.voxels.astype(np.float32)
    if volume.modality == Modality.CT:
        lo, hi = -175.0, 250.0
        v = np.clip(v, lo, hi)
    elif volume.modality == Modality.MR:
        lo, hi = np.percentile(v, [0.5, 99.5])
        v = np.clip(v, lo, hi)
    else:
        lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo) * 255.0
    return Volume(voxels=out, spacing=volume.spacing, modality=volume.modality)


def write_dataset(config: SynthConfig, out_dir: Path) -> dict:
    """Generate all volumes, write raw+sidecar files and a split manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = max(1, int(round(config.n_volumes * config.val_fraction)))
    n_train = config.n_volumes - n_val
    manifest = {
        "config": config.to_json(),
        "train": list(range(n_train)),
        "val": list(range(n_train, config.n_volumes)),
        "volumes": {},
    }
    for i in range(config.n_volumes):
        vol, lab = generate_volume(config, i)
        vpath = out_dir / f"volume_{i:04d}.raw"
        lpath = out_dir / f"labels_{i:04d}.raw"
        save_volume(vpath, vol)
        save_labels(lpath, lab)
        manifest["volumes"][str(i)] = {"volume": vpath.name, "labels": lpath.name}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(data_dir: Path) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())
