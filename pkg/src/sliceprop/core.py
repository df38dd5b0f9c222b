"""Shared data model: volumes, labels, clicks, cluster centers, score volumes.

All container types are plain value objects; arrays are treated as read-only
after construction and can be shared freely across threads.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Modality(str, enum.Enum):
    CT = "CT"
    MR = "MR"
    SYNTH = "SYNTH"


class Polarity(str, enum.Enum):
    POSITIVE = "pos"
    NEGATIVE = "neg"


class CenterStatus(str, enum.Enum):
    LEARNED = "learned"
    PROPAGATED = "propagated"
    CLICK_SEEDED = "click_seeded"


class InputError(ValueError):
    """Bad caller-supplied data (out-of-range index, malformed click, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class Volume:
    """Dense 3D intensity grid, shape (C_slices, H, W)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.SYNTH

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3 or min(v.shape) < 1:
            raise InputError(f"volume must be 3D with positive extents, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("volume contains non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing must be positive, got {self.spacing}")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel class ids, 0 = background; same shape as the paired Volume."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise InputError(f"labels must be 3D, got shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() > self.n_classes:
            raise InputError(
                f"label values must lie in [0, {self.n_classes}], "
                f"got [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Click:
    """One user (or simulated) interaction on a slice."""

    slice_index: int
    position: tuple[int, int]  # (row, col)
    class_id: int
    polarity: Polarity = Polarity.POSITIVE
    round: int = 1

    def __post_init__(self):
        if self.polarity == Polarity.POSITIVE and self.class_id < 1:
            raise InputError("positive clicks must carry class_id >= 1")

    def validate_against(self, shape: tuple[int, int, int]) -> None:
        c, h, w = shape
        if not 0 <= self.slice_index < c:
            raise InputError(f"click slice {self.slice_index} outside [0, {c})")
        r, col = self.position
        if not (0 <= r < h and 0 <= col < w):
            raise InputError(f"click position {self.position} outside slice {h}x{w}")

    def to_json(self) -> dict:
        return {
            "slice": self.slice_index,
            "row": self.position[0],
            "col": self.position[1],
            "class": self.class_id,
            "polarity": self.polarity.value,
        }

    @staticmethod
    def from_json(obj: dict, round: int = 1) -> "Click":
        try:
            return Click(
                slice_index=int(obj["slice"]),
                position=(int(obj["row"]), int(obj["col"])),
                class_id=int(obj["class"]),
                polarity=Polarity(obj.get("polarity", "pos")),
                round=round,
            )
        except (KeyError, ValueError, TypeError) as e:
            raise InputError(f"malformed click: {e}") from e


@dataclass
class ClusterCenter:
    """D-dimensional centroid vector with provenance bookkeeping.

    ``embedding`` is a 1D torch tensor so centers can flow straight into the
    decoder without copies; treat it as read-only.
    """

    embedding: "object"  # torch.Tensor, kept untyped to avoid importing torch here
    status: CenterStatus = CenterStatus.LEARNED
    class_id: int = 0
    source_round: int = 0
    track_id: int = -1  # identity across slices; -1 = untracked


@dataclass
class CenterSet:
    """Ordered collection of cluster centers with a per-class capacity."""

    centers: list[ClusterCenter] = field(default_factory=list)
    per_class_capacity: int = 20

    def __len__(self) -> int:
        return len(self.centers)

    def __iter__(self):
        return iter(self.centers)


@dataclass(frozen=True)
class MaskScoreVolume:
    """Per-class score volume in [0, 1], shape (K_classes, C, H, W)."""

    scores: np.ndarray
    provenance: str = "automatic"  # "automatic" | "interactive"

    def __post_init__(self):
        if self.scores.ndim != 4:
            raise InputError(f"scores must be 4D (K,C,H,W), got {self.scores.shape}")
        if self.scores.min() < 0 or self.scores.max() > 1:
            raise InputError("scores must lie in [0, 1]")

    @property
    def n_classes(self) -> int:
        return self.scores.shape[0]


def labels_to_binary_masks(labels: LabelVolume, slice_index: int) -> list[tuple[int, np.ndarray]]:
    """Split one label slice into (class_id, binary mask) pairs, background excluded."""
    if not 0 <= slice_index < labels.shape[0]:
        raise InputError(f"slice_index {slice_index} outside [0, {labels.shape[0]})")
    sl = labels.labels[slice_index]
    out = []
    for k in np.unique(sl):
        if k == 0:
            continue
        out.append((int(k), sl == k))
    return out


def argmax_labeling(scores: MaskScoreVolume, threshold: float) -> LabelVolume:
    """Hard labels from per-class scores: argmax class where max >= threshold, else 0.

    Ties resolve to the lowest class index (np.argmax picks the first maximum).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    s = scores.scores
    best = np.argmax(s, axis=0)
    peak = np.take_along_axis(s, best[None], axis=0)[0]
    labels = np.where(peak >= threshold, best + 1, 0).astype(np.uint8)
    # threshold 0 would label everything; keep pure-zero voxels as background
    if threshold == 0.0:
        labels[peak == 0.0] = 0
    return LabelVolume(labels=labels, n_classes=scores.n_classes)


# ---------------------------------------------------------------------------
# on-disk format: raw little-endian arrays + JSON sidecar

_DTYPES = {"float32": "<f4", "uint8": "u1"}


def save_array(path: Path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0), modality="SYNTH") -> None:
    path = Path(path)
    if arr.dtype == np.float32:
        dtype = "float32"
    elif arr.dtype == np.uint8:
        dtype = "uint8"
    else:
        raise ConfigError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    arr.astype(_DTYPES[dtype]).tofile(path)
    sidecar = {
        "shape": list(arr.shape),
        "spacing": list(spacing),
        "modality": modality,
        "dtype": dtype,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_array(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.fromfile(path, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
    return arr, meta


def save_volume(path: Path, volume: Volume) -> None:
    save_array(path, volume.voxels.astype(np.float32), volume.spacing, volume.modality.value)


def load_volume(path: Path) -> Volume:
    arr, meta = load_array(path)
    return Volume(
        voxels=arr,
        spacing=tuple(meta["spacing"]),
        modality=Modality(meta["modality"]),
    )


def save_labels(path: Path, labels: LabelVolume) -> None:
    save_array(path, labels.labels.astype(np.uint8))


def load_labels(path: Path, n_classes: int) -> LabelVolume:
    arr, _ = load_array(path)
    return LabelVolume(labels=arr, n_classes=n_classes)
