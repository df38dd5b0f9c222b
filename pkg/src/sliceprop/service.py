"""Interactive-session HTTP service.

Wraps a loaded checkpoint behind a small JSON API: create a session on a
volume, fetch slices as PNG, post clicks to run refinement rounds, and read
back per-class masks as run-length encoded JSON or PNG overlays.  Sessions are
in-memory only; one refinement round runs at a time per session while separate
sessions proceed concurrently.
"""

from __future__ import annotations

import io
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .core import (
    Click,
    InputError,
    LabelVolume,
    MaskScoreVolume,
    Volume,
    argmax_labeling,
    load_labels,
    load_volume,
)
from .interaction import ClickCapacityError, InteractionSession
from .metrics import evaluate_labels
from .model import SegModel
from .propagate import (
    FeatureCache,
    SweepOptions,
    propagate_volume_auto,
    propagate_volume_interactive,
)
from .synth import preprocess

SCHEMA_VERSION = 1


class CreateSessionRequest(BaseModel):
    volume_path: str
    labels_path: str | None = None


class ClickRequest(BaseModel):
    """Click JSON as it travels on the wire; "class" is aliased to class_id."""

    slice: int
    row: int
    col: int
    class_id: int
    polarity: str = "pos"

    model_config = {"populate_by_name": True, "extra": "forbid"}

    def __init__(self, **data):
        if "class" in data:
            data["class_id"] = data.pop("class")
        super().__init__(**data)


class _Session:
    def __init__(self, volume: Volume, gt: LabelVolume | None, model: SegModel):
        self.volume = volume
        self.gt = gt
        self.cache = FeatureCache(model, volume)
        self.interaction = InteractionSession()
        self.fused: np.ndarray | None = None
        self.round = 0
        self.lock = threading.Lock()


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": message, "schema_version": SCHEMA_VERSION}
    )


def _png(gray: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major [start, length, ...] runs of the foreground."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    out: list[int] = []
    for s, e in zip(edges[::2], edges[1::2]):
        out.extend((int(s), int(e - s)))
    return out


def create_app(model: SegModel, options: SweepOptions = SweepOptions()) -> FastAPI:
    app = FastAPI(title="sliceprop")
    sessions: dict[str, _Session] = {}
    n_classes = model.cfg.n_classes

    def per_class_dsc(session: _Session) -> dict[int, float] | None:
        if session.gt is None or session.fused is None:
            return None
        pred = argmax_labeling(
            MaskScoreVolume(scores=session.fused, provenance="interactive"), 0.5
        )
        report = evaluate_labels(pred.labels, session.gt.labels, n_classes)
        return {k: v["dsc"] for k, v in report.per_class.items()}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        path = Path(req.volume_path)
        if not path.exists():
            return _error(400, f"volume not found: {path}")
        try:
            volume = preprocess(load_volume(path))
            gt = None
            if req.labels_path:
                gt_path = Path(req.labels_path)
                if not gt_path.exists():
                    return _error(400, f"labels not found: {gt_path}")
                gt = load_labels(gt_path, n_classes)
        except (InputError, OSError, ValueError) as e:
            return _error(400, str(e))
        session_id = uuid.uuid4().hex
        sessions[session_id] = _Session(volume, gt, model)
        c, h, w = volume.shape
        return {
            "session_id": session_id,
            "n_slices": c,
            "height": h,
            "width": w,
            "n_classes": n_classes,
            "click_capacity": sessions[session_id].interaction.click_capacity,
            "schema_version": SCHEMA_VERSION,
        }

    @app.get("/sessions/{session_id}/slice/{t}")
    def get_slice(session_id: str, t: int):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not 0 <= t < session.volume.n_slices:
            return _error(400, f"slice {t} out of range")
        gray = np.clip(session.volume.voxels[t], 0, 255).astype(np.uint8)
        return Response(content=_png(gray), media_type="image/png")

    @app.post("/sessions/{session_id}/clicks")
    def post_click(session_id: str, req: ClickRequest):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        try:
            click = Click.from_json(
                {"slice": req.slice, "row": req.row, "col": req.col,
                 "class": req.class_id, "polarity": req.polarity},
                round=session.round + 1,
            )
            click.validate_against(session.volume.shape)
        except InputError as e:
            return _error(400, str(e))
        if not session.lock.acquire(blocking=False):
            return _error(409, "refinement in progress")
        try:
            scores = propagate_volume_interactive(
                model, session.volume, [click], options,
                session=session.interaction, cache=session.cache,
            ).scores
            session.fused = (
                scores if session.fused is None else np.maximum(session.fused, scores)
            )
            session.round += 1
        except ClickCapacityError as e:
            return _error(409, str(e))
        finally:
            session.lock.release()
        return {
            "round": session.round,
            "per_class_dsc": per_class_dsc(session),
            "clicks_used": session.interaction.clicks_per_class.get(click.class_id, 0),
            "schema_version": SCHEMA_VERSION,
        }

    @app.post("/sessions/{session_id}/auto")
    def run_auto(session_id: str):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not session.lock.acquire(blocking=False):
            return _error(409, "refinement in progress")
        try:
            scores = propagate_volume_auto(model, session.volume, options).scores
            session.fused = (
                scores if session.fused is None else np.maximum(session.fused, scores)
            )
        finally:
            session.lock.release()
        return {"per_class_dsc": per_class_dsc(session), "schema_version": SCHEMA_VERSION}

    @app.get("/sessions/{session_id}/mask/{t}")
    def get_class_mask(session_id: str, t: int,
                       class_id: int = Query(alias="class"),
                       format: str = "rle"):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not 0 <= t < session.volume.n_slices:
            return _error(400, f"slice {t} out of range")
        if not 1 <= class_id <= n_classes:
            return _error(400, f"class {class_id} out of range [1, {n_classes}]")
        if session.fused is None:
            mask = np.zeros(session.volume.shape[1:], dtype=bool)
        else:
            pred = argmax_labeling(
                MaskScoreVolume(scores=session.fused, provenance="interactive"), 0.5
            )
            mask = pred.labels[t] == class_id
        if format == "png":
            return Response(content=_png(mask.astype(np.uint8) * 255),
                            media_type="image/png")
        if format != "rle":
            return _error(400, f"unknown format: {format}")
        return {
            "slice": t,
            "class": class_id,
            "shape": list(mask.shape),
            "rle": rle_encode(mask),
            "schema_version": SCHEMA_VERSION,
        }

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        if session_id not in sessions:
            return _error(404, "unknown session")
        del sessions[session_id]
        return {"deleted": True, "schema_version": SCHEMA_VERSION}

    return app
