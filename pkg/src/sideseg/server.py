"""HTTP service for interactive segmentation.

One model checkpoint is loaded at startup and shared read-only across
requests; inference is pure, so concurrent identical requests return
identical rasters. Scenes come from on-disk bundles. The segment endpoint
takes user strokes, optionally thins them with a k-means subsample seeded
from the request hash (so what-if queries reproduce), and returns the
label raster as a base64 palette PNG together with metrics against the
bundle's ground truth.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from .annotations import Annotation, AnnotationSet
from .checkpoint import load_model
from .evalinfer import (compute_metrics, make_grid, save_labels_png,
                        sliding_infer)
from .nn import ConfigError
from .synth import class_palette, kmeans_sample, load_scene

API_VERSION = 1
MAX_BODY_BYTES = 4 * 1024 * 1024


def encode_label_raster(labels, palette=None) -> bytes:
    """Lossless PNG of a class-index map (palette only affects display)."""
    buf = io.BytesIO()
    save_labels_png(labels, buf, palette=palette)
    return buf.getvalue()


def decode_label_raster(blob: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(blob))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ConfigError(f"corrupt label raster: {exc}") from exc
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ConfigError(f"label raster must be single-channel, got {arr.shape}")
    return arr.astype(np.uint8)


class StrokeIn(BaseModel):
    class_id: int = Field(ge=0)
    points: list[list[float]] = Field(min_length=1)
    width: float = Field(default=5.0, ge=1.0)


class SegmentRequest(BaseModel):
    model_config = {"extra": "forbid"}

    v: int = API_VERSION
    strokes: list[StrokeIn] = []
    side_fraction: float | None = Field(default=None, ge=0.0, le=1.0)
    return_confidence: bool = False


def request_seed(body: SegmentRequest, scene_id: str) -> int:
    canonical = json.dumps({"scene": scene_id, **body.model_dump()},
                           sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).digest()
    return int.from_bytes(digest[:8], "big")


class _SceneEntry:
    def __init__(self, scene_id, directory):
        self.id = scene_id
        self.directory = Path(directory)
        self.scene, self.annotations = load_scene(directory)

    @property
    def shape(self):
        return self.scene.shape


def create_app(model_path, scenes_dir, patch=80, stride=40,
               max_body_bytes=MAX_BODY_BYTES, ui_dir=None) -> FastAPI:
    model, _ = load_model(model_path)
    num_classes = model.config.num_classes
    raw_channels = model.config.side_channels_raw
    palette = class_palette(num_classes)

    scenes_dir = Path(scenes_dir)
    scenes: dict[str, _SceneEntry] = {}
    for entry in sorted(scenes_dir.iterdir()):
        if entry.is_dir() and (entry / "metadata.txt").exists():
            scenes[entry.name] = _SceneEntry(entry.name, entry)
    if not scenes:
        raise ConfigError(f"no scene bundles under {scenes_dir}")

    app = FastAPI(title="sideseg", version=str(API_VERSION))

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        paths = []
        for err in exc.errors():
            loc = ".".join(str(part) for part in err["loc"])
            paths.append(f"{loc}: {err['msg']}")
        return JSONResponse(status_code=400,
                            content={"v": API_VERSION, "error": "; ".join(paths)})

    @app.middleware("http")
    async def limit_body(request: Request, call_next):
        length = request.headers.get("content-length")
        if length and int(length) > max_body_bytes:
            return JSONResponse(status_code=413,
                                content={"v": API_VERSION,
                                         "error": f"body over {max_body_bytes} bytes"})
        return await call_next(request)

    def lookup(scene_id) -> _SceneEntry:
        if scene_id not in scenes:
            raise HTTPException(status_code=404,
                                detail=f"unknown scene {scene_id!r}")
        return scenes[scene_id]

    @app.get("/health")
    def health():
        return {"v": API_VERSION, "status": "ok"}

    @app.get("/scenes")
    def list_scenes():
        out = []
        for entry in scenes.values():
            h, w = entry.shape
            out.append({"id": entry.id, "width": w, "height": h,
                        "classes": num_classes,
                        "palette": ["#%02x%02x%02x" % c for c in palette]})
        return {"v": API_VERSION, "scenes": out}

    @app.get("/scenes/{scene_id}/image")
    def scene_image(scene_id: str):
        entry = lookup(scene_id)
        blob = (entry.directory / "image.png").read_bytes()
        return Response(content=blob, media_type="image/png")

    @app.post("/scenes/{scene_id}/segment")
    def segment(scene_id: str, body: SegmentRequest):
        if body.v != API_VERSION:
            raise HTTPException(status_code=400,
                                detail=f"v: unsupported payload version {body.v}")
        entry = lookup(scene_id)
        h, w = entry.shape
        anns = []
        for i, stroke in enumerate(body.strokes):
            if stroke.class_id >= raw_channels:
                raise HTTPException(
                    status_code=400,
                    detail=f"strokes.{i}.class_id: {stroke.class_id} outside "
                           f"[0, {raw_channels})")
            for r, c in stroke.points:
                if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
                    raise HTTPException(
                        status_code=400,
                        detail=f"strokes.{i}.points: ({r}, {c}) outside "
                               f"{h}x{w} scene")
            anns.append(Annotation(kind="stroke", points=stroke.points,
                                   class_id=stroke.class_id, width=stroke.width))
        aset = AnnotationSet(anns, (h, w), raw_channels)
        if body.side_fraction is not None:
            aset = kmeans_sample(aset, body.side_fraction,
                                 seed=request_seed(body, scene_id))

        start = time.perf_counter()
        tile = min(patch, h, w)
        grid = make_grid((h, w), tile, min(stride, tile))
        result = sliding_infer(entry.scene.image, aset, model, grid)
        latency_ms = (time.perf_counter() - start) * 1000.0

        report = compute_metrics(result.labels, entry.scene.labels, num_classes)
        payload = {
            "v": API_VERSION,
            "width": w,
            "height": h,
            "labels": base64.b64encode(
                encode_label_raster(result.labels, palette)).decode("ascii"),
            "gate_rate": result.gate_rate,
            "annotations_used": len(aset),
            "metrics": {"miou": report.miou,
                        "pixel_accuracy": report.pixel_accuracy},
            "latency_ms": latency_ms,
        }
        if body.return_confidence:
            payload["confidence"] = [
                float(result.mean_softmax[..., c].mean())
                for c in range(num_classes)]
        return payload

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
