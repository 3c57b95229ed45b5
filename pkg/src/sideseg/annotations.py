"""User annotations: brush strokes and tagged points, plus their rasterization.

An annotation is either a stroke (a polyline with a width, carrying a class
id) or a point (a single location carrying a feature vector). A raster of an
annotation set is an (h, w, c_raw) map: stroke pixels hold the one-hot class
vector, point pixels hold the point's feature, and pixels touched by several
annotations hold the arithmetic mean of their vectors. Point features are
normalized to unit length when a set is built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigError

STROKE = "stroke"
POINT = "point"


@dataclass
class Annotation:
    kind: str
    points: np.ndarray  # (k, 2) float rows/cols
    class_id: int | None = None
    feature: np.ndarray | None = None
    width: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.kind == STROKE:
            if self.class_id is None:
                raise ConfigError("stroke annotation needs a class_id")
            if len(self.points) < 1:
                raise ConfigError("stroke annotation needs at least one vertex")
            if self.width < 1.0:
                raise ConfigError(f"stroke width must be >= 1, got {self.width}")
        elif self.kind == POINT:
            if self.feature is None:
                raise ConfigError("point annotation needs a feature vector")
            if len(self.points) != 1:
                raise ConfigError("point annotation carries exactly one location")
            self.feature = np.asarray(self.feature, dtype=np.float64)
        else:
            raise ConfigError(f"unknown annotation kind {self.kind!r}")

    @property
    def center(self):
        """Mean of the polyline vertices (the location itself for a point)."""
        return self.points.mean(axis=0)


@dataclass
class AnnotationSet:
    """Annotations of one kind against an image of known size.

    ``raw_channels`` is the channel count of the rasterized map: the number
    of classes for strokes, the feature dimension for points.
    """

    annotations: list[Annotation]
    image_size: tuple[int, int]
    raw_channels: int
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        h, w = self.image_size
        kinds = {a.kind for a in self.annotations}
        if len(kinds) > 1:
            raise ConfigError(f"annotation set mixes kinds {sorted(kinds)}")
        for idx, ann in enumerate(self.annotations):
            rows = ann.points[:, 0]
            cols = ann.points[:, 1]
            if rows.min(initial=0) < 0 or cols.min(initial=0) < 0 \
                    or rows.max(initial=0) > h - 1 or cols.max(initial=0) > w - 1:
                raise ConfigError(f"annotation {idx}: geometry outside {h}x{w} image")
            if ann.kind == STROKE and not 0 <= ann.class_id < self.raw_channels:
                raise ConfigError(f"annotation {idx}: class_id {ann.class_id} "
                                  f"outside [0, {self.raw_channels})")
            if ann.kind == POINT:
                if ann.feature.shape != (self.raw_channels,):
                    raise ConfigError(f"annotation {idx}: feature length {ann.feature.size} "
                                      f"!= raw channels {self.raw_channels}")
                norm = float(np.linalg.norm(ann.feature))
                if norm < 1e-12:
                    raise ConfigError(f"annotation {idx}: zero feature vector")
                ann.feature = ann.feature / norm
        self._validated = True

    def __len__(self):
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations)

    @property
    def kind(self):
        return self.annotations[0].kind if self.annotations else None

    def subset(self, indices):
        return AnnotationSet([self.annotations[i] for i in indices],
                             self.image_size, self.raw_channels)

    def centers(self):
        if not self.annotations:
            return np.zeros((0, 2))
        return np.stack([a.center for a in self.annotations])


def stroke_pixel_mask(points, width, shape):
    """Boolean (h, w) mask of pixels within width/2 of the polyline."""
    h, w = shape
    radius = width / 2.0
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    segments = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)] or [(pts[0], pts[0])]
    for p0, p1 in segments:
        r0 = max(int(np.floor(min(p0[0], p1[0]) - radius)), 0)
        r1 = min(int(np.ceil(max(p0[0], p1[0]) + radius)), h - 1)
        c0 = max(int(np.floor(min(p0[1], p1[1]) - radius)), 0)
        c1 = min(int(np.ceil(max(p0[1], p1[1]) + radius)), w - 1)
        if r1 < r0 or c1 < c0:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        q = np.stack([rr, cc], axis=-1).astype(np.float64)
        d = p1 - p0
        len2 = float(d @ d)
        if len2 < 1e-12:
            dist = np.linalg.norm(q - p0, axis=-1)
        else:
            t = np.clip(((q - p0) @ d) / len2, 0.0, 1.0)
            proj = p0 + t[..., None] * d
            dist = np.linalg.norm(q - proj, axis=-1)
        mask[r0:r1 + 1, c0:c1 + 1] |= dist <= radius
    return mask


def rasterize(aset: AnnotationSet):
    """Paint an annotation set into an (h, w, raw_channels) float32 map.

    Pixels covered by several annotations hold the elementwise mean of the
    contributed vectors; untouched pixels are exactly zero. The result does
    not depend on annotation order.
    """
    h, w = aset.image_size
    c = aset.raw_channels
    acc = np.zeros((h, w, c), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int32)
    for idx, ann in enumerate(aset):
        if ann.kind == STROKE:
            mask = stroke_pixel_mask(ann.points, ann.width, (h, w))
            vec = np.zeros(c, dtype=np.float64)
            vec[ann.class_id] = 1.0
            acc[mask] += vec
            cnt[mask] += 1
        else:
            r = int(np.rint(ann.points[0, 0]))
            q = int(np.rint(ann.points[0, 1]))
            if not (0 <= r < h and 0 <= q < w):
                raise ConfigError(f"annotation {idx}: rounded location ({r}, {q}) "
                                  f"outside {h}x{w} image")
            acc[r, q] += ann.feature
            cnt[r, q] += 1
    hit = cnt > 0
    acc[hit] /= cnt[hit][:, None]
    return acc.astype(np.float32)


def multiscale_views(raw_map, scales=(1.0, 0.5, 0.25)):
    """Nearest-neighbor downscaled copies of a sparse annotation raster.

    Each annotated source pixel lands at floor(coord * scale); sources that
    collide in one target cell are averaged and the mean is rescaled back to
    unit length. Scale 1.0 returns an identical copy.
    """
    h, w, c = raw_map.shape
    views = []
    for s in scales:
        if s <= 0:
            raise ConfigError(f"scale must be positive, got {s}")
        ht, wt = int(np.floor(h * s)), int(np.floor(w * s))
        if ht < 1 or wt < 1:
            raise ConfigError(f"scale {s} collapses a {h}x{w} map to zero size")
        if s == 1.0:
            views.append(raw_map.copy())
            continue
        rows, cols = np.nonzero(np.any(raw_map != 0, axis=2))
        acc = np.zeros((ht, wt, c), dtype=np.float64)
        cnt = np.zeros((ht, wt), dtype=np.int32)
        tr = np.minimum((rows * s).astype(np.int64), ht - 1)
        tc = np.minimum((cols * s).astype(np.int64), wt - 1)
        np.add.at(acc, (tr, tc), raw_map[rows, cols].astype(np.float64))
        np.add.at(cnt, (tr, tc), 1)
        hit = cnt > 0
        acc[hit] /= cnt[hit][:, None]
        norms = np.linalg.norm(acc, axis=2)
        scale_back = np.where(norms > 1e-12, 1.0 / np.maximum(norms, 1e-12), 0.0)
        views.append((acc * scale_back[..., None]).astype(raw_map.dtype))
    return views


# ---------------------------------------------------------------------------
# line-delimited persistence
# ---------------------------------------------------------------------------

def annotation_to_record(ann: Annotation) -> dict:
    rec = {"kind": ann.kind, "points": ann.points.tolist()}
    if ann.kind == STROKE:
        rec["class_id"] = int(ann.class_id)
        rec["width"] = float(ann.width)
    else:
        rec["feature"] = [float(v) for v in ann.feature]
    return rec


def annotation_from_record(rec: dict) -> Annotation:
    kind = rec.get("kind")
    if kind == STROKE:
        return Annotation(kind=STROKE, points=rec["points"],
                          class_id=rec["class_id"], width=rec.get("width", 1.0))
    if kind == POINT:
        return Annotation(kind=POINT, points=rec["points"], feature=rec["feature"])
    raise ConfigError(f"unknown annotation kind {kind!r} in record")


def save_annotations(aset: AnnotationSet, path):
    with open(path, "w") as fh:
        for ann in aset:
            fh.write(json.dumps(annotation_to_record(ann)) + "\n")


def load_annotations(path, image_size, raw_channels) -> AnnotationSet:
    anns = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: bad annotation record: {exc}") from exc
            anns.append(annotation_from_record(rec))
    return AnnotationSet(anns, tuple(image_size), raw_channels)
