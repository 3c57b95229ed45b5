"""Synthetic benchmark scenes and annotation simulators.

A scene is a Voronoi partition of the plane into class-labeled regions with
class-conditional textures. Two designated classes (the "twin pair", always
classes 0 and 1) draw from the same texture distribution, so appearance
alone cannot separate them and side information carries real signal. Region
boundaries get a one-pixel ignore band on both sides.

Simulators produce expert annotations: strokes are jittered polylines laid
inside regions (every stamped pixel is guaranteed to match the ground
truth), photos are feature-tagged points whose locations are perturbed and
clipped, mimicking noisy geotags. ``kmeans_sample`` thins an annotation set
to a fraction p by clustering annotation centers and keeping one
representative per cluster.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .annotations import Annotation, AnnotationSet, rasterize, stroke_pixel_mask
from .nn import ConfigError

IGNORE = 255
TEXTURE_NOISE = 0.08


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class RegionInfo:
    id: int
    class_id: int
    area: int
    centroid: tuple[float, float]


@dataclass
class SyntheticScene:
    image: np.ndarray                 # (h, w, 3) float32 in [0, 1]
    labels: np.ndarray                # (h, w) uint8, 255 = ignore
    regions: list[RegionInfo]
    seed: int
    metadata: dict = field(default_factory=dict)
    region_map: np.ndarray | None = None  # (h, w) int32, -1 off-region

    @property
    def shape(self):
        return self.labels.shape

    @property
    def num_classes(self):
        return int(self.metadata["num_classes"])


def class_palette(num_classes):
    """Deterministic distinct display colors, one (r, g, b) per class."""
    colors = []
    for c in range(num_classes):
        hue = (c * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return colors


def _texture_bases(num_classes):
    """Per-class base colors; the twin pair shares one."""
    bases = np.zeros((num_classes, 3))
    bases[0] = bases[1] = [0.5, 0.5, 0.5]
    for c in range(2, num_classes):
        theta = 2.0 * math.pi * (c - 2) / max(num_classes - 2, 1)
        bases[c] = 0.52 + 0.27 * np.array([
            math.cos(theta), math.cos(theta + 2.1), math.cos(theta + 4.2)])
    return np.clip(bases, 0.08, 0.92)


def generate_scene(height, width, num_classes, seed, n_cells=None):
    """Build one deterministic scene for the given seed."""
    if height < 64 or width < 64:
        raise ConfigError(f"scene must be at least 64x64, got {height}x{width}")
    if num_classes < 3:
        raise ConfigError(f"scene needs at least 3 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    if n_cells is None:
        n_cells = max(num_classes + 2, round(height * width / 5500))
    if n_cells < num_classes:
        raise ConfigError(f"{n_cells} cells cannot host {num_classes} classes")

    # spread the Voronoi sites: rejection-sample a minimum separation
    min_sep = 0.38 * math.sqrt(height * width / n_cells)
    sites = []
    while len(sites) < n_cells:
        cand = rng.uniform([0, 0], [height, width])
        if all(np.hypot(*(cand - s)) >= min_sep for s in sites) or rng.random() < 0.02:
            sites.append(cand)
    sites = np.array(sites)

    # every class must appear; redraw the assignment until it does
    weights = np.ones(num_classes)
    weights[0] = weights[1] = 1.5  # twins get extra area so they matter
    probs = weights / weights.sum()
    attempts = 0
    while True:
        attempts += 1
        cell_class = rng.choice(num_classes, size=n_cells, p=probs)
        if len(np.unique(cell_class)) == num_classes:
            break
        if attempts > 200:
            raise ConfigError("could not place every class; use more cells")

    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    cell_map = d2.argmin(axis=2)
    class_map = cell_class[cell_map].astype(np.uint8)

    bases = _texture_bases(num_classes)
    noise = rng.standard_normal((height, width, 3)) * TEXTURE_NOISE
    image = np.clip(bases[class_map] + noise, 0.0, 1.0).astype(np.float32)

    # one-pixel ignore band on each side of every class boundary
    boundary = np.zeros((height, width), dtype=bool)
    boundary[:-1] |= class_map[:-1] != class_map[1:]
    boundary[1:] |= class_map[1:] != class_map[:-1]
    boundary[:, :-1] |= class_map[:, :-1] != class_map[:, 1:]
    boundary[:, 1:] |= class_map[:, 1:] != class_map[:, :-1]
    labels = class_map.copy()
    labels[boundary] = IGNORE

    region_map = np.full((height, width), -1, dtype=np.int32)
    regions = []
    next_id = 0
    for c in range(num_classes):
        comp, n_comp = ndimage.label(labels == c)
        for k in range(1, n_comp + 1):
            mask = comp == k
            area = int(mask.sum())
            cr, cq = np.nonzero(mask)
            regions.append(RegionInfo(id=next_id, class_id=c, area=area,
                                      centroid=(float(cr.mean()), float(cq.mean()))))
            region_map[mask] = next_id
            next_id += 1

    metadata = {
        "height": height,
        "width": width,
        "num_classes": num_classes,
        "seed": seed,
        "twin_classes": "0,1",
        "assignment_attempts": attempts,
        "n_cells": n_cells,
        "n_regions": len(regions),
        "palette": ",".join("#%02x%02x%02x" % c for c in class_palette(num_classes)),
    }
    return SyntheticScene(image=image, labels=labels, regions=regions, seed=seed,
                          metadata=metadata, region_map=region_map)


# ---------------------------------------------------------------------------
# annotation simulators
# ---------------------------------------------------------------------------

def simulate_strokes(scene, seed, strokes_per_region=1, width=5.0, jitter=2.0,
                     min_region_area=64):
    """Expert strokes: per large-enough region, jittered polylines that stay
    strictly inside the region, so stroke pixels always match the labels."""
    if scene.region_map is None:
        raise ConfigError("scene carries no region map; regenerate it")
    rng = np.random.default_rng(seed)
    h, w = scene.shape
    anns = []
    for region in scene.regions:
        if region.area < min_region_area:
            continue
        mask = scene.region_map == region.id
        dist = ndimage.distance_transform_edt(mask)
        margin = width / 2.0 + 1.0
        valid_r, valid_c = np.nonzero(dist > margin)
        peak_flat = int(dist.argmax())
        peak = (peak_flat // w, peak_flat % w)
        for _ in range(strokes_per_region):
            ann = None
            if valid_r.size:
                for _attempt in range(8):
                    pts = _walk_polyline(valid_r, valid_c, rng, jitter,
                                         step=max(width * 2.5, 8.0),
                                         n_vertices=int(rng.integers(3, 6)))
                    pix = stroke_pixel_mask(pts, width, (h, w))
                    if np.all(scene.labels[pix] == region.class_id):
                        ann = Annotation(kind="stroke", points=pts,
                                         class_id=region.class_id, width=width)
                        break
            if ann is None and dist[peak] > width / 2.0 + 0.5:
                # thin region: a point-like stroke at the deepest interior cell
                pts = [[float(peak[0]), float(peak[1])]] * 2
                pix = stroke_pixel_mask(pts, width, (h, w))
                if np.all(scene.labels[pix] == region.class_id):
                    ann = Annotation(kind="stroke", points=pts,
                                     class_id=region.class_id, width=width)
            if ann is not None:
                anns.append(ann)
    return AnnotationSet(anns, (h, w), scene.num_classes)


def _walk_polyline(valid_r, valid_c, rng, jitter, step, n_vertices):
    """Random walk over the valid-interior cells, each vertex snapped back
    onto the nearest valid cell so the polyline cannot leave the region."""
    coords = np.stack([valid_r, valid_c], axis=1).astype(np.float64)
    start = coords[rng.integers(len(coords))]
    theta = rng.uniform(0.0, 2.0 * math.pi)
    pts = [start]
    for _ in range(n_vertices - 1):
        theta += rng.normal(0.0, 0.6)
        prop = pts[-1] + step * np.array([math.sin(theta), math.cos(theta)])
        prop += rng.normal(0.0, jitter, size=2)
        snapped = coords[np.argmin(((coords - prop) ** 2).sum(axis=1))]
        pts.append(snapped)
    return [[float(r), float(c)] for r, c in pts]


def simulate_photos(scene, seed, density=3.0, noise_sigma=2.0, raw_channels=None):
    """Feature-tagged points: one-hot class features with label-preserving
    noise, locations jittered by a clipped Gaussian."""
    rng = np.random.default_rng(seed)
    h, w = scene.shape
    c_raw = raw_channels if raw_channels is not None else scene.num_classes
    if c_raw < scene.num_classes:
        raise ConfigError(f"raw channels {c_raw} cannot one-hot {scene.num_classes} classes")
    count = int(rng.poisson(density * h * w / 1000.0))
    usable = np.nonzero(scene.labels.ravel() != IGNORE)[0]
    anns = []
    for _ in range(count):
        flat = int(usable[rng.integers(len(usable))])
        r, c = flat // w, flat % w
        cls = int(scene.labels[r, c])
        feat = np.zeros(c_raw)
        feat[cls] = 1.0
        others = np.setdiff1d(np.arange(c_raw), [cls])
        feat[others] = rng.uniform(0.0, 0.45, size=others.size)
        loc = np.array([r, c], dtype=np.float64) + rng.normal(0.0, noise_sigma, 2)
        loc[0] = min(max(loc[0], 0.0), h - 1.0)
        loc[1] = min(max(loc[1], 0.0), w - 1.0)
        anns.append(Annotation(kind="point", points=[loc.tolist()], feature=feat))
    return AnnotationSet(anns, (h, w), c_raw)


# ---------------------------------------------------------------------------
# k-means annotation subsampling
# ---------------------------------------------------------------------------

def kmeans_sample(aset: AnnotationSet, p: float, seed: int) -> AnnotationSet:
    """Keep ceil(n * p) annotations: cluster the centers (k-means++ start,
    Lloyd iterations) and return the member nearest each centroid."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"fraction p must lie in [0, 1], got {p}")
    n = len(aset)
    k = math.ceil(n * p)
    if k == 0 or n == 0:
        return aset.subset([])
    if k >= n:
        return aset.subset(list(range(n)))
    centers = aset.centers()
    rng = np.random.default_rng(seed)

    cent = np.empty((k, 2))
    cent[0] = centers[rng.integers(n)]
    d2 = ((centers - cent[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            cent[i] = centers[int(np.argmax(d2))]
        else:
            cent[i] = centers[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((centers - cent[i]) ** 2).sum(axis=1))

    def _assign(cent):
        dist = ((centers[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        # reseed empty clusters at the point farthest from its centroid;
        # bounded retries because duplicate points can keep stealing members
        for _ in range(2 * k):
            empties = [ci for ci in range(k) if not np.any(assign == ci)]
            if not empties:
                break
            ci = empties[0]
            far = int(dist[np.arange(n), assign].argmax())
            cent[ci] = centers[far]
            dist[:, ci] = ((centers - cent[ci]) ** 2).sum(axis=1)
            assign = dist.argmin(axis=1)
        return dist, assign

    for _ in range(100):
        dist, assign = _assign(cent)
        new = np.stack([centers[assign == ci].mean(axis=0)
                        if np.any(assign == ci) else cent[ci] for ci in range(k)])
        move = float(np.abs(new - cent).max())
        cent = new
        if move < 1e-4:
            break

    dist, assign = _assign(cent)
    chosen = []
    taken = np.zeros(n, dtype=bool)
    for ci in range(k):
        members = np.nonzero(assign == ci)[0]
        if members.size:
            best = int(members[dist[members, ci].argmin()])
        else:  # degenerate duplicate centroids: take the nearest free point
            order = np.argsort(dist[:, ci], kind="stable")
            best = int(next(i for i in order if not taken[i]))
        chosen.append(best)
        taken[best] = True
    return aset.subset(sorted(chosen))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class Patch:
    image: np.ndarray
    labels: np.ndarray
    raw_side: np.ndarray
    annotations: AnnotationSet
    origin: tuple[int, int]


def tile_origins(extent, patch, stride):
    """Raster-scan origins; the final origin is clamped to the border so the
    tiles cover every pixel when stride <= patch."""
    if patch > extent:
        raise ConfigError(f"patch {patch} exceeds extent {extent}")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)
    return origins


def clip_polyline(points, lo_r, hi_r, lo_c, hi_c):
    """Clip a polyline to a closed box; returns the in-box sub-polylines."""
    pts = np.asarray(points, dtype=np.float64)
    pieces = []
    cur = []

    def inside(p):
        return lo_r <= p[0] <= hi_r and lo_c <= p[1] <= hi_c

    if len(pts) == 1:
        return [pts.tolist()] if inside(pts[0]) else []

    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        t0, t1 = 0.0, 1.0
        ok = True
        for delta, lo, hi, start in ((d[0], lo_r, hi_r, a[0]), (d[1], lo_c, hi_c, a[1])):
            if abs(delta) < 1e-12:
                if start < lo or start > hi:
                    ok = False
                    break
                continue
            ta = (lo - start) / delta
            tb = (hi - start) / delta
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                ok = False
                break
        if not ok:
            if len(cur) >= 1:
                pieces.append(cur)
                cur = []
            continue
        # rounding can push an intersection a hair outside the box
        pa = np.clip(a + t0 * d, [lo_r, lo_c], [hi_r, hi_c])
        pb = np.clip(a + t1 * d, [lo_r, lo_c], [hi_r, hi_c])
        if not cur:
            cur = [pa.tolist()]
        cur.append(pb.tolist())
        if t1 < 1.0:
            pieces.append(cur)
            cur = []
    if cur:
        pieces.append(cur)
    return [p if len(p) > 1 else [p[0], p[0]] for p in pieces]


def _rebase_annotations(aset, origin, patch_size):
    """Clip annotations to the crop window and shift into crop coordinates."""
    orow, ocol = origin
    hi_r = orow + patch_size - 1
    hi_c = ocol + patch_size - 1
    out = []
    for ann in aset:
        if ann.kind == "point":
            r, c = ann.points[0]
            if orow <= r <= hi_r and ocol <= c <= hi_c:
                out.append(Annotation(kind="point", points=[[r - orow, c - ocol]],
                                      feature=ann.feature.copy()))
        else:
            for piece in clip_polyline(ann.points, orow, hi_r, ocol, hi_c):
                shifted = [[r - orow, c - ocol] for r, c in piece]
                out.append(Annotation(kind="stroke", points=shifted,
                                      class_id=ann.class_id, width=ann.width))
    return AnnotationSet(out, (patch_size, patch_size), aset.raw_channels)


def flip_patch(patch: Patch, horizontal=False, vertical=False) -> Patch:
    """Mirror a patch; image, labels, raw map, and annotation coordinates
    all transform together."""
    if not horizontal and not vertical:
        return patch
    img, lab, raw = patch.image, patch.labels, patch.raw_side
    ph, pw = lab.shape
    anns = []
    for ann in patch.annotations:
        pts = ann.points.copy()
        if vertical:
            pts[:, 0] = (ph - 1) - pts[:, 0]
        if horizontal:
            pts[:, 1] = (pw - 1) - pts[:, 1]
        if ann.kind == "stroke":
            anns.append(Annotation(kind="stroke", points=pts, class_id=ann.class_id,
                                   width=ann.width))
        else:
            anns.append(Annotation(kind="point", points=pts, feature=ann.feature.copy()))
    sl_r = slice(None, None, -1) if vertical else slice(None)
    sl_c = slice(None, None, -1) if horizontal else slice(None)
    return Patch(
        image=np.ascontiguousarray(img[sl_r, sl_c]),
        labels=np.ascontiguousarray(lab[sl_r, sl_c]),
        raw_side=np.ascontiguousarray(raw[sl_r, sl_c]),
        annotations=AnnotationSet(anns, (ph, pw), patch.annotations.raw_channels),
        origin=patch.origin,
    )


def extract_patches(scene, aset, patch_size, stride, ignore_threshold=0.6,
                    sparse_normal_class=None, sparse_min_fraction=0.05,
                    augment=False, seed=0):
    """Crop a scene into training patches on a clamped raster grid.

    Crops whose ignore fraction exceeds ``ignore_threshold`` are dropped;
    with ``sparse_normal_class`` set, crops almost entirely of that class
    are dropped too. ``augment`` applies seeded random horizontal/vertical
    flips per kept patch.
    """
    h, w = scene.shape
    raw_full = rasterize(aset)
    rng = np.random.default_rng(seed)
    patches = []
    for orow in tile_origins(h, patch_size, stride):
        for ocol in tile_origins(w, patch_size, stride):
            lab = scene.labels[orow:orow + patch_size, ocol:ocol + patch_size]
            ignore_frac = float((lab == IGNORE).mean())
            if ignore_frac > ignore_threshold:
                continue
            if sparse_normal_class is not None:
                informative = (lab != IGNORE) & (lab != sparse_normal_class)
                if float(informative.mean()) < sparse_min_fraction:
                    continue
            patch = Patch(
                image=np.ascontiguousarray(scene.image[orow:orow + patch_size,
                                                       ocol:ocol + patch_size]),
                labels=np.ascontiguousarray(lab),
                raw_side=np.ascontiguousarray(raw_full[orow:orow + patch_size,
                                                       ocol:ocol + patch_size]),
                annotations=_rebase_annotations(aset, (orow, ocol), patch_size),
                origin=(orow, ocol),
            )
            if augment:
                patch = flip_patch(patch, horizontal=bool(rng.random() < 0.5),
                                   vertical=bool(rng.random() < 0.5))
            patches.append(patch)
    return patches


# ---------------------------------------------------------------------------
# on-disk scene bundles
# ---------------------------------------------------------------------------

def save_scene(scene, aset, directory):
    from pathlib import Path

    from PIL import Image

    from .annotations import save_annotations

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img8 = np.clip(np.rint(scene.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(directory / "image.png")
    Image.fromarray(scene.labels, mode="L").save(directory / "labels.png")
    save_annotations(aset, directory / "annotations.jsonl")
    meta = dict(scene.metadata)
    meta["annotation_kind"] = aset.kind or "none"
    meta["raw_channels"] = aset.raw_channels
    with open(directory / "metadata.txt", "w") as fh:
        for key in sorted(meta):
            fh.write(f"{key}: {meta[key]}\n")


def load_scene(directory):
    from pathlib import Path

    from PIL import Image

    from .annotations import load_annotations

    directory = Path(directory)
    meta = {}
    with open(directory / "metadata.txt") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    for key in ("height", "width", "num_classes", "seed", "raw_channels",
                "assignment_attempts", "n_cells", "n_regions"):
        if key in meta:
            meta[key] = int(meta[key])
    image = np.asarray(Image.open(directory / "image.png"), dtype=np.float32) / 255.0
    labels = np.asarray(Image.open(directory / "labels.png"), dtype=np.uint8)
    aset = load_annotations(directory / "annotations.jsonl",
                            (meta["height"], meta["width"]), meta["raw_channels"])
    scene = SyntheticScene(image=image, labels=labels, regions=[], seed=meta.get("seed", 0),
                           metadata=meta, region_map=None)
    return scene, aset
