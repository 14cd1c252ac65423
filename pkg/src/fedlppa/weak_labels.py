"""Sparse-annotation synthesis from full masks, and box-label preprocessing.

Every synthesized label is a subset of the region it claims (foreground class
pixels inside that class, background pixels outside every class), so labels are
noise-free with respect to the source mask.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

UNLABELED = 255

POINT_SHRINK = 0.5
BLOB_SIZE = 5
BLOB_SIGMA = 2.0
BLOB_THRESHOLD = 0.1
BLOCK_EROSION = 0.25
BOX_SHRINK = 0.3
ERASE_FRACTION = 0.3
BAND_SCALE = 2.0
SCRIBBLE_EROSION = 2
WARP_GRID = 4
WARP_AMPLITUDE = 2.0


class Sparsity(enum.IntEnum):
    SPARSE = 0
    MEDIUM = 1
    DENSE = 2


class AnnotationType(enum.Enum):
    POINT = "point"
    SCRIBBLE = "scribble"
    SCRIBBLE2 = "scribble2"
    BLOCK = "block"
    BBOX = "bbox"
    ROTATED_BBOX = "rotated_bbox"


class BoxRule(enum.Enum):
    TO_SCRIBBLE = "to_scribble"
    TO_BLOCK = "to_block"


SPARSITY_OF = {
    AnnotationType.POINT: Sparsity.SPARSE,
    AnnotationType.SCRIBBLE: Sparsity.MEDIUM,
    AnnotationType.SCRIBBLE2: Sparsity.MEDIUM,
    AnnotationType.BLOCK: Sparsity.DENSE,
}
RULE_SPARSITY = {BoxRule.TO_SCRIBBLE: Sparsity.MEDIUM, BoxRule.TO_BLOCK: Sparsity.DENSE}


@dataclass
class SparseLabel:
    label_map: np.ndarray  # uint8, UNLABELED where no supervision
    annotation_type: AnnotationType
    sparsity: Sparsity

    def labeled(self) -> np.ndarray:
        return self.label_map != UNLABELED

    def metadata(self) -> dict:
        counts = {int(c): int(n) for c, n in zip(*np.unique(self.label_map, return_counts=True))
                  if c != UNLABELED}
        return {"annotation_type": self.annotation_type.value, "sparsity": self.sparsity.name.lower(),
                "labeled_pixels": counts}


@dataclass
class BoxLabel:
    """Axis-aligned box ``(x0, y0, x1, y1)`` with exclusive upper edges, or a rotated box.

    A rotated box is given by ``center=(row, col)``, ``size=(height, width)`` and
    ``angle`` in degrees; ``x0..y1`` then hold its axis-aligned hull.
    """
    x0: int
    y0: int
    x1: int
    y1: int
    class_id: int = 1
    center: tuple[float, float] | None = None
    size: tuple[float, float] | None = None
    angle: float = 0.0

    @property
    def rotated(self) -> bool:
        return self.center is not None


def asp_encode(level, h: int, w: int) -> np.ndarray:
    """One-hot sparsity prompt: plane ``level`` all ones, the other two zeros."""
    out = np.zeros((3, h, w), np.float32)
    out[int(Sparsity(level))] = 1.0
    return out


# -- geometry helpers -----------------------------------------------------

def max_inscribed_rectangle(region: np.ndarray) -> tuple[int, int, int, int]:
    """Largest all-true axis-aligned rectangle as inclusive ``(r0, c0, r1, c1)``.

    Row-by-row histogram with a monotonic stack; the first maximum in scan order wins.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty region has no inscribed rectangle")
    h, w = region.shape
    heights = np.zeros(w + 1, dtype=np.int64)
    best = (0, (0, 0, 0, 0))
    for r in range(h):
        heights[:w] = np.where(region[r], heights[:w] + 1, 0)
        stack: list[int] = []
        for c in range(w + 1):
            while stack and heights[stack[-1]] >= heights[c]:
                height = heights[stack.pop()]
                left = stack[-1] + 1 if stack else 0
                area = height * (c - left)
                if area > best[0]:
                    best = (area, (int(r - height + 1), int(left), int(r), int(c - 1)))
            stack.append(c)
    return best[1]


def _blob_kernel() -> np.ndarray:
    half = BLOB_SIZE // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    g = np.exp(-(yy ** 2 + xx ** 2) / (2 * BLOB_SIGMA ** 2))
    return g > BLOB_THRESHOLD


def stamp_blob(shape, center) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    kern = _blob_kernel()
    half = BLOB_SIZE // 2
    r, c = center
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            rr, cc = r + dr, c + dc
            if kern[dr + half, dc + half] and 0 <= rr < shape[0] and 0 <= cc < shape[1]:
                out[rr, cc] = True
    return out


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def point_centers(region: np.ndarray) -> list[tuple[int, int]]:
    """Side midpoints of the shrunken maximal inscribed rectangle (pixel-centre coords)."""
    if region.sum() < 4:
        rr, cc = np.nonzero(region)
        # centroid may fall outside a non-convex region; snap to the nearest member pixel
        cr, ccn = rr.mean(), cc.mean()
        k = int(np.argmin((rr - cr) ** 2 + (cc - ccn) ** 2))
        return [(int(rr[k]), int(cc[k]))]
    r0, c0, r1, c1 = max_inscribed_rectangle(region)
    cr, cc = (r0 + r1) / 2, (c0 + c1) / 2
    hr, hc = POINT_SHRINK * (r1 - r0) / 2, POINT_SHRINK * (c1 - c0) / 2
    return [(_round(cr - hr), _round(cc)), (_round(cr + hr), _round(cc)),
            (_round(cr), _round(cc - hc)), (_round(cr), _round(cc + hc))]


def _points(region, rng):
    out = np.zeros(region.shape, dtype=bool)
    for center in point_centers(region):
        out |= stamp_blob(region.shape, center)
    return out & region


def _skeleton(region: np.ndarray) -> np.ndarray:
    eroded = ndimage.binary_erosion(region, iterations=SCRIBBLE_EROSION)
    base = eroded if eroded.any() else region
    skel = skeletonize(base)
    return skel if skel.any() else base


def _scribble(region, rng):
    return _skeleton(region) & region


def elastic_warp(binary: np.ndarray, rng) -> np.ndarray:
    """Warp a binary image by a coarse random displacement field (bilinear upsampled)."""
    h, w = binary.shape
    coarse = rng.uniform(-WARP_AMPLITUDE, WARP_AMPLITUDE, size=(2, WARP_GRID, WARP_GRID))
    rows = np.linspace(0, WARP_GRID - 1, h)
    cols = np.linspace(0, WARP_GRID - 1, w)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    dr = ndimage.map_coordinates(coarse[0], grid, order=1)
    dc = ndimage.map_coordinates(coarse[1], grid, order=1)
    yy, xx = np.mgrid[0:h, 0:w]
    src = np.stack([yy + dr, xx + dc])
    return ndimage.map_coordinates(binary.astype(np.float32), src, order=1, mode="constant") > 0.5


def _scribble2(region, rng):
    base = _scribble(region, rng)
    warped = elastic_warp(base, rng) & region
    if not warped.any():
        warped = base
    idx = np.flatnonzero(warped)
    n_erase = int(np.floor(ERASE_FRACTION * idx.size))
    if n_erase >= idx.size:
        n_erase = idx.size - 1
    out = warped.copy().ravel()
    out[rng.choice(idx, size=n_erase, replace=False)] = False
    return out.reshape(region.shape)


def _edt(region: np.ndarray) -> np.ndarray:
    # image border counts as boundary
    padded = np.pad(region, 1)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def _block(region, rng):
    dist = _edt(region)
    radius = BLOCK_EROSION * dist.max()
    return dist > radius


_SYNTH = {
    AnnotationType.POINT: _points,
    AnnotationType.SCRIBBLE: _scribble,
    AnnotationType.SCRIBBLE2: _scribble2,
    AnnotationType.BLOCK: _block,
}


def _bbox(region: np.ndarray) -> tuple[int, int, int, int]:
    rr, cc = np.nonzero(region)
    return int(rr.min()), int(cc.min()), int(rr.max()) + 1, int(cc.max()) + 1


def _scaled_box_region(shape, box, scale):
    r0, c0, r1, c1 = box
    cr, cc = (r0 + r1) / 2, (c0 + c1) / 2
    hr, hc = scale * (r1 - r0) / 2, scale * (c1 - c0) / 2
    out = np.zeros(shape, dtype=bool)
    out[max(0, int(np.floor(cr - hr))):min(shape[0], int(np.ceil(cr + hr))),
        max(0, int(np.floor(cc - hc))):min(shape[1], int(np.ceil(cc + hc)))] = True
    return out


def background_region(mask: np.ndarray) -> np.ndarray:
    """Background pixels inside the 2x-scaled foreground bounding box (whole background if that is empty)."""
    fg = mask != 0
    bg = ~fg
    if not fg.any():
        return bg
    band = bg & _scaled_box_region(mask.shape, _bbox(fg), BAND_SCALE)
    return band if band.any() else bg


def synthesize_weak_label(mask: np.ndarray, annotation_type: AnnotationType, rng,
                          box_rule: BoxRule = BoxRule.TO_BLOCK) -> SparseLabel:
    """Synthesize a sparse label of the given type from a full class mask.

    Box types are produced by deriving the (rotated) box from each class
    region and running ``preprocess_box``; the result is clipped to the mask.
    """
    mask = np.asarray(mask)
    annotation_type = AnnotationType(annotation_type)
    classes = [int(c) for c in np.unique(mask) if c != 0]
    if not classes:
        raise ValueError("mask has no foreground class")
    if annotation_type in (AnnotationType.BBOX, AnnotationType.ROTATED_BBOX):
        return _box_label_from_mask(mask, classes, annotation_type, box_rule)
    synth = _SYNTH[annotation_type]
    out = np.full(mask.shape, UNLABELED, np.uint8)
    for c in classes:
        region = mask == c
        out[synth(region, rng) & region] = c
    bg = background_region(mask)
    if bg.any():
        out[synth(bg, rng) & bg] = 0
    return SparseLabel(out, annotation_type, SPARSITY_OF[annotation_type])


# -- boxes ----------------------------------------------------------------

def box_from_mask(region: np.ndarray, class_id: int = 1, rotated: bool = False) -> BoxLabel:
    """Enclosing rectangle of a region (minimal-area rotated rectangle when ``rotated``)."""
    r0, c0, r1, c1 = _bbox(region)
    if not rotated:
        return BoxLabel(c0, r0, c1, r1, class_id)
    rr, cc = np.nonzero(region)
    pts = np.stack([rr, cc], axis=1).astype(np.float64)
    # pixel squares, not centres, must be enclosed
    corners = np.concatenate([pts + d for d in ([-.5, -.5], [-.5, .5], [.5, -.5], [.5, .5])])
    best = None
    for deg in np.arange(0.0, 90.0, 1.0):
        th = np.deg2rad(deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        p = corners @ rot.T
        lo, hi = p.min(axis=0), p.max(axis=0)
        area = np.prod(hi - lo)
        if best is None or area < best[0] - 1e-9:
            center = rot.T @ ((lo + hi) / 2)
            best = (area, center, hi - lo, deg)
    _, center, size, deg = best
    return BoxLabel(c0, r0, c1, r1, class_id, center=(float(center[0]), float(center[1])),
                    size=(float(size[0]), float(size[1])), angle=float(deg))


def _rotated_frame(shape, box: BoxLabel):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    th = np.deg2rad(box.angle)
    dy, dx = yy - box.center[0], xx - box.center[1]
    u = np.cos(th) * dy - np.sin(th) * dx
    v = np.sin(th) * dy + np.cos(th) * dx
    return u, v


def rasterize_box(shape, box: BoxLabel, scale: float = 1.0) -> np.ndarray:
    """Pixels whose centres fall inside the box scaled about its centre."""
    if box.rotated:
        u, v = _rotated_frame(shape, box)
        return (np.abs(u) <= scale * box.size[0] / 2) & (np.abs(v) <= scale * box.size[1] / 2)
    out = np.zeros(shape, dtype=bool)
    if scale == 1.0:
        out[max(box.y0, 0):box.y1, max(box.x0, 0):box.x1] = True
        return out
    return _scaled_box_region(shape, (box.y0, box.x0, box.y1, box.x1), scale)


def _box_foreground(shape, box: BoxLabel, rule: BoxRule) -> np.ndarray:
    keep = 1.0 - 2 * BOX_SHRINK
    if rule is BoxRule.TO_BLOCK:
        if box.rotated:
            return rasterize_box(shape, box, keep)
        dy = int(np.floor(BOX_SHRINK * (box.y1 - box.y0)))
        dx = int(np.floor(BOX_SHRINK * (box.x1 - box.x0)))
        out = np.zeros(shape, dtype=bool)
        out[box.y0 + dy:box.y1 - dy, box.x0 + dx:box.x1 - dx] = True
        return out
    # thin ring of the inscribed ellipse, shrunk like the block rule
    if box.rotated:
        u, v = _rotated_frame(shape, box)
        a, b = keep * box.size[0] / 2, keep * box.size[1] / 2
    else:
        yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        cy, cx = (box.y0 + box.y1 - 1) / 2, (box.x0 + box.x1 - 1) / 2
        u, v = yy - cy, xx - cx
        a, b = keep * (box.y1 - box.y0) / 2, keep * (box.x1 - box.x0) / 2
    filled = (u / max(a, 0.5)) ** 2 + (v / max(b, 0.5)) ** 2 <= 1.0
    ring = filled & ~ndimage.binary_erosion(filled)
    return ring if ring.any() else filled


def preprocess_box(box: BoxLabel, rule: BoxRule, shape) -> SparseLabel:
    """Turn a box into pixel supervision: shrunken block or inscribed-ellipse ring inside,
    background on the band between the box and its 2x enlargement."""
    rule = BoxRule(rule)
    if box.rotated:
        if box.size[0] <= 0 or box.size[1] <= 0:
            raise ValueError("degenerate rotated box")
    elif box.x1 <= box.x0 or box.y1 <= box.y0:
        raise ValueError("degenerate box (zero area)")
    out = np.full(shape, UNLABELED, np.uint8)
    inside = rasterize_box(shape, box)
    band = rasterize_box(shape, box, BAND_SCALE) & ~inside
    out[band] = 0
    fg = _box_foreground(shape, box, rule) & inside
    if not fg.any():
        fg = inside
    out[fg] = box.class_id
    kind = AnnotationType.ROTATED_BBOX if box.rotated else AnnotationType.BBOX
    return SparseLabel(out, kind, RULE_SPARSITY[rule])


def _box_label_from_mask(mask, classes, kind, rule) -> SparseLabel:
    rotated = kind is AnnotationType.ROTATED_BBOX
    out = np.full(mask.shape, UNLABELED, np.uint8)
    fg_any = mask != 0
    for c in classes:
        region = mask == c
        lab = preprocess_box(box_from_mask(region, c, rotated), rule, mask.shape).label_map
        bg = (lab == 0) & ~fg_any
        out[bg & (out == UNLABELED)] = 0
        fg = (lab == c) & region
        if not fg.any():
            dist = _edt(region)
            fg = dist == dist.max()
        out[fg] = c
    if (mask == 0).any() and not (out == 0).any():
        bg = background_region(mask)
        out[_block(bg, None) & bg] = 0
    return SparseLabel(out, kind, RULE_SPARSITY[BoxRule(rule)])


# -- storage ---------------------------------------------------------------

def save_label(path, label: SparseLabel) -> None:
    """8-bit PGM (255 = unlabeled) plus a ``.json`` sidecar with annotation metadata."""
    from .pgm import write_pgm

    path = Path(path)
    write_pgm(path, label.label_map, maxval=255)
    path.with_suffix(".json").write_text(json.dumps(label.metadata()))


def load_label(path) -> SparseLabel:
    from .pgm import read_pgm

    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return SparseLabel(read_pgm(path).astype(np.uint8), AnnotationType(meta["annotation_type"]),
                       Sparsity[meta["sparsity"].upper()])
