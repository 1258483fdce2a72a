"""Binary mask algebra: run-length codec, areas, IoU and polygon rasterization.

Run-length masks are stored row-major and always start with a run of zeros
(possibly of length zero), so every bitmap has exactly one canonical encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np


class MaskError(ValueError):
    """Raised for malformed masks, shape mismatches and degenerate polygons."""


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MaskError(f"mask must be non-empty, got {self.width}x{self.height}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise MaskError("run lengths must be non-negative")
        if sum(counts) != self.width * self.height:
            raise MaskError(
                f"run lengths sum to {sum(counts)}, expected {self.width * self.height}"
            )
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @cached_property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    @cached_property
    def _boundaries(self) -> np.ndarray:
        # flat positions where the value toggles; position p is set iff
        # searchsorted(boundaries, p, "right") is odd
        return np.cumsum(np.asarray(self.counts[:-1], dtype=np.int64))

    def to_bitmap(self) -> np.ndarray:
        return rle_decode(self)


MaskLike = Union[RleMask, np.ndarray]


def rle_encode(bitmap: np.ndarray) -> RleMask:
    """Encode a 2-D binary array (nonzero = set) as a canonical row-major RLE."""
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2 or bitmap.size == 0:
        raise MaskError(f"expected a non-empty 2-D bitmap, got shape {bitmap.shape}")
    flat = bitmap.reshape(-1) != 0
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    h, w = bitmap.shape
    return RleMask(width=w, height=h, counts=tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode to a boolean ``(height, width)`` array."""
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape(rle.height, rle.width)


def _as_bitmap(m: MaskLike) -> np.ndarray:
    if isinstance(m, RleMask):
        return rle_decode(m)
    m = np.asarray(m)
    if m.ndim != 2:
        raise MaskError(f"expected a 2-D mask, got shape {m.shape}")
    return m != 0


def mask_area(m: MaskLike) -> int:
    if isinstance(m, RleMask):
        return m.area
    return int(np.count_nonzero(m))


def rle_intersection(a: RleMask, b: RleMask) -> int:
    """Number of pixels set in both masks, computed on the run boundaries."""
    if a.shape != b.shape:
        raise MaskError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ba, bb = a._boundaries, b._boundaries
    if a.area == 0 or b.area == 0:
        return 0
    cuts = np.union1d(np.union1d(ba, bb), [0, a.width * a.height])
    starts = cuts[:-1]
    lengths = np.diff(cuts)
    in_a = np.searchsorted(ba, starts, side="right") % 2 == 1
    in_b = np.searchsorted(bb, starts, side="right") % 2 == 1
    return int(lengths[in_a & in_b].sum())


def mask_iou(t: MaskLike, d: MaskLike) -> float:
    """Intersection over union of two masks; 0.0 when both are empty.

    Works on either representation. Two RLE masks are intersected without
    decoding.
    """
    if isinstance(t, RleMask) and isinstance(d, RleMask):
        inter = rle_intersection(t, d)
        union = t.area + d.area - inter
    else:
        tb, db = _as_bitmap(t), _as_bitmap(d)
        if tb.shape != db.shape:
            raise MaskError(f"mask shapes differ: {tb.shape} vs {db.shape}")
        inter = int(np.count_nonzero(tb & db))
        union = int(np.count_nonzero(tb | db))
    if union == 0:
        return 0.0
    return inter / union


def rle_iou_matrix(gts: Sequence[RleMask], dts: Sequence[RleMask]) -> np.ndarray:
    """IoU for every (gt, dt) pair, shape ``(len(gts), len(dts))``."""
    out = np.zeros((len(gts), len(dts)), dtype=np.float64)
    for i, g in enumerate(gts):
        for j, d in enumerate(dts):
            out[i, j] = mask_iou(g, d)
    return out


def bbox_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def bbox_iou_matrix(gts: np.ndarray, dts: np.ndarray) -> np.ndarray:
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    dts = np.asarray(dts, dtype=np.float64).reshape(-1, 4)
    gx0, gy0 = gts[:, 0:1], gts[:, 1:2]
    gx1, gy1 = gx0 + gts[:, 2:3], gy0 + gts[:, 3:4]
    dx0, dy0 = dts[:, 0], dts[:, 1]
    dx1, dy1 = dx0 + dts[:, 2], dy0 + dts[:, 3]
    iw = np.clip(np.minimum(gx1, dx1) - np.maximum(gx0, dx0), 0, None)
    ih = np.clip(np.minimum(gy1, dy1) - np.maximum(gy0, dy0), 0, None)
    inter = iw * ih
    union = (gts[:, 2:3] * gts[:, 3:4]) + (dts[:, 2] * dts[:, 3]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def bbox_from_mask(m: MaskLike) -> tuple[int, int, int, int]:
    """Tight ``(x, y, w, h)`` bounds of the set pixels."""
    if isinstance(m, RleMask):
        return _rle_bbox(m)
    bitmap = _as_bitmap(m)
    rows = np.flatnonzero(bitmap.any(axis=1))
    if rows.size == 0:
        raise MaskError("cannot take the bounding box of an empty mask")
    cols = np.flatnonzero(bitmap.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _rle_bbox(m: RleMask) -> tuple[int, int, int, int]:
    counts = np.asarray(m.counts, dtype=np.int64)
    ends = np.cumsum(counts)
    starts = ends - counts
    ones = (np.arange(len(counts)) % 2 == 1) & (counts > 0)
    if not ones.any():
        raise MaskError("cannot take the bounding box of an empty mask")
    s, e = starts[ones], ends[ones] - 1
    r0, c0 = np.divmod(s, m.width)
    r1, c1 = np.divmod(e, m.width)
    wraps = r1 > r0
    # a run crossing a row boundary touches both column 0 and the last column
    xmin = int(np.where(wraps, 0, c0).min())
    xmax = int(np.where(wraps, m.width - 1, c1).max())
    ymin, ymax = int(r0.min()), int(r1.max())
    return (xmin, ymin, xmax - xmin + 1, ymax - ymin + 1)


def polygon_to_mask(vertices: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Scanline fill of a polygon with the even-odd rule.

    A pixel is set when its center ``(x + 0.5, y + 0.5)`` lies inside. Edge
    crossings use half-open intervals so that a center exactly on a left or
    top edge is inside and one on a right or bottom edge is outside. Shapes
    extending past the frame are clipped.
    """
    pts = np.asarray(vertices, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise MaskError("a polygon needs at least 3 (x, y) vertices")
    rel = pts - pts[0]
    if not np.any(rel[:, 0, None] * rel[None, :, 1] - rel[:, 1, None] * rel[None, :, 0]):
        raise MaskError("polygon encloses zero area (all vertices collinear)")
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)

    out = np.zeros((height, width), dtype=bool)
    centers_x = np.arange(width) + 0.5
    lo_row = max(int(np.floor(pts[:, 1].min())), 0)
    hi_row = min(int(np.ceil(pts[:, 1].max())), height)
    ymin, ymax = np.minimum(y0, y1), np.maximum(y0, y1)
    for row in range(lo_row, hi_row):
        yc = row + 0.5
        active = (ymin <= yc) & (yc < ymax)
        if not active.any():
            continue
        ax0, ay0, ax1, ay1 = x0[active], y0[active], x1[active], y1[active]
        xs = np.sort(ax0 + (yc - ay0) * (ax1 - ax0) / (ay1 - ay0))
        # odd number of crossings left of (or at) the center means inside
        inside = np.searchsorted(xs, centers_x, side="right") % 2 == 1
        out[row] = inside
    return out
