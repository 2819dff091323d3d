"""Box arithmetic, jaccard overlap, patch-grid slicing, offset codecs, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCALES = (64, 128, 256)
DEFAULT_RATIOS = (1.0, 0.5, 2.0)  # w/h: square, tall (1:2), wide (2:1)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle; coordinates are pixels in a stated frame."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        # zero-size is legal (clipping can collapse a side); inverted is not
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def clip(self, width: float, height: float) -> "Box":
        return Box(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def shift(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def jaccard(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0,1]; 0 when the union is empty."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def jaccard_matrix(rows: list[Box], cols: list[Box]) -> np.ndarray:
    """Pairwise jaccard, vectorized: [len(rows), len(cols)]."""
    if not rows or not cols:
        return np.zeros((len(rows), len(cols)))
    r = np.array([b.as_tuple() for b in rows])
    c = np.array([b.as_tuple() for b in cols])
    ix = np.minimum(r[:, None, 2], c[None, :, 2]) - np.maximum(r[:, None, 0], c[None, :, 0])
    iy = np.minimum(r[:, None, 3], c[None, :, 3]) - np.maximum(r[:, None, 1], c[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    ra = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
    ca = (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])
    union = ra[:, None] + ca[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


# -- patch-grid slicing --------------------------------------------------------


@dataclass(frozen=True)
class SlicingConfig:
    scales: tuple[int, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    stride_fraction: float = 0.5

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("slicing needs at least one scale and one ratio")
        if any(s < 1 for s in self.scales):
            raise ValueError(f"scales must be >= 1 pixel, got {self.scales}")
        if any(r <= 0.0 for r in self.ratios):
            raise ValueError(f"aspect ratios must be positive, got {self.ratios}")
        if not (0.0 < self.stride_fraction <= 1.0):
            raise ValueError(f"stride_fraction must be in (0,1], got {self.stride_fraction}")


@dataclass
class PatchGrid:
    """Deterministic multi-scale tiling of an image into patches."""

    image_size: tuple[int, int]  # (H, W)
    patches: list[tuple[Box, int, int]] = field(default_factory=list)  # (box, scale_i, ratio_i)

    def boxes(self) -> list[Box]:
        return [p[0] for p in self.patches]

    def __len__(self) -> int:
        return len(self.patches)


def patch_dims(scale: int, ratio: float) -> tuple[int, int]:
    """Integer (w, h) spanning scale^2 area at aspect w/h = ratio."""
    w = max(1, round(scale * math.sqrt(ratio)))
    h = max(1, round(scale / math.sqrt(ratio)))
    return w, h


def _axis_starts(extent: int, side: int, stride: int) -> list[int]:
    """Tiling starts along one axis, final tile shifted flush with the edge."""
    starts = list(range(0, extent - side + 1, stride))
    if not starts:
        starts = [0]
    if starts[-1] + side < extent:
        starts.append(extent - side)
    return starts


def slice_image(image_size: tuple[int, int], config: SlicingConfig | None = None) -> PatchGrid:
    """Tile an image into overlapping patches, scale-major then row, column, ratio.

    Patch sides larger than the image clamp to the image extent; the final
    patch per row/column is shifted inward so it stays full-size and flush
    with the border. Every pixel ends up covered by at least one patch.
    """
    config = config or SlicingConfig()
    h, w = image_size
    if h < min(config.scales) or w < min(config.scales):
        raise ValueError(
            f"image {h}x{w} smaller than the minimum patch scale {min(config.scales)}; resize first"
        )
    grid = PatchGrid(image_size=(h, w))
    for si, scale in enumerate(config.scales):
        for row_major in _scale_rows(h, w, scale, config):
            grid.patches.append((row_major[0], si, row_major[1]))
    return grid


def _scale_rows(h: int, w: int, scale: int, config: SlicingConfig):
    """Yield (box, ratio_index) at one scale in row, column, ratio order."""
    per_ratio = []
    for ri, ratio in enumerate(config.ratios):
        pw, ph = patch_dims(scale, ratio)
        pw, ph = min(pw, w), min(ph, h)
        sx = max(1, int(round(pw * config.stride_fraction)))
        sy = max(1, int(round(ph * config.stride_fraction)))
        for y0 in _axis_starts(h, ph, sy):
            for x0 in _axis_starts(w, pw, sx):
                per_ratio.append(((y0, x0, ri), Box(x0, y0, x0 + pw, y0 + ph)))
    per_ratio.sort(key=lambda t: t[0])
    for (y0, x0, ri), box in per_ratio:
        yield box, ri


# -- default boxes -------------------------------------------------------------


@dataclass
class DefaultBoxSet:
    """Anchor boxes in patch coordinates plus their feature-map origins."""

    boxes: list[Box]
    origins: list[tuple[int, int, int, int]]  # (level, cell_row, cell_col, box_index)

    def __len__(self) -> int:
        return len(self.boxes)


def default_boxes_for_patch(
    patch_w: float,
    patch_h: float,
    grid_sizes: list[int],
    scales: tuple[int, ...] = DEFAULT_SCALES,
    ratios: tuple[float, ...] = DEFAULT_RATIOS,
) -> DefaultBoxSet:
    """One default box per (level cell, ratio); level l uses scales[l].

    Boxes are centered on the feature cells, sized in patch-frame pixels and
    clamped to the patch bounds. Deterministic in (patch size, config).
    """
    if len(grid_sizes) != len(scales):
        raise ValueError(f"need one scale per level: {len(grid_sizes)} levels, {len(scales)} scales")
    boxes: list[Box] = []
    origins: list[tuple[int, int, int, int]] = []
    for level, (g, scale) in enumerate(zip(grid_sizes, scales)):
        for r in range(g):
            cy = (r + 0.5) / g * patch_h
            for c in range(g):
                cx = (c + 0.5) / g * patch_w
                for bi, ratio in enumerate(ratios):
                    bw = scale * math.sqrt(ratio)
                    bh = scale / math.sqrt(ratio)
                    box = Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
                    boxes.append(box.clip(patch_w, patch_h))
                    origins.append((level, r, c, bi))
    return DefaultBoxSet(boxes=boxes, origins=origins)


# -- offset encode / decode ----------------------------------------------------


def encode_offsets(gt: Box, anchor: Box) -> np.ndarray:
    """Center/log-size offsets of gt relative to anchor: (dx, dy, dw, dh)."""
    if anchor.width <= 0.0 or anchor.height <= 0.0:
        raise ValueError(f"anchor must have positive size: {anchor}")
    if gt.width <= 0.0 or gt.height <= 0.0:
        raise ValueError(f"ground-truth box must have positive size: {gt}")
    acx, acy = anchor.center
    gcx, gcy = gt.center
    return np.array(
        [
            (gcx - acx) / anchor.width,
            (gcy - acy) / anchor.height,
            math.log(gt.width / anchor.width),
            math.log(gt.height / anchor.height),
        ]
    )


def decode_offsets(offsets, anchor: Box) -> Box:
    """Inverse of encode_offsets."""
    if anchor.width <= 0.0 or anchor.height <= 0.0:
        raise ValueError(f"anchor must have positive size: {anchor}")
    dx, dy, dw, dh = (float(v) for v in np.asarray(offsets, dtype=np.float64).ravel())
    acx, acy = anchor.center
    cx = acx + dx * anchor.width
    cy = acy + dy * anchor.height
    w = anchor.width * math.exp(min(dw, 50.0))
    h = anchor.height * math.exp(min(dh, 50.0))
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# -- non-maximum suppression ----------------------------------------------------


def nms(scored_boxes: list[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy descending-score selection; a box survives iff its jaccard with
    every already-kept box is <= threshold. Returns kept indices into the
    input, in keep order. Score ties break by input order."""
    if not scored_boxes:
        return []
    scores = np.array([s for _, s in scored_boxes])
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        box = scored_boxes[i][0]
        if all(jaccard(box, scored_boxes[k][0]) <= iou_threshold for k in kept):
            kept.append(int(i))
    return kept


# -- anchor-to-ground-truth matching --------------------------------------------


def match_boxes(anchors: list[Box], gt: list[Box], threshold: float = 0.5) -> np.ndarray:
    """Assign anchors to ground-truth boxes; returns per-anchor gt index (-1 = none).

    Two rules: (a) bipartite best-jaccard pass so every gt gets its best still
    free anchor (globally greedy, ties by lower index), then (b) every
    unassigned anchor whose best gt overlap >= threshold joins that gt.
    """
    assign = np.full(len(anchors), -1, dtype=np.int64)
    if not anchors or not gt:
        return assign
    overlap = jaccard_matrix(anchors, gt)
    work = overlap.copy()
    for _ in range(min(len(gt), len(anchors))):
        flat = int(np.argmax(work))
        ai, gi = np.unravel_index(flat, work.shape)
        if work[ai, gi] < 0.0:
            break
        assign[ai] = gi
        work[ai, :] = -1.0
        work[:, gi] = -1.0
    free = assign < 0
    best_gt = overlap.argmax(axis=1)
    best_ov = overlap[np.arange(len(anchors)), best_gt]
    join = free & (best_ov >= threshold)
    assign[join] = best_gt[join]
    return assign
