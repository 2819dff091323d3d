"""Stage 1: preprocess, slice, screen patches with a compact SSD-style net.

The screening network runs on fixed-size grayscale patch crops and emits, per
default box, class logits and offset regressions over three feature-map
levels. Matching, the multibox loss and hard-negative selection live here;
the geometry module owns boxes, jaccard and the offset codec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DEFAULT_RATIOS,
    Box,
    DefaultBoxSet,
    SlicingConfig,
    decode_offsets,
    default_boxes_for_patch,
    encode_offsets,
    match_boxes,
    nms,
    slice_image,
)
from .layers import Conv2dLayer, ParamStore
from .tensor import (
    ShapeMismatchError,
    bilinear_resize,
    log_softmax,
    max_pool2d,
    max_pool2d_backward,
    relu,
    relu_backward,
    softmax,
)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def preprocess(image: np.ndarray, working_size: int = 512) -> np.ndarray:
    """RGB (or grayscale) raster -> [1,1,S,S] luminance tensor in [0,1].

    Uses the (0.299, 0.587, 0.114) luminance weights and bilinear resizing;
    non-square inputs are stretched to the square working size.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise ValueError(f"expected an RGB raster, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError(f"image has a zero dimension: {arr.shape}")
    if working_size < 1:
        raise ValueError(f"working size must be >= 1, got {working_size}")
    arr = arr.astype(np.float64)
    if arr.max() > 1.0:
        arr = arr / 255.0
    gray = (
        LUMA_WEIGHTS[0] * arr[:, :, 0]
        + LUMA_WEIGHTS[1] * arr[:, :, 1]
        + LUMA_WEIGHTS[2] * arr[:, :, 2]
    )
    resized = bilinear_resize(gray[None, :, :], working_size, working_size)
    return resized[None, :, :, :]


def crop_resize(working: np.ndarray, box: Box, out_size: int) -> np.ndarray:
    """Crop a patch box (integer coords) from a [1,1,H,W] tensor, resize square."""
    y0, y1 = int(box.y_min), int(box.y_max)
    x0, x1 = int(box.x_min), int(box.x_max)
    crop = working[0, :, y0:y1, x0:x1]
    if crop.shape[1] == 0 or crop.shape[2] == 0:
        raise ValueError(f"patch {box} lies outside the working frame")
    return bilinear_resize(crop, out_size, out_size)[None]


# -- matching -------------------------------------------------------------------


@dataclass
class MatchAssignment:
    """Binding of default boxes to ground truth plus the Pos/Neg partition."""

    gt_index: np.ndarray  # [A] int64, -1 = unmatched
    class_ids: np.ndarray  # [A] int64, 0 where unmatched
    loc_targets: np.ndarray  # [A,4] float64, valid on pos rows
    pos: np.ndarray  # indices into the default box list
    neg: np.ndarray  # selected background indices

    @property
    def n(self) -> int:
        return int(len(self.pos))

    def validate(self, neg_pos_ratio: int = 3) -> None:
        if np.intersect1d(self.pos, self.neg).size:
            raise ValueError("Pos and Neg overlap")
        if len(self.neg) > neg_pos_ratio * max(self.n, 1):
            raise ValueError(f"|Neg|={len(self.neg)} exceeds {neg_pos_ratio}x cap")


def match(
    defaults: DefaultBoxSet,
    gt: list[tuple[Box, int]],
    threshold: float = 0.5,
    neg_pos_ratio: int = 3,
    background_loss: np.ndarray | None = None,
) -> MatchAssignment:
    """Match default boxes to ground truth (best-jaccard + threshold joins).

    Negatives are the unmatched boxes with the highest `background_loss`
    (per-box confidence loss under the background label), capped at
    neg_pos_ratio * max(|Pos|, 1); without a loss vector the lowest-index
    unmatched boxes stand in, which keeps initialization deterministic.
    """
    n_boxes = len(defaults.boxes)
    gt_boxes = [b for b, _ in gt]
    gt_classes = np.array([c for _, c in gt], dtype=np.int64)
    if np.any(gt_classes < 1):
        raise ValueError("ground-truth classes must be >= 1 (0 is background)")
    assign = match_boxes(defaults.boxes, gt_boxes, threshold=threshold)
    pos = np.flatnonzero(assign >= 0)
    class_ids = np.zeros(n_boxes, dtype=np.int64)
    loc_targets = np.zeros((n_boxes, 4))
    for i in pos:
        gi = assign[i]
        class_ids[i] = gt_classes[gi]
        loc_targets[i] = encode_offsets(gt_boxes[gi], defaults.boxes[i])
    candidates = np.flatnonzero(assign < 0)
    cap = neg_pos_ratio * max(len(pos), 1)
    if background_loss is not None:
        bl = np.asarray(background_loss, dtype=np.float64)
        if bl.shape != (n_boxes,):
            raise ShapeMismatchError(
                f"background_loss shape {bl.shape} does not match {n_boxes} default boxes"
            )
        # stable sort keeps index order among equal losses
        order = candidates[np.argsort(-bl[candidates], kind="stable")]
    else:
        order = candidates
    neg = np.sort(order[:cap])
    return MatchAssignment(
        gt_index=assign, class_ids=class_ids, loc_targets=loc_targets, pos=pos, neg=neg
    )


# -- losses ---------------------------------------------------------------------


def smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.clip(d, -1.0, 1.0)


def loc_loss(assignment: MatchAssignment, pred_offsets: np.ndarray,
             gt_offsets: np.ndarray | None = None) -> float:
    """Smooth-L1 over positive boxes, summed over the 4 offset coordinates."""
    if gt_offsets is None:
        gt_offsets = assignment.loc_targets
    if assignment.n == 0:
        return 0.0
    d = pred_offsets[assignment.pos] - gt_offsets[assignment.pos]
    return float(smooth_l1(d).sum())


def loc_loss_backward(assignment: MatchAssignment, pred_offsets: np.ndarray,
                      gt_offsets: np.ndarray | None = None) -> np.ndarray:
    if gt_offsets is None:
        gt_offsets = assignment.loc_targets
    grad = np.zeros_like(pred_offsets)
    if assignment.n:
        d = pred_offsets[assignment.pos] - gt_offsets[assignment.pos]
        grad[assignment.pos] = smooth_l1_grad(d)
    return grad


def background_ce(logits: np.ndarray) -> np.ndarray:
    """Per-box cross-entropy against the background class, for negative mining."""
    return -log_softmax(logits)[:, 0]


def conf_loss(assignment: MatchAssignment, logits: np.ndarray) -> float:
    """Softmax cross-entropy: true class on Pos boxes, background on Neg."""
    logp = log_softmax(logits)
    loss = 0.0
    if assignment.n:
        loss -= float(logp[assignment.pos, assignment.class_ids[assignment.pos]].sum())
    if len(assignment.neg):
        loss -= float(logp[assignment.neg, 0].sum())
    return loss


def conf_loss_backward(assignment: MatchAssignment, logits: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(logits)
    probs = softmax(logits)
    if assignment.n:
        rows = assignment.pos
        grad[rows] = probs[rows]
        grad[rows, assignment.class_ids[rows]] -= 1.0
    if len(assignment.neg):
        rows = assignment.neg
        grad[rows] = probs[rows]
        grad[rows, 0] -= 1.0
    return grad


@dataclass
class MultiboxLoss:
    conf: float
    loc: float
    total: float
    n_pos: int


def multibox_loss(assignment: MatchAssignment, logits: np.ndarray,
                  pred_offsets: np.ndarray, alpha: float = 1.0) -> MultiboxLoss:
    """Weighted combination (L_conf + alpha * L_loc) / N.

    N counts matched boxes; when nothing matches the divisor is 1 and the
    loss is background-only confidence.
    """
    lc = conf_loss(assignment, logits)
    ll = loc_loss(assignment, pred_offsets)
    denom = max(assignment.n, 1)
    return MultiboxLoss(conf=lc, loc=ll, total=(lc + alpha * ll) / denom, n_pos=assignment.n)


def multibox_loss_backward(assignment: MatchAssignment, logits: np.ndarray,
                           pred_offsets: np.ndarray, alpha: float = 1.0):
    denom = max(assignment.n, 1)
    grad_logits = conf_loss_backward(assignment, logits) / denom
    grad_offsets = loc_loss_backward(assignment, pred_offsets) * (alpha / denom)
    return grad_logits, grad_offsets


# -- the screening network --------------------------------------------------------


def _reshape_head(raw: np.ndarray, per_box: int) -> np.ndarray:
    """[N, B*per_box, g, g] -> [N, g*g*B, per_box], row/col/box ordering."""
    n, cb, gh, gw = raw.shape
    b = cb // per_box
    return raw.transpose(0, 2, 3, 1).reshape(n, gh * gw * b, per_box)


def _reshape_head_back(grad: np.ndarray, gh: int, gw: int, per_box: int) -> np.ndarray:
    n = grad.shape[0]
    b = grad.shape[1] // (gh * gw)
    return grad.reshape(n, gh, gw, b * per_box).transpose(0, 3, 1, 2)


class SSDNet:
    """Compact patch screener: 4 conv+pool blocks, detection heads at the
    three coarsest maps (input/8, /16, /32), 3 default boxes per cell."""

    def __init__(
        self,
        input_size: int = 128,
        n_classes: int = 1,
        channels: tuple[int, int, int, int] = (8, 16, 24, 32),
        anchor_fractions: tuple[float, float, float] = (0.2, 0.45, 0.75),
        ratios: tuple[float, ...] = DEFAULT_RATIOS,
        seed: int = 0,
    ):
        if input_size % 32 != 0:
            raise ValueError(f"input size must be a multiple of 32, got {input_size}")
        self.input_size = input_size
        self.n_classes = n_classes
        self.ratios = ratios
        self.grid_sizes = (input_size // 8, input_size // 16, input_size // 32)
        self.anchor_scales = tuple(f * input_size for f in anchor_fractions)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = channels
        self.conv1 = Conv2dLayer(self.store, "conv1", 1, c1, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2dLayer(self.store, "conv2", c1, c2, 3, padding=1, rng=rng)
        self.conv3 = Conv2dLayer(self.store, "conv3", c2, c3, 3, padding=1, rng=rng)
        self.conv4 = Conv2dLayer(self.store, "conv4", c3, c4, 3, padding=1, rng=rng)
        k = n_classes + 1
        nb = len(ratios)
        self.cls_heads = []
        self.loc_heads = []
        for lvl, ch in enumerate((c2, c3, c4)):
            self.cls_heads.append(
                Conv2dLayer(self.store, f"cls{lvl}", ch, nb * k, 3, padding=1, rng=rng))
            self.loc_heads.append(
                Conv2dLayer(self.store, f"loc{lvl}", ch, nb * 4, 3, padding=1, rng=rng))
        self._cache = None
        self._defaults: DefaultBoxSet | None = None

    def default_boxes(self) -> DefaultBoxSet:
        """Anchors in the network input frame; cached (pure in config)."""
        if self._defaults is None:
            self._defaults = default_boxes_for_patch(
                self.input_size, self.input_size,
                grid_sizes=self.grid_sizes,
                scales=self.anchor_scales,
                ratios=self.ratios,
            )
        return self._defaults

    @property
    def n_boxes(self) -> int:
        return len(self.default_boxes().boxes)

    def forward(self, x: np.ndarray):
        """[N,1,S,S] -> (logits [N,A,K+1], offsets [N,A,4])."""
        if x.ndim != 4 or x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ShapeMismatchError(
                f"expected [N,1,{self.input_size},{self.input_size}], got {x.shape}")
        acts = {}
        h = x
        feats = []
        for i, conv in enumerate((self.conv1, self.conv2, self.conv3, self.conv4), start=1):
            a = conv.forward(h)
            r = relu(a)
            p = max_pool2d(r)
            acts[f"a{i}"], acts[f"r{i}"], acts[f"p{i}"] = a, r, p
            h = p
            if i >= 2:
                feats.append(p)
        k = self.n_classes + 1
        logits_parts, locs_parts, level_shapes = [], [], []
        for lvl, f in enumerate(feats):
            cl = self.cls_heads[lvl].forward(f)
            lo = self.loc_heads[lvl].forward(f)
            level_shapes.append(f.shape[2:])
            logits_parts.append(_reshape_head(cl, k))
            locs_parts.append(_reshape_head(lo, 4))
        logits = np.concatenate(logits_parts, axis=1)
        offsets = np.concatenate(locs_parts, axis=1)
        self._cache = (acts, feats, level_shapes)
        return logits, offsets

    def backward(self, grad_logits: np.ndarray, grad_offsets: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; returns grad w.r.t. the input batch."""
        if self._cache is None:
            raise RuntimeError("backward before forward")
        acts, feats, level_shapes = self._cache
        k = self.n_classes + 1
        nb = len(self.ratios)
        feat_grads = [np.zeros_like(f) for f in feats]
        start = 0
        for lvl, (gh, gw) in enumerate(level_shapes):
            count = gh * gw * nb
            gl = _reshape_head_back(grad_logits[:, start : start + count], gh, gw, k)
            go = _reshape_head_back(grad_offsets[:, start : start + count], gh, gw, 4)
            feat_grads[lvl] += self.cls_heads[lvl].backward(gl)
            feat_grads[lvl] += self.loc_heads[lvl].backward(go)
            start += count
        convs = (self.conv1, self.conv2, self.conv3, self.conv4)
        grad = feat_grads[2]
        for i in range(4, 0, -1):
            if i in (2, 3):
                grad = grad + feat_grads[i - 2]
            grad = max_pool2d_backward(acts[f"r{i}"], grad)
            grad = relu_backward(acts[f"a{i}"], grad)
            grad = convs[i - 1].backward(grad)
        self._cache = None
        return grad


# -- patch selection ---------------------------------------------------------------


@dataclass
class PatchVerdict:
    """Stage-1 decision for one patch, in original-image coordinates."""

    patch: Box
    defect_score: float
    selected: bool
    detections: list[tuple[Box, int, float]] = field(default_factory=list)


def _patch_detections(model: SSDNet, logits: np.ndarray, offsets: np.ndarray,
                      nms_threshold: float, top_k: int = 100):
    """Per-patch decode + NMS; returns [(box in net-input frame, class, score)]."""
    defaults = model.default_boxes()
    probs = softmax(logits)
    fg = probs[:, 1:]
    best_class = fg.argmax(axis=1)
    best_score = fg[np.arange(len(fg)), best_class]
    order = np.argsort(-best_score, kind="stable")[:top_k]
    scored = []
    for i in order:
        box = decode_offsets(offsets[i], defaults.boxes[i])
        box = box.clip(model.input_size, model.input_size)
        if box.width <= 0.0 or box.height <= 0.0:
            continue
        scored.append((box, float(best_score[i]), int(best_class[i]) + 1))
    kept = nms([(b, s) for b, s, _ in scored], nms_threshold)
    return [(scored[i][0], scored[i][2], scored[i][1]) for i in kept]


def select_patches(
    image: np.ndarray,
    model: SSDNet,
    slicing: SlicingConfig | None = None,
    working_size: int = 512,
    selection_threshold: float = 0.5,
    nms_threshold: float = 0.45,
    batch_size: int = 64,
) -> list[PatchVerdict]:
    """Slice the working image and score every patch with the screener.

    A patch's defect score is its best post-NMS detection score; the verdict
    is pure per patch, so evaluation order never changes the output.
    """
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    working = preprocess(arr, working_size)
    grid = slice_image((working_size, working_size), slicing or SlicingConfig())
    fx = working_size / w
    fy = working_size / h
    s = model.input_size

    crops = [crop_resize(working, box, s)[0] for box, _, _ in grid.patches]
    verdicts: list[PatchVerdict] = []
    for lo in range(0, len(crops), batch_size):
        chunk = np.stack(crops[lo : lo + batch_size])
        logits, offsets = model.forward(chunk)
        for j in range(chunk.shape[0]):
            box = grid.patches[lo + j][0]
            dets = _patch_detections(model, logits[j], offsets[j], nms_threshold)
            score = max((d[2] for d in dets), default=0.0)
            sx, sy = box.width / s, box.height / s
            mapped = [
                (
                    Box(
                        (b.x_min * sx + box.x_min) / fx,
                        (b.y_min * sy + box.y_min) / fy,
                        (b.x_max * sx + box.x_min) / fx,
                        (b.y_max * sy + box.y_min) / fy,
                    ),
                    cls,
                    sc,
                )
                for b, cls, sc in dets
            ]
            verdicts.append(
                PatchVerdict(
                    patch=Box(box.x_min / fx, box.y_min / fy, box.x_max / fx, box.y_max / fy),
                    defect_score=score,
                    selected=score >= selection_threshold,
                    detections=mapped,
                )
            )
    return verdicts
