"""End-to-end orchestration: train both stages, inspect whole images, and
score a trained pipeline on a dataset.

The screener and segmenter never see full images. Everything here works in
three coordinate frames: the original raster, the square working frame it is
resized into, and the fixed net-input frame of each cropped patch. Patch grids
are deterministic in the working frame, so a grid computed once lines up with
the verdicts `select_patches` returns for the same image.
"""

from __future__ import annotations

import dataclasses
import os
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, config_field_types
from .data import DatasetRecord, load_checkpoint, rle_encode, save_checkpoint
from .evaluate import EvalItem, EvalReport, build_report
from .geometry import Box, SlicingConfig, slice_image
from .layers import ParamStore
from .screening import (
    PatchVerdict,
    SSDNet,
    background_ce,
    crop_resize,
    match,
    multibox_loss,
    multibox_loss_backward,
    preprocess,
    select_patches,
)
from .segmenter import SegmenterConfig, SegmenterNet, segment_patch, stage2_training_step
from .tensor import Tensor, bilinear_resize

_CONFIG_PREFIX = "config."
_STAGE1_PREFIX = "stage1."
_STAGE2_PREFIX = "stage2."


def worker_count(n_items: int | None = None) -> int:
    """Worker cap for parallel patch work.

    DEFECT_FORGE_THREADS overrides the default (cpu count, capped at 8);
    the count never exceeds the number of items to process.
    """
    raw = os.environ.get("DEFECT_FORGE_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(
                f"DEFECT_FORGE_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(f"DEFECT_FORGE_THREADS must be >= 1, got {n}")
    else:
        n = min(os.cpu_count() or 1, 8)
    if n_items is not None:
        n = max(1, min(n, n_items))
    return n


# -- model construction -------------------------------------------------------


def build_stage1(config: PipelineConfig) -> SSDNet:
    return SSDNet(
        input_size=config.stage1_input,
        n_classes=1,
        channels=tuple(config.stage1_channels),
        ratios=tuple(config.ratios),
        seed=config.seed,
    )


def build_stage2(config: PipelineConfig) -> SegmenterNet:
    cfg = SegmenterConfig(
        input_size=config.stage2_input,
        n_classes=1,
        channels=tuple(config.stage2_channels),
        fpn_channels=config.fpn_channels,
        roi_size=config.roi_size,
        mask_roi_size=config.mask_roi_size,
        roi_hidden=config.roi_hidden,
        mask_channels=config.mask_channels,
        ratios=tuple(config.ratios),
        rpn_nms_threshold=config.rpn_nms_threshold,
        rpn_top_k=config.rpn_top_k,
        rpn_pre_nms_k=config.rpn_pre_nms_k,
        samples_per_bin=config.samples_per_bin,
        detection_threshold=config.detection_threshold,
        seed=config.seed,
    )
    return SegmenterNet(cfg)


def slicing_config(config: PipelineConfig) -> SlicingConfig:
    return SlicingConfig(
        scales=tuple(config.scales),
        ratios=tuple(config.ratios),
        stride_fraction=config.stride_fraction,
    )


@dataclass
class Pipeline:
    """A config plus whichever stage models exist (either may be absent)."""

    config: PipelineConfig
    stage1: SSDNet | None = None
    stage2: SegmenterNet | None = None


# -- checkpoints ---------------------------------------------------------------


def save_pipeline(pipeline: Pipeline, path: str | Path) -> None:
    """One flat checkpoint: config scalars plus per-stage parameter blocks."""
    entries: dict[str, Tensor] = {}
    for name in config_field_types():
        value = getattr(pipeline.config, name)
        entries[_CONFIG_PREFIX + name] = Tensor(np.asarray(value, dtype=np.float64))
    if pipeline.stage1 is not None:
        entries.update(pipeline.stage1.store.export(_STAGE1_PREFIX))
    if pipeline.stage2 is not None:
        entries.update(pipeline.stage2.store.export(_STAGE2_PREFIX))
    save_checkpoint(entries, path)


def _config_from_entries(entries: dict[str, Tensor]) -> PipelineConfig:
    kwargs = {}
    for name, hint in config_field_types().items():
        key = _CONFIG_PREFIX + name
        if key not in entries:
            continue
        data = np.atleast_1d(entries[key].data)
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            kwargs[name] = tuple(item(v) for v in data)
        else:
            kwargs[name] = hint(data[0])
    return PipelineConfig(**kwargs)


def load_pipeline(path: str | Path) -> Pipeline:
    """Rebuild the models a checkpoint holds; missing stages stay None."""
    entries = load_checkpoint(path)
    config = _config_from_entries(entries)
    pipe = Pipeline(config=config)
    if any(k.startswith(_STAGE1_PREFIX) for k in entries):
        pipe.stage1 = build_stage1(config)
        pipe.stage1.store.load(entries, prefix=_STAGE1_PREFIX)
    if any(k.startswith(_STAGE2_PREFIX) for k in entries):
        pipe.stage2 = build_stage2(config)
        pipe.stage2.store.load(entries, prefix=_STAGE2_PREFIX)
    return pipe


# -- shared training plumbing ---------------------------------------------------


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> None:
    """In-place SGD update over every parameter with a gradient.

    With momentum > 0 the caller supplies `velocity`, a name-keyed dict that
    persists across steps and accumulates the heavy-ball average.
    """
    if momentum > 0.0 and velocity is None:
        raise ValueError("momentum needs a velocity dict that outlives the step")
    for name, tensor in store.params.items():
        if tensor.grad is None:
            continue
        if momentum > 0.0:
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(tensor.data)
                velocity[name] = v
            v *= momentum
            v += tensor.grad
            tensor.data -= lr * v
        else:
            tensor.data -= lr * tensor.grad


def _nearest_mask_resize(mask: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Nearest-neighbour resize for boolean masks (no interpolation halo)."""
    h, w = mask.shape
    ys = np.clip(np.round((np.arange(oh) + 0.5) * h / oh - 0.5).astype(int), 0, h - 1)
    xs = np.clip(np.round((np.arange(ow) + 0.5) * w / ow - 0.5).astype(int), 0, w - 1)
    return mask[ys][:, xs]


@dataclass
class _WorkingImage:
    """One record mapped into the square working frame."""

    tensor: np.ndarray  # [1,1,S,S]
    mask: np.ndarray  # [S,S] bool
    boxes: list[Box]  # defect boxes, working coordinates


def _to_working(record: DatasetRecord, working_size: int) -> _WorkingImage:
    h, w = record.image.shape[:2]
    fx = working_size / w
    fy = working_size / h
    boxes = [Box(b.x_min * fx, b.y_min * fy, b.x_max * fx, b.y_max * fy)
             for b in record.boxes]
    return _WorkingImage(
        tensor=preprocess(record.image, working_size),
        mask=_nearest_mask_resize(record.mask, working_size, working_size),
        boxes=boxes,
    )


def _gt_in_patch(boxes: list[Box], patch: Box, out_size: int,
                 min_side: float = 2.0,
                 mask: np.ndarray | None = None) -> list[tuple[Box, int]]:
    """Defect boxes clipped to a patch and mapped to its net-input frame.

    Boxes that survive as slivers thinner than min_side pixels are dropped;
    they carry no learnable extent at patch resolution. With a working-frame
    mask, clipped boxes holding no defect pixels are dropped too: the corner
    of a diagonal defect's bounding box can cover patch area the defect
    never touches, and such boxes would be pure label noise.
    """
    sx = out_size / patch.width
    sy = out_size / patch.height
    kept = []
    for b in boxes:
        x0 = max(b.x_min, patch.x_min)
        y0 = max(b.y_min, patch.y_min)
        x1 = min(b.x_max, patch.x_max)
        y1 = min(b.y_max, patch.y_max)
        if x1 <= x0 or y1 <= y0:
            continue
        if mask is not None and not mask[
                int(y0):int(np.ceil(y1)), int(x0):int(np.ceil(x1))].any():
            continue
        mapped = Box((x0 - patch.x_min) * sx, (y0 - patch.y_min) * sy,
                     (x1 - patch.x_min) * sx, (y1 - patch.y_min) * sy)
        if mapped.width < min_side or mapped.height < min_side:
            continue
        kept.append((mapped, 1))
    return kept


def _mask_in_patch(mask: np.ndarray, patch: Box, out_size: int) -> np.ndarray:
    y0, y1 = int(patch.y_min), int(patch.y_max)
    x0, x1 = int(patch.x_min), int(patch.x_max)
    crop = mask[y0:y1, x0:x1]
    return _nearest_mask_resize(crop, out_size, out_size).astype(np.float64)


def _sample_patches(grid_boxes: list[Box], working: _WorkingImage, out_size: int,
                    count: int, rng: np.random.Generator) -> list[int]:
    """Pick patch indices for one training image, defect-heavy but mixed.

    Half the budget goes to patches whose mapped ground truth is non-empty
    (when any exist), the rest to clean patches so the background class and
    the empty mask are trained too.
    """
    defective, clean = [], []
    for i, box in enumerate(grid_boxes):
        if _gt_in_patch(working.boxes, box, out_size, mask=working.mask):
            defective.append(i)
        else:
            clean.append(i)
    rng.shuffle(defective)
    rng.shuffle(clean)
    n_def = min(len(defective), max(1, count // 2) if clean else count)
    n_clean = min(len(clean), count - n_def)
    spare = count - n_def - n_clean
    if spare > 0:
        n_def = min(len(defective), n_def + spare)
    return defective[:n_def] + clean[:n_clean]


# -- stage-1 training -----------------------------------------------------------


def train_stage1(records: list[DatasetRecord], config: PipelineConfig,
                 log=None) -> tuple[SSDNet, list[dict[str, float]]]:
    """Train the patch screener; returns the model and per-epoch mean losses.

    Each image contributes a sampled batch of patches per epoch; negatives
    are mined per patch from the confidence loss under the background label.
    """
    if not records:
        raise ValueError("cannot train on an empty record list")
    model = build_stage1(config)
    defaults = model.default_boxes()
    grid = slice_image((config.working_size, config.working_size), slicing_config(config))
    grid_boxes = grid.boxes()
    rng = np.random.default_rng(config.seed)
    s = config.stage1_input
    velocity: dict[str, np.ndarray] = {}
    history: list[dict[str, float]] = []
    for epoch in range(config.stage1_epochs):
        order = rng.permutation(len(records))
        sums = {"conf": 0.0, "loc": 0.0, "total": 0.0}
        n_steps = 0
        for ri in order:
            working = _to_working(records[ri], config.working_size)
            picks = _sample_patches(grid_boxes, working, s, config.stage1_patches, rng)
            if not picks:
                continue
            crops = np.concatenate(
                [crop_resize(working.tensor, grid_boxes[i], s) for i in picks])
            logits, offsets = model.forward(crops)
            grad_logits = np.zeros_like(logits)
            grad_offsets = np.zeros_like(offsets)
            batch = {"conf": 0.0, "loc": 0.0, "total": 0.0}
            for j, i in enumerate(picks):
                gt = _gt_in_patch(working.boxes, grid_boxes[i], s, mask=working.mask)
                assignment = match(defaults, gt, threshold=config.match_threshold,
                                   neg_pos_ratio=config.neg_pos_ratio,
                                   background_loss=background_ce(logits[j]))
                loss = multibox_loss(assignment, logits[j], offsets[j], alpha=config.alpha)
                gl, go = multibox_loss_backward(assignment, logits[j], offsets[j],
                                                alpha=config.alpha)
                grad_logits[j] = gl / len(picks)
                grad_offsets[j] = go / len(picks)
                denom = max(assignment.n, 1)
                batch["conf"] += loss.conf / denom / len(picks)
                batch["loc"] += loss.loc / denom / len(picks)
                batch["total"] += loss.total / len(picks)
            model.store.zero_grad()
            model.backward(grad_logits, grad_offsets)
            model.store.clip_grads(config.grad_clip)
            sgd_step(model.store, config.stage1_lr, config.momentum, velocity)
            for k in sums:
                sums[k] += batch[k]
            n_steps += 1
        epoch_mean = {k: v / max(n_steps, 1) for k, v in sums.items()}
        history.append(epoch_mean)
        if log is not None:
            log(f"stage1 epoch {epoch + 1}/{config.stage1_epochs} "
                f"conf={epoch_mean['conf']:.4f} loc={epoch_mean['loc']:.4f} "
                f"total={epoch_mean['total']:.4f}")
    return model, history


# -- stage-2 training -----------------------------------------------------------


def train_stage2(records: list[DatasetRecord], config: PipelineConfig,
                 log=None) -> tuple[SegmenterNet, list[dict[str, float]]]:
    """Train the patch segmenter on sampled patches; returns per-epoch means.

    The log line carries the combined breakdown (l_cls, l_loc, l_pat, total)
    plus the auxiliary proposal-head loss, which trains alongside but is not
    part of the combined objective.
    """
    if not records:
        raise ValueError("cannot train on an empty record list")
    model = build_stage2(config)
    grid = slice_image((config.working_size, config.working_size), slicing_config(config))
    grid_boxes = grid.boxes()
    rng = np.random.default_rng(config.seed + 1)
    s = config.stage2_input
    velocity: dict[str, np.ndarray] = {}
    history: list[dict[str, float]] = []
    for epoch in range(config.stage2_epochs):
        order = rng.permutation(len(records))
        sums = {"l_cls": 0.0, "l_loc": 0.0, "l_pat": 0.0, "total": 0.0, "rpn": 0.0}
        n_steps = 0
        for ri in order:
            working = _to_working(records[ri], config.working_size)
            picks = _sample_patches(grid_boxes, working, s, config.stage2_patches, rng)
            for i in picks:
                box = grid_boxes[i]
                patch = crop_resize(working.tensor, box, s)
                gt = _gt_in_patch(working.boxes, box, s, mask=working.mask)
                gt_mask = _mask_in_patch(working.mask, box, s)
                if not gt:
                    gt_mask = np.zeros((s, s))  # clean patch: train the empty mask
                model.store.zero_grad()
                step = stage2_training_step(
                    model, patch, gt, gt_mask,
                    neg_pos_ratio=config.neg_pos_ratio, max_rois=config.max_rois,
                    match_threshold=config.match_threshold)
                model.store.clip_grads(config.grad_clip)
                sgd_step(model.store, config.stage2_lr, config.momentum, velocity)
                sums["l_cls"] += step.breakdown.l_cls
                sums["l_loc"] += step.breakdown.l_loc
                sums["l_pat"] += step.breakdown.l_pat
                sums["total"] += step.breakdown.total
                sums["rpn"] += step.rpn_loss
                n_steps += 1
        epoch_mean = {k: v / max(n_steps, 1) for k, v in sums.items()}
        history.append(epoch_mean)
        if log is not None:
            log(f"stage2 epoch {epoch + 1}/{config.stage2_epochs} "
                f"l_cls={epoch_mean['l_cls']:.4f} l_loc={epoch_mean['l_loc']:.4f} "
                f"l_pat={epoch_mean['l_pat']:.4f} total={epoch_mean['total']:.4f} "
                f"rpn={epoch_mean['rpn']:.4f}")
    return model, history


def train_pipeline(records: list[DatasetRecord], config: PipelineConfig,
                   stage: str = "both", log=None) -> Pipeline:
    """Train the requested stages ("1", "2", or "both") into a Pipeline."""
    if stage not in ("1", "2", "both"):
        raise ValueError(f"stage must be '1', '2' or 'both', got {stage!r}")
    pipe = Pipeline(config=config)
    if stage in ("1", "both"):
        pipe.stage1, _ = train_stage1(records, config, log=log)
    if stage in ("2", "both"):
        pipe.stage2, _ = train_stage2(records, config, log=log)
    return pipe


# -- whole-image inspection -------------------------------------------------------


@dataclass
class InspectionResult:
    """Everything one image inspection produced, in original coordinates."""

    image_size: tuple[int, int]  # (H, W)
    verdicts: list[PatchVerdict]
    detections: list[tuple[Box, int, float]]
    mask: np.ndarray  # [H,W] float64 probabilities
    timings: dict[str, float]
    used_stage1: bool
    mask_threshold: float = 0.5

    @property
    def patch_count(self) -> int:
        return len(self.verdicts)

    @property
    def selected_count(self) -> int:
        return sum(1 for v in self.verdicts if v.selected)

    def binarized(self, threshold: float | None = None) -> np.ndarray:
        return self.mask >= (self.mask_threshold if threshold is None else threshold)

    def to_dict(self) -> dict:
        h, w = self.image_size
        return {
            "image": {"height": h, "width": w},
            "used_stage1": self.used_stage1,
            "patch_count": self.patch_count,
            "selected_count": self.selected_count,
            "patches": [
                {
                    "box": _box_list(v.patch),
                    "score": float(v.defect_score),
                    "selected": bool(v.selected),
                }
                for v in self.verdicts
            ],
            "detections": [
                {"box": _box_list(b), "class_id": int(c), "score": float(s)}
                for b, c, s in self.detections
            ],
            "mask": {
                "height": h,
                "width": w,
                "threshold": float(self.mask_threshold),
                "rle": rle_encode(self.binarized()),
            },
            "timings": {k: float(v) for k, v in self.timings.items()},
        }


def _box_list(box: Box) -> list[float]:
    return [float(box.x_min), float(box.y_min), float(box.x_max), float(box.y_max)]


def inspect_image(image: np.ndarray, pipeline: Pipeline,
                  skip_stage1: bool = False) -> InspectionResult:
    """Two-stage inspection of one RGB (or grayscale) raster.

    Stage 1 picks suspect patches; stage 2 segments each selected patch and
    the per-patch masks are pasted back, max-combined where patches overlap.
    With skip_stage1 (or no stage-1 model) every grid patch goes to stage 2.
    """
    if pipeline.stage2 is None:
        raise ValueError("inspection needs a trained stage-2 model")
    cfg = pipeline.config
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    t0 = time.perf_counter()

    working = preprocess(arr, cfg.working_size)
    slicing = slicing_config(cfg)
    grid = slice_image((cfg.working_size, cfg.working_size), slicing)
    grid_boxes = grid.boxes()
    fx = cfg.working_size / w
    fy = cfg.working_size / h

    use_stage1 = pipeline.stage1 is not None and not skip_stage1
    if use_stage1:
        verdicts = select_patches(
            arr, pipeline.stage1, slicing,
            working_size=cfg.working_size,
            selection_threshold=cfg.selection_threshold,
            nms_threshold=cfg.nms_threshold,
        )
        if len(verdicts) != len(grid_boxes):
            raise RuntimeError(
                f"patch grid drifted: {len(verdicts)} verdicts for {len(grid_boxes)} patches")
    else:
        # no screening: every patch is selected, score is not a judgement
        verdicts = [
            PatchVerdict(
                patch=Box(b.x_min / fx, b.y_min / fy, b.x_max / fx, b.y_max / fy),
                defect_score=1.0,
                selected=True,
            )
            for b in grid_boxes
        ]
    t1 = time.perf_counter()

    selected = [i for i, v in enumerate(verdicts) if v.selected]
    s = cfg.stage2_input
    crops = [crop_resize(working, grid_boxes[i], s) for i in selected]
    workers = worker_count(len(crops))
    if crops and workers > 1:
        pipeline.stage2.anchors()  # warm the cache before sharing the model
        with ThreadPoolExecutor(max_workers=workers) as pool:
            segs = list(pool.map(lambda c: segment_patch(c, pipeline.stage2), crops))
    else:
        segs = [segment_patch(c, pipeline.stage2) for c in crops]

    canvas = np.zeros((cfg.working_size, cfg.working_size))
    detections: list[tuple[Box, int, float]] = []
    for i, seg in zip(selected, segs):
        box = grid_boxes[i]
        y0, y1 = int(box.y_min), int(box.y_max)
        x0, x1 = int(box.x_min), int(box.x_max)
        resized = bilinear_resize(seg.mask[None], y1 - y0, x1 - x0)[0]
        region = canvas[y0:y1, x0:x1]
        np.maximum(region, resized, out=region)
        sx = (x1 - x0) / s
        sy = (y1 - y0) / s
        for b, cls, score in seg.detections:
            detections.append((
                Box((b.x_min * sx + x0) / fx, (b.y_min * sy + y0) / fy,
                    (b.x_max * sx + x0) / fx, (b.y_max * sy + y0) / fy),
                cls, score))
    mask = bilinear_resize(canvas[None], h, w)[0] if (h, w) != canvas.shape else canvas
    t2 = time.perf_counter()

    return InspectionResult(
        image_size=(h, w),
        verdicts=verdicts,
        detections=detections,
        mask=mask,
        timings={"stage1_s": t1 - t0, "stage2_s": t2 - t1, "total_s": t2 - t0},
        used_stage1=use_stage1,
        mask_threshold=cfg.mask_threshold,
    )


# -- overlay rendering ------------------------------------------------------------

_MASK_COLOR = np.array([220, 40, 40], dtype=np.float64)
_PATCH_COLOR = np.array([40, 200, 80], dtype=np.float64)
_DET_COLOR = np.array([60, 120, 235], dtype=np.float64)


def _draw_box(canvas: np.ndarray, box: Box, color: np.ndarray, width: int) -> None:
    h, w = canvas.shape[:2]
    x0 = int(np.clip(round(box.x_min), 0, w - 1))
    x1 = int(np.clip(round(box.x_max), x0 + 1, w))
    y0 = int(np.clip(round(box.y_min), 0, h - 1))
    y1 = int(np.clip(round(box.y_max), y0 + 1, h))
    t = max(1, width)
    canvas[y0:min(y0 + t, y1), x0:x1] = color
    canvas[max(y1 - t, y0):y1, x0:x1] = color
    canvas[y0:y1, x0:min(x0 + t, x1)] = color
    canvas[y0:y1, max(x1 - t, x0):x1] = color


def render_overlay(image: np.ndarray, result: InspectionResult,
                   alpha: float = 0.45) -> np.ndarray:
    """RGB overlay: defect mask blended in red, selected patches outlined in
    green, stage-2 detection boxes in blue."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    base = arr[:, :, :3].astype(np.float64)
    if base.max() <= 1.0:
        base = base * 255.0
    hot = result.binarized()
    base[hot] = (1.0 - alpha) * base[hot] + alpha * _MASK_COLOR
    for v in result.verdicts:
        if v.selected:
            _draw_box(base, v.patch, _PATCH_COLOR, width=2)
    for box, _, _ in result.detections:
        _draw_box(base, box, _DET_COLOR, width=1)
    return np.clip(np.round(base), 0, 255).astype(np.uint8)


# -- dataset-scale scoring ----------------------------------------------------------


def evaluate_pipeline(records: list[DatasetRecord], pipeline: Pipeline,
                      skip_stage1: bool = False, log=None) -> EvalReport:
    """Inspect every record and fold the results into an EvalReport."""
    items = []
    for record in records:
        result = inspect_image(record.image, pipeline, skip_stage1=skip_stage1)
        items.append(EvalItem(
            name=record.name,
            pred_mask=result.binarized(),
            gt_mask=record.mask,
            runtime_s=result.timings["total_s"],
            patch_boxes=[v.patch for v in result.verdicts],
        ))
        if log is not None:
            log(f"eval {record.name}: {result.selected_count}/{result.patch_count} "
                f"patches, {len(result.detections)} detections")
    return build_report(items)


def train_and_score(train_records: list[DatasetRecord],
                    test_records: list[DatasetRecord],
                    config: PipelineConfig, seed: int) -> float:
    """Train both stages from scratch and return mean pixel accuracy on the
    held-out records. This is the scoring hook the dataset-scale sweep uses."""
    cfg = dataclasses.replace(config, seed=seed)
    pipe = train_pipeline(train_records, cfg, stage="both")
    report = evaluate_pipeline(test_records, pipe)
    return report.mean_pixel_acc
