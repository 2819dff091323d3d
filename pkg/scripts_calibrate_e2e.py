"""Calibration run for the end-to-end acceptance configuration (throwaway)."""
import dataclasses
import time
import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.evaluate import mask_iou
from defectforge.geometry import slice_image
from defectforge.pipeline import (
    _gt_in_patch, _mask_in_patch, _to_working,
    evaluate_pipeline, inspect_image, slicing_config,
    train_stage1, train_stage2, Pipeline,
)
from defectforge.screening import crop_resize, select_patches
from defectforge.segmenter import segment_patch

CFG = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage1_channels=(8, 16, 24, 32),
    stage1_epochs=4, stage1_lr=0.05, stage1_patches=10,
    stage2_input=128, stage2_channels=(8, 12, 16, 16), fpn_channels=8,
    roi_size=7, mask_roi_size=14, roi_hidden=32, mask_channels=8,
    rpn_top_k=32, rpn_pre_nms_k=32, max_rois=16,
    stage2_epochs=5, stage2_lr=0.02, stage2_patches=4,
    seed=0,
)

spec = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 3), area_fraction=0.05, seed=11)
records = generate_synthetic(spec, 250)
train = records[:200]
test = [dataclasses.replace(r, split="test") for r in records[200:]]
print("defect images:", sum(r.has_defect for r in records), "/ 250", flush=True)

t0 = time.perf_counter()
s1, h1 = train_stage1(train, CFG, log=print)
t1 = time.perf_counter()
s2, h2 = train_stage2(train, CFG, log=print)
t2 = time.perf_counter()
print(f"train time: stage1 {t1-t0:.0f}s stage2 {t2-t1:.0f}s total {t2-t0:.0f}s", flush=True)

pipe = Pipeline(CFG, s1, s2)
grid = slice_image((CFG.working_size,) * 2, slicing_config(CFG))
boxes = grid.boxes()

# patch-selection accuracy
t3 = time.perf_counter()
n_ok = n_tot = 0
n_pos = 0
tp = fp = fn = 0
for rec in test:
    working = _to_working(rec, CFG.working_size)
    verdicts = select_patches(rec.image, s1, slicing_config(CFG), CFG.working_size,
                              CFG.selection_threshold, CFG.nms_threshold)
    for v, b in zip(verdicts, boxes):
        gt_pos = bool(_gt_in_patch(working.boxes, b, CFG.stage2_input))
        n_pos += gt_pos
        n_ok += (v.selected == gt_pos)
        tp += (v.selected and gt_pos); fp += (v.selected and not gt_pos); fn += (gt_pos and not v.selected)
        n_tot += 1
print(f"patch acc: {n_ok/n_tot:.4f} ({n_ok}/{n_tot}, {n_pos} positive; tp={tp} fp={fp} fn={fn})", flush=True)

# stage-2 mean mask IoU on defective patches
ious = []
for rec in test:
    working = _to_working(rec, CFG.working_size)
    for b in boxes:
        if not _gt_in_patch(working.boxes, b, CFG.stage2_input):
            continue
        patch = crop_resize(working.tensor, b, CFG.stage2_input)
        seg = segment_patch(patch, s2)
        gtm = _mask_in_patch(working.mask, b, CFG.stage2_input) > 0.5
        ious.append(mask_iou(seg.binarized(CFG.mask_threshold), gtm))
print(f"mean mask IoU over {len(ious)} defective patches: {np.mean(ious):.4f} "
      f"(p10 {np.percentile(ious,10):.3f} med {np.median(ious):.3f})", flush=True)

# pixel ACC full pipeline
report = evaluate_pipeline(test, pipe)
print(f"pixel ACC {report.mean_pixel_acc:.4f} patch-metric {report.mean_patch_acc:.4f} "
      f"image {report.image_acc:.4f} runtime/img {report.mean_runtime_s*1000:.0f}ms", flush=True)
print(f"eval time: {time.perf_counter()-t3:.0f}s", flush=True)

# speed arms on 20 defect-sparse images
sparse = generate_synthetic(SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                                          defect_count=(0, 1), area_fraction=0.02, seed=77), 20)
print("sparse defect images:", sum(r.has_defect for r in sparse), "/ 20", flush=True)
t0 = time.perf_counter()
for r in sparse:
    inspect_image(r.image, pipe)
a = time.perf_counter() - t0
t0 = time.perf_counter()
for r in sparse:
    inspect_image(r.image, pipe, skip_stage1=True)
b = time.perf_counter() - t0
print(f"speed: stage1 {a:.1f}s vs skip {b:.1f}s (ratio {b/a:.2f}x)", flush=True)
