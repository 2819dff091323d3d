"""Inspect what segment_patch actually emits after brief training."""
import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.geometry import slice_image
from defectforge.pipeline import (_gt_in_patch, _mask_in_patch, _sample_patches,
                                  _to_working, build_stage2, sgd_step,
                                  slicing_config)
from defectforge.screening import crop_resize
from defectforge.segmenter import segment_patch, stage2_training_step

CFG = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage2_input=128, stage2_channels=(8, 12, 16, 16),
    fpn_channels=8, roi_size=7, mask_roi_size=14, roi_hidden=32, mask_channels=8,
    rpn_top_k=32, rpn_pre_nms_k=32, max_rois=16, stage2_patches=4,
    match_threshold=0.35, stage2_lr=0.02, momentum=0.0, seed=0)

SPEC = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(SPEC, 130)
train, test = records[:100], records[100:112]

grid_boxes = slice_image((256, 256), slicing_config(CFG)).boxes()
model = build_stage2(CFG)
rng = np.random.default_rng(1)
velocity = {}
for ep in range(2):
    for ri in rng.permutation(len(train)):
        working = _to_working(train[ri], 256)
        for i in _sample_patches(grid_boxes, working, 128, 4, rng):
            box = grid_boxes[i]
            patch = crop_resize(working.tensor, box, 128)
            gt = _gt_in_patch(working.boxes, box, 128)
            gt_mask = _mask_in_patch(working.mask, box, 128)
            if not gt:
                gt_mask = np.zeros((128, 128))
            model.store.zero_grad()
            stage2_training_step(model, patch, gt, gt_mask,
                                 neg_pos_ratio=CFG.neg_pos_ratio,
                                 max_rois=CFG.max_rois,
                                 match_threshold=CFG.match_threshold)
            model.store.clip_grads(CFG.grad_clip)
            sgd_step(model.store, CFG.stage2_lr, CFG.momentum, velocity)
    print(f"epoch {ep + 1} done", flush=True)

shown = 0
for rec in test:
    working = _to_working(rec, 256)
    for box in grid_boxes:
        gt = _gt_in_patch(working.boxes, box, 128)
        if not gt or shown >= 10:
            continue
        patch = crop_resize(working.tensor, box, 128)
        gt_mask = _mask_in_patch(working.mask, box, 128) > 0.5
        seg = segment_patch(patch, model)
        pred = seg.binarized(0.5)
        inter = np.logical_and(pred, gt_mask).sum()
        union = np.logical_or(pred, gt_mask).sum()
        iou = inter / union if union else 1.0
        print(f"gt={[f'({b.x_min:.0f},{b.y_min:.0f},{b.x_max:.0f},{b.y_max:.0f})' for b, _ in gt]} "
              f"gtpx={gt_mask.sum()} predpx={pred.sum()} inter={inter} IoU={iou:.3f}")
        print(f"  mask probs: min={seg.mask.min():.3f} max={seg.mask.max():.3f}")
        for b, cls, score in seg.detections[:4]:
            print(f"  det cls={cls} score={score:.3f} "
                  f"box=({b.x_min:.0f},{b.y_min:.0f},{b.x_max:.0f},{b.y_max:.0f})")
        shown += 1
