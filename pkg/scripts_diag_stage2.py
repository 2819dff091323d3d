"""Stage-2 recipe check on real synthetic data after the head-init fix."""
import time
from dataclasses import replace

import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.geometry import jaccard, slice_image
from defectforge.pipeline import (_gt_in_patch, _mask_in_patch, _sample_patches,
                                  _to_working, build_stage2, sgd_step,
                                  slicing_config)
from defectforge.screening import crop_resize
from defectforge.segmenter import rpn_propose, segment_patch, stage2_training_step

BASE = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage2_input=128, stage2_channels=(8, 12, 16, 16),
    fpn_channels=8, roi_size=7, mask_roi_size=14, roi_hidden=32, mask_channels=8,
    rpn_top_k=32, rpn_pre_nms_k=32, max_rois=16, stage2_patches=4,
    match_threshold=0.35, seed=0)

SPEC = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(SPEC, 150)
train, test = records[:100], records[100:130]

grid = slice_image((256, 256), slicing_config(BASE))
grid_boxes = grid.boxes()

eval_patches = []
for rec in test:
    working = _to_working(rec, 256)
    for box in grid_boxes:
        gt = _gt_in_patch(working.boxes, box, 128, mask=working.mask)
        if gt:
            patch = crop_resize(working.tensor, box, 128)
            gt_mask = _mask_in_patch(working.mask, box, 128) > 0.5
            eval_patches.append((patch, gt, gt_mask))
print(f"eval patches: {len(eval_patches)}")


def probe(model, cfg):
    ious, best_props, dets = [], [], 0
    for patch, gt, gt_mask in eval_patches:
        seg = segment_patch(patch, model)
        pred = seg.binarized(cfg.mask_threshold)
        union = np.logical_or(pred, gt_mask).sum()
        ious.append(np.logical_and(pred, gt_mask).sum() / union if union else 1.0)
        dets += len(seg.detections)
        pyr = model.forward_pyramid(patch, train=False)
        props = rpn_propose(pyr, model.anchors(), model.rpn, 128,
                            nms_threshold=cfg.rpn_nms_threshold,
                            top_k=cfg.rpn_top_k, pre_nms_k=cfg.rpn_pre_nms_k)
        for b, _ in gt:
            best_props.append(max((jaccard(p.box, b) for p in props), default=0.0))
    return (float(np.mean(ious)), float(np.median(ious)),
            float(np.mean(best_props)), dets / len(eval_patches))


def run(tag, epochs, lr, mom):
    cfg = replace(BASE, stage2_lr=lr, momentum=mom, stage2_epochs=epochs)
    model = build_stage2(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {}
    t0 = time.time()
    for ep in range(epochs):
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        n = 0
        for ri in order:
            working = _to_working(train[ri], 256)
            for i in _sample_patches(grid_boxes, working, 128, cfg.stage2_patches, rng):
                box = grid_boxes[i]
                patch = crop_resize(working.tensor, box, 128)
                gt = _gt_in_patch(working.boxes, box, 128, mask=working.mask)
                gt_mask = _mask_in_patch(working.mask, box, 128)
                if not gt:
                    gt_mask = np.zeros((128, 128))
                model.store.zero_grad()
                step = stage2_training_step(model, patch, gt, gt_mask,
                                            neg_pos_ratio=cfg.neg_pos_ratio,
                                            max_rois=cfg.max_rois,
                                            match_threshold=cfg.match_threshold)
                model.store.clip_grads(cfg.grad_clip)
                sgd_step(model.store, lr, mom, velocity)
                b = step.breakdown
                sums += (b.l_cls, b.l_loc, b.l_pat, step.rpn_loss)
                n += 1
        m = sums / n
        print(f"{tag} ep{ep + 1}: cls={m[0]:.3f} loc={m[1]:.3f} pat={m[2]:.3f} "
              f"rpn={m[3]:.3f} [{time.time() - t0:.0f}s]", flush=True)
        if (ep + 1) % 3 == 0 or ep == epochs - 1:
            iou_mean, iou_med, prop_iou, dpp = probe(model, cfg)
            print(f"    IoU mean={iou_mean:.3f} med={iou_med:.3f} "
                  f"prop-IoU mean={prop_iou:.3f} dets/patch={dpp:.1f}", flush=True)


run("plain lr0.05 objbias", 15, 0.05, 0.0)
