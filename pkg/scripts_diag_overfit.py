"""Single-patch overfit probe for stage 2: can the RPN + heads lock onto one
defect at all, and is grad clipping binding?"""
import numpy as np

from defectforge.geometry import Box, jaccard
from defectforge.pipeline import sgd_step
from defectforge.segmenter import (SegmenterConfig, SegmenterNet, rpn_propose,
                                   select_rois, segment_patch, stage2_training_step)

CFG = SegmenterConfig(input_size=128, channels=(8, 12, 16, 16), fpn_channels=8,
                      roi_size=7, mask_roi_size=14, roi_hidden=32, mask_channels=8,
                      ratios=(1.0,), rpn_top_k=32, rpn_pre_nms_k=32, seed=0)

rng = np.random.default_rng(4)
patch = rng.normal(0.12, 0.02, size=(1, 1, 128, 128))
patch[0, 0, 50:75, 40:70] = rng.normal(0.8, 0.03, size=(25, 30))
gt = [(Box(40.0, 50.0, 70.0, 75.0), 1)]
mask = np.zeros((128, 128))
mask[50:75, 40:70] = 1.0


def best_prop_iou(model):
    pyr = model.forward_pyramid(patch, train=False)
    props = rpn_propose(pyr, model.anchors(), model.rpn, 128,
                        nms_threshold=CFG.rpn_nms_threshold,
                        top_k=CFG.rpn_top_k, pre_nms_k=CFG.rpn_pre_nms_k)
    if not props:
        return 0.0, 0
    return max(jaccard(p.box, gt[0][0]) for p in props), len(props)


def run(tag, steps, lr, mom, clip):
    model = SegmenterNet(CFG)
    for k, aset in enumerate(model.anchors()):
        best = max(jaccard(b, gt[0][0]) for b in aset.boxes)
        if tag.endswith("first"):
            print(f"  level {k}: {len(aset.boxes)} anchors, best IoU {best:.3f}")
    velocity = {}
    for it in range(steps):
        model.store.zero_grad()
        step = stage2_training_step(model, patch, gt, mask, neg_pos_ratio=3,
                                    max_rois=16, match_threshold=0.35)
        norm = model.store.clip_grads(clip)
        sgd_step(model.store, lr, mom, velocity)
        if it % 25 == 0 or it == steps - 1:
            bi, np_ = best_prop_iou(model)
            b = step.breakdown
            print(f"{tag} it{it:3d}: cls={b.l_cls:.3f} loc={b.l_loc:.3f} "
                  f"pat={b.l_pat:.3f} rpn={step.rpn_loss:.3f} "
                  f"|g|={norm:6.1f} bestIoU={bi:.3f} props={np_} pos={step.n_pos_rois}")
    seg = segment_patch(patch, model)
    pred = seg.binarized(0.5)
    inter = np.logical_and(pred, mask > 0.5).sum()
    union = np.logical_or(pred, mask > 0.5).sum()
    print(f"{tag} final mask IoU on this patch: {inter / union if union else 0.0:.3f}, "
          f"dets={len(seg.detections)}")


run("lr.02m.9 first", 200, 0.02, 0.9, 5.0)
run("lr.10m.0", 200, 0.10, 0.0, 5.0)
