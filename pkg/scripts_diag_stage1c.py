"""Throwaway: stage-1 arms — long plain SGD, lower match threshold, momentum."""
import time

import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.pipeline import (
    _gt_in_patch, _sample_patches, _to_working, build_stage1, sgd_step,
    slicing_config,
)
from defectforge.geometry import slice_image
from defectforge.screening import (
    background_ce, crop_resize, match, multibox_loss, multibox_loss_backward,
    softmax,
)

BASE = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage1_channels=(8, 16, 24, 32),
    stage1_patches=10, seed=0,
)

spec = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(spec, 150)
train, test = records[:120], records[120:]

grid = slice_image((BASE.working_size, BASE.working_size), slicing_config(BASE))
grid_boxes = grid.boxes()
s = BASE.stage1_input


def run(tag, epochs, lr, mom, match_thr):
    model = build_stage1(BASE)
    defaults = model.default_boxes()
    rng = np.random.default_rng(0)
    velocity = {}
    t0 = time.time()
    for epoch in range(epochs):
        for ri in rng.permutation(len(train)):
            working = _to_working(train[ri], BASE.working_size)
            picks = _sample_patches(grid_boxes, working, s, BASE.stage1_patches, rng)
            if not picks:
                continue
            crops = np.concatenate(
                [crop_resize(working.tensor, grid_boxes[i], s) for i in picks])
            logits, offsets = model.forward(crops)
            grad_logits = np.zeros_like(logits)
            grad_offsets = np.zeros_like(offsets)
            for j, i in enumerate(picks):
                gt = _gt_in_patch(working.boxes, grid_boxes[i], s)
                assignment = match(defaults, gt, threshold=match_thr,
                                   neg_pos_ratio=BASE.neg_pos_ratio,
                                   background_loss=background_ce(logits[j]))
                gl, go = multibox_loss_backward(assignment, logits[j], offsets[j])
                grad_logits[j] = gl / len(picks)
                grad_offsets[j] = go / len(picks)
            model.store.zero_grad()
            model.backward(grad_logits, grad_offsets)
            model.store.clip_grads(BASE.grad_clip)
            sgd_step(model.store, lr, mom, velocity)
        if (epoch + 1) % 10 == 0:
            pos_scores, neg_scores = [], []
            for rec in test:
                working = _to_working(rec, BASE.working_size)
                crops = np.concatenate(
                    [crop_resize(working.tensor, b, s) for b in grid_boxes])
                lg, _ = model.forward(crops)
                model._cache = None
                for j, b in enumerate(grid_boxes):
                    score = float(softmax(lg[j])[:, 1:].max())
                    gt = _gt_in_patch(working.boxes, b, s)
                    (pos_scores if gt else neg_scores).append(score)
            pos, neg = np.array(pos_scores), np.array(neg_scores)
            accs = {round(float(t), 2): ((pos >= t).sum() + (neg < t).sum()) / (len(pos) + len(neg))
                    for t in np.arange(0.1, 0.75, 0.05)}
            best = max(accs, key=accs.get)
            print(f"{tag} ep{epoch + 1}: pos p10={np.percentile(pos, 10):.3f} "
                  f"mean={pos.mean():.3f} neg p90={np.percentile(neg, 90):.3f} "
                  f"acc@0.3={accs[0.3]:.3f} acc@0.5={accs[0.5]:.3f} "
                  f"best={accs[best]:.3f}@{best:.2f} [{time.time() - t0:.0f}s]", flush=True)


run("thr0.5 lr0.05", 50, 0.05, 0.0, 0.5)
run("thr0.35 lr0.05", 50, 0.05, 0.0, 0.35)
run("thr0.5 lr0.01 mom0.9", 50, 0.01, 0.9, 0.5)
