"""Throwaway: long stage-1 run with grad-norm and threshold diagnostics."""
import dataclasses
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

CFG = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage1_channels=(8, 16, 24, 32),
    stage1_epochs=25, stage1_lr=0.05, stage1_patches=10, momentum=0.0,
    seed=0,
)

spec = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(spec, 150)
train, test = records[:120], records[120:]

grid = slice_image((CFG.working_size, CFG.working_size), slicing_config(CFG))
grid_boxes = grid.boxes()
s = CFG.stage1_input

model = build_stage1(CFG)
defaults = model.default_boxes()
rng = np.random.default_rng(CFG.seed)
velocity = {}


def separation():
    pos_scores, neg_scores = [], []
    for rec in test:
        working = _to_working(rec, CFG.working_size)
        crops = np.concatenate([crop_resize(working.tensor, b, s) for b in grid_boxes])
        logits, _ = model.forward(crops)
        model._cache = None
        for j, b in enumerate(grid_boxes):
            score = float(softmax(logits[j])[:, 1:].max())
            gt = _gt_in_patch(working.boxes, b, s)
            (pos_scores if gt else neg_scores).append(score)
    pos, neg = np.array(pos_scores), np.array(neg_scores)
    accs = {round(float(t), 2): ((pos >= t).sum() + (neg < t).sum()) / (len(pos) + len(neg))
            for t in np.arange(0.1, 0.75, 0.05)}
    best = max(accs, key=accs.get)
    return (f"pos mean={pos.mean():.3f} p10={np.percentile(pos, 10):.3f} "
            f"neg mean={neg.mean():.3f} p90={np.percentile(neg, 90):.3f} "
            f"acc@0.5={accs[0.5]:.3f} best={accs[best]:.3f}@{best:.2f}")


t0 = time.time()
for epoch in range(CFG.stage1_epochs):
    order = rng.permutation(len(train))
    conf_sum, norm_sum, n_steps = 0.0, 0.0, 0
    for ri in order:
        working = _to_working(train[ri], CFG.working_size)
        picks = _sample_patches(grid_boxes, working, s, CFG.stage1_patches, rng)
        if not picks:
            continue
        crops = np.concatenate([crop_resize(working.tensor, grid_boxes[i], s) for i in picks])
        logits, offsets = model.forward(crops)
        grad_logits = np.zeros_like(logits)
        grad_offsets = np.zeros_like(offsets)
        conf = 0.0
        for j, i in enumerate(picks):
            gt = _gt_in_patch(working.boxes, grid_boxes[i], s)
            assignment = match(defaults, gt, neg_pos_ratio=CFG.neg_pos_ratio,
                               background_loss=background_ce(logits[j]))
            loss = multibox_loss(assignment, logits[j], offsets[j], alpha=CFG.alpha)
            gl, go = multibox_loss_backward(assignment, logits[j], offsets[j], alpha=CFG.alpha)
            grad_logits[j] = gl / len(picks)
            grad_offsets[j] = go / len(picks)
            conf += loss.conf / max(assignment.n, 1) / len(picks)
        model.store.zero_grad()
        model.backward(grad_logits, grad_offsets)
        norm_sum += model.store.clip_grads(CFG.grad_clip)
        sgd_step(model.store, CFG.stage1_lr, CFG.momentum, velocity)
        conf_sum += conf
        n_steps += 1
    if (epoch + 1) % 5 == 0 or epoch == 0:
        print(f"epoch {epoch + 1}: conf={conf_sum / n_steps:.3f} "
              f"gradnorm={norm_sum / n_steps:.2f} [{time.time() - t0:.0f}s]")
        print("   ", separation(), flush=True)
