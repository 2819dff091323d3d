"""Throwaway: stage-1 learnability sweep (lr x momentum) with score separation."""
import dataclasses
import time

import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.pipeline import (
    _gt_in_patch, _to_working, build_stage1, slicing_config, train_stage1,
)
from defectforge.geometry import slice_image
from defectforge.screening import crop_resize, softmax

BASE = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage1_channels=(8, 16, 24, 32),
    stage1_epochs=6, stage1_patches=10,
    seed=0,
)

spec = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(spec, 150)
train, test = records[:120], records[120:]

grid = slice_image((BASE.working_size, BASE.working_size), slicing_config(BASE))
grid_boxes = grid.boxes()


def separation(model, cfg):
    pos_scores, neg_scores = [], []
    for rec in test:
        working = _to_working(rec, cfg.working_size)
        crops = np.concatenate(
            [crop_resize(working.tensor, b, cfg.stage1_input) for b in grid_boxes])
        logits, _ = model.forward(crops)
        for j, b in enumerate(grid_boxes):
            score = float(softmax(logits[j])[:, 1:].max())
            gt = _gt_in_patch(working.boxes, b, cfg.stage1_input)
            (pos_scores if gt else neg_scores).append(score)
    pos = np.array(pos_scores)
    neg = np.array(neg_scores)
    accs = {}
    for thr in (0.3, 0.4, 0.5, 0.6, 0.7):
        accs[thr] = ((pos >= thr).sum() + (neg < thr).sum()) / (len(pos) + len(neg))
    best_thr = max(accs, key=accs.get)
    return (f"pos n={len(pos)} mean={pos.mean():.3f} p25={np.percentile(pos, 25):.3f} | "
            f"neg n={len(neg)} mean={neg.mean():.3f} p90={np.percentile(neg, 90):.3f} | "
            f"acc@0.5={accs[0.5]:.3f} best acc={accs[best_thr]:.3f}@{best_thr}")


for lr in (0.05, 0.15):
    for mom in (0.0, 0.9):
        cfg = dataclasses.replace(BASE, stage1_lr=lr, momentum=mom)
        t0 = time.time()
        model, hist = train_stage1(train, cfg)
        confs = " ".join(f"{h['conf']:.3f}" for h in hist)
        print(f"lr={lr} mom={mom}: conf[{confs}] [{time.time() - t0:.0f}s]")
        print("   ", separation(model, cfg), flush=True)
