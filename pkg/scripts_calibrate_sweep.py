"""Calibration run for the training-scale sweep acceptance criterion (throwaway)."""
import time
import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.evaluate import scale_sweep

CFG = PipelineConfig(
    working_size=128, scales=(64,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=32, stage1_channels=(4, 8, 12, 16),
    stage1_epochs=2, stage1_lr=0.05, stage1_patches=6,
    stage2_input=64, stage2_channels=(6, 8, 12, 12), fpn_channels=6,
    roi_size=5, mask_roi_size=10, roi_hidden=16, mask_channels=6,
    rpn_top_k=16, rpn_pre_nms_k=16, max_rois=12,
    stage2_epochs=2, stage2_lr=0.02, stage2_patches=3,
    seed=0,
)

spec = SyntheticSpec(image_size=(128, 128), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.05, seed=21)
records = generate_synthetic(spec, 60)
print("defect images:", sum(r.has_defect for r in records), "/ 60", flush=True)

ok_both = 0
for seed in range(5):
    t0 = time.perf_counter()
    results = scale_sweep(records, CFG, fractions=(0.3, 0.6, 1.0), seed=seed)
    accs = [a for _, a in results]
    g1, g2 = accs[1] - accs[0], accs[2] - accs[1]
    nondec = accs[0] <= accs[1] <= accs[2]
    dimin = g2 < g1
    ok_both += (nondec and dimin)
    print(f"seed {seed}: accs={[f'{a:.4f}' for a in accs]} gains=({g1:+.4f},{g2:+.4f}) "
          f"nondec={nondec} dimin={dimin}  [{time.perf_counter()-t0:.0f}s]", flush=True)
print(f"both-conditions seeds: {ok_both}/5", flush=True)
