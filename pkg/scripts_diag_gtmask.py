"""Why can a patch have a clipped gt box but an empty mask crop?"""
import numpy as np

from defectforge.config import PipelineConfig
from defectforge.data import SyntheticSpec, generate_synthetic
from defectforge.geometry import slice_image
from defectforge.pipeline import _gt_in_patch, _mask_in_patch, _to_working, slicing_config

CFG = PipelineConfig(working_size=256, scales=(128,), ratios=(1.0,),
                     stride_fraction=0.5, stage1_input=64, stage2_input=128)
SPEC = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                     defect_count=(1, 2), area_fraction=0.03, seed=11)
records = generate_synthetic(SPEC, 130)
grid_boxes = slice_image((256, 256), slicing_config(CFG)).boxes()

bad = 0
for rec in records[100:112]:
    working = _to_working(rec, 256)
    for box in grid_boxes:
        gt = _gt_in_patch(working.boxes, box, 128)
        if not gt:
            continue
        gtpx = (_mask_in_patch(working.mask, box, 128) > 0.5).sum()
        if gtpx == 0 and bad < 3:
            bad += 1
            print(f"record {rec.name}: patch=({box.x_min:.0f},{box.y_min:.0f},"
                  f"{box.x_max:.0f},{box.y_max:.0f})")
            for b, _ in gt:
                print(f"  clipped gt box (patch frame): ({b.x_min:.1f},{b.y_min:.1f},"
                      f"{b.x_max:.1f},{b.y_max:.1f})")
            for wb in working.boxes:
                print(f"  working box: ({wb.x_min:.1f},{wb.y_min:.1f},"
                      f"{wb.x_max:.1f},{wb.y_max:.1f})")
            ys, xs = np.nonzero(working.mask)
            print(f"  working mask rows {ys.min()}..{ys.max()} cols {xs.min()}..{xs.max()} "
                  f"n={len(ys)}")
            y0, y1 = int(box.y_min), int(box.y_max)
            x0, x1 = int(box.x_min), int(box.x_max)
            crop = working.mask[y0:y1, x0:x1]
            print(f"  crop nonzero: {crop.sum()}")
            inside = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
            print(f"  mask pixels inside patch: {inside.sum()}")
print(f"bad patches shown: {bad}")
