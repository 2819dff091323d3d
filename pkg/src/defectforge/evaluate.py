"""Metrics and experiment harnesses: pixel accuracy, defect-area binning,
training-scale sweeps, and report emission (JSON + plain-text table).

Accuracy is reported at three levels (pixel, patch, image); pixel-level is
the primary metric everywhere a single number is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box

AREA_BIN_LABELS = ("<10%", "10-30%", ">30%")


def _as_binary(mask, what: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def pixel_accuracy(pred, gt) -> float:
    """(TP + TN) / total over two equal-size binary masks."""
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    return float(np.count_nonzero(p == g) / p.size)


def confusion_counts(pred, gt) -> dict[str, int]:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def mask_iou(pred, gt) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g) / union)


def defect_area_fraction(mask) -> float:
    m = _as_binary(mask, "mask")
    return float(np.count_nonzero(m) / m.size)


def area_bin(fraction: float) -> str:
    """Lower-closed bins: [0,10%) -> "<10%", [10%,30%) -> "10-30%",
    [30%,100%] -> ">30%". Exactly 30% lands in the top bin."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"area fraction must be in [0,1], got {fraction}")
    if fraction < 0.10:
        return AREA_BIN_LABELS[0]
    if fraction < 0.30:
        return AREA_BIN_LABELS[1]
    return AREA_BIN_LABELS[2]


def bin_by_defect_area(records) -> dict[str, list]:
    """Partition records (anything carrying a binary `.mask`) by the fraction
    of positive pixels in the ground-truth mask."""
    groups: dict[str, list] = {label: [] for label in AREA_BIN_LABELS}
    for rec in records:
        groups[area_bin(defect_area_fraction(rec.mask))].append(rec)
    return groups


# -- per-image evaluation ---------------------------------------------------------


@dataclass
class EvalItem:
    """One evaluated image: binarized prediction, ground truth, and context."""

    name: str
    pred_mask: np.ndarray
    gt_mask: np.ndarray
    runtime_s: float = 0.0
    patch_boxes: list[Box] | None = None

    def __post_init__(self):
        self.pred_mask = _as_binary(self.pred_mask, "prediction")
        self.gt_mask = _as_binary(self.gt_mask, "ground truth")
        if self.pred_mask.shape != self.gt_mask.shape:
            raise ValueError(
                f"{self.name}: prediction {self.pred_mask.shape} vs "
                f"ground truth {self.gt_mask.shape}")
        if self.runtime_s < 0.0:
            raise ValueError(f"{self.name}: negative runtime")


@dataclass
class ImageEval:
    name: str
    pixel_acc: float
    patch_acc: float
    image_correct: bool
    bin_label: str
    runtime_s: float
    confusion: dict[str, int]


def _patch_verdict_accuracy(pred: np.ndarray, gt: np.ndarray,
                            boxes: list[Box] | None) -> float:
    """Agreement of has-defect verdicts over a patch grid (whole image when
    no grid is given)."""
    h, w = gt.shape
    if not boxes:
        boxes = [Box(0.0, 0.0, float(w), float(h))]
    agree = 0
    counted = 0
    for b in boxes:
        y0 = max(0, int(math.floor(b.y_min)))
        y1 = min(h, int(math.ceil(b.y_max)))
        x0 = max(0, int(math.floor(b.x_min)))
        x1 = min(w, int(math.ceil(b.x_max)))
        if y0 >= y1 or x0 >= x1:
            continue
        counted += 1
        if bool(pred[y0:y1, x0:x1].any()) == bool(gt[y0:y1, x0:x1].any()):
            agree += 1
    return agree / counted if counted else 1.0


def evaluate_item(item: EvalItem) -> ImageEval:
    return ImageEval(
        name=item.name,
        pixel_acc=pixel_accuracy(item.pred_mask, item.gt_mask),
        patch_acc=_patch_verdict_accuracy(item.pred_mask, item.gt_mask, item.patch_boxes),
        image_correct=bool(item.pred_mask.any()) == bool(item.gt_mask.any()),
        bin_label=area_bin(defect_area_fraction(item.gt_mask)),
        runtime_s=item.runtime_s,
        confusion=confusion_counts(item.pred_mask, item.gt_mask),
    )


# -- the aggregate report ----------------------------------------------------------


@dataclass
class EvalReport:
    images: list[ImageEval]
    mean_pixel_acc: float
    mean_patch_acc: float
    image_acc: float
    per_bin: dict[str, float | None]
    confusion: dict[str, int]
    total_pixels: int
    mean_runtime_s: float

    def __post_init__(self):
        for name in ("mean_pixel_acc", "mean_patch_acc", "image_acc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0,1]: {v}")
        for label, acc in self.per_bin.items():
            if label not in AREA_BIN_LABELS:
                raise ValueError(f"unknown bin label {label!r}")
            if acc is not None and not (0.0 <= acc <= 1.0):
                raise ValueError(f"bin {label} accuracy out of [0,1]: {acc}")
        if sum(self.confusion.values()) != self.total_pixels:
            raise ValueError("confusion counts do not sum to total pixels")

    def to_dict(self) -> dict:
        return {
            "mean_pixel_acc": self.mean_pixel_acc,
            "mean_patch_acc": self.mean_patch_acc,
            "image_acc": self.image_acc,
            "per_bin": dict(self.per_bin),
            "confusion": dict(self.confusion),
            "total_pixels": self.total_pixels,
            "mean_runtime_s": self.mean_runtime_s,
            "images": [
                {
                    "name": im.name,
                    "pixel_acc": im.pixel_acc,
                    "patch_acc": im.patch_acc,
                    "image_correct": im.image_correct,
                    "bin": im.bin_label,
                    "runtime_s": im.runtime_s,
                    "confusion": dict(im.confusion),
                }
                for im in self.images
            ],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def text_table(self) -> str:
        lines = [
            "metric          value",
            f"pixel ACC       {self.mean_pixel_acc:.4f}",
            f"patch ACC       {self.mean_patch_acc:.4f}",
            f"image ACC       {self.image_acc:.4f}",
            f"runtime/image   {self.mean_runtime_s * 1000.0:.1f} ms",
            "",
            "defect area     pixel ACC   images",
        ]
        counts = {label: 0 for label in AREA_BIN_LABELS}
        for im in self.images:
            counts[im.bin_label] += 1
        for label in AREA_BIN_LABELS:
            acc = self.per_bin.get(label)
            shown = f"{acc:.4f}" if acc is not None else "-"
            lines.append(f"{label:<15s} {shown:<11s} {counts[label]}")
        return "\n".join(lines)


def build_report(items: list[EvalItem]) -> EvalReport:
    if not items:
        raise ValueError("cannot build a report from zero evaluated images")
    evals = [evaluate_item(item) for item in items]
    per_bin: dict[str, float | None] = {}
    for label in AREA_BIN_LABELS:
        accs = [e.pixel_acc for e in evals if e.bin_label == label]
        per_bin[label] = float(np.mean(accs)) if accs else None
    confusion = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for e in evals:
        for k in confusion:
            confusion[k] += e.confusion[k]
    return EvalReport(
        images=evals,
        mean_pixel_acc=float(np.mean([e.pixel_acc for e in evals])),
        mean_patch_acc=float(np.mean([e.patch_acc for e in evals])),
        image_acc=float(np.mean([e.image_correct for e in evals])),
        per_bin=per_bin,
        confusion=confusion,
        total_pixels=int(sum(item.gt_mask.size for item in items)),
        mean_runtime_s=float(np.mean([e.runtime_s for e in evals])),
    )


# -- training-scale sweep -----------------------------------------------------------


def stratified_split(records, test_fraction: float, seed: int):
    """Deterministic (train, test) split preserving the defect/clean ratio."""
    defect = sorted((r for r in records if r.has_defect), key=lambda r: r.name)
    clean = sorted((r for r in records if not r.has_defect), key=lambda r: r.name)
    rng = np.random.default_rng(seed)
    test: list = []
    train: list = []
    for group in (defect, clean):
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        picked = set(int(i) for i in order[:n_test])
        for i, rec in enumerate(group):
            (test if i in picked else train).append(rec)
    return train, test


def take_fraction(records, fraction: float, seed: int):
    """Stratified, nested subsets: a larger fraction is a superset of a
    smaller one under the same seed."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0,1], got {fraction}")
    defect = sorted((r for r in records if r.has_defect), key=lambda r: r.name)
    clean = sorted((r for r in records if not r.has_defect), key=lambda r: r.name)
    rng = np.random.default_rng(seed)
    out = []
    for group in (defect, clean):
        order = rng.permutation(len(group))
        n = int(round(fraction * len(group)))
        out.extend(group[int(i)] for i in order[:n])
    return out


def scale_sweep(records, config, fractions=(0.3, 0.6, 1.0), seed: int = 0,
                runner=None) -> list[tuple[float, float]]:
    """Train the full pipeline on growing dataset fractions, score each on a
    fixed held-out split; returns [(fraction, mean pixel ACC)].

    Records tagged split="test" form the held-out set; otherwise a stratified
    20% is carved out deterministically. Same-seed reruns are identical.
    """
    if runner is None:
        from .pipeline import train_and_score

        runner = train_and_score
    test = [r for r in records if r.split == "test"]
    if test:
        pool = [r for r in records if r.split != "test"]
    else:
        pool, test = stratified_split(records, 0.2, seed)
    if not test:
        raise ValueError("no held-out images for the sweep")
    results = []
    for fraction in fractions:
        subset = take_fraction(pool, fraction, seed)
        n_defect = sum(1 for r in subset if r.has_defect)
        if n_defect == 0:
            raise ValueError(
                f"fraction {fraction} yields zero defect training images")
        acc = runner(subset, test, config, seed)
        results.append((float(fraction), float(acc)))
    return results
