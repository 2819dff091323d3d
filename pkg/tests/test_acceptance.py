"""Acceptance suite: one test per shipped guarantee, each a single pass/fail
line under `pytest -v`.

Covers, in order: analytic gradients against central finite differences,
geometry against independent in-file oracles, exact reduction identities,
codec and checkpoint round-trips, end-to-end accuracy on a synthetic dataset,
the more-data-helps trend, and the stage-1 screening speedup. Tolerances are
pinned next to each assertion. The training tests share one module-scoped
pipeline; budget roughly ten minutes of single-core time for the whole file.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from defectforge.config import PipelineConfig
from defectforge.data import (
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    rle_decode,
    rle_encode,
    save_checkpoint,
)
from defectforge.evaluate import scale_sweep
from defectforge.geometry import (
    Box,
    DefaultBoxSet,
    decode_offsets,
    encode_offsets,
    jaccard,
    match_boxes,
    nms,
    slice_image,
)
from defectforge.pipeline import (
    _gt_in_patch,
    _mask_in_patch,
    _to_working,
    evaluate_pipeline,
    inspect_image,
    slicing_config,
    train_pipeline,
)
from defectforge.screening import conf_loss, conf_loss_backward, crop_resize, match
from defectforge.segmenter import (
    SegmenterConfig,
    SegmenterNet,
    deformable_conv2d,
    deformable_conv2d_backward,
    deformable_conv2d_with_cache,
    patch_loss,
    patch_loss_backward,
    roi_align,
    roi_align_backward,
    roi_align_with_cache,
    rpn_propose,
    segment_patch,
    select_rois,
    stage2_objective,
)
from defectforge.screening import loc_loss, loc_loss_backward
from defectforge.tensor import (
    ConvKernel,
    Tensor,
    bilinear_gather,
    bilinear_gather_backward,
    conv2d,
    conv2d_backward,
    softmax,
)

GRAD_TOL = 1e-4        # per-op analytic vs central differences
GRAD_TOL_E2E = 1e-3    # composite objective over every parameter
GEOM_TOL = 1e-9
GRAD_BUDGET_S = 120.0
TRAIN_BUDGET_S = 900.0

# training profile for the end-to-end criteria: 256x256 frames sliced into a
# 3x3 grid of 128px patches, screener at 64px, segmenter at native 128px
E2E_CONFIG = PipelineConfig(
    working_size=256, scales=(128,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=64, stage1_channels=(8, 16, 24, 32),
    stage1_epochs=30, stage1_lr=0.005, stage1_patches=10,
    match_threshold=0.35, selection_threshold=0.2,
    stage2_input=128, stage2_channels=(8, 12, 16, 16), fpn_channels=8,
    roi_size=7, mask_roi_size=14, roi_hidden=32, mask_channels=8,
    rpn_top_k=32, rpn_pre_nms_k=32, max_rois=16,
    stage2_epochs=8, stage2_lr=0.005,
    momentum=0.9, seed=0,
)
E2E_SPEC = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                         defect_count=(1, 2), area_fraction=0.03, seed=11)

# smaller profile for the five-seed training-scale sweep
SWEEP_CONFIG = PipelineConfig(
    working_size=128, scales=(64,), ratios=(1.0,), stride_fraction=0.5,
    stage1_input=32, stage1_channels=(4, 8, 12, 16),
    stage1_epochs=6, stage1_lr=0.005, stage1_patches=6,
    match_threshold=0.35, selection_threshold=0.2,
    stage2_input=64, stage2_channels=(6, 8, 12, 12), fpn_channels=6,
    roi_size=5, mask_roi_size=10, roi_hidden=16, mask_channels=6,
    rpn_top_k=16, rpn_pre_nms_k=16, max_rois=12,
    stage2_epochs=3, stage2_lr=0.005,
    momentum=0.9, seed=0,
)
SWEEP_SPEC = SyntheticSpec(image_size=(128, 128), shapes=("rectangle", "scratch"),
                           defect_count=(1, 2), area_fraction=0.10, seed=21)


# -- finite-difference helpers ------------------------------------------------------


def _rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Vector-norm relative error: ||a - n|| / max(||a||, ||n||)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    na, nn = np.linalg.norm(a), np.linalg.norm(n)
    if na == 0.0 and nn == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / max(na, nn))


def _fd(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every entry of arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _kernel(rng, co, ci, k, stride=1, padding=1, w_scale=0.4, bias=None):
    w = Tensor(rng.normal(0.0, w_scale, size=(co, ci, k, k)))
    b = Tensor(rng.uniform(0.05, 0.15, size=co) if bias is None else bias)
    return ConvKernel(w, b, stride=stride, padding=padding)


# -- criterion: gradient correctness ------------------------------------------------


def test_gradient_suite_matches_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    checks: list[tuple[str, float]] = []

    # conv2d: input, weights, bias
    x = rng.random((1, 2, 6, 6))
    kern = _kernel(rng, 3, 2, 3)
    up = rng.random((1, 3, 6, 6))
    gx, gw, gb = conv2d_backward(x, kern, up)
    checks.append(("conv2d/x", _rel(gx, _fd(lambda: float((conv2d(x, kern) * up).sum()), x))))
    checks.append(("conv2d/w", _rel(gw, _fd(lambda: float((conv2d(x, kern) * up).sum()),
                                            kern.weights.data))))
    checks.append(("conv2d/b", _rel(gb, _fd(lambda: float((conv2d(x, kern) * up).sum()),
                                            kern.bias.data))))

    # deformable conv: input, kernel, offset net; the offset bias sits a fixed
    # distance off the sampling lattice so no test point lands on a bilinear seam
    xd = rng.random((1, 2, 5, 5))
    dk = _kernel(rng, 2, 2, 3)
    ok = ConvKernel(Tensor(rng.normal(0.0, 0.05, size=(18, 2, 3, 3))),
                    Tensor(0.23 + rng.normal(0.0, 0.05, size=18)),
                    stride=1, padding=1)
    upd = rng.random((1, 2, 5, 5))

    def df():
        return float((deformable_conv2d(xd, dk, ok) * upd).sum())

    _, cache = deformable_conv2d_with_cache(xd, dk, ok)
    dgx, dgw, dgb, dgow, dgob = deformable_conv2d_backward(cache, dk, ok, upd)
    checks.append(("deformable/x", _rel(dgx, _fd(df, xd))))
    checks.append(("deformable/w", _rel(dgw, _fd(df, dk.weights.data))))
    checks.append(("deformable/b", _rel(dgb, _fd(df, dk.bias.data))))
    checks.append(("deformable/off_w", _rel(dgow, _fd(df, ok.weights.data))))
    checks.append(("deformable/off_b", _rel(dgob, _fd(df, ok.bias.data))))

    # bilinear sampling: map and coordinate gradients, fractions kept off the
    # integer seams, two points clamped outside the map
    bmap = rng.random((2, 5, 5))
    ys = np.array([0.3, 1.7, 2.4, 3.6, -2.0, 4.9])
    xs = np.array([1.2, 0.6, 3.7, 2.3, 1.4, 6.5])
    ub = rng.random((2, 6))

    def bf():
        return float((bilinear_gather(bmap, ys, xs) * ub).sum())

    gmap, gys, gxs = bilinear_gather_backward(bmap, ys, xs, ub)
    checks.append(("bilinear/map", _rel(gmap, _fd(bf, bmap))))
    checks.append(("bilinear/ys", _rel(gys, _fd(bf, ys))))
    checks.append(("bilinear/xs", _rel(gxs, _fd(bf, xs))))

    # roi align over the feature map (in-bounds and straddling rois)
    fmap = rng.random((2, 6, 6))
    for tag, roi in (("in", Box(0.6, 1.3, 4.7, 5.2)), ("out", Box(-1.2, 0.4, 7.3, 6.6))):
        out, cache = roi_align_with_cache(fmap, roi, (3, 3), 2)
        ur = rng.random(out.shape)
        gmap = roi_align_backward(cache, ur)
        num = _fd(lambda: float((roi_align(fmap, roi, (3, 3), 2) * ur).sum()), fmap)
        checks.append((f"roi_align/{tag}", _rel(gmap, num)))

    # confidence loss (softmax cross-entropy over matched anchors)
    n = 24
    dboxes = [Box(x, y, x + w, y + h) for x, y, w, h in
              zip(rng.uniform(0, 20, n), rng.uniform(0, 20, n),
                  rng.uniform(2, 10, n), rng.uniform(2, 10, n))]
    defaults = DefaultBoxSet(boxes=dboxes, origins=[(0, 0, 0, i) for i in range(n)])
    gt = [(Box(4.0, 5.0, 12.0, 11.0), 1), (Box(14.0, 2.0, 19.0, 9.0), 1)]
    assignment = match(defaults, gt, background_loss=rng.random(n))
    logits = rng.normal(0.0, 1.0, size=(n, 2))
    gl = conf_loss_backward(assignment, logits)
    checks.append(("conf_loss/logits",
                   _rel(gl, _fd(lambda: conf_loss(assignment, logits), logits))))

    # smooth-L1 localization loss, residuals inside and outside the kink at 1
    for tag, lo, hi in (("quad", 0.1, 0.8), ("lin", 1.2, 3.0)):
        delta = rng.uniform(lo, hi, size=(n, 4)) * rng.choice([-1.0, 1.0], size=(n, 4))
        pred = assignment.loc_targets + delta
        gp = loc_loss_backward(assignment, pred)
        checks.append((f"loc_loss/{tag}",
                       _rel(gp, _fd(lambda: loc_loss(assignment, pred), pred))))

    # per-pixel mask cross-entropy, probabilities clear of the clamp
    canvas = rng.uniform(0.05, 0.95, size=(12, 12))
    gt_mask = (rng.random((12, 12)) < 0.3).astype(np.float64)
    gc = patch_loss_backward(canvas, gt_mask)
    checks.append(("patch_loss/canvas",
                   _rel(gc, _fd(lambda: patch_loss(canvas, gt_mask), canvas))))

    for name, rel in checks:
        assert rel < GRAD_TOL, f"{name}: rel err {rel:.2e} >= {GRAD_TOL}"

    # composite: the full stage-2 objective differentiated w.r.t. every
    # parameter of a small (< 2000 parameter) network under frozen decisions
    cfg = SegmenterConfig(input_size=64, channels=(2, 2, 3, 3), fpn_channels=2,
                          roi_size=3, mask_roi_size=6, roi_hidden=4,
                          mask_channels=2, ratios=(1.0,),
                          rpn_top_k=8, rpn_pre_nms_k=8, seed=5)
    model = SegmenterNet(cfg)
    n_params = sum(t.data.size for t in model.store.params.values())
    assert n_params <= 2000, f"composite model has {n_params} params"
    crng = np.random.default_rng(3)
    for name, t in model.store.params.items():
        if ".off." in name:
            t.data[...] = crng.normal(0.0, 0.05, size=t.data.shape)
        elif name.endswith(".b"):
            t.data[...] = crng.uniform(0.05, 0.15, size=t.data.shape)
    patch = crng.random((1, 1, 64, 64))
    pgt = [(Box(12.0, 20.0, 34.0, 31.0), 1)]
    pmask = np.zeros((64, 64))
    pmask[20:31, 12:34] = 1.0
    pyramid = model.forward_pyramid(patch, train=True)
    proposals = rpn_propose(pyramid, model.anchors(), model.rpn, 64,
                            nms_threshold=cfg.rpn_nms_threshold,
                            top_k=cfg.rpn_top_k, pre_nms_k=cfg.rpn_pre_nms_k)
    model.clear_caches()
    decisions = select_rois(proposals, pgt, max_rois=6)
    assert decisions.pos_set, "frozen decisions must include a positive roi"

    def objective() -> float:
        model.store.zero_grad()
        return stage2_objective(model, patch, decisions, pgt, pmask).total

    breakdown = stage2_objective(model, patch, decisions, pgt, pmask)
    assert breakdown.l_cls > 0 and breakdown.l_pat > 0
    model.store.zero_grad()
    stage2_objective(model, patch, decisions, pgt, pmask)
    analytic = {name: t.grad.copy() for name, t in model.store.params.items()}
    worst = ("", 0.0)
    for name, t in model.store.params.items():
        numeric = _fd(objective, t.data, h=1e-5)
        rel = _rel(analytic[name], numeric)
        if rel > worst[1]:
            worst = (name, rel)
        assert rel < GRAD_TOL_E2E, f"composite {name}: rel err {rel:.2e}"

    elapsed = time.perf_counter() - t0
    print(f"\ngradients: {len(checks)} op blocks < {GRAD_TOL}, composite over "
          f"{n_params} params < {GRAD_TOL_E2E} (worst {worst[0]} {worst[1]:.1e}), "
          f"{elapsed:.0f}s")
    assert elapsed < GRAD_BUDGET_S


# -- criterion: geometry vs independent oracles --------------------------------------


def _iou_ref(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0.0 else 0.0


def _oracle_nms(rects, scores, threshold):
    order = sorted(range(len(rects)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_iou_ref(rects[i], rects[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def _oracle_match(rects, gt_rects, threshold):
    na, ng = len(rects), len(gt_rects)
    assign = [-1] * na
    if na == 0 or ng == 0:
        return assign
    iou = [[_iou_ref(a, g) for g in gt_rects] for a in rects]
    free_a, free_g = set(range(na)), set(range(ng))
    for _ in range(min(na, ng)):
        best_v, best = -1.0, None
        for ai in range(na):
            if ai not in free_a:
                continue
            for gi in range(ng):
                if gi in free_g and iou[ai][gi] > best_v:
                    best_v, best = iou[ai][gi], (ai, gi)
        if best is None:
            break
        ai, gi = best
        assign[ai] = gi
        free_a.discard(ai)
        free_g.discard(gi)
    for ai in range(na):
        if assign[ai] >= 0:
            continue
        best_gi = max(range(ng), key=lambda gi: iou[ai][gi])
        if iou[ai][best_gi] >= threshold:
            assign[ai] = best_gi
    return assign


def test_geometry_matches_independent_oracles():
    rng = np.random.default_rng(17)

    # jaccard vs direct pixel enumeration on 1000 random integer boxes
    worst = 0.0
    for _ in range(1000):
        x0, y0 = rng.integers(0, 20, 2)
        a = (int(x0), int(y0), int(x0 + rng.integers(0, 12)), int(y0 + rng.integers(0, 12)))
        x1, y1 = rng.integers(0, 20, 2)
        b = (int(x1), int(y1), int(x1 + rng.integers(0, 12)), int(y1 + rng.integers(0, 12)))
        ca = np.zeros((32, 32), dtype=bool)
        cb = np.zeros((32, 32), dtype=bool)
        ca[a[1]:a[3], a[0]:a[2]] = True
        cb[b[1]:b[3], b[0]:b[2]] = True
        union = np.logical_or(ca, cb).sum()
        pixel = np.logical_and(ca, cb).sum() / union if union else 0.0
        got = jaccard(Box(*a), Box(*b))
        worst = max(worst, abs(got - pixel))
    assert worst <= GEOM_TOL, f"jaccard vs pixel oracle: worst |diff| {worst:.2e}"

    # nms vs the quadratic reference on 200 random cases (exact, incl. ties)
    for case in range(200):
        n = int(rng.integers(1, 15))
        rects = []
        for _ in range(n):
            x0, y0 = rng.uniform(0, 14, 2)
            rects.append((x0, y0, x0 + rng.uniform(0.5, 8), y0 + rng.uniform(0.5, 8)))
        scores = rng.random(n)
        if case % 3 == 0:
            scores = np.round(scores, 1)  # force score ties
        threshold = float(rng.choice([0.3, 0.45, 0.6]))
        got = nms([(Box(*r), float(s)) for r, s in zip(rects, scores)], threshold)
        want = _oracle_nms(rects, list(scores), threshold)
        assert got == want, f"nms case {case}: {got} != {want}"

    # encode/decode round-trip on 500 random box/anchor pairs
    worst_rt = 0.0
    for _ in range(500):
        gx, gy = rng.uniform(-5, 20, 2)
        gt_box = Box(gx, gy, gx + rng.uniform(0.5, 15), gy + rng.uniform(0.5, 15))
        ax, ay = rng.uniform(-5, 20, 2)
        anchor = Box(ax, ay, ax + rng.uniform(0.5, 15), ay + rng.uniform(0.5, 15))
        back = decode_offsets(encode_offsets(gt_box, anchor), anchor)
        worst_rt = max(worst_rt, *(abs(p - q) for p, q in
                                   zip(back.as_tuple(), gt_box.as_tuple())))
    assert worst_rt <= GEOM_TOL, f"encode/decode round-trip: worst |diff| {worst_rt:.2e}"

    # greedy bipartite matching vs the exhaustive reference (exact)
    for case in range(100):
        na, ng = int(rng.integers(1, 15)), int(rng.integers(0, 4))
        rects = []
        for _ in range(na):
            x0, y0 = rng.uniform(0, 16, 2)
            rects.append((x0, y0, x0 + rng.uniform(1, 8), y0 + rng.uniform(1, 8)))
        gt_rects = []
        for _ in range(ng):
            x0, y0 = rng.uniform(0, 16, 2)
            gt_rects.append((x0, y0, x0 + rng.uniform(1, 8), y0 + rng.uniform(1, 8)))
        threshold = float(rng.choice([0.35, 0.5]))
        got = match_boxes([Box(*r) for r in rects], [Box(*g) for g in gt_rects],
                          threshold=threshold)
        want = _oracle_match(rects, gt_rects, threshold)
        assert list(got) == want, f"match case {case}: {list(got)} != {want}"

    print("\ngeometry: jaccard(1000)<=1e-9, nms(200) exact, "
          "encode/decode(500)<=1e-9, match(100) exact")


# -- criterion: reduction identities -------------------------------------------------


def test_reduction_identities_hold():
    rng = np.random.default_rng(23)

    # a deformable conv with an all-zero offset field IS the plain convolution
    for padding in (0, 1):
        x = rng.random((2, 3, 8, 8))
        kern = _kernel(rng, 4, 3, 3, padding=padding)
        zoff = ConvKernel(Tensor(np.zeros((18, 3, 3, 3))), Tensor(np.zeros(18)),
                          stride=1, padding=padding)
        got = deformable_conv2d(x, kern, zoff)
        want = conv2d(x, kern)
        assert np.array_equal(got, want), f"zero-offset mismatch at padding={padding}"

    # roi align over a constant map returns that constant everywhere
    for const in (0.37, -2.5):
        cmap = np.full((3, 7, 7), const)
        for roi in (Box(0.8, 1.1, 5.6, 6.2), Box(-2.0, -1.0, 9.5, 8.0)):
            out = roi_align(cmap, roi, (4, 4), 2)
            assert np.max(np.abs(out - const)) < 1e-12

    # softmax rows sum to one
    logits = rng.normal(0.0, 30.0, size=(50, 7))
    sums = softmax(logits).sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) < 1e-9

    print("\nreductions: zero-offset==conv2d exact, roi_align constant<1e-12, "
          "softmax sums<1e-9")


# -- criterion: codecs and persistence ------------------------------------------------


def test_codecs_and_checkpoints_roundtrip(tmp_path):
    rng = np.random.default_rng(31)

    # run-length codec: mask -> string -> mask, then string -> mask -> string
    for i in range(100):
        h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        density = float(rng.choice([0.0, 0.05, 0.3, 0.7, 1.0]))
        mask = rng.random((h, w)) < density
        encoded = rle_encode(mask)
        decoded = rle_decode(encoded, h, w)
        assert np.array_equal(decoded, mask), f"mask {i}: decode(encode) mismatch"
        assert rle_encode(decoded) == encoded, f"mask {i}: encode(decode) mismatch"

    # checkpoint file: every array restored bit for bit
    params = {
        "a.w": Tensor(rng.normal(0, 1, size=(4, 1, 2, 2))),
        "a.b": Tensor(np.array([1e30, -1e-12, np.pi])),
        "deep.block.weight": Tensor(rng.random((2, 3))),
        "scalarish": Tensor(np.array([0.0])),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(params)
    for name, tensor in params.items():
        got = loaded[name].data
        assert got.shape == tensor.data.shape
        assert got.tobytes() == tensor.data.tobytes(), f"{name} not bit-identical"

    print("\ncodecs: 100 rle round-trips both directions, checkpoint bit-identical")


# -- criteria: end-to-end accuracy, trend, speed --------------------------------------


@pytest.fixture(scope="module")
def trained_e2e():
    records = generate_synthetic(E2E_SPEC, 250)
    train = records[:200]
    test = [replace(r, split="test") for r in records[200:]]
    t0 = time.perf_counter()
    pipe = train_pipeline(train, E2E_CONFIG, stage="both")
    train_s = time.perf_counter() - t0
    return pipe, test, train_s


def test_synthetic_end_to_end_accuracy(trained_e2e):
    pipe, test, train_s = trained_e2e
    cfg = pipe.config
    grid = slice_image((cfg.working_size, cfg.working_size), slicing_config(cfg))
    grid_boxes = grid.boxes()

    hits = total = 0
    ious = []
    for rec in test:
        working = _to_working(rec, cfg.working_size)
        result = inspect_image(rec.image, pipe)
        assert len(result.verdicts) == len(grid_boxes)
        for verdict, box in zip(result.verdicts, grid_boxes):
            defective = bool(_gt_in_patch(working.boxes, box, cfg.stage1_input,
                                          mask=working.mask))
            hits += int(verdict.selected == defective)
            total += 1
            if _gt_in_patch(working.boxes, box, cfg.stage2_input, mask=working.mask):
                patch = crop_resize(working.tensor, box, cfg.stage2_input)
                seg = segment_patch(patch, pipe.stage2)
                pred = seg.binarized(cfg.mask_threshold)
                gt_mask = _mask_in_patch(working.mask, box, cfg.stage2_input) > 0.5
                union = np.logical_or(pred, gt_mask).sum()
                ious.append(np.logical_and(pred, gt_mask).sum() / union if union else 1.0)

    patch_acc = hits / total
    mean_iou = float(np.mean(ious))
    report = evaluate_pipeline(test, pipe)
    print(f"\nend-to-end: train {train_s:.0f}s (< {TRAIN_BUDGET_S:.0f}), "
          f"patch selection {patch_acc:.3f} (>= 0.90), "
          f"mask IoU {mean_iou:.3f} over {len(ious)} defective patches (>= 0.50), "
          f"pixel ACC {report.mean_pixel_acc:.3f} (>= 0.95)")
    assert train_s < TRAIN_BUDGET_S
    assert patch_acc >= 0.90
    assert mean_iou >= 0.50
    assert report.mean_pixel_acc >= 0.95


def test_accuracy_grows_with_training_scale():
    records = generate_synthetic(SWEEP_SPEC, 60)
    rows = []
    for seed in range(5):
        points = scale_sweep(records, SWEEP_CONFIG, fractions=(0.3, 0.6, 1.0), seed=seed)
        accs = [acc for _, acc in points]
        rows.append(accs)
        print(f"\nseed {seed}: " + " ".join(f"{a:.4f}" for a in accs))
    nondecreasing = sum(a[0] <= a[1] <= a[2] for a in rows)
    diminishing = sum((a[1] - a[0]) > (a[2] - a[1]) for a in rows)
    print(f"scale sweep: non-decreasing {nondecreasing}/5 (need 5), "
          f"diminishing gain {diminishing}/5 (need >= 3)")
    assert nondecreasing == 5
    assert diminishing >= 3


def test_screening_accelerates_inspection(trained_e2e):
    pipe, _, _ = trained_e2e
    sparse = SyntheticSpec(image_size=(256, 256), shapes=("rectangle", "scratch"),
                           defect_count=(0, 1), area_fraction=0.02, seed=77)
    images = [r.image for r in generate_synthetic(sparse, 20)]

    t0 = time.perf_counter()
    for img in images:
        inspect_image(img, pipe)
    with_screen = time.perf_counter() - t0
    t0 = time.perf_counter()
    for img in images:
        inspect_image(img, pipe, skip_stage1=True)
    without = time.perf_counter() - t0

    print(f"\nscreening speed: stage 1 on {with_screen:.2f}s vs full grid "
          f"{without:.2f}s over 20 sparse images ({without / with_screen:.2f}x)")
    assert with_screen < without
