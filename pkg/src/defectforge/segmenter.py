"""Stage 2: residual backbone, feature pyramid with a bias level, deformable
kernel convolution, region proposals, ROI Align, detection and mask heads,
and the combined classification/localization/patch loss.

Everything runs on single patches ([1,1,S,S] inputs). The training step is
split into a decision phase (proposals, matching, roi selection — computed
once and held fixed) and a differentiable phase whose gradients are
hand-propagated to every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DEFAULT_RATIOS,
    Box,
    DefaultBoxSet,
    decode_offsets,
    default_boxes_for_patch,
    encode_offsets,
    match_boxes,
    nms,
)
from .layers import Conv2dLayer, LinearLayer, ParamStore, he_conv
from .tensor import (
    ConvKernel,
    ShapeMismatchError,
    Tensor,
    _data,
    _pad2d,
    bilinear_gather,
    bilinear_gather_backward,
    bilinear_resize,
    bilinear_resize_adjoint,
    conv2d_backward_from_cols,
    conv2d_with_cols,
    conv_output_size,
    nearest_resize,
    nearest_resize_adjoint,
    relu,
    relu_backward,
    sigmoid,
    softmax,
)
from .screening import smooth_l1, smooth_l1_grad

MIN_PATCH_SIZE = 64  # six halvings of 64 still leave a 1x1 coarsest map


# -- deformable kernel convolution -------------------------------------------------


def _offset_tap_coords(off: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Per-tap sampling coordinates on the padded plane: base lattice + offsets.

    Offset channels are ordered (dy_0, dx_0, dy_1, dx_1, ...) tap-major with
    tap t = u*kw + v.
    """
    n = off.shape[0]
    taps = kh * kw
    p = ho * wo
    u = (np.arange(taps) // kw)[:, None]
    v = (np.arange(taps) % kw)[:, None]
    gy = (np.arange(p) // wo)[None, :] * stride
    gx = (np.arange(p) % wo)[None, :] * stride
    base_y = (gy + u).astype(np.float64)  # [taps, P]
    base_x = (gx + v).astype(np.float64)
    dy = off[:, 0::2].reshape(n, taps, p)
    dx = off[:, 1::2].reshape(n, taps, p)
    return base_y[None] + dy, base_x[None] + dx  # [N, taps, P]


def deformable_conv2d_with_cache(x, kernel: ConvKernel, offset_net: ConvKernel):
    """Deformable conv: each kernel tap samples at (lattice + learned offset).

    The offset field comes from a plain convolution (`offset_net`) over the
    same input with the same stride/padding, emitting 2*kh*kw channels.
    Sampling happens on the zero-padded plane with border clamping, so an
    all-zero offset field reproduces conv2d exactly (same column matrix, same
    matmul). Returns (output, cache for the backward pass).
    """
    xd = _data(x)
    co, ci, kh, kw = kernel.weights.shape
    if offset_net.stride != kernel.stride or offset_net.padding != kernel.padding:
        raise ShapeMismatchError("offset net must share the kernel's stride and padding")
    if offset_net.weights.shape[0] != 2 * kh * kw:
        raise ShapeMismatchError(
            f"offset net emits {offset_net.weights.shape[0]} channels, "
            f"expected {2 * kh * kw} (dy,dx per tap)")
    off, off_cols = conv2d_with_cols(xd, offset_net)
    n, c, h, w = xd.shape
    ho = conv_output_size(h, kh, kernel.stride, kernel.padding)
    wo = conv_output_size(w, kw, kernel.stride, kernel.padding)
    xp = _pad2d(xd, kernel.padding)
    ys, xs = _offset_tap_coords(off, kh, kw, kernel.stride, ho, wo)
    taps, p = kh * kw, ho * wo
    cols = np.empty((n, c * taps, p))
    for i in range(n):
        vals = bilinear_gather(xp[i], ys[i].ravel(), xs[i].ravel())  # [C, taps*P]
        cols[i] = vals.reshape(c, taps, p).reshape(c * taps, p)
    wmat = kernel.weights.data.reshape(co, ci * kh * kw)
    out = (np.matmul(wmat, cols) + kernel.bias.data[None, :, None]).reshape(n, co, ho, wo)
    cache = (xd, xp, off_cols, ys, xs, cols, ho, wo)
    return out, cache


def deformable_conv2d(x, kernel: ConvKernel, offset_net: ConvKernel) -> np.ndarray:
    out, _ = deformable_conv2d_with_cache(x, kernel, offset_net)
    return out


def deformable_conv2d_backward(cache, kernel: ConvKernel, offset_net: ConvKernel, grad_out):
    """Gradients w.r.t. input, kernel weights/bias, offset-net weights/bias."""
    xd, xp, off_cols, ys, xs, cols, ho, wo = cache
    g = _data(grad_out)
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.weights.shape
    taps, p = kh * kw, ho * wo
    gflat = g.reshape(n, co, p)
    wmat = kernel.weights.data.reshape(co, ci * kh * kw)
    grad_w = np.einsum("nop,ncp->oc", gflat, cols).reshape(kernel.weights.shape)
    grad_b = gflat.sum(axis=(0, 2))
    gcols = np.matmul(wmat.T, gflat)  # [N, C*taps, P]
    grad_xp = np.zeros_like(xp)
    grad_off = np.zeros((n, 2 * taps, ho, wo))
    for i in range(n):
        gc = gcols[i].reshape(c, taps * p)
        gmap, gys, gxs = bilinear_gather_backward(xp[i], ys[i].ravel(), xs[i].ravel(), gc)
        grad_xp[i] = gmap
        grad_off[i, 0::2] = gys.reshape(taps, ho, wo)
        grad_off[i, 1::2] = gxs.reshape(taps, ho, wo)
    pad = kernel.padding
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
    gx_off, grad_ow, grad_ob = conv2d_backward_from_cols(xd, offset_net, grad_off, off_cols)
    return grad_x + gx_off, grad_w, grad_b, grad_ow, grad_ob


class DeformableLayer:
    """Owned deformable conv (+ReLU outside); offsets start at zero so the
    layer begins as a plain convolution."""

    def __init__(self, store: ParamStore, name: str, channels: int, ksize: int = 3,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.weights = store.add(f"{name}.w", Tensor(he_conv(rng, channels, channels, ksize)))
        self.bias = store.add(f"{name}.b", Tensor(np.zeros(channels)))
        self.off_w = store.add(
            f"{name}.off.w", Tensor(np.zeros((2 * ksize * ksize, channels, ksize, ksize))))
        self.off_b = store.add(f"{name}.off.b", Tensor(np.zeros(2 * ksize * ksize)))
        self.padding = ksize // 2
        self._cache: list = []

    def kernels(self) -> tuple[ConvKernel, ConvKernel]:
        return (
            ConvKernel(self.weights, self.bias, stride=1, padding=self.padding),
            ConvKernel(self.off_w, self.off_b, stride=1, padding=self.padding),
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        k, ok = self.kernels()
        out, cache = deformable_conv2d_with_cache(x, k, ok)
        self._cache.append(cache)
        return out

    def infer(self, x: np.ndarray) -> np.ndarray:
        k, ok = self.kernels()
        return deformable_conv2d(x, k, ok)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward without a pending forward")
        k, ok = self.kernels()
        gx, gw, gb, gow, gob = deformable_conv2d_backward(self._cache.pop(), k, ok, grad_out)
        self.weights.grad += gw
        self.bias.grad += gb
        self.off_w.grad += gow
        self.off_b.grad += gob
        return gx

    def clear_cache(self) -> None:
        self._cache.clear()


# -- backbone ------------------------------------------------------------------------


class ResidualBlock:
    """y = relu(x + conv2(relu(conv1(x)))), channel-preserving 3x3 convs."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng):
        self.conv1 = Conv2dLayer(store, f"{name}.c1", channels, channels, 3, padding=1, rng=rng)
        self.conv2 = Conv2dLayer(store, f"{name}.c2", channels, channels, 3, padding=1, rng=rng)
        self._cache: list = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        a1 = self.conv1.forward(x)
        r1 = relu(a1)
        a2 = self.conv2.forward(r1)
        pre = x + a2
        self._cache.append((a1, pre))
        return relu(pre)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        a1, pre = self._cache.pop()
        g = relu_backward(pre, grad_out)
        g2 = self.conv2.backward(g)
        g2 = relu_backward(a1, g2)
        g2 = self.conv1.backward(g2)
        return g + g2

    def clear_cache(self) -> None:
        self._cache.clear()
        self.conv1.clear_cache()
        self.conv2.clear_cache()


class ResidualBackbone:
    """Six stride-2 stages: stem, three residual-block+transition stages, and
    two extra transitions; emits all six maps, finest first."""

    def __init__(self, store: ParamStore, in_channels: int,
                 channels: tuple[int, int, int, int], rng):
        c1, c2, c3, c4 = channels
        self.stem = Conv2dLayer(store, "bb.stem", in_channels, c1, 3, stride=2, padding=1, rng=rng)
        self.res1 = ResidualBlock(store, "bb.res1", c1, rng)
        self.tr1 = Conv2dLayer(store, "bb.tr1", c1, c2, 3, stride=2, padding=1, rng=rng)
        self.res2 = ResidualBlock(store, "bb.res2", c2, rng)
        self.tr2 = Conv2dLayer(store, "bb.tr2", c2, c3, 3, stride=2, padding=1, rng=rng)
        self.res3 = ResidualBlock(store, "bb.res3", c3, rng)
        self.tr3 = Conv2dLayer(store, "bb.tr3", c3, c4, 3, stride=2, padding=1, rng=rng)
        self.tr4 = Conv2dLayer(store, "bb.tr4", c4, c4, 3, stride=2, padding=1, rng=rng)
        self.tr5 = Conv2dLayer(store, "bb.tr5", c4, c4, 3, stride=2, padding=1, rng=rng)
        self.out_channels = (c1, c2, c3, c4, c4, c4)
        self._acts: list = []

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        if x.shape[2] < MIN_PATCH_SIZE or x.shape[3] < MIN_PATCH_SIZE:
            raise ShapeMismatchError(
                f"patch {x.shape[2]}x{x.shape[3]} below minimum {MIN_PATCH_SIZE} "
                "(six stride-2 stages need 2^6 pixels)")
        acts = {}
        a0 = self.stem.forward(x)
        c1m = relu(a0)
        r1 = self.res1.forward(c1m)
        a1 = self.tr1.forward(r1)
        c2m = relu(a1)
        r2 = self.res2.forward(c2m)
        a2 = self.tr2.forward(r2)
        c3m = relu(a2)
        r3 = self.res3.forward(c3m)
        a3 = self.tr3.forward(r3)
        c4m = relu(a3)
        a4 = self.tr4.forward(c4m)
        c5m = relu(a4)
        a5 = self.tr5.forward(c5m)
        c6m = relu(a5)
        acts.update(a0=a0, a1=a1, a2=a2, a3=a3, a4=a4, a5=a5)
        self._acts.append(acts)
        return [c1m, c2m, c3m, c4m, c5m, c6m]

    def backward(self, grad_maps: list[np.ndarray]) -> np.ndarray:
        acts = self._acts.pop()
        g = relu_backward(acts["a5"], grad_maps[5])
        g = self.tr5.backward(g)
        g = g + grad_maps[4]
        g = relu_backward(acts["a4"], g)
        g = self.tr4.backward(g)
        g = g + grad_maps[3]
        g = relu_backward(acts["a3"], g)
        g = self.tr3.backward(g)
        g = self.res3.backward(g)
        g = g + grad_maps[2]
        g = relu_backward(acts["a2"], g)
        g = self.tr2.backward(g)
        g = self.res2.backward(g)
        g = g + grad_maps[1]
        g = relu_backward(acts["a1"], g)
        g = self.tr1.backward(g)
        g = self.res1.backward(g)
        g = g + grad_maps[0]
        g = relu_backward(acts["a0"], g)
        return self.stem.backward(g)

    def clear_cache(self) -> None:
        self._acts.clear()
        for layer in (self.stem, self.tr1, self.tr2, self.tr3, self.tr4, self.tr5):
            layer.clear_cache()
        for block in (self.res1, self.res2, self.res3):
            block.clear_cache()


# -- feature pyramid -------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Six same-channel maps, finest -> coarsest, plus the additive bias level."""

    levels: list[np.ndarray]  # each [1,C,h,w]
    bias_level: np.ndarray  # [1,C,hb,wb]

    def __post_init__(self):
        if len(self.levels) != 6:
            raise ShapeMismatchError(f"pyramid needs exactly 6 levels, got {len(self.levels)}")
        for k in range(5):
            h, w = self.levels[k].shape[2:]
            hn, wn = self.levels[k + 1].shape[2:]
            if hn != math.ceil(h / 2) or wn != math.ceil(w / 2):
                raise ShapeMismatchError(
                    f"level {k + 1} is {hn}x{wn}, expected ceil-half of {h}x{w}")


class FeaturePyramidNet:
    """Lateral 1x1 projections + top-down nearest 2x upsampling + bias level.

    Laterals and the bias conv carry no bias term: an all-zero input must
    produce an all-zero pyramid.
    """

    def __init__(self, store: ParamStore, in_channels: tuple[int, ...],
                 out_channels: int, rng):
        if len(in_channels) != 6:
            raise ValueError(f"expected 6 backbone stages, got {len(in_channels)}")
        self.out_channels = out_channels
        self.laterals = [
            Conv2dLayer(store, f"fpn.lat{k}", c, out_channels, 1, rng=rng, bias=False)
            for k, c in enumerate(in_channels)
        ]
        self.bias_conv = Conv2dLayer(
            store, "fpn.bias", in_channels[5], out_channels, 3, stride=2, padding=1,
            rng=rng, bias=False)
        self._shapes: list = []

    def forward(self, maps: list[np.ndarray]) -> FeaturePyramid:
        if len(maps) != 6:
            raise ShapeMismatchError(f"build_pyramid expects 6 backbone maps, got {len(maps)}")
        if maps[5].shape[2] < 1 or maps[5].shape[3] < 1:
            raise ShapeMismatchError(
                f"coarsest map {maps[5].shape} too small; the input patch must be "
                f">= {MIN_PATCH_SIZE} pixels per side")
        lats = [lat.forward(m) for lat, m in zip(self.laterals, maps)]
        tops: list[np.ndarray] = [np.empty(0)] * 6
        tops[5] = lats[5]
        for k in range(4, -1, -1):
            h, w = lats[k].shape[2:]
            tops[k] = lats[k] + nearest_resize(tops[k + 1][0], h, w)[None]
        bias = self.bias_conv.forward(maps[5])
        levels = []
        for k in range(6):
            h, w = tops[k].shape[2:]
            levels.append(tops[k] + nearest_resize(bias[0], h, w)[None])
        self._shapes.append(([m.shape for m in maps], bias.shape))
        return FeaturePyramid(levels=levels, bias_level=bias)

    def backward(self, grad_levels: list[np.ndarray]) -> list[np.ndarray]:
        """Gradients w.r.t. the six input maps, given per-level output grads."""
        map_shapes, bias_shape = self._shapes.pop()
        hb, wb = bias_shape[2:]
        g_bias = np.zeros(bias_shape)
        g_tops = [g.copy() for g in grad_levels]
        for k in range(6):
            g_bias += nearest_resize_adjoint(grad_levels[k][0], hb, wb)[None]
        for k in range(5):
            hn, wn = g_tops[k + 1].shape[2:]
            g_tops[k + 1] = g_tops[k + 1] + nearest_resize_adjoint(g_tops[k][0], hn, wn)[None]
        grads = [self.laterals[k].backward(g_tops[k]) for k in range(6)]
        grads[5] = grads[5] + self.bias_conv.backward(g_bias)
        return grads

    def clear_cache(self) -> None:
        self._shapes.clear()
        for lat in self.laterals:
            lat.clear_cache()
        self.bias_conv.clear_cache()


def build_pyramid(maps: list[np.ndarray], net: FeaturePyramidNet) -> FeaturePyramid:
    """Functional wrapper over FeaturePyramidNet.forward."""
    return net.forward(maps)


# -- region proposals ---------------------------------------------------------------------


@dataclass
class Proposal:
    box: Box  # patch frame
    objectness: float
    level: int


class RpnHead:
    """Shared 3x3 conv + 1x1 objectness/offset heads, applied per level."""

    def __init__(self, store: ParamStore, channels: int, n_anchors: int, rng):
        self.shared = Conv2dLayer(store, "rpn.shared", channels, channels, 3, padding=1, rng=rng)
        self.obj = Conv2dLayer(store, "rpn.obj", channels, n_anchors, 1, rng=rng, w_scale=0.01)
        self.loc = Conv2dLayer(store, "rpn.loc", channels, n_anchors * 4, 1, rng=rng, w_scale=0.01)
        # background-prior objectness bias: with thousands of anchors and a
        # handful of positives, a neutral start drowns the signal in 0.5-score
        # negatives; starting low concentrates early gradient on positives
        self.obj.bias.data[...] = -2.0
        self._acts: list = []

    def forward(self, level: np.ndarray):
        a = self.shared.forward(level)
        r = relu(a)
        self._acts.append(a)
        return self.obj.forward(r), self.loc.forward(r)

    def infer(self, level: np.ndarray):
        r = relu(self.shared.infer(level))
        return self.obj.infer(r), self.loc.infer(r)

    def backward(self, grad_obj: np.ndarray, grad_loc: np.ndarray) -> np.ndarray:
        a = self._acts.pop()
        g = self.obj.backward(grad_obj) + self.loc.backward(grad_loc)
        g = relu_backward(a, g)
        return self.shared.backward(g)

    def clear_cache(self) -> None:
        self._acts.clear()
        for layer in (self.shared, self.obj, self.loc):
            layer.clear_cache()


def _flatten_level_head(raw: np.ndarray, per_anchor: int) -> np.ndarray:
    """[1, B*per_anchor, h, w] -> [h*w*B, per_anchor] (row, col, anchor order)."""
    _, cb, h, w = raw.shape
    b = cb // per_anchor
    return raw.transpose(0, 2, 3, 1).reshape(h * w * b, per_anchor)


def _unflatten_level_head(grad: np.ndarray, h: int, w: int, per_anchor: int) -> np.ndarray:
    b = grad.shape[0] // (h * w)
    return grad.reshape(1, h, w, b * per_anchor).transpose(0, 3, 1, 2)


def level_anchors(patch_size: int, level_size: int, scale_factor: float = 4.0,
                  ratios: tuple[float, ...] = DEFAULT_RATIOS) -> DefaultBoxSet:
    """Anchors for one pyramid level, in the patch frame."""
    stride = patch_size / level_size
    return default_boxes_for_patch(
        patch_size, patch_size, grid_sizes=(level_size,),
        scales=(scale_factor * stride,), ratios=ratios)


def rpn_propose(
    pyramid: FeaturePyramid,
    anchors: list[DefaultBoxSet],
    head: RpnHead,
    patch_size: int,
    nms_threshold: float = 0.7,
    top_k: int = 100,
    pre_nms_k: int = 64,
    head_outputs: list | None = None,
) -> list[Proposal]:
    """Objectness-scored, decoded, clipped, NMS-pruned, top-K proposals.

    Only the pre_nms_k highest-objectness anchors per level enter decoding
    and NMS. `head_outputs` reuses forward activations already computed
    during training (so the head's cache stack stays balanced); otherwise
    the head runs in inference mode.
    """
    scored: list[tuple[Box, float]] = []
    levels_of: list[int] = []
    for k, level in enumerate(pyramid.levels):
        if head_outputs is not None:
            obj_raw, loc_raw = head_outputs[k]
        else:
            obj_raw, loc_raw = head.infer(level)
        obj = sigmoid(_flatten_level_head(obj_raw, 1)[:, 0])
        loc = _flatten_level_head(loc_raw, 4)
        boxes = anchors[k].boxes
        if len(boxes) != obj.shape[0]:
            raise ShapeMismatchError(
                f"level {k}: {len(boxes)} anchors vs {obj.shape[0]} head outputs")
        top = np.argsort(-obj, kind="stable")[:pre_nms_k]
        for i in sorted(int(t) for t in top):
            box = decode_offsets(loc[i], boxes[i]).clip(patch_size, patch_size)
            if box.width <= 1.0 or box.height <= 1.0:
                continue
            scored.append((box, float(obj[i])))
            levels_of.append(k)
    kept = nms(scored, nms_threshold)[:top_k]
    return [Proposal(box=scored[i][0], objectness=scored[i][1], level=levels_of[i]) for i in kept]


# -- roi align -------------------------------------------------------------------------


def roi_align_with_cache(map_chw: np.ndarray, roi: Box, out_size: tuple[int, int],
                         samples_per_bin: int = 2):
    """Average of samples_per_bin^2 bilinear samples per output bin.

    Coordinates stay continuous throughout (no quantization); samples sit at
    regular sub-bin centers. Returns (features [C,h,w], cache).
    """
    if roi.area <= 0.0:
        raise ValueError(f"roi has zero area: {roi}")
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be >= 1x1, got {out_size}")
    spb = samples_per_bin
    if spb < 1:
        raise ValueError(f"samples_per_bin must be >= 1, got {spb}")
    c = map_chw.shape[0]
    bin_h = roi.height / oh
    bin_w = roi.width / ow
    sub = (np.arange(spb) + 0.5) / spb
    ys = roi.y_min + (np.arange(oh)[:, None] + sub[None, :]).ravel() * bin_h  # [oh*spb]
    xs = roi.x_min + (np.arange(ow)[:, None] + sub[None, :]).ravel() * bin_w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals = bilinear_gather(map_chw, gy.ravel(), gx.ravel())
    vals = vals.reshape(c, oh, spb, ow, spb)
    out = vals.mean(axis=(2, 4))
    cache = (map_chw.shape, gy.ravel(), gx.ravel(), oh, ow, spb)
    return out, cache


def roi_align(map_chw: np.ndarray, roi: Box, out_size: tuple[int, int],
              samples_per_bin: int = 2) -> np.ndarray:
    out, _ = roi_align_with_cache(map_chw, roi, out_size, samples_per_bin)
    return out


def roi_align_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the feature map (rois are decision-phase constants)."""
    map_shape, ys, xs, oh, ow, spb = cache
    c = map_shape[0]
    g = (grad_out / (spb * spb))[:, :, None, :, None]
    g = np.broadcast_to(g, (c, oh, spb, ow, spb)).reshape(c, -1)
    zeros = np.zeros(map_shape)
    gmap, _, _ = bilinear_gather_backward(zeros, ys, xs, g)
    return gmap


# -- heads ----------------------------------------------------------------------------


class RoiHeads:
    """Classification + box-offset heads over flattened roi features."""

    def __init__(self, store: ParamStore, in_dim: int, hidden: int, n_classes: int, rng):
        self.fc1 = LinearLayer(store, "roi.fc1", in_dim, hidden, rng=rng)
        self.cls = LinearLayer(store, "roi.cls", hidden, n_classes + 1, rng=rng, w_scale=0.01)
        self.loc = LinearLayer(store, "roi.loc", hidden, 4, rng=rng, w_scale=0.01)
        self._acts: list = []

    def forward(self, feats: np.ndarray):
        a = self.fc1.forward(feats)
        r = relu(a)
        self._acts.append(a)
        return self.cls.forward(r), self.loc.forward(r)

    def infer(self, feats: np.ndarray):
        r = relu(self.fc1.infer(feats))
        return self.cls.infer(r), self.loc.infer(r)

    def backward(self, grad_cls: np.ndarray, grad_loc: np.ndarray) -> np.ndarray:
        a = self._acts.pop()
        g = self.cls.backward(grad_cls) + self.loc.backward(grad_loc)
        g = relu_backward(a, g)
        return self.fc1.backward(g)

    def clear_cache(self) -> None:
        self._acts.clear()
        for layer in (self.fc1, self.cls, self.loc):
            layer.clear_cache()


class MaskHead:
    """Two convs on the mask roi, 2x bilinear upsample, 1x1 conv, sigmoid."""

    def __init__(self, store: ParamStore, in_channels: int, mid_channels: int,
                 roi_size: int, rng):
        self.roi_size = roi_size
        self.out_size = roi_size * 2
        self.conv1 = Conv2dLayer(store, "mask.c1", in_channels, mid_channels, 3, padding=1, rng=rng)
        self.conv2 = Conv2dLayer(store, "mask.c2", mid_channels, mid_channels, 3, padding=1, rng=rng)
        self.out = Conv2dLayer(store, "mask.out", mid_channels, 1, 1, rng=rng, w_scale=0.01)
        self._acts: list = []

    def forward(self, feats: np.ndarray) -> np.ndarray:
        """[R, C, roi, roi] -> probability masks [R, 2*roi, 2*roi]."""
        a1 = self.conv1.forward(feats)
        r1 = relu(a1)
        a2 = self.conv2.forward(r1)
        r2 = relu(a2)
        up = np.stack([bilinear_resize(m, self.out_size, self.out_size) for m in r2])
        logits = self.out.forward(up)
        probs = sigmoid(logits[:, 0])
        self._acts.append((a1, a2, r2.shape, probs))
        return probs

    def infer(self, feats: np.ndarray) -> np.ndarray:
        r1 = relu(self.conv1.infer(feats))
        r2 = relu(self.conv2.infer(r1))
        up = np.stack([bilinear_resize(m, self.out_size, self.out_size) for m in r2])
        return sigmoid(self.out.infer(up)[:, 0])

    def backward(self, grad_probs: np.ndarray) -> np.ndarray:
        a1, a2, r2_shape, probs = self._acts.pop()
        g_logits = (grad_probs * probs * (1.0 - probs))[:, None]
        g_up = self.out.backward(g_logits)
        g_r2 = np.stack(
            [bilinear_resize_adjoint(m, r2_shape[2], r2_shape[3]) for m in g_up])
        g = relu_backward(a2, g_r2)
        g = self.conv2.backward(g)
        g = relu_backward(a1, g)
        return self.conv1.backward(g)

    def clear_cache(self) -> None:
        self._acts.clear()
        for layer in (self.conv1, self.conv2, self.out):
            layer.clear_cache()


# -- mask pasting ----------------------------------------------------------------------


def paste_masks(mask_probs: np.ndarray, boxes: list[Box], canvas_size: tuple[int, int]):
    """Bilinear-paste per-roi masks into a patch canvas, max-combining overlaps.

    Returns (canvas [H,W], cache). Ownership (which roi supplied each pixel's
    max) is recorded so the backward pass routes gradients correctly.
    """
    h, w = canvas_size
    canvas = np.zeros((h, w))
    owner = np.full((h, w), -1, dtype=np.int64)
    entries = []
    m = mask_probs.shape[1] if len(mask_probs) else 0
    for r, box in enumerate(boxes):
        if box.width <= 0.0 or box.height <= 0.0:
            entries.append(None)
            continue
        x_lo, x_hi = max(0, int(math.floor(box.x_min))), min(w, int(math.ceil(box.x_max)))
        y_lo, y_hi = max(0, int(math.floor(box.y_min))), min(h, int(math.ceil(box.y_max)))
        if x_lo >= x_hi or y_lo >= y_hi:
            entries.append(None)
            continue
        py, px = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        # map canvas pixel centers into mask coordinates (half-pixel centers)
        us = (px.ravel() + 0.5 - box.x_min) / box.width * m - 0.5
        vs = (py.ravel() + 0.5 - box.y_min) / box.height * m - 0.5
        vals = bilinear_gather(mask_probs[r][None], vs, us)[0]
        flat_idx = (py.ravel(), px.ravel())
        better = vals > canvas[flat_idx]
        canvas[flat_idx] = np.where(better, vals, canvas[flat_idx])
        owner_vals = owner[flat_idx]
        owner[flat_idx] = np.where(better, r, owner_vals)
        entries.append((flat_idx, vs, us))
    cache = (owner, entries, mask_probs.shape)
    return canvas, cache


def paste_masks_backward(cache, grad_canvas: np.ndarray) -> np.ndarray:
    owner, entries, mask_shape = cache
    grad_masks = np.zeros(mask_shape)
    for r, entry in enumerate(entries):
        if entry is None:
            continue
        flat_idx, vs, us = entry
        sel = owner[flat_idx] == r
        if not sel.any():
            continue
        g = np.where(sel, grad_canvas[flat_idx], 0.0)[None]
        gmask, _, _ = bilinear_gather_backward(
            np.zeros(mask_shape[1:])[None], vs, us, g)
        grad_masks[r] = gmask[0]
    return grad_masks


# -- patch loss and the combined objective ------------------------------------------------


PROB_EPS = 1e-7


def patch_loss(mask_pred: np.ndarray, mask_gt: np.ndarray) -> float:
    """Mean per-pixel binary cross-entropy over the patch canvas."""
    p = np.asarray(mask_pred, dtype=np.float64)
    g = np.asarray(mask_gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"mask {p.shape} vs ground truth {g.shape}")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))))


def patch_loss_backward(mask_pred: np.ndarray, mask_gt: np.ndarray) -> np.ndarray:
    p = np.asarray(mask_pred, dtype=np.float64)
    g = np.asarray(mask_gt, dtype=np.float64)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    grad = (-(g / pc) + (1.0 - g) / (1.0 - pc)) / p.size
    # the clamp is flat outside its interval
    grad[(p < PROB_EPS) | (p > 1.0 - PROB_EPS)] = 0.0
    return grad


@dataclass
class LossBreakdown:
    l_cls: float
    l_loc: float
    l_pat: float
    total: float

    def __post_init__(self):
        for name in ("l_cls", "l_loc", "l_pat"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if abs(self.total - (self.l_cls + self.l_loc + self.l_pat)) > 1e-12:
            raise ValueError("total does not recompose from its parts")


def combined_loss(l_cls: float, l_loc: float, l_pat: float) -> LossBreakdown:
    """Unweighted sum of the three stage-2 loss components."""
    return LossBreakdown(l_cls=l_cls, l_loc=l_loc, l_pat=l_pat,
                         total=l_cls + l_loc + l_pat)


# -- the stage-2 network ------------------------------------------------------------------


@dataclass
class SegmenterConfig:
    input_size: int = 128
    n_classes: int = 1
    channels: tuple[int, int, int, int] = (8, 12, 16, 16)
    fpn_channels: int = 8
    roi_size: int = 7
    mask_roi_size: int = 14
    roi_hidden: int = 32
    mask_channels: int = 8
    anchor_scale_factor: float = 4.0
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    rpn_nms_threshold: float = 0.7
    rpn_top_k: int = 100
    rpn_pre_nms_k: int = 64
    samples_per_bin: int = 2
    detection_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.input_size < MIN_PATCH_SIZE:
            raise ValueError(f"input_size must be >= {MIN_PATCH_SIZE}")
        if self.input_size % MIN_PATCH_SIZE != 0:
            raise ValueError(f"input_size must be a multiple of {MIN_PATCH_SIZE}")


class SegmenterNet:
    """Backbone -> deformable layer -> pyramid -> RPN -> roi/mask heads."""

    def __init__(self, config: SegmenterConfig | None = None):
        cfg = config or SegmenterConfig()
        self.config = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.backbone = ResidualBackbone(self.store, 1, cfg.channels, rng)
        c_last = self.backbone.out_channels[5]
        self.dk = DeformableLayer(self.store, "dk", c_last, 3, rng)
        self.fpn = FeaturePyramidNet(self.store, self.backbone.out_channels,
                                     cfg.fpn_channels, rng)
        self.rpn = RpnHead(self.store, cfg.fpn_channels, len(cfg.ratios), rng)
        self.roi_heads = RoiHeads(
            self.store, cfg.fpn_channels * cfg.roi_size * cfg.roi_size,
            cfg.roi_hidden, cfg.n_classes, rng)
        self.mask_head = MaskHead(self.store, cfg.fpn_channels, cfg.mask_channels,
                                  cfg.mask_roi_size, rng)
        self._anchors: list[DefaultBoxSet] | None = None
        self._dk_pre: list = []

    # --- anchors ---

    def anchors(self) -> list[DefaultBoxSet]:
        if self._anchors is None:
            s = self.config.input_size
            sizes = [s // (2 ** (k + 1)) for k in range(6)]
            self._anchors = [
                level_anchors(s, max(g, 1), self.config.anchor_scale_factor,
                              self.config.ratios)
                for g in sizes
            ]
        return self._anchors

    # --- shared forward trunk ---

    def forward_pyramid(self, x: np.ndarray, train: bool = False) -> FeaturePyramid:
        """Backbone + deformable layer + pyramid (caches kept when training)."""
        if train:
            maps = self.backbone.forward(x)
            pre = self.dk.forward(maps[5])
            self._dk_pre.append(pre)
            maps = maps[:5] + [relu(pre)]
            return self.fpn.forward(maps)
        maps = self.backbone.forward(x)  # caches cleared below
        pre = self.dk.infer(maps[5])
        maps = maps[:5] + [relu(pre)]
        pyramid = self.fpn.forward(maps)
        self.clear_caches()
        return pyramid

    def backward_pyramid(self, grad_levels: list[np.ndarray]) -> np.ndarray:
        grad_maps = self.fpn.backward(grad_levels)
        pre = self._dk_pre.pop()
        g6 = relu_backward(pre, grad_maps[5])
        g6 = self.dk.backward(g6)
        return self.backbone.backward(grad_maps[:5] + [g6])

    def roi_feature_frame(self, box: Box, level: int) -> Box:
        """Patch-frame box -> feature coordinates of one pyramid level."""
        stride = self.config.input_size / max(self.config.input_size // (2 ** (level + 1)), 1)
        return Box(box.x_min / stride, box.y_min / stride,
                   box.x_max / stride, box.y_max / stride)

    def clear_caches(self) -> None:
        self.backbone.clear_cache()
        self.dk.clear_cache()
        self._dk_pre.clear()
        self.fpn.clear_cache()
        self.rpn.clear_cache()
        self.roi_heads.clear_cache()
        self.mask_head.clear_cache()


@dataclass
class PatchSegmentation:
    """Stage-2 output for one patch, in the patch's own pixel frame."""

    detections: list[tuple[Box, int, float]]
    mask: np.ndarray  # [S,S] probabilities
    proposals: list[Proposal] = field(default_factory=list)

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        return self.mask >= threshold


def segment_patch(patch: np.ndarray, model: SegmenterNet) -> PatchSegmentation:
    """Full stage-2 inference on one [1,1,S,S] patch tensor."""
    cfg = model.config
    s = cfg.input_size
    if patch.shape != (1, 1, s, s):
        raise ShapeMismatchError(f"expected [1,1,{s},{s}], got {patch.shape}")
    pyramid = model.forward_pyramid(patch, train=False)
    proposals = rpn_propose(
        pyramid, model.anchors(), model.rpn, s,
        nms_threshold=cfg.rpn_nms_threshold, top_k=cfg.rpn_top_k,
        pre_nms_k=cfg.rpn_pre_nms_k)
    detections: list[tuple[Box, int, float]] = []
    det_boxes: list[Box] = []
    mask_rois: list[tuple[Box, int]] = []
    if proposals:
        feats = np.stack([
            roi_align(pyramid.levels[p.level][0],
                      model.roi_feature_frame(p.box, p.level),
                      (cfg.roi_size, cfg.roi_size), cfg.samples_per_bin).ravel()
            for p in proposals
        ])
        cls_logits, loc_preds = model.roi_heads.infer(feats)
        probs = softmax(cls_logits)
        for i, prop in enumerate(proposals):
            cls = int(np.argmax(probs[i, 1:])) + 1
            score = float(probs[i, cls])
            if score < cfg.detection_threshold:
                continue
            refined = decode_offsets(loc_preds[i], prop.box).clip(s, s)
            if refined.width <= 0.0 or refined.height <= 0.0:
                continue
            detections.append((refined, cls, score))
            det_boxes.append(refined)
            mask_rois.append((prop.box, prop.level))
    if mask_rois:
        mfeats = np.stack([
            roi_align(pyramid.levels[lvl][0], model.roi_feature_frame(b, lvl),
                      (cfg.mask_roi_size, cfg.mask_roi_size), cfg.samples_per_bin)
            for b, lvl in mask_rois
        ])
        mask_probs = model.mask_head.infer(mfeats)
        canvas, _ = paste_masks(mask_probs, det_boxes, (s, s))
    else:
        canvas = np.zeros((s, s))
    return PatchSegmentation(detections=detections, mask=canvas, proposals=proposals)


# -- training objective -----------------------------------------------------------------


@dataclass
class Decisions:
    """Frozen outcome of the non-differentiable phase of one training step:
    which rois exist, which are positive, and which ground truth each one
    regresses to. Holding these fixed keeps the differentiable objective a
    smooth function of the parameters."""

    proposals: list[Proposal]
    selected: list[int]
    assign: np.ndarray  # per-proposal gt index, -1 background

    @property
    def pos_set(self) -> list[int]:
        return [i for i in self.selected if self.assign[i] >= 0]


@dataclass
class Stage2Step:
    """One optimization step's losses; the RPN trains on its own objective,
    so its loss is reported beside the combined breakdown, not inside it."""

    breakdown: LossBreakdown
    rpn_loss: float
    n_pos_rois: int
    n_proposals: int


def select_rois(proposals: list[Proposal], gt: list[tuple[Box, int]],
                neg_pos_ratio: int = 3, max_rois: int = 24,
                threshold: float = 0.5) -> Decisions:
    """Match proposals to ground truth and pick the training roi set.

    All positives are kept (up to max_rois); negatives are the highest-
    objectness unmatched proposals, capped at neg_pos_ratio per positive
    (with a floor of one positive's worth when nothing matched).
    """
    boxes = [p.box for p in proposals]
    gt_boxes = [b for b, _ in gt]
    if gt_boxes and boxes:
        assign = match_boxes(boxes, gt_boxes, threshold=threshold)
    else:
        assign = np.full(len(boxes), -1, dtype=np.int64)
    pos_idx = list(np.flatnonzero(assign >= 0))
    obj_order = np.argsort([-p.objectness for p in proposals], kind="stable")
    neg_ranked = [int(i) for i in obj_order if assign[i] < 0]
    n_neg = min(len(neg_ranked), neg_pos_ratio * max(len(pos_idx), 1))
    selected = ([int(i) for i in pos_idx] + neg_ranked[:n_neg])[:max_rois]
    return Decisions(proposals=proposals, selected=selected, assign=assign)


def _head_losses(model: SegmenterNet, pyramid: FeaturePyramid, decisions: Decisions,
                 gt: list[tuple[Box, int]], gt_mask: np.ndarray,
                 grad_levels: list[np.ndarray]) -> LossBreakdown:
    """Roi classification/regression + mask pasting losses with backward.

    Accumulates parameter gradients in the roi/mask heads and adds the
    feature-map gradients into grad_levels.
    """
    cfg = model.config
    s = cfg.input_size
    proposals = decisions.proposals
    selected = decisions.selected
    assign = decisions.assign
    pos_set = decisions.pos_set
    denom = max(len(pos_set), 1)

    def aligned(box: Box, level: int, size: int):
        return roi_align_with_cache(
            pyramid.levels[level][0], model.roi_feature_frame(box, level),
            (size, size), cfg.samples_per_bin)

    l_cls = 0.0
    l_loc = 0.0
    roi_caches = []
    if selected:
        feats = []
        for i in selected:
            prop = proposals[i]
            out, cache = aligned(prop.box, prop.level, cfg.roi_size)
            roi_caches.append((prop.level, cache))
            feats.append(out.ravel())
        cls_logits, loc_preds = model.roi_heads.forward(np.stack(feats))
        probs = softmax(cls_logits)
        grad_logits = np.zeros_like(cls_logits)
        grad_locs = np.zeros_like(loc_preds)
        logp = np.log(np.clip(probs, 1e-300, None))
        for row, i in enumerate(selected):
            if assign[i] >= 0:
                cls = gt[assign[i]][1]
                l_cls -= float(logp[row, cls])
                grad_logits[row] = probs[row]
                grad_logits[row, cls] -= 1.0
                target = encode_offsets(gt[assign[i]][0], proposals[i].box)
                d = loc_preds[row] - target
                l_loc += float(smooth_l1(d).sum())
                grad_locs[row] = smooth_l1_grad(d)
            else:
                l_cls -= float(logp[row, 0])
                grad_logits[row] = probs[row]
                grad_logits[row, 0] -= 1.0
        l_cls /= denom
        l_loc /= denom
        grad_feats = model.roi_heads.backward(grad_logits / denom, grad_locs / denom)
    else:
        grad_feats = np.zeros((0, 0))

    mask_caches = []
    paste_cache = None
    canvas = np.zeros((s, s))
    if pos_set:
        mfeats = []
        for i in pos_set:
            prop = proposals[i]
            out, cache = aligned(prop.box, prop.level, cfg.mask_roi_size)
            mask_caches.append((prop.level, cache))
            mfeats.append(out)
        mask_probs = model.mask_head.forward(np.stack(mfeats))
        canvas, paste_cache = paste_masks(
            mask_probs, [proposals[i].box for i in pos_set], (s, s))
    l_pat = patch_loss(canvas, gt_mask)

    # backward, in reverse order of the forwards above
    if paste_cache is not None:
        grad_canvas = patch_loss_backward(canvas, gt_mask)
        grad_mask_probs = paste_masks_backward(paste_cache, grad_canvas)
        grad_mfeats = model.mask_head.backward(grad_mask_probs)
        for (lvl, cache), g in zip(mask_caches, grad_mfeats):
            grad_levels[lvl][0] += roi_align_backward(cache, g)
    for (lvl, cache), g in zip(roi_caches, grad_feats):
        grad_levels[lvl][0] += roi_align_backward(
            cache, g.reshape(cfg.fpn_channels, cfg.roi_size, cfg.roi_size))
    return combined_loss(l_cls, l_loc, l_pat)


def stage2_objective(model: SegmenterNet, patch: np.ndarray, decisions: Decisions,
                     gt: list[tuple[Box, int]], gt_mask: np.ndarray) -> LossBreakdown:
    """Combined loss under a frozen decision set, with full manual backward.

    The RPN heads take no part here; their gradients stay zero. Useful on its
    own for gradient verification, and as the differentiable core of
    stage2_training_step.
    """
    s = model.config.input_size
    if gt_mask.shape != (s, s):
        raise ShapeMismatchError(f"ground-truth mask {gt_mask.shape}, expected {(s, s)}")
    pyramid = model.forward_pyramid(patch, train=True)
    grad_levels = [np.zeros_like(lvl) for lvl in pyramid.levels]
    breakdown = _head_losses(model, pyramid, decisions, gt, gt_mask, grad_levels)
    model.backward_pyramid(grad_levels)
    return breakdown


def stage2_training_step(
    model: SegmenterNet,
    patch: np.ndarray,
    gt: list[tuple[Box, int]],
    gt_mask: np.ndarray,
    neg_pos_ratio: int = 3,
    max_rois: int = 24,
    match_threshold: float = 0.5,
) -> Stage2Step:
    """Forward, combined loss, RPN loss, manual backward into param grads.

    Decision phase: proposals, matching and roi selection are computed once
    and treated as constants; gradients then flow through the roi features,
    heads, pyramid, deformable layer and backbone. The RPN trains on its own
    objectness/offset loss against the same ground truth.
    """
    cfg = model.config
    s = cfg.input_size
    if gt_mask.shape != (s, s):
        raise ShapeMismatchError(f"ground-truth mask {gt_mask.shape}, expected {(s, s)}")
    pyramid = model.forward_pyramid(patch, train=True)
    rpn_outs = [model.rpn.forward(level) for level in pyramid.levels]
    anchors = model.anchors()

    proposals = rpn_propose(pyramid, anchors, model.rpn, s,
                            nms_threshold=cfg.rpn_nms_threshold,
                            top_k=cfg.rpn_top_k, pre_nms_k=cfg.rpn_pre_nms_k,
                            head_outputs=rpn_outs)
    # ground-truth boxes join the roi pool so the heads see clean positives
    # even while the proposal head is still rough
    pool = proposals + [
        Proposal(box=b, objectness=1.0,
                 level=_gt_level(b, len(anchors), cfg.anchor_scale_factor))
        for b, _ in gt
    ]
    decisions = select_rois(pool, gt, neg_pos_ratio=neg_pos_ratio,
                            max_rois=max_rois, threshold=match_threshold)

    grad_levels = [np.zeros_like(lvl) for lvl in pyramid.levels]
    breakdown = _head_losses(model, pyramid, decisions, gt, gt_mask, grad_levels)

    rpn_loss, rpn_grads = _rpn_loss_and_grads(rpn_outs, anchors, gt, neg_pos_ratio,
                                              match_threshold)
    for k in range(5, -1, -1):  # head caches pop in reverse forward order
        g_obj, g_loc = rpn_grads[k]
        grad_levels[k] += model.rpn.backward(g_obj, g_loc)
    model.backward_pyramid(grad_levels)

    return Stage2Step(breakdown=breakdown, rpn_loss=rpn_loss,
                      n_pos_rois=len(decisions.pos_set), n_proposals=len(proposals))


def _gt_level(box: Box, n_levels: int, scale_factor: float) -> int:
    """Pyramid level whose anchor size best matches the box side."""
    side = max(np.sqrt(max(box.area, 1e-9)), 1.0)
    k = int(round(np.log2(side / scale_factor))) - 1
    return int(np.clip(k, 0, n_levels - 1))


def _rpn_loss_and_grads(rpn_outs, anchors: list[DefaultBoxSet],
                        gt: list[tuple[Box, int]], neg_pos_ratio: int,
                        match_threshold: float = 0.5):
    """Standard objectness BCE + smooth-L1 offsets versus matched anchors."""
    gt_boxes = [b for b, _ in gt]
    all_boxes: list[Box] = []
    level_span = []
    for aset in anchors:
        level_span.append((len(all_boxes), len(all_boxes) + len(aset.boxes)))
        all_boxes.extend(aset.boxes)
    assign = match_boxes(all_boxes, gt_boxes, threshold=match_threshold) if gt_boxes else (
        np.full(len(all_boxes), -1, dtype=np.int64))

    obj_flat = np.concatenate([
        _flatten_level_head(out[0], 1)[:, 0] for out in rpn_outs])
    loc_flat = np.concatenate([_flatten_level_head(out[1], 4) for out in rpn_outs])
    probs = sigmoid(obj_flat)
    pos = np.flatnonzero(assign >= 0)
    neg_candidates = np.flatnonzero(assign < 0)
    # hardest negatives: highest predicted objectness
    order = neg_candidates[np.argsort(-probs[neg_candidates], kind="stable")]
    neg = order[: neg_pos_ratio * max(len(pos), 1)]
    denom = max(len(pos), 1)

    eps = 1e-12
    loss = 0.0
    grad_obj = np.zeros_like(obj_flat)
    grad_loc = np.zeros_like(loc_flat)
    loss -= float(np.sum(np.log(probs[pos] + eps)))
    loss -= float(np.sum(np.log(1.0 - probs[neg] + eps)))
    grad_obj[pos] = probs[pos] - 1.0
    grad_obj[neg] = probs[neg]
    for i in pos:
        target = encode_offsets(gt_boxes[assign[i]], all_boxes[i])
        d = loc_flat[i] - target
        loss += float(smooth_l1(d).sum())
        grad_loc[i] = smooth_l1_grad(d)
    loss /= denom
    grad_obj /= denom
    grad_loc /= denom

    grads = []
    for k, (lo, hi) in enumerate(level_span):
        h, w = rpn_outs[k][0].shape[2:]
        grads.append((
            _unflatten_level_head(grad_obj[lo:hi, None], h, w, 1),
            _unflatten_level_head(grad_loc[lo:hi], h, w, 4),
        ))
    return loss, grads
