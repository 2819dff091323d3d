"""Dense float64 array engine with hand-written backward passes.

Conventions, fixed everywhere in this package:
  * row-major (C-order) layout,
  * image batches are NCHW,
  * every op computes in 64-bit floats,
  * ops take and return plain ndarrays; Tensor is the parameter container
    (data + grad buffer) and is what ConvKernel and the layers hold,
  * backward functions are pure: they take the original inputs plus the
    upstream gradient and return gradients, recomputing whatever forward
    state they need. Parameter gradient *buffers* (`Tensor.grad`) are only
    ever written by the layer that owns the parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _data(x) -> np.ndarray:
    """Accept a Tensor or anything array-like; return float64 ndarray."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A dense N-dimensional float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy())
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


@dataclass
class ConvKernel:
    """Weights [out_channels, in_channels, kh, kw] + bias [out_channels]."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ShapeMismatchError(f"kernel weights must be 4-D, got shape {self.weights.shape}")
        kh, kw = self.weights.shape[2], self.weights.shape[3]
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel spatial dims must be >= 1, got {kh}x{kw}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [N, C*kh*kw, Ho*Wo] with (c, u, v) tap ordering."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back to [N,C,Hp,Wp]."""
    n, c, hp, wp = x_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols[:, :, u, v]
    return out


def _check_conv_shapes(x: np.ndarray, kernel: ConvKernel) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.weights.shape
    if c != ci:
        raise ShapeMismatchError(
            f"input channels {x.shape} do not match kernel in_channels {kernel.weights.shape}"
        )
    ho = conv_output_size(h, kh, kernel.stride, kernel.padding)
    wo = conv_output_size(w, kw, kernel.stride, kernel.padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"input {h}x{w} too small for kernel {kh}x{kw} stride {kernel.stride} padding {kernel.padding}"
        )
    return ho, wo


def conv2d_with_cols(x, kernel: ConvKernel):
    """conv2d that also returns the im2col matrix for reuse in backward."""
    xd = _data(x)
    ho, wo = _check_conv_shapes(xd, kernel)
    n = xd.shape[0]
    co, ci, kh, kw = kernel.weights.shape
    cols = _im2col(_pad2d(xd, kernel.padding), kh, kw, kernel.stride)
    wmat = kernel.weights.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols) + kernel.bias.data[None, :, None]
    return out.reshape(n, co, ho, wo), cols


def conv2d(x, kernel: ConvKernel) -> np.ndarray:
    """Cross-correlation of NCHW input with the kernel (standard conv layer)."""
    out, _ = conv2d_with_cols(x, kernel)
    return out


def conv2d_backward_from_cols(x, kernel: ConvKernel, grad_out, cols: np.ndarray):
    xd = _data(x)
    g = _data(grad_out)
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.weights.shape
    ho, wo = _check_conv_shapes(xd, kernel)
    if g.shape != (n, co, ho, wo):
        raise ShapeMismatchError(
            f"grad_out shape {g.shape} does not match conv output {(n, co, ho, wo)}"
        )
    gflat = g.reshape(n, co, ho * wo)
    wmat = kernel.weights.data.reshape(co, ci * kh * kw)
    grad_w = np.einsum("nop,ncp->oc", gflat, cols).reshape(kernel.weights.shape)
    grad_b = gflat.sum(axis=(0, 2))
    gcols = np.matmul(wmat.T, gflat)
    p = kernel.padding
    gxp = _col2im(gcols, (n, c, h + 2 * p, w + 2 * p), kh, kw, kernel.stride)
    grad_x = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return grad_x, grad_w, grad_b


def conv2d_backward(x, kernel: ConvKernel, grad_out):
    """Gradients of a scalar loss w.r.t. conv2d input, weights and bias.

    Returns (grad_input, grad_weights, grad_bias) as arrays.
    """
    xd = _data(x)
    _check_conv_shapes(xd, kernel)
    kh, kw = kernel.ksize
    cols = _im2col(_pad2d(xd, kernel.padding), kh, kw, kernel.stride)
    return conv2d_backward_from_cols(xd, kernel, grad_out, cols)


# -- elementwise / dense ------------------------------------------------------


def relu(x) -> np.ndarray:
    return np.maximum(_data(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    xd = _data(x)
    return _data(grad_out) * (xd > 0.0)


def sigmoid(x) -> np.ndarray:
    xd = _data(x)
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x, grad_out) -> np.ndarray:
    s = sigmoid(x)
    return _data(grad_out) * s * (1.0 - s)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-stabilized softmax along `axis`; rows sum to 1 within 1e-9."""
    z = _data(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = _data(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def matmul(a, b) -> np.ndarray:
    ad, bd = _data(a), _data(b)
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {ad.shape} x {bd.shape} are incompatible")
    return ad @ bd


def matmul_backward(a, b, grad_out):
    ad, bd, g = _data(a), _data(b), _data(grad_out)
    return g @ bd.T, ad.T @ g


def linear(x, w, b) -> np.ndarray:
    """Fully connected: [N,D] @ [D,M] + [M]."""
    xd, wd, bd = _data(x), _data(w), _data(b)
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeMismatchError(f"linear shapes {xd.shape} x {wd.shape} are incompatible")
    return xd @ wd + bd


def linear_backward(x, w, grad_out):
    xd, wd, g = _data(x), _data(w), _data(grad_out)
    return g @ wd.T, xd.T @ g, g.sum(axis=0)


def max_pool2d(x, size: int = 2, stride: int | None = None) -> np.ndarray:
    """Max pooling over size x size windows; trailing rows/cols that do not
    fill a window are dropped (floor semantics)."""
    xd = _data(x)
    s = stride or size
    n, c, h, w = xd.shape
    ho = (h - size) // s + 1
    wo = (w - size) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"input {h}x{w} too small for pool size {size}")
    win = _pool_windows(xd, size, s, ho, wo)
    return win.max(axis=(4, 5))


def _pool_windows(xd: np.ndarray, size: int, s: int, ho: int, wo: int) -> np.ndarray:
    sn, sc, sh, sw = xd.strides
    return np.lib.stride_tricks.as_strided(
        xd,
        shape=(xd.shape[0], xd.shape[1], ho, wo, size, size),
        strides=(sn, sc, s * sh, s * sw, sh, sw),
        writeable=False,
    )


def max_pool2d_backward(x, grad_out, size: int = 2, stride: int | None = None) -> np.ndarray:
    """Routes each window's gradient to the first maximal element (ties by
    row-major order within the window)."""
    xd = _data(x)
    g = _data(grad_out)
    s = stride or size
    n, c, h, w = xd.shape
    ho = (h - size) // s + 1
    wo = (w - size) // s + 1
    win = _pool_windows(xd, size, s, ho, wo).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=4)
    u, v = np.divmod(arg, size)
    gi, gj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = gi[None, None] * s + u
    cols = gj[None, None] * s + v
    gx = np.zeros_like(xd)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gx, (ni, ci, rows, cols), g)
    return gx


# -- bilinear sampling --------------------------------------------------------


def _clamped_corners(h: int, w: int, ys: np.ndarray, xs: np.ndarray):
    """Corner indices and interpolation weights for border-clamped bilinear
    sampling of an HxW lattice at (possibly out-of-range) real coordinates."""
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.minimum(y0, h - 1)
    x0 = np.minimum(x0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0
    return y0, x0, y1, x1, fy, fx, yc, xc


def bilinear_gather(map_chw: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a [C,H,W] map at flat coordinate arrays; returns [C, len(ys)].

    Out-of-range coordinates clamp to the border, making this a total function.
    """
    c, h, w = map_chw.shape
    y0, x0, y1, x1, fy, fx, _, _ = _clamped_corners(h, w, ys, xs)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    return (
        map_chw[:, y0, x0] * w00
        + map_chw[:, y0, x1] * w01
        + map_chw[:, y1, x0] * w10
        + map_chw[:, y1, x1] * w11
    )


def bilinear_gather_backward(map_chw: np.ndarray, ys: np.ndarray, xs: np.ndarray, grad: np.ndarray):
    """Gradients of bilinear_gather w.r.t. the map and the coordinates.

    grad is [C, n]; returns (grad_map [C,H,W], grad_ys [n], grad_xs [n]).
    Clamped coordinates get zero coordinate-gradient.
    """
    c, h, w = map_chw.shape
    y0, x0, y1, x1, fy, fx, yc, xc = _clamped_corners(h, w, ys, xs)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    gmap = np.zeros_like(map_chw)
    ci = np.arange(c)[:, None]
    np.add.at(gmap, (ci, y0[None, :], x0[None, :]), grad * w00)
    np.add.at(gmap, (ci, y0[None, :], x1[None, :]), grad * w01)
    np.add.at(gmap, (ci, y1[None, :], x0[None, :]), grad * w10)
    np.add.at(gmap, (ci, y1[None, :], x1[None, :]), grad * w11)
    v00 = map_chw[:, y0, x0]
    v01 = map_chw[:, y0, x1]
    v10 = map_chw[:, y1, x0]
    v11 = map_chw[:, y1, x1]
    ddy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    ddx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gys = (grad * ddy).sum(axis=0)
    gxs = (grad * ddx).sum(axis=0)
    # clamp region: value constant w.r.t. raw coordinate
    gys = np.where((ys >= 0.0) & (ys <= h - 1.0), gys, 0.0)
    gxs = np.where((xs >= 0.0) & (xs <= w - 1.0), gxs, 0.0)
    return gmap, gys, gxs


def bilinear_sample(map_t, y: float, x: float) -> np.ndarray:
    """Bilinear interpolation of a [C,H,W] map at one real-valued point.

    Pixel centers sit at integer coordinates; out-of-range points clamp to
    the border. Returns a length-C vector.
    """
    m = _data(map_t)
    return bilinear_gather(m, np.array([float(y)]), np.array([float(x)]))[:, 0]


def bilinear_sample_backward(map_t, y: float, x: float, grad_vec):
    m = _data(map_t)
    g = _data(grad_vec).reshape(-1, 1)
    gmap, gy, gx = bilinear_gather_backward(m, np.array([float(y)]), np.array([float(x)]), g)
    return gmap, float(gy[0]), float(gx[0])


def bilinear_resize(map_t, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [C,H,W] map with bilinear interpolation (half-pixel centers)."""
    m = _data(map_t)
    c, h, w = m.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals = bilinear_gather(m, gy.ravel(), gx.ravel())
    return vals.reshape(c, out_h, out_w)


def bilinear_resize_adjoint(grad_out, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of bilinear_resize: scatter output grads back through the same
    half-pixel sample weights onto a [C, in_h, in_w] grid."""
    g = _data(grad_out)
    c, oh, ow = g.shape
    ys = (np.arange(oh) + 0.5) * (in_h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (in_w / ow) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    zeros = np.zeros((c, in_h, in_w))
    gmap, _, _ = bilinear_gather_backward(zeros, gy.ravel(), gx.ravel(), g.reshape(c, oh * ow))
    return gmap


def nearest_resize(map_chw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a [C,H,W] array (used for pyramid upsampling)."""
    c, h, w = map_chw.shape
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    return map_chw[:, ri[:, None], ci[None, :]]


def nearest_resize_adjoint(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of nearest_resize: accumulate output grads onto source cells."""
    c, oh, ow = grad_out.shape
    ri = (np.arange(oh) * in_h) // oh
    ci = (np.arange(ow) * in_w) // ow
    g = np.zeros((c, in_h, in_w))
    np.add.at(g, (np.arange(c)[:, None, None], ri[None, :, None], ci[None, None, :]), grad_out)
    return g


# -- optimization -------------------------------------------------------------


def sgd_step(params, grads, lr: float) -> None:
    """Plain SGD: p <- p - lr * g, in place, for matching param/grad pairs."""
    for p, g in zip(params, grads, strict=True):
        gd = _data(g)
        if gd.shape != p.data.shape:
            raise ShapeMismatchError(f"grad shape {gd.shape} does not match param {p.data.shape}")
        p.data -= lr * gd


def assert_finite(x, what: str = "tensor") -> None:
    xd = _data(x)
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError(f"{what} contains non-finite values")
