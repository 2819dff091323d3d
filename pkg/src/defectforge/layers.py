"""Parameter-owning layer wrappers around the functional ops in tensor.py.

Layers hold Tensors, accumulate gradients into Tensor.grad, and register
themselves in a flat name->Tensor dict so checkpoints stay order-stable.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ConvKernel,
    Tensor,
    conv2d_backward_from_cols,
    conv2d_with_cols,
    linear,
    linear_backward,
)


class ParamStore:
    """Flat registry of named parameters. Names must be unique."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.ensure_grad()
        self.params[name] = tensor
        return tensor

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def load(self, values: dict[str, Tensor], prefix: str = "") -> None:
        for name, tensor in self.params.items():
            key = prefix + name
            if key not in values:
                raise KeyError(f"checkpoint missing parameter {key!r}")
            incoming = values[key].data
            if incoming.shape != tensor.data.shape:
                raise ValueError(
                    f"parameter {key!r}: shape {incoming.shape} != expected {tensor.data.shape}"
                )
            tensor.data = incoming.copy()

    def export(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + name: tensor for name, tensor in self.params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def clip_grads(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            scale = max_norm / norm
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm


def he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))


class Conv2dLayer:
    """Conv with owned weights; caches im2col columns for the backward pass.

    Caches form a stack: a layer applied k times (e.g. a head shared across
    pyramid levels) must run its backwards in exactly reverse order.
    """

    def __init__(self, store: ParamStore, name: str, in_c: int, out_c: int,
                 ksize: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, bias: bool = True,
                 w_scale: float | None = None):
        rng = rng or np.random.default_rng(0)
        self.name = name
        if w_scale is None:
            w = he_conv(rng, out_c, in_c, ksize)
        else:
            # prediction layers start near zero so early losses stay tame
            w = rng.normal(0.0, w_scale, size=(out_c, in_c, ksize, ksize))
        self.weights = store.add(f"{name}.w", Tensor(w))
        self.has_bias = bias
        if bias:
            self.bias = store.add(f"{name}.b", Tensor(np.zeros(out_c)))
        else:
            self.bias = Tensor(np.zeros(out_c))  # constant zero, not registered
        self.stride = stride
        self.padding = padding
        self._cache: list = []

    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weights, self.bias, stride=self.stride, padding=self.padding)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, cols = conv2d_with_cols(x, self.kernel())
        self._cache.append((x, cols))
        return out

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Forward without growing the cache stack (inference paths)."""
        out, _ = conv2d_with_cols(x, self.kernel())
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward without a pending forward")
        x, cols = self._cache.pop()
        gx, gw, gb = conv2d_backward_from_cols(x, self.kernel(), grad_out, cols)
        self.weights.grad += gw
        if self.has_bias:
            self.bias.grad += gb
        return gx

    def clear_cache(self) -> None:
        self._cache.clear()


class LinearLayer:
    """Fully connected layer over [N, D] inputs."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None,
                 w_scale: float | None = None):
        rng = rng or np.random.default_rng(0)
        self.name = name
        scale = np.sqrt(2.0 / in_dim) if w_scale is None else w_scale
        self.weights = store.add(f"{name}.w", Tensor(rng.normal(0.0, scale, size=(in_dim, out_dim))))
        self.bias = store.add(f"{name}.b", Tensor(np.zeros(out_dim)))
        self._cache: list = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache.append(x)
        return linear(x, self.weights, self.bias)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return linear(x, self.weights, self.bias)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward without a pending forward")
        gx, gw, gb = linear_backward(self._cache.pop(), self.weights, grad_out)
        self.weights.grad += gw
        self.bias.grad += gb
        return gx

    def clear_cache(self) -> None:
        self._cache.clear()
