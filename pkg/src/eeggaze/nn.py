"""Layers with hand-derived backward passes.

Feature maps are ``[batch, depth, y, 1]``. Every kernel is ``ky x 1`` with
stride 1, so the convolutions below run along the y (time) axis only.

Each op comes as a pair of functions, ``*_forward`` returning
``(output, cache)`` and ``*_backward`` consuming the cache. The layer
classes wrap those pairs around parameter tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SplitMix64
from .tensor import NonFiniteError, ShapeError, Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# convolution


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, pad_y: int):
    """Zero-padded ``ky x 1`` convolution along y.

    out[b, o, y] = bias[o] + sum_{c, dy} x[b, c, y + dy - pad_y] * weight[o, c, dy]
    """
    if x.ndim != 4 or x.shape[3] != 1:
        raise ShapeError(f"expected [B, C, Y, 1] input, got {x.shape}")
    B, C, Y, _ = x.shape
    O, Cw, ky, kx = weight.shape
    if kx != 1:
        raise ShapeError("only ky x 1 kernels are supported")
    if Cw != C:
        raise ShapeError(f"input has {C} channels, kernel expects {Cw}")
    if Y + 2 * pad_y < ky:
        raise ShapeError(f"kernel height {ky} exceeds padded input length {Y + 2 * pad_y}")
    y_out = Y + 2 * pad_y - ky + 1
    x3 = x[..., 0]
    if ky == 1 and pad_y == 0:
        out = np.matmul(weight[:, :, 0, 0], x3)
        cols = None
    else:
        xp = np.pad(x3, ((0, 0), (0, 0), (pad_y, pad_y))) if pad_y else x3
        # cols[b, y, c, dy] = xp[b, c, y + dy]
        cols = sliding_window_view(xp, ky, axis=2).transpose(0, 2, 1, 3).reshape(B * y_out, C * ky)
        out = (cols @ weight.reshape(O, C * ky).T).reshape(B, y_out, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias[None, :, None]
    out = np.ascontiguousarray(out)[..., None]
    return out, (x3, cols, weight, pad_y, bias is not None)


def conv_backward(grad_out: np.ndarray, cache):
    x3, cols, weight, pad_y, has_bias = cache
    B, C, Y = x3.shape
    O, _, ky, _ = weight.shape
    y_out = Y + 2 * pad_y - ky + 1
    if grad_out.shape != (B, O, y_out, 1):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {(B, O, y_out, 1)}")
    g = grad_out[..., 0]
    grad_bias = g.sum(axis=(0, 2)) if has_bias else None
    if cols is None:
        w2 = weight[:, :, 0, 0]
        grad_w = np.einsum("boy,bcy->oc", g, x3, optimize=True).reshape(weight.shape)
        grad_x = np.matmul(w2.T, g)
    else:
        g2 = g.transpose(0, 2, 1).reshape(B * y_out, O)
        grad_w = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ weight.reshape(O, C * ky)).reshape(B, y_out, C, ky)
        gxp = np.zeros((B, C, Y + 2 * pad_y), dtype=g.dtype)
        for dy in range(ky):
            gxp[:, :, dy:dy + y_out] += gcols[:, :, :, dy].transpose(0, 2, 1)
        grad_x = gxp[:, :, pad_y:pad_y + Y]
    return np.ascontiguousarray(grad_x)[..., None], grad_w, grad_bias


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization over (batch, y).

    Train mode normalizes with the biased batch variance and updates the
    running statistics in place, using the unbiased variance for
    ``running_var``. Infer mode reads the running statistics only.
    """
    B, C, Y, _ = x.shape
    if gamma.shape != (C,):
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, got {C}")
    if train:
        n = B * Y
        if n < 2:
            raise ValueError("train-mode batchnorm needs more than one element per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out: np.ndarray, cache):
    xhat, inv_std, gamma, train = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError("grad_out shape does not match batchnorm input")
    axes = (0, 2, 3)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    dxhat = grad_out * gamma[None, :, None, None]
    if train:
        n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        grad_x = (inv_std[None, :, None, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
    else:
        grad_x = dxhat * inv_std[None, :, None, None]
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# relu, pooling, linear


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def avgpool_forward(x: np.ndarray, pool_y: int = 2):
    """Non-overlapping mean over windows of ``pool_y`` along y; leftovers dropped."""
    B, C, Y, X = x.shape
    if Y < pool_y:
        raise ShapeError(f"cannot pool length {Y} with window {pool_y}")
    y_out = Y // pool_y
    out = x[:, :, :y_out * pool_y].reshape(B, C, y_out, pool_y, X).mean(axis=3)
    return out, (x.shape, pool_y)


def avgpool_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    shape, pool_y = cache
    B, C, Y, X = shape
    y_out = Y // pool_y
    grad_x = np.zeros(shape, dtype=grad_out.dtype)
    grad_x[:, :, :y_out * pool_y] = np.repeat(grad_out / pool_y, pool_y, axis=2)
    return grad_x


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear layer expects [B, {weight.shape[1]}], got {x.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(grad_out: np.ndarray, cache):
    x, weight = cache
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# layer classes


def he_normal(shape: tuple[int, ...], fan_in: int, rng: SplitMix64, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(int(np.prod(shape)), 0.0, std).reshape(shape).astype(dtype))


class Layer:
    """Base class: a forward that caches, a backward that fills param grads."""

    def __init__(self):
        self._cache = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, Tensor]]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv(Layer):
    """``out_ch`` kernels of size ``in_ch x ky x 1`` with "same" padding."""

    def __init__(self, in_ch: int, out_ch: int, ky: int, rng: SplitMix64,
                 bias: bool = False, dtype=np.float32):
        super().__init__()
        if ky % 2 != 1:
            raise ValueError("same padding needs an odd kernel height")
        self.pad_y = (ky - 1) // 2
        self.weight = he_normal((out_ch, in_ch, ky, 1), in_ch * ky, rng, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype)) if bias else None

    def parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x, train=True):
        b = None if self.bias is None else self.bias.values
        out, self._cache = conv_forward(x, self.weight.values, b, self.pad_y)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv_backward(grad_out, self._pop_cache())
        self.weight.grad = gw
        if self.bias is not None:
            self.bias.grad = gb
        return gx


class BatchNorm(Layer):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train=True):
        out, self._cache = batchnorm_forward(
            x, self.gamma.values, self.beta.values, self.running_mean.values,
            self.running_var.values, train, self.momentum, self.eps)
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(grad_out, self._pop_cache())
        self.gamma.grad = gg
        self.beta.grad = gb
        return gx


class ReLU(Layer):
    def forward(self, x, train=True):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, grad_out):
        return relu_backward(grad_out, self._pop_cache())


class AvgPool(Layer):
    def __init__(self, pool_y: int = 2):
        super().__init__()
        self.pool_y = pool_y

    def forward(self, x, train=True):
        out, self._cache = avgpool_forward(x, self.pool_y)
        return out

    def backward(self, grad_out):
        return avgpool_backward(grad_out, self._pop_cache())


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: SplitMix64, dtype=np.float32):
        super().__init__()
        self.weight = he_normal((out_features, in_features), in_features, rng, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=True):
        out, self._cache = linear_forward(x, self.weight.values, self.bias.values)
        return out

    def backward(self, grad_out):
        gx, gw, gb = linear_backward(grad_out, self._pop_cache())
        self.weight.grad = gw
        self.bias.grad = gb
        return gx


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(loss: Callable[[], float | tuple[float, bool]], arr: np.ndarray,
                 eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``loss`` w.r.t. every entry of ``arr`` (perturbed in place).

    ``loss`` may return ``(value, crossed)`` where ``crossed`` flags that the
    evaluation left the smooth region of the base point (a ReLU changed
    sides). Returns the gradient and a mask of entries where either side
    crossed.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    crossed = np.zeros(arr.shape, dtype=bool)
    flat, gflat, cflat = arr.reshape(-1), grad.reshape(-1), crossed.reshape(-1)

    def evaluate():
        out = loss()
        return out if isinstance(out, tuple) else (out, False)

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp, cp = evaluate()
        flat[i] = old - eps
        lm, cm = evaluate()
        flat[i] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"non-finite probe loss at entry {i}")
        gflat[i] = (lp - lm) / (2 * eps)
        cflat[i] = cp or cm
    return grad, crossed


@dataclass
class CheckResult:
    """Max relative error per checked array, plus entries skipped at kinks."""

    errors: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def check_arrays(loss, targets: Iterable[tuple[str, np.ndarray, np.ndarray]],
                 eps: float) -> CheckResult:
    """Compare analytic grads against central differences.

    ``targets`` holds ``(name, array, analytic_grad)``; arrays are perturbed
    in place and restored. Entries whose finite difference straddles a
    kink are left out of the error and counted in ``skipped``.
    """
    result = CheckResult()
    for name, arr, analytic in targets:
        if arr.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 arrays, {name} is {arr.dtype}")
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"non-finite analytic gradient for {name}")
        numeric, crossed = numeric_grad(loss, arr, eps)
        keep = ~crossed
        result.errors[name] = relative_error(np.asarray(analytic)[keep], numeric[keep])
        result.skipped[name] = int(crossed.sum())
        result.checked[name] = int(keep.sum())
    return result


def gradcheck(layer: Layer, x: np.ndarray, eps: float = 1e-4, seed: int = 0,
              train: bool = True) -> float:
    """Max relative error of ``layer``'s backward against finite differences.

    The probe loss is ``sum(c * layer(x))`` with fixed random coefficients
    ``c`` drawn uniformly from [-1, 1].
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train)
    coeffs = SplitMix64(seed).uniform(out.size, -1.0, 1.0).reshape(out.shape)
    grad_x = layer.backward(coeffs)

    def probe() -> float:
        return float(np.sum(coeffs * layer.forward(x, train)))

    targets = [("input", x, grad_x)]
    targets += [(name, t.values, t.grad) for name, t in layer.parameters()]
    return check_arrays(probe, targets, eps).max_error
