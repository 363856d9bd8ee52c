"""Dense tensor kernels the rest of the package computes with.

Activations are float32 arrays, laid out (batch, channels, height, width) and
row-major. Reductions (convolution dot products, norms, softmax sums)
accumulate in float64 before results are cast back, so that comparisons
against slow reference implementations are stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError

# A Tensor4 is a plain ndarray; the alias marks the (B, C, H, W) float32 contract.
Tensor4 = np.ndarray


def as_tensor4(x: np.ndarray) -> Tensor4:
    """Validate the (B, C, H, W) float32 layout, converting dtype if needed."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (B, C, H, W) tensor, got rank {arr.ndim} with shape {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Number of valid kernel placements along one axis."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} does not fit input of size {size} with padding {padding}")
    return span // stride + 1


@dataclass(frozen=True)
class ConvParams:
    """A 2-D convolution: weight (out, in, kh, kw), bias (out,), scalar stride and zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match weight output channels {self.weight.shape[0]}"
            )
        if self.stride < 1:
            raise ShapeError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"conv padding must be >= 0, got {self.padding}")
        object.__setattr__(self, "weight", np.ascontiguousarray(self.weight, dtype=np.float32))
        object.__setattr__(self, "bias", np.ascontiguousarray(self.bias, dtype=np.float32))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)


@dataclass(frozen=True)
class BatchNormParams:
    """Inference-time batch norm: per-channel gamma, beta, running mean/var and eps."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        c = self.gamma.shape
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.shape != c:
                raise ShapeError(f"batch norm {name} must be rank 1 of matching length, got {arr.shape} vs {c}")
            object.__setattr__(self, name, np.ascontiguousarray(arr, dtype=np.float32))
        if self.eps < 0:
            raise ShapeError(f"batch norm eps must be >= 0, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ShapeError("batch norm running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def neutral_batchnorm(channels: int, eps: float = 1e-5) -> BatchNormParams:
    """gamma=1, beta=0, mean=0, var=1; with eps=0 this is an exact identity."""
    ones = np.ones(channels, dtype=np.float32)
    zeros = np.zeros(channels, dtype=np.float32)
    return BatchNormParams(gamma=ones, beta=zeros, running_mean=zeros, running_var=ones.copy(), eps=eps)


def conv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """Cross-correlate x with p.weight and add p.bias.

    Output spatial size along each axis is floor((in + 2*padding - kernel)/stride) + 1.
    """
    x = as_tensor4(x)
    b, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(
            f"input channels {x.shape} do not match conv weight {p.weight.shape} (expected {p.in_channels} channels)"
        )
    kh, kw = p.kernel_size
    oh = conv_output_size(h, kh, p.stride, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.padding)

    if p.padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    # (b, c, oh', ow', kh, kw) view, strided down to the requested placements.
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, :: p.stride, :: p.stride][:, :, :oh, :ow]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    flat_w = p.weight.reshape(p.out_channels, c * kh * kw)
    out = cols.astype(np.float64) @ flat_w.astype(np.float64).T
    out += p.bias.astype(np.float64)
    return out.reshape(b, oh, ow, p.out_channels).transpose(0, 3, 1, 2).astype(np.float32)


def relu(x: Tensor4) -> Tensor4:
    """Elementwise max(x, 0)."""
    return np.maximum(as_tensor4(x), np.float32(0.0))


def batchnorm_infer(x: Tensor4, p: BatchNormParams) -> Tensor4:
    """Per-channel (x - mean) / sqrt(var + eps) * gamma + beta using running statistics."""
    x = as_tensor4(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels but batch norm expects {p.channels}")
    inv = p.gamma.astype(np.float64) / np.sqrt(p.running_var.astype(np.float64) + p.eps)
    shift = p.beta.astype(np.float64) - p.running_mean.astype(np.float64) * inv
    out = x.astype(np.float64) * inv[None, :, None, None] + shift[None, :, None, None]
    return out.astype(np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with an explicit inner-dimension check; accumulates in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two rank-2 arrays, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return a.astype(np.float64) @ b.astype(np.float64)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max for stability. Returns float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 array, got rank {m.ndim}")
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm. Zero vectors are refused."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a rank-1 array, got rank {v.ndim}")
    n = float(np.sqrt(np.dot(v, v)))
    if n == 0.0:
        raise DegenerateInputError("cannot normalize an all-zero vector")
    return v / n


def bilinear_resize(x: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Resize spatially with bilinear interpolation (half-pixel centers, edges clamped)."""
    x = as_tensor4(x)
    b, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target dims must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    xd = x.astype(np.float64)
    top = xd[:, :, y0][:, :, :, x0] * (1 - fx) + xd[:, :, y0][:, :, :, x1] * fx
    bot = xd[:, :, y1][:, :, :, x0] * (1 - fx) + xd[:, :, y1][:, :, :, x1] * fx
    out = top * (1 - fy)[None, None, :, None] + bot * fy[None, None, :, None]
    return out.astype(np.float32)
