"""Dense numeric kernels over NumPy arrays.

Every bit of arithmetic the models perform goes through this module.  Tensors are
plain ``numpy.ndarray`` values (NCHW feature maps, ``(B, C, N)`` token views,
matrices and vectors) in ``float32`` or ``float64``; parameters are small frozen
dataclasses.  All functions are pure and return fresh arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


def as_dtype(name_or_dtype) -> np.dtype:
    if isinstance(name_or_dtype, str):
        try:
            return np.dtype(DTYPES[name_or_dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {name_or_dtype!r}, expected f32 or f64") from None
    dt = np.dtype(name_or_dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dt) -> str:
    return "f64" if np.dtype(dt) == np.float64 else "f32"


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _vec(v, n: int, what: str) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (n,):
        raise ShapeError(f"{what} must have shape ({n},), got {v.shape}")
    return v


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights ``(Cout, Cin/groups, Kh, Kw)`` plus optional bias ``(Cout,)``."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {w.shape}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ShapeError(f"Cout={w.shape[0]} not divisible by groups={self.groups}")
        if self.bias is not None:
            _vec(self.bias, w.shape[0], "conv bias")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)


@dataclass(frozen=True, eq=False)
class BNParams:
    """Inference-mode batch normalization statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape[0]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            _vec(getattr(self, name), c, f"bn {name}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Per-channel ``alpha * x + beta``."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        _vec(self.beta, np.asarray(self.alpha).shape[0], "affine beta")

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    """Normalization over the channel axis at every token, then per-channel scale/shift."""

    weight: np.ndarray
    bias: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        _vec(self.bias, np.asarray(self.weight).shape[0], "layernorm bias")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def _channel_view(v: np.ndarray, ndim: int, dtype) -> np.ndarray:
    return np.asarray(v, dtype=dtype).reshape((-1,) + (1,) * (ndim - 2))


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation) of an NCHW tensor.

    Depthwise kernels are accumulated tap by tap; all other group layouts lower
    the receptive fields to columns and contract them with one batched matmul.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, conv expects {p.in_channels}")
    kh, kw = p.kernel_size
    ho, wo = p.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} with padding {p.padding} does not fit {h}x{w}")
    s, pad = p.stride, p.padding
    weight = np.asarray(p.weight, dtype=x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if p.is_depthwise:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                tap = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                out += weight[:, 0, i, j].reshape(1, c, 1, 1) * tap
    else:
        g = p.groups
        cout = p.out_channels
        if kh == kw == 1:
            cols = xp[:, :, ::s, ::s][:, :, :ho, :wo].reshape(n, g, c // g, ho * wo)
        else:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
            cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, g, (c // g) * kh * kw, ho * wo)
        wmat = weight.reshape(g, cout // g, -1)
        out = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)
    if p.bias is not None:
        out += np.asarray(p.bias, dtype=x.dtype).reshape(1, -1, 1, 1)
    return _finite(out, "conv2d")


def global_dwconv(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Depthwise convolution whose kernel covers the whole feature map -> ``(N, C, 1, 1)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_dwconv expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if not p.is_depthwise or p.out_channels != c:
        raise ShapeError("global_dwconv needs a depthwise kernel with groups == channels")
    if p.kernel_size != (h, w) or p.padding != 0:
        raise ShapeError(f"kernel {p.kernel_size} must exactly cover the {h}x{w} map with no padding")
    weight = np.asarray(p.weight, dtype=x.dtype)[:, 0]
    out = np.einsum("nchw,chw->nc", x, weight)
    if p.bias is not None:
        out += np.asarray(p.bias, dtype=x.dtype)
    return _finite(out.reshape(n, c, 1, 1), "global_dwconv")


def linear_tokens(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mix the token axis of a ``(B, Cg, N)`` tensor: ``x @ w + b`` for every channel row."""
    if x.ndim != 3:
        raise ShapeError(f"linear_tokens expects (B, C, N) input, got shape {x.shape}")
    n = x.shape[-1]
    if w.shape != (n, n) or np.shape(b) != (n,):
        raise ShapeError(f"token weights must be ({n}, {n}) and ({n},), got {w.shape} and {np.shape(b)}")
    out = np.matmul(x, np.asarray(w, dtype=x.dtype)) + np.asarray(b, dtype=x.dtype)
    return _finite(out, "linear_tokens")


def token_project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Bias-free token projection ``(B, Cg, N) @ (N, M) -> (B, Cg, M)``."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"token_project: cannot apply {w.shape} weight to input {x.shape}")
    return _finite(np.matmul(x, np.asarray(w, dtype=x.dtype)), "token_project")


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row-vector dense layer ``x @ w (+ b)`` with ``w`` of shape ``(in, out)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot apply {w.shape} weight to input {x.shape}")
    # one (1, in) @ (in, out) product per row keeps each row independent of batch size
    out = np.matmul(x[:, None, :], np.asarray(w, dtype=x.dtype))[:, 0, :]
    if b is not None:
        out += np.asarray(_vec(b, w.shape[1], "dense bias"), dtype=x.dtype)
    return _finite(out, "dense")


def batchnorm_infer(x: np.ndarray, p: BNParams) -> np.ndarray:
    if x.ndim < 2 or x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm over {p.channels} channels got input {x.shape}")
    v = lambda a: _channel_view(a, x.ndim, x.dtype)  # noqa: E731
    std = np.sqrt(v(p.running_var) + x.dtype.type(p.eps))
    out = (x - v(p.running_mean)) / std * v(p.gamma) + v(p.beta)
    return _finite(out, "batchnorm_infer")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    x = np.asarray(x)
    half = x.dtype.type(0.5)
    out = half * x * (1 + special.erf(x * x.dtype.type(1 / math.sqrt(2))))
    return _finite(out.astype(x.dtype, copy=False), "gelu")


def affine(x: np.ndarray, p: AffineParams) -> np.ndarray:
    if x.ndim < 2 or x.shape[1] != p.channels:
        raise ShapeError(f"affine over {p.channels} channels got input {x.shape}")
    out = _channel_view(p.alpha, x.ndim, x.dtype) * x + _channel_view(p.beta, x.ndim, x.dtype)
    return _finite(out, "affine")


def channel_scale(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or np.shape(scale) != (x.shape[1],):
        raise ShapeError(f"per-channel scale {np.shape(scale)} does not match input {x.shape}")
    return _finite(_channel_view(scale, x.ndim, x.dtype) * x, "channel_scale")


def layer_norm_channels(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    """Normalize each token across channels; ``x`` is ``(B, C, N)`` or NCHW."""
    if x.ndim < 2 or x.shape[1] != p.channels:
        raise ShapeError(f"layernorm over {p.channels} channels got input {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    out = (x - mean) / np.sqrt(var + x.dtype.type(p.eps))
    out = out * _channel_view(p.weight, x.ndim, x.dtype) + _channel_view(p.bias, x.ndim, x.dtype)
    return _finite(out, "layer_norm_channels")


def chunk_sizes(channels: int, parts: int) -> list[int]:
    """Group sizes produced by :func:`chunk_channels` (ceiling split, short tail)."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts > channels:
        raise ShapeError(f"cannot split {channels} channels into {parts} parts")
    size = -(-channels // parts)
    sizes = [size] * (channels // size)
    if channels % size:
        sizes.append(channels % size)
    return sizes


def chunk_channels(x: np.ndarray, parts: int) -> list[np.ndarray]:
    """Split axis 1 into contiguous groups of ``ceil(C / parts)`` channels.

    Like ``torch.chunk`` this can return fewer than ``parts`` groups when the
    ceiling size exhausts the channels early (e.g. 6 channels into 4 parts).
    """
    bounds = np.cumsum([0] + chunk_sizes(x.shape[1], parts))
    return [x[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
