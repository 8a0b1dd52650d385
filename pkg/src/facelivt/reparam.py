"""Structural reparameterization: train-form graph -> BN-free single-branch deploy graph.

RepMix ``x + BN(DW3(x) + DW1(x))`` becomes one depthwise 3x3 conv: the 1x1
kernel is zero-padded to 3x3, summed with the 3x3 kernel, BN is folded into the
sum, and the residual is added as a centre-tap identity kernel.  Every other
conv immediately followed by BN (stem, downsampling, FFN, head) is folded too.
Token mixers are left untouched.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from .blocks import ConvBN, DownsampleSpec, EncoderSpec, Form, HeadSpec, RepMixSpec, StemSpec
from .errors import AlreadyFusedError, ShapeError
from .model import ModelGraph, forward, sample_inputs
from .tensor import BNParams, ConvParams, dtype_name

DEFAULT_TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-9}


def pad_kernel_1to3(w: np.ndarray) -> np.ndarray:
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"expected a (C, Cin/g, 1, 1) kernel, got {w.shape}")
    return np.pad(w, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_kernel(channels: int, dtype=np.float32) -> np.ndarray:
    """Depthwise 3x3 kernel that reproduces its input under padding 1, stride 1."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    k = np.zeros((channels, 1, 3, 3), dtype=dtype)
    k[:, 0, 1, 1] = 1
    return k


def fold_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb inference BN into the preceding conv: ``W * g/s`` and ``(b - mu) * g/s + beta``."""
    if bn.channels != conv.out_channels:
        raise ShapeError(f"conv has {conv.out_channels} outputs but BN has {bn.channels} channels")
    var = np.asarray(bn.running_var, dtype=np.float64) + bn.eps
    if np.any(var <= 0):
        raise ValueError("running_var + eps must be positive")
    scale = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(var)
    bias = np.zeros(conv.out_channels) if conv.bias is None else np.asarray(conv.bias, dtype=np.float64)
    dt = conv.weight.dtype
    w = np.asarray(conv.weight, dtype=np.float64) * scale[:, None, None, None]
    b = (bias - bn.running_mean) * scale + bn.beta
    return dataclasses.replace(conv, weight=w.astype(dt), bias=b.astype(dt))


def fold_convbn(s: ConvBN) -> ConvBN:
    if s.bn is None:
        raise AlreadyFusedError("conv")
    return ConvBN(fold_bn(s.conv, s.bn), None, s.act)


def fuse_repmix(s: RepMixSpec) -> RepMixSpec:
    if s.form is Form.DEPLOY:
        raise AlreadyFusedError("RepMix")
    dt = s.dw3.weight.dtype
    w = np.asarray(s.dw3.weight, np.float64) + pad_kernel_1to3(np.asarray(s.dw1.weight, np.float64))
    b = np.zeros(s.channels)
    for p in (s.dw3, s.dw1):
        if p.bias is not None:
            b = b + p.bias
    merged = fold_bn(ConvParams(w, b, stride=1, padding=1, groups=s.channels), s.bn)
    # residual sits outside the BN, so the identity tap joins after folding
    weight = merged.weight + identity_kernel(s.channels, np.float64)
    fused = ConvParams(weight.astype(dt), merged.bias.astype(dt), stride=1, padding=1, groups=s.channels)
    return RepMixSpec(s.channels, fused=fused)


def fuse_block(spec: B.BlockSpec) -> B.BlockSpec:
    if isinstance(spec, StemSpec):
        return StemSpec(fold_convbn(spec.conv1), fold_convbn(spec.conv2))
    if isinstance(spec, DownsampleSpec):
        return DownsampleSpec(fold_convbn(spec.layer))
    if isinstance(spec, EncoderSpec):
        ffn = dataclasses.replace(spec.ffn, expand=fold_convbn(spec.ffn.expand),
                                  reduce=fold_convbn(spec.ffn.reduce))
        return EncoderSpec(spec.kind, fuse_repmix(spec.repmix), ffn, spec.mixer)
    if isinstance(spec, HeadSpec):
        return dataclasses.replace(spec, expand=fold_convbn(spec.expand), gdconv=fold_convbn(spec.gdconv))
    raise TypeError(f"not a block spec: {type(spec).__name__}")


def fuse_weights(g: ModelGraph) -> ModelGraph:
    """Rewrite the graph without checking equivalence."""
    if g.form is Form.DEPLOY:
        raise AlreadyFusedError()
    blocks = tuple((name, fuse_block(spec)) for name, spec in g.blocks)
    return dataclasses.replace(g, blocks=blocks, form=Form.DEPLOY)


@dataclass
class FusionReport:
    blocks_fused: int
    bn_folded: int
    max_abs_diff: list[float]
    tolerance: float
    inputs_sampled: int
    dtype: str

    @property
    def worst(self) -> float:
        return max(self.max_abs_diff) if self.max_abs_diff else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"fusion {status}: {self.blocks_fused} RepMix fused, {self.bn_folded} BN folded, "
                f"max|train-deploy|={self.worst:.3e} (tol {self.tolerance:g}, "
                f"{self.inputs_sampled} inputs, {self.dtype})")


def count_bn(g: ModelGraph) -> int:
    """Number of BN layers left in a graph."""
    return sum(_count_bn(spec) for _, spec in g.blocks)


def _count_bn(obj) -> int:
    if isinstance(obj, BNParams):
        return 1
    if dataclasses.is_dataclass(obj):
        return sum(_count_bn(getattr(obj, f.name)) for f in dataclasses.fields(obj))
    if isinstance(obj, (tuple, list)):
        return sum(_count_bn(v) for v in obj)
    return 0


def fuse_model(g: ModelGraph, tol: float | None = None, samples: int = 16,
               seed: int = 0, batch: int = 16) -> tuple[ModelGraph, FusionReport]:
    """Fuse ``g`` and measure the per-input max-abs output difference on seeded inputs."""
    deploy = fuse_weights(g)
    if tol is None:
        tol = DEFAULT_TOL[np.dtype(g.dtype)]
    x = sample_inputs(samples, g.config, seed=seed, dtype=g.dtype)
    diffs: list[float] = []
    for i in range(0, samples, batch):
        xb = x[i:i + batch]
        d = np.abs(forward(g, xb).astype(np.float64) - forward(deploy, xb).astype(np.float64))
        diffs.extend(d.reshape(len(xb), -1).max(axis=1).tolist())
    n_repmix = sum(1 for _ in g.encoders())
    report = FusionReport(n_repmix, count_bn(g), diffs, float(tol), samples, dtype_name(g.dtype))
    return deploy, report
