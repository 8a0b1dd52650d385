"""Composite blocks of the backbone as declarative specs plus pure executors.

A spec is a frozen dataclass holding parameter arrays and hyperparameters.  The
reparameterization pass rewrites specs; executors only read them.  Block
outputs of the token mixers and the FFN are *mixing terms*: residual additions
belong to :func:`encoder_forward`.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import tensor as T
from .errors import FormError, ShapeError
from .tensor import AffineParams, BNParams, ConvParams, LayerNormParams


class Form(str, enum.Enum):
    TRAIN = "train"
    DEPLOY = "deploy"


@dataclass(frozen=True, eq=False)
class ConvBN:
    """A convolution, optionally followed by inference BN, optionally followed by GELU.

    Deploy form simply has ``bn=None`` (the statistics live in the conv).
    """

    conv: ConvParams
    bn: BNParams | None = None
    act: bool = False

    def __post_init__(self):
        if self.bn is not None and self.bn.channels != self.conv.out_channels:
            raise ShapeError("BN channels must equal conv output channels")

    @property
    def form(self) -> Form:
        return Form.TRAIN if self.bn is not None else Form.DEPLOY


def convbn_forward(x: np.ndarray, s: ConvBN) -> np.ndarray:
    y = T.conv2d(x, s.conv)
    if s.bn is not None:
        y = T.batchnorm_infer(y, s.bn)
    return T.gelu(y) if s.act else y


@dataclass(frozen=True, eq=False)
class StemSpec:
    conv1: ConvBN
    conv2: ConvBN

    @property
    def form(self) -> Form:
        return self.conv1.form


@dataclass(frozen=True, eq=False)
class DownsampleSpec:
    layer: ConvBN

    @property
    def form(self) -> Form:
        return self.layer.form


@dataclass(frozen=True, eq=False)
class RepMixSpec:
    """Residual depthwise 3x3 + depthwise 1x1 + BN, or its single fused 3x3 conv."""

    channels: int
    dw3: ConvParams | None = None
    dw1: ConvParams | None = None
    bn: BNParams | None = None
    fused: ConvParams | None = None

    def __post_init__(self):
        train = (self.dw3, self.dw1, self.bn)
        if self.fused is None:
            if any(p is None for p in train):
                raise FormError("train-form RepMix needs dw3, dw1 and bn")
            convs = (self.dw3, self.dw1)
            if self.bn.channels != self.channels:
                raise ShapeError("RepMix BN channel count mismatch")
        else:
            if any(p is not None for p in train):
                raise FormError("deploy-form RepMix carries only the fused conv")
            convs = (self.fused,)
        for p in convs:
            if not (p.is_depthwise and p.out_channels == self.channels):
                raise ShapeError(f"RepMix branches must be depthwise over {self.channels} channels")

    @property
    def form(self) -> Form:
        return Form.DEPLOY if self.fused is not None else Form.TRAIN


@dataclass(frozen=True, eq=False)
class FFNSpec:
    """Pointwise expand (BN, GELU) then pointwise reduce (BN)."""

    channels: int
    ratio: int
    expand: ConvBN
    reduce: ConvBN

    def __post_init__(self):
        e, r = self.expand.conv, self.reduce.conv
        if e.kernel_size != (1, 1) or r.kernel_size != (1, 1) or e.groups != 1 or r.groups != 1:
            raise ShapeError("FFN convolutions must be dense 1x1")
        if e.in_channels != self.channels or e.out_channels != self.ratio * self.channels:
            raise ShapeError("FFN expand shape does not match channels * ratio")
        if r.in_channels != e.out_channels or r.out_channels != self.channels:
            raise ShapeError("FFN reduce shape mismatch")

    @property
    def hidden(self) -> int:
        return self.ratio * self.channels

    @property
    def form(self) -> Form:
        return self.expand.form


@dataclass(frozen=True, eq=False)
class LiteMHLASpec:
    """Per-head biased N x N token interaction between an affine rescale and a layer scale."""

    channels: int
    tokens: int
    n_head: int
    norm: Union[AffineParams, LayerNormParams]
    head_weights: tuple[tuple[np.ndarray, np.ndarray], ...]
    ls: np.ndarray
    activation: bool = False

    def __post_init__(self):
        if len(self.head_weights) != self.n_head:
            raise ShapeError(f"expected {self.n_head} heads, got {len(self.head_weights)}")
        if len(T.chunk_sizes(self.channels, self.n_head)) != self.n_head:
            raise ShapeError(f"{self.channels} channels cannot be chunked into {self.n_head} heads")
        n = self.tokens
        for w, b in self.head_weights:
            if w.shape != (n, n) or b.shape != (n,):
                raise ShapeError(f"head weights must be ({n}, {n}) and ({n},)")
        if self.ls.shape != (self.channels,) or self.norm.channels != self.channels:
            raise ShapeError("layer scale and norm must have one entry per channel")


@dataclass(frozen=True, eq=False)
class MHLAv1Spec:
    """Baseline per-head Linear-GELU-Linear token mixer behind a channel LayerNorm."""

    channels: int
    tokens: int
    n_head: int
    ratio: float
    w_in: tuple[np.ndarray, ...]
    w_out: tuple[np.ndarray, ...]
    norm: LayerNormParams | None = None

    def __post_init__(self):
        nr = self.projected
        if len(self.w_in) != self.n_head or len(self.w_out) != self.n_head:
            raise ShapeError("one input and one output projection per head")
        if len(T.chunk_sizes(self.channels, self.n_head)) != self.n_head:
            raise ShapeError(f"{self.channels} channels cannot be chunked into {self.n_head} heads")
        for wi, wo in zip(self.w_in, self.w_out):
            if wi.shape != (self.tokens, nr) or wo.shape != (nr, self.tokens):
                raise ShapeError(f"v1 projections must be ({self.tokens}, {nr}) and ({nr}, {self.tokens})")

    @property
    def projected(self) -> int:
        return projected_tokens(self.tokens, self.ratio)


def projected_tokens(tokens: int, ratio: float) -> int:
    """Hidden token width of the v1 mixer, ``round(N * r)`` with halves rounded up."""
    nr = int(np.floor(tokens * ratio + 0.5))
    if nr < 1:
        raise ShapeError(f"ratio {ratio} leaves no hidden tokens for N={tokens}")
    return nr


Mixer = Union[LiteMHLASpec, MHLAv1Spec]


@dataclass(frozen=True, eq=False)
class EncoderSpec:
    """``R`` block = RepMix + FFN; ``RL`` block additionally carries a token mixer."""

    kind: str
    repmix: RepMixSpec
    ffn: FFNSpec
    mixer: Mixer | None = None

    def __post_init__(self):
        if self.kind not in ("R", "RL"):
            raise ShapeError(f"unknown encoder kind {self.kind!r}")
        if (self.kind == "RL") != (self.mixer is not None):
            raise ShapeError(f"{self.kind} encoder {'needs' if self.kind == 'RL' else 'takes no'} token mixer")

    @property
    def form(self) -> Form:
        return self.repmix.form


@dataclass(frozen=True, eq=False)
class HeadSpec:
    """1x1 expansion (BN, GELU), whole-map depthwise conv (BN), dense projection to the embedding."""

    expand: ConvBN
    gdconv: ConvBN
    embed_weight: np.ndarray
    embed_bias: np.ndarray

    def __post_init__(self):
        g = self.gdconv.conv
        if not g.is_depthwise or g.padding != 0:
            raise ShapeError("GDConv must be an unpadded depthwise conv")
        if self.expand.conv.out_channels != g.in_channels or g.out_channels != self.embed_weight.shape[0]:
            raise ShapeError("head channel chain mismatch")
        if self.embed_bias.shape != (self.embed_weight.shape[1],):
            raise ShapeError("embedding bias shape mismatch")

    @property
    def form(self) -> Form:
        return self.expand.form


BlockSpec = Union[StemSpec, EncoderSpec, DownsampleSpec, HeadSpec]


# --- executors -------------------------------------------------------------

def repmix_forward(x: np.ndarray, s: RepMixSpec) -> np.ndarray:
    if s.form is not Form.TRAIN:
        raise FormError("repmix_forward needs a train-form spec")
    if x.shape[1] != s.channels:
        raise ShapeError(f"RepMix over {s.channels} channels got input {x.shape}")
    branch = T.conv2d(x, s.dw3) + T.conv2d(x, s.dw1)
    return x + T.batchnorm_infer(branch, s.bn)


def repmix_forward_deploy(x: np.ndarray, s: RepMixSpec) -> np.ndarray:
    if s.form is not Form.DEPLOY:
        raise FormError("repmix_forward_deploy needs a deploy-form spec")
    return T.conv2d(x, s.fused)


def repmix_apply(x: np.ndarray, s: RepMixSpec) -> np.ndarray:
    return repmix_forward(x, s) if s.form is Form.TRAIN else repmix_forward_deploy(x, s)


def _tokens(x: np.ndarray, channels: int, tokens: int) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"token mixer expects NCHW input, got {x.shape}")
    b, c, h, w = x.shape
    if c != channels:
        raise ShapeError(f"token mixer over {channels} channels got {c}")
    if h * w != tokens:
        raise ShapeError(f"token mixer built for N={tokens} got {h}x{w}")
    return x.reshape(b, c, tokens)


def lite_mhla_forward(x: np.ndarray, s: LiteMHLASpec) -> np.ndarray:
    t = _tokens(x, s.channels, s.tokens)
    if isinstance(s.norm, LayerNormParams):
        t = T.layer_norm_channels(t, s.norm)
    else:
        t = T.affine(t, s.norm)
    heads = T.chunk_channels(t, s.n_head)
    mixed = []
    for part, (w, b) in zip(heads, s.head_weights):
        y = T.linear_tokens(part, w, b)
        mixed.append(T.gelu(y) if s.activation else y)
    y = np.concatenate(mixed, axis=1)
    return T.channel_scale(y.reshape(x.shape), s.ls)


def mhla_v1_forward(x: np.ndarray, s: MHLAv1Spec) -> np.ndarray:
    t = _tokens(x, s.channels, s.tokens)
    if s.norm is not None:
        t = T.layer_norm_channels(t, s.norm)
    heads = T.chunk_channels(t, s.n_head)
    out = [T.token_project(T.gelu(T.token_project(part, wi)), wo)
           for part, wi, wo in zip(heads, s.w_in, s.w_out)]
    return np.concatenate(out, axis=1).reshape(x.shape)


def mixer_forward(x: np.ndarray, s: Mixer) -> np.ndarray:
    if isinstance(s, LiteMHLASpec):
        return lite_mhla_forward(x, s)
    return mhla_v1_forward(x, s)


def ffn_forward(x: np.ndarray, s: FFNSpec) -> np.ndarray:
    if x.shape[1] != s.channels:
        raise ShapeError(f"FFN over {s.channels} channels got input {x.shape}")
    return convbn_forward(convbn_forward(x, s.expand), s.reduce)


def encoder_forward(x: np.ndarray, s: EncoderSpec) -> np.ndarray:
    x = repmix_apply(x, s.repmix)
    if s.kind == "RL":
        x = x + mixer_forward(x, s.mixer)
    return x + ffn_forward(x, s.ffn)


def stem_forward(x: np.ndarray, s: StemSpec) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != s.conv1.conv.in_channels:
        raise ShapeError(f"stem expects (B, {s.conv1.conv.in_channels}, H, W), got {x.shape}")
    return convbn_forward(convbn_forward(x, s.conv1), s.conv2)


def downsample_forward(x: np.ndarray, s: DownsampleSpec) -> np.ndarray:
    return convbn_forward(x, s.layer)


def head_forward(x: np.ndarray, s: HeadSpec, trace: list | None = None) -> np.ndarray:
    kh, kw = s.gdconv.conv.kernel_size
    if x.ndim != 4 or x.shape[2:] != (kh, kw):
        raise ShapeError(f"head expects a {kh}x{kw} feature map, got {x.shape}")
    y = convbn_forward(x, s.expand)
    steps = [("head.expand", y.shape)]
    y = T.global_dwconv(y, s.gdconv.conv)
    if s.gdconv.bn is not None:
        y = T.batchnorm_infer(y, s.gdconv.bn)
    steps.append(("head.gdconv", y.shape))
    out = T.dense(y.reshape(y.shape[0], -1), s.embed_weight, s.embed_bias)
    steps.append(("head.linear", out.shape))
    if trace is not None:
        trace.extend(steps)
    return out


def block_forward(x: np.ndarray, s: BlockSpec) -> np.ndarray:
    if isinstance(s, EncoderSpec):
        return encoder_forward(x, s)
    if isinstance(s, DownsampleSpec):
        return downsample_forward(x, s)
    if isinstance(s, StemSpec):
        return stem_forward(x, s)
    if isinstance(s, HeadSpec):
        return head_forward(x, s)
    raise TypeError(f"not a block spec: {type(s).__name__}")


# --- flattening to named tensors ------------------------------------------

def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted.name, array)`` for every parameter array reachable from ``obj``."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")


def replace_tensors(obj, lookup, prefix: str = ""):
    """Rebuild ``obj`` with every array swapped for ``lookup(name, old_array)``."""
    if isinstance(obj, np.ndarray):
        return lookup(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (np.ndarray, tuple, list)) or dataclasses.is_dataclass(val):
                changes[f.name] = replace_tensors(val, lookup, f"{prefix}.{f.name}" if prefix else f.name)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, (tuple, list)):
        return type(obj)(replace_tensors(v, lookup, f"{prefix}.{i}") for i, v in enumerate(obj))
    return obj
