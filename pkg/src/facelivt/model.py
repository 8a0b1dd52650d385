"""Variant configurations, seeded graph construction and end-to-end forward."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import (
    ConvBN, DownsampleSpec, EncoderSpec, FFNSpec, Form, HeadSpec, LiteMHLASpec,
    MHLAv1Spec, RepMixSpec, StemSpec,
)
from .errors import ConfigError, ShapeError
from .tensor import AffineParams, BNParams, ConvParams, LayerNormParams

LS_INIT = 1e-5
BN_EPS = 1e-5


def _conv_out(h: int) -> int:
    # every spatial reduction is a 3x3 / stride 2 / pad 1 convolution
    return (h + 2 - 3) // 2 + 1


@dataclass(frozen=True)
class VariantConfig:
    """Channel/depth/head schedule of one backbone plus ablation switches.

    ``norm_kind`` and ``lite_activation`` only affect the lite mixer; the v1
    mixer always uses LayerNorm and GELU.
    """

    name: str
    stem_channels: tuple[int, int]
    stage_channels: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int] = (3, 3, 9, 3)
    stage_kinds: tuple[str, str, str, str] = ("R", "R", "RL", "RL")
    ffn_ratio: int = 2
    n_head: int = 4
    input_res: int = 112
    in_channels: int = 3
    head_expand: int = 1284
    embed_dim: int = 512
    mhla_kind: str = "lite"
    norm_kind: str = "affine"
    lite_activation: str = "none"
    v1_ratio: float = 0.5
    ablations: tuple[str, ...] = field(default=())

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        r = _conv_out(_conv_out(self.input_res))
        out = [r]
        for _ in range(3):
            r = _conv_out(r)
            out.append(r)
        return tuple(out)

    @property
    def label(self) -> str:
        return "+".join((self.name,) + self.ablations)

    def validate(self) -> "VariantConfig":
        def ints(xs, n, what):
            if len(xs) != n or any(not isinstance(v, (int, np.integer)) or v < 1 for v in xs):
                raise ConfigError(f"{what} must be {n} positive integers, got {xs}")

        ints(self.stem_channels, 2, "stem_channels")
        ints(self.stage_channels, 4, "stage_channels")
        ints(self.stage_depths, 4, "stage_depths")
        if len(self.stage_kinds) != 4 or any(k not in ("R", "RL") for k in self.stage_kinds):
            raise ConfigError(f"stage_kinds must be four of R/RL, got {self.stage_kinds}")
        if self.mhla_kind not in ("lite", "v1"):
            raise ConfigError(f"mhla_kind must be lite or v1, got {self.mhla_kind!r}")
        if self.norm_kind not in ("affine", "layernorm"):
            raise ConfigError(f"norm_kind must be affine or layernorm, got {self.norm_kind!r}")
        if self.lite_activation not in ("none", "gelu"):
            raise ConfigError(f"lite_activation must be none or gelu, got {self.lite_activation!r}")
        if self.mhla_kind == "v1" and (self.norm_kind != "affine" or self.lite_activation != "none"):
            raise ConfigError("norm/activation knobs apply to the lite mixer only, not to v1")
        if self.ffn_ratio < 1 or self.n_head < 1:
            raise ConfigError("ffn_ratio and n_head must be >= 1")
        res = self.stage_resolutions
        if res[-1] < 1:
            raise ConfigError(f"input resolution {self.input_res} too small for four stride-2 stages")
        for c, kind, r in zip(self.stage_channels, self.stage_kinds, res):
            if kind != "RL":
                continue
            if self.n_head > c or len(T.chunk_sizes(c, self.n_head)) != self.n_head:
                raise ConfigError(f"{c} channels cannot be split into {self.n_head} heads")
            if self.mhla_kind == "v1" and np.floor(r * r * self.v1_ratio + 0.5) < 1:
                raise ConfigError(f"v1 ratio {self.v1_ratio} too small for N={r * r}")
        return self


VARIANTS: dict[str, VariantConfig] = {
    "XS": VariantConfig("XS", (16, 32), (32, 64, 128, 256)),
    "S": VariantConfig("S", (24, 48), (48, 96, 192, 384)),
    "M": VariantConfig("M", (28, 56), (56, 112, 224, 448)),
    "L": VariantConfig("L", (32, 64), (64, 128, 256, 512)),
}


def variant(name: str) -> VariantConfig:
    try:
        return VARIANTS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


def build_ablation(base: VariantConfig, knob: str) -> VariantConfig:
    """Apply one ablation knob, e.g. ``kinds=R,R,R,R``, ``n_head=5``, ``norm=layernorm``,
    ``activation=gelu`` or ``mhla=v1``."""
    key, sep, value = knob.partition("=")
    key, value = key.strip().lower(), value.strip()
    if not sep or not value:
        raise ConfigError(f"ablation knob must look like key=value, got {knob!r}")
    if key == "kinds":
        kinds = tuple(k.strip().upper() for k in value.strip("[]").split(","))
        changes = {"stage_kinds": kinds}
    elif key == "n_head":
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"n_head must be an integer, got {value!r}") from None
        changes = {"n_head": n}
    elif key == "norm":
        changes = {"norm_kind": value.lower()}
    elif key == "activation":
        changes = {"lite_activation": value.lower()}
    elif key == "mhla":
        changes = {"mhla_kind": value.lower()}
    else:
        raise ConfigError(f"unknown ablation knob {key!r}")
    cfg = dataclasses.replace(base, ablations=base.ablations + (f"{key}={value}",), **changes)
    return cfg.validate()


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Ordered ``(name, spec)`` blocks of one network in a single form and dtype."""

    config: VariantConfig
    blocks: tuple[tuple[str, B.BlockSpec], ...]
    form: Form
    dtype: np.dtype
    seed: int = 0

    @property
    def n_head(self) -> int:
        return self.config.n_head

    def __getitem__(self, name: str) -> B.BlockSpec:
        for n, s in self.blocks:
            if n == name:
                return s
        raise KeyError(name)

    def encoders(self) -> Iterator[tuple[str, EncoderSpec]]:
        for name, s in self.blocks:
            if isinstance(s, EncoderSpec):
                yield name, s

    def weights(self) -> dict[str, np.ndarray]:
        """The named weight store: every parameter array under a unique dotted name."""
        out = {}
        for name, spec in self.blocks:
            for sub, arr in B.named_tensors(spec, name):
                if sub in out:
                    raise ValueError(f"duplicate tensor name {sub}")
                out[sub] = arr
        return out

    def with_weights(self, weights: dict[str, np.ndarray]) -> "ModelGraph":
        """Same structure with every array replaced from ``weights`` (shapes must match)."""
        missing = set(self.weights()) - set(weights)
        extra = set(weights) - set(self.weights())
        if missing or extra:
            raise ShapeError(f"weight names differ: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")

        def swap(name, old):
            new = np.asarray(weights[name])
            if new.shape != old.shape:
                raise ShapeError(f"{name}: expected shape {old.shape}, got {new.shape}")
            return new.astype(self.dtype, copy=False)

        blocks = tuple((n, B.replace_tensors(s, swap, n)) for n, s in self.blocks)
        return dataclasses.replace(self, blocks=blocks)

    def astype(self, dtype) -> "ModelGraph":
        dt = T.as_dtype(dtype)
        blocks = tuple((n, B.replace_tensors(s, lambda _, a: a.astype(dt), n)) for n, s in self.blocks)
        return dataclasses.replace(self, blocks=blocks, dtype=dt)


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def const(self, shape, value: float) -> np.ndarray:
        return np.full(shape, value, dtype=self.dtype)

    def conv(self, cin, cout, k, stride=1, padding=0, groups=1, bias=False) -> ConvParams:
        fan_in = (cin // groups) * k * k
        w = self.uniform((cout, cin // groups, k, k), fan_in)
        b = self.const(cout, 0.0) if bias else None
        return ConvParams(w, b, stride=stride, padding=padding, groups=groups)

    def bn(self, c: int) -> BNParams:
        return BNParams(self.const(c, 1.0), self.const(c, 0.0), self.const(c, 0.0), self.const(c, 1.0), BN_EPS)

    def convbn(self, cin, cout, k, stride=1, padding=0, groups=1, act=False) -> ConvBN:
        return ConvBN(self.conv(cin, cout, k, stride, padding, groups), self.bn(cout), act)


def build(config: VariantConfig, seed: int = 0, dtype="f32") -> ModelGraph:
    """Construct a train-form graph with deterministic seeded weights."""
    cfg = config.validate()
    dt = T.as_dtype(dtype)
    init = _Init(seed, dt)
    s0, s1 = cfg.stem_channels
    blocks: list[tuple[str, B.BlockSpec]] = [
        ("stem", StemSpec(init.convbn(cfg.in_channels, s0, 3, 2, 1, act=True),
                          init.convbn(s0, s1, 3, 2, 1, act=True))),
    ]
    cin = s1
    res = cfg.stage_resolutions
    for i, (c, depth, kind, r) in enumerate(zip(cfg.stage_channels, cfg.stage_depths, cfg.stage_kinds, res)):
        if cin != c:
            raise ConfigError(f"stage {i + 1} expects {c} channels but receives {cin}")
        n = r * r
        for j in range(depth):
            repmix = RepMixSpec(c, init.conv(c, c, 3, padding=1, groups=c, bias=True),
                                init.conv(c, c, 1, groups=c, bias=True), init.bn(c))
            mixer = _build_mixer(init, cfg, c, n) if kind == "RL" else None
            h = cfg.ffn_ratio * c
            ffn = FFNSpec(c, cfg.ffn_ratio, init.convbn(c, h, 1, act=True), init.convbn(h, c, 1))
            blocks.append((f"stage{i + 1}.block{j}", EncoderSpec(kind, repmix, ffn, mixer)))
        if i < 3:
            nxt = cfg.stage_channels[i + 1]
            blocks.append((f"stage{i + 1}.down", DownsampleSpec(init.convbn(c, nxt, 3, 2, 1))))
            cin = nxt
    e = cfg.head_expand
    head = HeadSpec(init.convbn(cin, e, 1, act=True),
                    init.convbn(e, e, res[-1], groups=e),
                    init.uniform((e, cfg.embed_dim), e),
                    init.const(cfg.embed_dim, 0.0))
    blocks.append(("head", head))
    return ModelGraph(cfg, tuple(blocks), Form.TRAIN, dt, seed)


def _build_mixer(init: _Init, cfg: VariantConfig, c: int, n: int) -> B.Mixer:
    if cfg.mhla_kind == "v1":
        nr = B.projected_tokens(n, cfg.v1_ratio)
        return MHLAv1Spec(
            c, n, cfg.n_head, cfg.v1_ratio,
            tuple(init.uniform((n, nr), n) for _ in range(cfg.n_head)),
            tuple(init.uniform((nr, n), nr) for _ in range(cfg.n_head)),
            LayerNormParams(init.const(c, 1.0), init.const(c, 0.0)),
        )
    if cfg.norm_kind == "layernorm":
        norm = LayerNormParams(init.const(c, 1.0), init.const(c, 0.0))
    else:
        norm = AffineParams(init.const(c, 1.0), init.const(c, 0.0))
    heads = tuple((init.uniform((n, n), n), init.const(n, 0.0)) for _ in range(cfg.n_head))
    return LiteMHLASpec(c, n, cfg.n_head, norm, heads, init.const(c, LS_INIT),
                        activation=cfg.lite_activation == "gelu")


def check_input(g: ModelGraph, x: np.ndarray) -> np.ndarray:
    cfg = g.config
    want = (cfg.in_channels, cfg.input_res, cfg.input_res)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"expected input (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
    return np.asarray(x, dtype=g.dtype)


def forward(g: ModelGraph, x: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Embed a ``(B, 3, 112, 112)`` batch into ``(B, 512)``.

    If ``trace`` is a list, ``(layer, shape)`` pairs are appended for every layer
    row of the architecture table (stem convs, stage outputs, head layers).
    """
    x = check_input(g, x)
    for name, spec in g.blocks:
        if isinstance(spec, StemSpec):
            x = B.convbn_forward(x, spec.conv1)
            _note(trace, "stem.conv1", x)
            x = B.convbn_forward(x, spec.conv2)
            _note(trace, "stem.conv2", x)
        elif isinstance(spec, HeadSpec):
            x = B.head_forward(x, spec, trace)
        else:
            x = B.block_forward(x, spec)
            stage, _, part = name.partition(".")
            if part == "down":
                _note(trace, name, x)
            elif int(part[len("block"):]) == g.config.stage_depths[int(stage[len("stage"):]) - 1] - 1:
                _note(trace, f"{stage}.encoder", x)
    return x


def _note(trace, label, x):
    if trace is not None:
        trace.append((label, tuple(x.shape)))


def shape_trace(g: ModelGraph, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    trace: list = []
    x = np.zeros((batch, g.config.in_channels, g.config.input_res, g.config.input_res), g.dtype)
    forward(g, x, trace)
    return trace


def sample_inputs(n: int, config: VariantConfig, seed: int = 0, dtype="f32") -> np.ndarray:
    """Seeded batch uniform in [-1, 1], the normalized face-crop range."""
    rng = np.random.default_rng(seed)
    shape = (n, config.in_channels, config.input_res, config.input_res)
    return rng.uniform(-1.0, 1.0, size=shape).astype(T.as_dtype(dtype))


# --- BN statistics calibration --------------------------------------------

def calibrate_bn(g: ModelGraph, x: np.ndarray, rng: np.random.Generator | None = None) -> ModelGraph:
    """Set every BN's running statistics to the batch statistics it sees on ``x``.

    Freshly initialised weights with identity statistics let activations grow
    through the residual stack; recalibrating gives the graph the numerics of a
    trained network.  With ``rng`` the BN scale/shift are also drawn from
    U(0.5, 1.5) / U(-0.5, 0.5) so folding exercises every term.
    """
    if g.form is not Form.TRAIN:
        raise ValueError("only train-form graphs carry BN statistics")
    x = check_input(g, x)

    def stats(y: np.ndarray, bn: BNParams) -> BNParams:
        axes = (0,) + tuple(range(2, y.ndim))
        c = bn.channels
        gamma, beta = bn.gamma, bn.beta
        if rng is not None:
            gamma = rng.uniform(0.5, 1.5, c).astype(g.dtype)
            beta = rng.uniform(-0.5, 0.5, c).astype(g.dtype)
        return BNParams(gamma, beta, y.mean(axis=axes).astype(g.dtype), y.var(axis=axes).astype(g.dtype), bn.eps)

    def convbn(x, s: ConvBN):
        s = dataclasses.replace(s, bn=stats(T.conv2d(x, s.conv), s.bn))
        return B.convbn_forward(x, s), s

    out = []
    for name, spec in g.blocks:
        if isinstance(spec, StemSpec):
            x, c1 = convbn(x, spec.conv1)
            x, c2 = convbn(x, spec.conv2)
            spec = StemSpec(c1, c2)
        elif isinstance(spec, DownsampleSpec):
            x, layer = convbn(x, spec.layer)
            spec = DownsampleSpec(layer)
        elif isinstance(spec, EncoderSpec):
            rm = spec.repmix
            rm = dataclasses.replace(rm, bn=stats(T.conv2d(x, rm.dw3) + T.conv2d(x, rm.dw1), rm.bn))
            x = B.repmix_forward(x, rm)
            if spec.mixer is not None:
                x = x + B.mixer_forward(x, spec.mixer)
            h, e = convbn(x, spec.ffn.expand)
            r, red = convbn(h, spec.ffn.reduce)
            x = x + r
            spec = EncoderSpec(spec.kind, rm, dataclasses.replace(spec.ffn, expand=e, reduce=red), spec.mixer)
        elif isinstance(spec, HeadSpec):
            y, e = convbn(x, spec.expand)
            z = T.global_dwconv(y, spec.gdconv.conv)
            gd = dataclasses.replace(spec.gdconv, bn=stats(z, spec.gdconv.bn))
            spec = dataclasses.replace(spec, expand=e, gdconv=gd)
            x = B.head_forward(x, spec)
        out.append((name, spec))
    return dataclasses.replace(g, blocks=tuple(out))


CALIBRATION_SAMPLES = 16


def build_calibrated(config: VariantConfig, seed: int = 0, dtype="f32",
                     samples: int = CALIBRATION_SAMPLES) -> ModelGraph:
    """``build`` followed by a seeded BN calibration; deterministic in ``seed``."""
    g = build(config, seed=seed, dtype=dtype)
    x = sample_inputs(samples, g.config, seed=seed + 1_000_003, dtype=dtype)
    return calibrate_bn(g, x, rng=np.random.default_rng([seed, 1]))
