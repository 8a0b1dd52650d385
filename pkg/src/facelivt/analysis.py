"""Per-layer parameter / MAdds accounting and closed-form token-mixer complexity.

Headline MAdds count multiply-accumulates of convolutions, dense layers and
token mixing only.  Activations, normalization, affine rescales, layer scales,
residual adds and layout changes are listed as rows with zero MAdds; their
elementwise work is tallied separately in ``elem_ops``.  BN running statistics
are reported as ``buffers`` and kept out of the parameter headline.
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import tensor as T
from .blocks import (
    ConvBN, DownsampleSpec, EncoderSpec, HeadSpec, LiteMHLASpec, MHLAv1Spec, StemSpec,
    projected_tokens,
)
from .tensor import AffineParams, ConvParams, LayerNormParams

# operation taxonomy by runtime behaviour
CATEGORY = {
    "conv": "compute",
    "dwconv": "compute",
    "gdconv": "compute",
    "dense": "compute",
    "token_mix": "compute",
    "token_mlp": "compute",
    "gelu": "compute",
    "bn": "memory",
    "layernorm": "memory",
    "affine": "memory",
    "layer_scale": "memory",
    "add": "memory",
    "reshape": "memory",
}
TOKEN_KINDS = ("token_mix", "token_mlp")
CSV_COLUMNS = ("layer", "kind", "stage", "params", "madds", "category")
VERBOSE_COLUMNS = CSV_COLUMNS + ("buffers", "elem_ops")


@dataclass(frozen=True)
class CostRow:
    layer: str
    kind: str
    stage: str
    params: int = 0
    madds: int = 0
    buffers: int = 0
    elem_ops: int = 0

    @property
    def category(self) -> str:
        return CATEGORY[self.kind]


@dataclass
class CostReport:
    variant: str
    form: str
    rows: list[CostRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def madds(self) -> int:
        return sum(r.madds for r in self.rows)

    @property
    def buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def memory_ops(self) -> int:
        return sum(r.elem_ops for r in self.rows if r.category == "memory")

    def by_stage(self) -> "OrderedDict[str, tuple[int, int]]":
        out: OrderedDict[str, tuple[int, int]] = OrderedDict()
        for r in self.rows:
            p, m = out.get(r.stage, (0, 0))
            out[r.stage] = (p + r.params, m + r.madds)
        return out

    def by_category(self) -> dict[str, int]:
        out = {"compute": 0, "memory": 0}
        for r in self.rows:
            out[r.category] += 1
        return out

    def block_madds(self, prefix: str, kinds: Iterable[str] = TOKEN_KINDS) -> int:
        kinds = tuple(kinds)
        return sum(r.madds for r in self.rows if r.layer.startswith(prefix + ".") and r.kind in kinds)

    def to_csv(self, verbose: bool = False) -> str:
        cols = VERBOSE_COLUMNS if verbose else CSV_COLUMNS
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(cols)
        for r in self.rows:
            rec = {"layer": r.layer, "kind": r.kind, "stage": r.stage, "params": r.params,
                   "madds": r.madds, "category": r.category, "buffers": r.buffers, "elem_ops": r.elem_ops}
            w.writerow([rec[c] for c in cols])
        total = {"layer": "TOTAL", "kind": "", "stage": "", "params": self.params, "madds": self.madds,
                 "category": "", "buffers": self.buffers, "elem_ops": sum(r.elem_ops for r in self.rows)}
        w.writerow([total[c] for c in cols])
        return buf.getvalue()


def read_csv_totals(text: str) -> tuple[int, int]:
    """Return (params, madds) of the TOTAL row, checking it against the summed rows."""
    rows = list(csv.DictReader(io.StringIO(text)))
    body, total = [r for r in rows if r["layer"] != "TOTAL"], [r for r in rows if r["layer"] == "TOTAL"]
    if len(total) != 1:
        raise ValueError("CSV must contain exactly one TOTAL row")
    p, m = int(total[0]["params"]), int(total[0]["madds"])
    if p != sum(int(r["params"]) for r in body) or m != sum(int(r["madds"]) for r in body):
        raise ValueError("TOTAL row does not match the sum of layer rows")
    return p, m


# --- row generation ------------------------------------------------------

def _conv_rows(layer, stage, p: ConvParams, c, h, w, kind=None):
    ho, wo = p.output_hw(h, w)
    kh, kw = p.kernel_size
    cin_g = p.in_channels // p.groups
    params = kh * kw * cin_g * p.out_channels + (p.out_channels if p.bias is not None else 0)
    madds = kh * kw * cin_g * p.out_channels * ho * wo
    if kind is None:
        kind = "dwconv" if p.is_depthwise else "conv"
    return CostRow(layer, kind, stage, params, madds), (p.out_channels, ho, wo)


def conv_cost(p: ConvParams, h: int, w: int) -> tuple[int, int]:
    """``(params, madds)`` of one convolution applied to an ``h x w`` map."""
    row, _ = _conv_rows("conv", "", p, p.in_channels, h, w)
    return row.params, row.madds


def _bn_row(layer, stage, c, numel):
    return CostRow(layer, "bn", stage, params=2 * c, buffers=2 * c, elem_ops=2 * numel)


def _convbn_rows(prefix, stage, s: ConvBN, shape, kind=None):
    c, h, w = shape
    row, out = _conv_rows(f"{prefix}.conv", stage, s.conv, c, h, w, kind)
    rows = [row]
    numel = out[0] * out[1] * out[2]
    if s.bn is not None:
        rows.append(_bn_row(f"{prefix}.bn", stage, out[0], numel))
    if s.act:
        rows.append(CostRow(f"{prefix}.gelu", "gelu", stage, elem_ops=numel))
    return rows, out


def _mixer_rows(prefix, stage, s, shape):
    c, h, w = shape
    n = h * w
    numel = c * n
    rows = []
    if isinstance(s.norm if s.norm is not None else None, LayerNormParams):
        rows.append(CostRow(f"{prefix}.norm", "layernorm", stage, params=2 * c, elem_ops=4 * numel))
    elif isinstance(s.norm, AffineParams):
        rows.append(CostRow(f"{prefix}.norm", "affine", stage, params=2 * c, elem_ops=2 * numel))
    rows.append(CostRow(f"{prefix}.split", "reshape", stage))
    sizes = T.chunk_sizes(c, s.n_head)
    if isinstance(s, LiteMHLASpec):
        # one row per block: every head is an N x N map plus an N bias over its channel group
        rows.append(CostRow(f"{prefix}.token_mix", "token_mix", stage, params=s.n_head * (n * n + n),
                            madds=sum(cg * n * n for cg in sizes), elem_ops=numel))
        if s.activation:
            rows.append(CostRow(f"{prefix}.gelu", "gelu", stage, elem_ops=numel))
        rows.append(CostRow(f"{prefix}.concat", "reshape", stage))
        rows.append(CostRow(f"{prefix}.ls", "layer_scale", stage, params=c, elem_ops=numel))
    else:
        nr = s.projected
        rows.append(CostRow(f"{prefix}.proj_in", "token_mlp", stage, params=s.n_head * n * nr,
                            madds=sum(cg * n * nr for cg in sizes)))
        rows.append(CostRow(f"{prefix}.gelu", "gelu", stage, elem_ops=c * nr))
        rows.append(CostRow(f"{prefix}.proj_out", "token_mlp", stage, params=s.n_head * nr * n,
                            madds=sum(cg * nr * n for cg in sizes)))
        rows.append(CostRow(f"{prefix}.concat", "reshape", stage))
    rows.append(CostRow(f"{prefix}.residual", "add", stage, elem_ops=numel))
    return rows


def _encoder_rows(name, stage, s: EncoderSpec, shape):
    c, h, w = shape
    numel = c * h * w
    rows = []
    rm = s.repmix
    if rm.fused is not None:
        row, _ = _conv_rows(f"{name}.repmix.fused", stage, rm.fused, c, h, w)
        rows.append(row)
    else:
        rows.append(_conv_rows(f"{name}.repmix.dw3", stage, rm.dw3, c, h, w)[0])
        rows.append(_conv_rows(f"{name}.repmix.dw1", stage, rm.dw1, c, h, w)[0])
        rows.append(CostRow(f"{name}.repmix.branch_add", "add", stage, elem_ops=numel))
        rows.append(_bn_row(f"{name}.repmix.bn", stage, c, numel))
        rows.append(CostRow(f"{name}.repmix.residual", "add", stage, elem_ops=numel))
    if s.mixer is not None:
        rows += _mixer_rows(f"{name}.mixer", stage, s.mixer, shape)
    e, mid = _convbn_rows(f"{name}.ffn.expand", stage, s.ffn.expand, shape)
    r, _ = _convbn_rows(f"{name}.ffn.reduce", stage, s.ffn.reduce, mid)
    rows += e + r
    rows.append(CostRow(f"{name}.ffn.residual", "add", stage, elem_ops=numel))
    return rows


def cost_report(g, counter: Callable | None = None) -> CostReport:
    """Walk the graph once, producing one row per layer-level operation."""
    cfg = g.config
    shape = (cfg.in_channels, cfg.input_res, cfg.input_res)
    report = CostReport(cfg.label, g.form.value)
    for name, spec in g.blocks:
        stage = name.split(".")[0]
        if isinstance(spec, StemSpec):
            rows1, shape = _convbn_rows("stem.conv1", stage, spec.conv1, shape)
            rows2, shape = _convbn_rows("stem.conv2", stage, spec.conv2, shape)
            rows = rows1 + rows2
        elif isinstance(spec, DownsampleSpec):
            rows, shape = _convbn_rows(name, stage, spec.layer, shape)
        elif isinstance(spec, EncoderSpec):
            rows = _encoder_rows(name, stage, spec, shape)
        elif isinstance(spec, HeadSpec):
            rows, shape = _convbn_rows("head.expand", stage, spec.expand, shape)
            gd, shape = _convbn_rows("head.gdconv", stage, spec.gdconv, shape, kind="gdconv")
            rows += gd
            rows.append(CostRow("head.flatten", "reshape", stage))
            fin, fout = spec.embed_weight.shape
            rows.append(CostRow("head.linear", "dense", stage, params=fin * fout + fout, madds=fin * fout))
        else:
            raise TypeError(f"not a block spec: {type(spec).__name__}")
        report.rows.extend(rows)
    return report


def count_params(g) -> CostReport:
    return cost_report(g)


def count_madds(g, input_res: int = 112) -> CostReport:
    if input_res != g.config.input_res:
        raise ValueError(f"graph is built for {g.config.input_res}px inputs; token mixers fix the resolution")
    return cost_report(g)


# --- closed forms ----------------------------------------------------------

MECHANISMS = ("MHSA", "MHLA_v1", "LiteMHLA")


@dataclass(frozen=True)
class ComplexityTerm:
    mechanism: str
    N: int
    C: int
    r: float | None
    madds: int
    epsilon: int = 0


def eval_complexity(mechanism: str, N: int, C: int, r: float | None = None) -> ComplexityTerm:
    """Token-mixer MAdds per block: MHSA ``4NC^2 + 2N^2C``, v1 ``2 N Nr C``, lite ``N^2 C``.

    ``Nr`` is the realised hidden width ``round(N r)``.  The lite mixer's affine
    and layer-scale overhead (``epsilon = 4C``) is reported, never added.
    """
    if N < 1 or C < 1:
        raise ValueError("N and C must be >= 1")
    if mechanism == "MHSA":
        return ComplexityTerm(mechanism, N, C, None, 4 * N * C * C + 2 * N * N * C)
    if mechanism == "MHLA_v1":
        if r is None:
            raise ValueError("MHLA_v1 needs a ratio r")
        return ComplexityTerm(mechanism, N, C, r, 2 * N * projected_tokens(N, r) * C)
    if mechanism == "LiteMHLA":
        return ComplexityTerm(mechanism, N, C, None, N * N * C, epsilon=4 * C)
    raise ValueError(f"unknown mechanism {mechanism!r}; choose from {MECHANISMS}")


def mixer_complexity(s) -> ComplexityTerm:
    if isinstance(s, LiteMHLASpec):
        return eval_complexity("LiteMHLA", s.tokens, s.channels)
    if isinstance(s, MHLAv1Spec):
        return eval_complexity("MHLA_v1", s.tokens, s.channels, s.ratio)
    raise TypeError(f"not a token mixer: {type(s).__name__}")


def cross_check_mismatches(g, counter: Callable = count_params) -> list[str]:
    """Names of token-mixing blocks whose counted MAdds differ from the closed form."""
    report = counter(g)
    bad = []
    for name, enc in g.encoders():
        if enc.mixer is None:
            continue
        if report.block_madds(f"{name}.mixer") != mixer_complexity(enc.mixer).madds:
            bad.append(name)
    return bad


def cross_check(g, counter: Callable = count_params) -> bool:
    return not cross_check_mismatches(g, counter)


def fmt_millions(v: int) -> str:
    return f"{v / 1e6:.2f}M"
