import numpy as np
import pytest

from facelivt import blocks as B
from facelivt import tensor as T
from facelivt.errors import FormError, ShapeError
from facelivt.model import build, variant
from oracles import conv2d_loops, gelu_scalar, matmul_loops


def dwconv(rng, c, k, bias=True, dtype=np.float64):
    w = rng.standard_normal((c, 1, k, k)).astype(dtype)
    b = rng.standard_normal(c).astype(dtype) if bias else None
    return T.ConvParams(w, b, 1, k // 2, c)


def bn(rng, c, dtype=np.float64):
    return T.BNParams(rng.uniform(0.5, 1.5, c).astype(dtype), rng.standard_normal(c).astype(dtype),
                      rng.standard_normal(c).astype(dtype), rng.uniform(0.5, 2, c).astype(dtype))


def bn_oracle(x, p):
    v = lambda a: a.reshape(1, -1, *([1] * (x.ndim - 2)))  # noqa: E731
    return (x - v(p.running_mean)) / np.sqrt(v(p.running_var) + p.eps) * v(p.gamma) + v(p.beta)


def lite_spec(rng, c, n, heads, ls=None, dtype=np.float64, identity=False):
    if identity:
        hw = tuple((np.eye(n, dtype=dtype), np.zeros(n, dtype)) for _ in range(heads))
        norm = T.AffineParams(np.ones(c, dtype), np.zeros(c, dtype))
    else:
        hw = tuple((rng.standard_normal((n, n)).astype(dtype), rng.standard_normal(n).astype(dtype))
                   for _ in range(heads))
        norm = T.AffineParams(rng.uniform(0.5, 1.5, c).astype(dtype), rng.standard_normal(c).astype(dtype))
    ls = np.full(c, 1e-5 if ls is None else ls, dtype)
    return B.LiteMHLASpec(c, n, heads, norm, hw, ls)


def v1_spec(rng, c, n, heads, r=0.5, dtype=np.float64):
    nr = B.projected_tokens(n, r)
    return B.MHLAv1Spec(c, n, heads, r,
                        tuple(rng.standard_normal((n, nr)).astype(dtype) for _ in range(heads)),
                        tuple(rng.standard_normal((nr, n)).astype(dtype) for _ in range(heads)),
                        T.LayerNormParams(np.ones(c, dtype), np.zeros(c, dtype)))


def ffn_spec(rng, c, ratio=2):
    h = ratio * c
    e = B.ConvBN(T.ConvParams(rng.standard_normal((h, c, 1, 1))), bn(rng, h), act=True)
    r = B.ConvBN(T.ConvParams(rng.standard_normal((c, h, 1, 1))), bn(rng, c))
    return B.FFNSpec(c, ratio, e, r)


def repmix_spec(rng, c):
    return B.RepMixSpec(c, dwconv(rng, c, 3), dwconv(rng, c, 1), bn(rng, c))


# --- RepMix ------------------------------------------------------------------

def test_repmix_zero_branch_is_residual(rng):
    c = 4
    z3 = T.ConvParams(np.zeros((c, 1, 3, 3)), np.zeros(c), 1, 1, c)
    z1 = T.ConvParams(np.zeros((c, 1, 1, 1)), np.zeros(c), 1, 0, c)
    s = B.RepMixSpec(c, z3, z1, T.BNParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)))
    x = rng.standard_normal((2, c, 5, 5))
    assert np.array_equal(B.repmix_forward(x, s), x)


def test_repmix_gamma_zero_annihilates_branch(rng):
    c = 4
    s = B.RepMixSpec(c, dwconv(rng, c, 3), dwconv(rng, c, 1),
                     T.BNParams(np.zeros(c), np.zeros(c), rng.standard_normal(c), np.ones(c)))
    x = rng.standard_normal((2, c, 5, 5))
    assert np.array_equal(B.repmix_forward(x, s), x)


def test_repmix_matches_composed_oracle(rng):
    s = repmix_spec(rng, 8)
    x = rng.standard_normal((1, 8, 7, 7))
    ref = x + bn_oracle(conv2d_loops(x, s.dw3.weight, s.dw3.bias, 1, 1, 8)
                        + conv2d_loops(x, s.dw1.weight, s.dw1.bias, 1, 0, 8), s.bn)
    np.testing.assert_allclose(B.repmix_forward(x, s), ref, rtol=1e-12, atol=1e-12)


def test_repmix_deploy_identity_kernel(rng):
    c = 3
    w = np.zeros((c, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    s = B.RepMixSpec(c, fused=T.ConvParams(w, np.zeros(c), 1, 1, c))
    x = rng.standard_normal((2, c, 6, 6))
    assert np.array_equal(B.repmix_forward_deploy(x, s), x)


def test_repmix_deploy_constant_bias(rng):
    c = 3
    s = B.RepMixSpec(c, fused=T.ConvParams(np.zeros((c, 1, 3, 3)), np.full(c, 2.5), 1, 1, c))
    assert np.all(B.repmix_forward_deploy(rng.standard_normal((1, c, 4, 4)), s) == 2.5)


def test_repmix_form_errors(rng):
    s = repmix_spec(rng, 2)
    with pytest.raises(FormError):
        B.repmix_forward_deploy(np.ones((1, 2, 3, 3)), s)
    with pytest.raises(FormError):
        B.RepMixSpec(2, dw3=s.dw3)


# --- LiteMHLA ----------------------------------------------------------------

def test_lite_identity_spec_is_identity(rng):
    s = lite_spec(rng, 4, 9, 2, ls=1.0, identity=True)
    x = rng.standard_normal((2, 4, 3, 3))
    assert np.array_equal(B.lite_mhla_forward(x, s), x)


def test_lite_default_layer_scale(rng):
    s = lite_spec(rng, 4, 9, 2, identity=True)
    x = rng.standard_normal((2, 4, 3, 3))
    np.testing.assert_allclose(B.lite_mhla_forward(x, s), 1e-5 * x, rtol=1e-15)


def test_lite_matches_per_head_oracle(rng):
    s = lite_spec(rng, 8, 4, 2, ls=0.7)
    x = rng.standard_normal((1, 8, 2, 2))
    t = x.reshape(1, 8, 4) * s.norm.alpha[None, :, None] + s.norm.beta[None, :, None]
    heads = [matmul_loops(t[:, :4], s.head_weights[0][0]) + s.head_weights[0][1],
             matmul_loops(t[:, 4:], s.head_weights[1][0]) + s.head_weights[1][1]]
    ref = np.concatenate(heads, axis=1) * 0.7
    np.testing.assert_allclose(B.lite_mhla_forward(x, s), ref.reshape(x.shape), rtol=1e-12, atol=1e-12)


def superposition_gap(f, x1, x2, a, b):
    lhs = f(a * x1 + b * x2)
    rhs = a * f(x1) + b * f(x2) - (a + b - 1) * f(np.zeros_like(x1))
    return float(np.abs(lhs - rhs).max())


@pytest.mark.parametrize("seed", range(5))
def test_lite_is_affine_superposition(seed):
    rng = np.random.default_rng(seed)
    s = lite_spec(rng, 16, 16, 4, ls=1.0, dtype=np.float32)
    x1, x2 = (rng.uniform(-1, 1, (2, 16, 4, 4)).astype(np.float32) for _ in range(2))
    a, b = np.float32(rng.uniform(-2, 2)), np.float32(rng.uniform(-2, 2))
    scale = max(1.0, float(np.abs(B.lite_mhla_forward(x1, s)).max()))
    assert superposition_gap(lambda x: B.lite_mhla_forward(x, s), x1, x2, a, b) <= 1e-5 * scale


@pytest.mark.parametrize("seed", range(5))
def test_v1_violates_superposition(seed):
    rng = np.random.default_rng(seed)
    s = v1_spec(rng, 16, 16, 4, dtype=np.float32)
    x1, x2 = (rng.uniform(-1, 1, (2, 16, 4, 4)).astype(np.float32) for _ in range(2))
    assert superposition_gap(lambda x: B.mhla_v1_forward(x, s), x1, x2, np.float32(0.7), np.float32(-1.3)) > 1e-3


def test_lite_gelu_ablation_breaks_superposition(rng):
    s = lite_spec(rng, 8, 16, 2, ls=1.0)
    s = B.LiteMHLASpec(s.channels, s.tokens, s.n_head, s.norm, s.head_weights, s.ls, activation=True)
    x1, x2 = rng.uniform(-1, 1, (2, 1, 8, 4, 4))
    assert superposition_gap(lambda x: B.lite_mhla_forward(x, s), x1, x2, 0.7, -1.3) > 1e-3


def test_lite_uneven_heads(rng):
    s = lite_spec(rng, 10, 4, 3)
    assert B.lite_mhla_forward(rng.standard_normal((1, 10, 2, 2)), s).shape == (1, 10, 2, 2)
    with pytest.raises(ShapeError):
        lite_spec(rng, 6, 4, 4)  # ceiling split of 6 into 4 yields only 3 groups


def test_lite_rejects_wrong_token_count(rng):
    with pytest.raises(ShapeError):
        B.lite_mhla_forward(np.ones((1, 4, 3, 3)), lite_spec(rng, 4, 4, 2))


# --- MHLA v1 -----------------------------------------------------------------

def test_v1_zero_projections_give_zero(rng):
    s = v1_spec(rng, 4, 16, 2)
    s = B.MHLAv1Spec(4, 16, 2, 0.5, tuple(np.zeros_like(w) for w in s.w_in),
                     tuple(np.zeros_like(w) for w in s.w_out), s.norm)
    assert np.all(B.mhla_v1_forward(rng.standard_normal((1, 4, 4, 4)), s) == 0)


def test_v1_identity_projections_give_gelu(rng):
    n = 9
    s = B.MHLAv1Spec(3, n, 1, 1.0, (np.eye(n),), (np.eye(n),), None)
    x = rng.uniform(0, 2, (1, 3, 3, 3))
    ref = np.vectorize(gelu_scalar)(x)
    np.testing.assert_allclose(B.mhla_v1_forward(x, s), ref, rtol=1e-12, atol=1e-14)


def test_v1_matches_two_matmul_oracle(rng):
    s = v1_spec(rng, 4, 16, 2)
    x = rng.standard_normal((1, 4, 4, 4))
    t = x.reshape(1, 4, 16)
    t = (t - t.mean(axis=1, keepdims=True)) / np.sqrt(t.var(axis=1, keepdims=True) + 1e-5)
    out = []
    for i, sl in enumerate((slice(0, 2), slice(2, 4))):
        h = np.vectorize(gelu_scalar)(matmul_loops(t[:, sl], s.w_in[i]))
        out.append(matmul_loops(h, s.w_out[i]))
    np.testing.assert_allclose(B.mhla_v1_forward(x, s), np.concatenate(out, 1).reshape(x.shape),
                               rtol=1e-10, atol=1e-10)


def test_projected_tokens_rounding():
    assert B.projected_tokens(16, 0.5) == 8
    assert B.projected_tokens(49, 0.5) == 25
    with pytest.raises(ShapeError):
        B.projected_tokens(1, 0.1)


# --- FFN and encoder ---------------------------------------------------------

def test_ffn_zero_path(rng):
    c = 4
    s = ffn_spec(rng, c)
    e = B.ConvBN(T.ConvParams(np.zeros((8, c, 1, 1))),
                 T.BNParams(rng.uniform(0.5, 1, 8), np.zeros(8), np.zeros(8), np.ones(8)), act=True)
    r = B.ConvBN(s.reduce.conv, T.BNParams(rng.uniform(0.5, 1, c), np.zeros(c), np.zeros(c), np.ones(c)))
    s = B.FFNSpec(c, 2, e, r)
    assert np.all(B.ffn_forward(rng.standard_normal((1, c, 3, 3)), s) == 0)


def test_ffn_hidden_width():
    g = build(variant("S"))
    ffn = g["stage1.block0"].ffn
    assert ffn.hidden == 96 and ffn.expand.conv.out_channels == 96


def test_ffn_matches_composed_oracle(rng):
    s = ffn_spec(rng, 3)
    x = rng.standard_normal((1, 3, 4, 4))
    h = np.vectorize(gelu_scalar)(bn_oracle(conv2d_loops(x, s.expand.conv.weight), s.expand.bn))
    ref = bn_oracle(conv2d_loops(h, s.reduce.conv.weight), s.reduce.bn)
    np.testing.assert_allclose(B.ffn_forward(x, s), ref, rtol=1e-11, atol=1e-11)


def _zeroed_encoder(rng, c, n):
    z = B.RepMixSpec(c, T.ConvParams(np.zeros((c, 1, 3, 3)), np.zeros(c), 1, 1, c),
                     T.ConvParams(np.zeros((c, 1, 1, 1)), np.zeros(c), 1, 0, c),
                     T.BNParams(np.zeros(c), np.zeros(c), np.zeros(c), np.ones(c)))
    f = ffn_spec(rng, c)
    f = B.FFNSpec(c, 2, f.expand, B.ConvBN(f.reduce.conv, T.BNParams(np.zeros(c), np.zeros(c),
                                                                       np.zeros(c), np.ones(c))))
    return B.EncoderSpec("RL", z, f, lite_spec(rng, c, n, 2, ls=0.0))


def test_encoder_all_mixing_zeroed_is_identity(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    assert np.array_equal(B.encoder_forward(x, _zeroed_encoder(rng, 4, 9)), x)


def test_layer_scale_zero_gate_is_bitwise(rng):
    for dtype in (np.float32, np.float64):
        rm, f = repmix_spec(rng, 8), ffn_spec(rng, 8)
        rl = B.EncoderSpec("RL", rm, f, lite_spec(rng, 8, 16, 4, ls=0.0))
        r = B.EncoderSpec("R", rm, f)
        x = rng.uniform(-1, 1, (3, 8, 4, 4)).astype(dtype)
        assert B.encoder_forward(x, rl).tobytes() == B.encoder_forward(x, r).tobytes()


def test_encoder_matches_sequential_oracle(rng):
    rm, f, mx = repmix_spec(rng, 8), ffn_spec(rng, 8), lite_spec(rng, 8, 16, 4, ls=0.3)
    s = B.EncoderSpec("RL", rm, f, mx)
    x = rng.standard_normal((1, 8, 4, 4))
    y = B.repmix_forward(x, rm)
    y = y + B.lite_mhla_forward(y, mx)
    y = y + B.ffn_forward(y, f)
    assert np.array_equal(B.encoder_forward(x, s), y)


def test_encoder_kind_must_match_mixer(rng):
    with pytest.raises(ShapeError):
        B.EncoderSpec("RL", repmix_spec(rng, 4), ffn_spec(rng, 4))
    with pytest.raises(ShapeError):
        B.EncoderSpec("R", repmix_spec(rng, 4), ffn_spec(rng, 4), lite_spec(rng, 4, 4, 2))


# --- stem, downsample, head ----------------------------------------------------

def test_stem_and_downsample_shapes():
    xs, s = build(variant("XS")), build(variant("S"))
    y = B.stem_forward(np.zeros((1, 3, 112, 112), np.float32), xs["stem"])
    assert B.convbn_forward(np.zeros((1, 3, 112, 112), np.float32), xs["stem"].conv1).shape == (1, 16, 56, 56)
    assert y.shape == (1, 32, 28, 28)
    assert B.downsample_forward(np.zeros((1, 96, 14, 14), np.float32), s["stage2.down"]).shape == (1, 192, 7, 7)


def test_zero_weights_give_zero_tensor():
    g = build(variant("XS"))
    d = g["stage1.down"].layer
    z = B.ConvBN(T.ConvParams(np.zeros_like(d.conv.weight), None, 2, 1), d.bn)
    y = B.downsample_forward(np.ones((1, 32, 28, 28), np.float32), B.DownsampleSpec(z))
    assert y.shape == (1, 64, 14, 14) and np.all(y == 0)


def test_head_gap_reduction(rng):
    c, e = 4, 6
    ident = lambda k: T.BNParams(np.ones(k), np.zeros(k), np.zeros(k), np.full(k, 1 - 1e-5))  # noqa: E731
    expand = B.ConvBN(T.ConvParams(rng.standard_normal((e, c, 1, 1))), ident(e), act=True)
    gd = B.ConvBN(T.ConvParams(np.full((e, 1, 4, 4), 1 / 16), None, 1, 0, e), ident(e))
    w, b = rng.standard_normal((e, 5)), rng.standard_normal(5)
    s = B.HeadSpec(expand, gd, w, b)
    x = rng.standard_normal((2, c, 4, 4))
    ref = B.convbn_forward(x, expand).mean(axis=(2, 3)) @ w + b
    np.testing.assert_allclose(B.head_forward(x, s), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["XS", "S", "M", "L"])
def test_head_output_is_512(name):
    g = build(variant(name))
    c = g.config.stage_channels[-1]
    assert B.head_forward(np.zeros((2, c, 4, 4), np.float32), g["head"]).shape == (2, 512)


def test_head_matches_composed_oracle(rng):
    g = build(variant("XS"), dtype="f64")
    s = g["head"]
    x = rng.standard_normal((1, 256, 4, 4))
    h = np.vectorize(gelu_scalar)(bn_oracle(np.einsum("oc,nchw->nohw", s.expand.conv.weight[:, :, 0, 0], x),
                                            s.expand.bn))
    z = bn_oracle((h * s.gdconv.conv.weight[:, 0][None]).sum(axis=(2, 3)), s.gdconv.bn)
    np.testing.assert_allclose(B.head_forward(x, s), z @ s.embed_weight + s.embed_bias, rtol=1e-10, atol=1e-10)


def test_head_rejects_wrong_map(rng):
    g = build(variant("XS"))
    with pytest.raises(ShapeError):
        B.head_forward(np.zeros((1, 256, 5, 5), np.float32), g["head"])
