import numpy as np
import pytest
from hypothesis import given, strategies as st

from facelivt import analysis as A
from facelivt.blocks import LiteMHLASpec, MHLAv1Spec
from facelivt.model import build, build_ablation, variant
from facelivt.reparam import fuse_weights
from facelivt.tensor import ConvParams

REFERENCE_PARAMS = {"XS": 2.90e6, "S": 4.62e6, "M": 7.04e6, "L": 8.52e6}
REFERENCE_MADDS = {"XS": 90e6, "S": 179e6, "M": 258e6, "L": 309e6}
ABLATIONS = ["kinds=R,R,R,R", "kinds=RL,RL,RL,RL", "n_head=1", "n_head=2", "n_head=3", "n_head=5",
             "n_head=6", "norm=layernorm", "activation=gelu", "mhla=v1"]


@pytest.fixture(scope="module")
def deploy_reports():
    return {v: A.count_params(fuse_weights(build(variant(v)))) for v in REFERENCE_PARAMS}


@pytest.fixture(scope="module")
def train_reports():
    return {v: A.count_params(build(variant(v))) for v in REFERENCE_PARAMS}


def test_single_conv_with_bias():
    p = ConvParams(np.zeros((16, 3, 3, 3)), np.zeros(16), 2, 1)
    assert A.conv_cost(p, 112, 112)[0] == 3 * 3 * 3 * 16 + 16 == 448


def test_deploy_stem_conv_count(deploy_reports):
    row = deploy_reports["XS"].rows[0]
    assert row.layer == "stem.conv1.conv" and row.params == 448


def test_fused_repmix_params():
    g = fuse_weights(build(variant("S")))
    rows = [r for r in A.count_params(g).rows if r.layer == "stage1.block0.repmix.fused"]
    assert len(rows) == 1 and rows[0].params == 9 * 48 + 48 == 480


def test_pointwise_conv_madds():
    p = ConvParams(np.zeros((256, 128, 1, 1)))
    assert A.conv_cost(p, 7, 7)[1] == 128 * 256 * 49 == 1_605_632


@pytest.mark.parametrize("name", list(REFERENCE_PARAMS))
def test_param_totals_within_band(deploy_reports, name):
    got = deploy_reports[name].params
    assert abs(got / REFERENCE_PARAMS[name] - 1) <= 0.05, f"{name}: {got}"


@pytest.mark.parametrize("name", list(REFERENCE_MADDS))
def test_madds_totals_within_band(deploy_reports, name):
    got = deploy_reports[name].madds
    assert abs(got / REFERENCE_MADDS[name] - 1) <= 0.05, f"{name}: {got}"


def test_xs_madds_calibration_value(deploy_reports):
    assert round(deploy_reports["XS"].madds / 1e6, 1) == 88.2


def test_stage3_lite_block_and_ffn():
    r = A.count_params(fuse_weights(build(variant("S"))))
    assert r.block_madds("stage3.block0.mixer") == 49 * 49 * 192 == 460_992
    assert r.block_madds("stage3.block0.ffn", kinds=("conv",)) == 4 * 49 * 192 ** 2 == 7_225_344


def test_totals_are_row_sums(deploy_reports, train_reports):
    for rep in list(deploy_reports.values()) + list(train_reports.values()):
        assert rep.params == sum(r.params for r in rep.rows)
        assert rep.madds == sum(r.madds for r in rep.rows)
        stages = rep.by_stage()
        assert sum(p for p, _ in stages.values()) == rep.params
        assert sum(m for _, m in stages.values()) == rep.madds
        assert list(stages) == ["stem", "stage1", "stage2", "stage3", "stage4", "head"]


def test_deploy_madds_not_above_train(deploy_reports, train_reports):
    for v in REFERENCE_MADDS:
        assert deploy_reports[v].madds <= train_reports[v].madds


def test_params_invariant_under_seed():
    a = A.count_params(build(variant("XS"), seed=0))
    b = A.count_params(build(variant("XS"), seed=99))
    assert [(r.layer, r.params, r.madds) for r in a.rows] == [(r.layer, r.params, r.madds) for r in b.rows]


def test_category_tagging_is_total(train_reports):
    compute = {"conv", "dwconv", "gdconv", "dense", "token_mix", "token_mlp", "gelu"}
    memory = {"bn", "layernorm", "affine", "layer_scale", "add", "reshape"}
    for rep in train_reports.values():
        for r in rep.rows:
            assert r.category in ("compute", "memory")
            assert r.kind in (compute if r.category == "compute" else memory)


def test_bn_buffers_separate(train_reports, deploy_reports):
    rep = train_reports["XS"]
    bn_rows = [r for r in rep.rows if r.kind == "bn"]
    assert bn_rows and all(r.buffers == r.params for r in bn_rows)
    assert rep.buffers == sum(r.params for r in bn_rows)
    assert deploy_reports["XS"].buffers == 0


def test_memory_ops_excluded_from_madds(train_reports):
    for r in train_reports["S"].rows:
        if r.category == "memory" or r.kind == "gelu":
            assert r.madds == 0
    assert train_reports["S"].memory_ops > 0


def test_lite_epsilon_reported_not_added():
    t = A.eval_complexity("LiteMHLA", 49, 192)
    assert t.madds == 460_992 and t.epsilon == 4 * 192


def test_eval_complexity_examples():
    assert A.eval_complexity("MHSA", 49, 192).madds == 4 * 49 * 192 * 192 + 2 * 49 * 49 * 192 == 8_147_328
    assert A.eval_complexity("LiteMHLA", 1, 1).madds == 1
    with pytest.raises(ValueError):
        A.eval_complexity("MHSA", 0, 4)
    with pytest.raises(ValueError):
        A.eval_complexity("MHLA_v1", 16, 4)
    with pytest.raises(ValueError):
        A.eval_complexity("softmax", 16, 4)


@given(st.integers(1, 400), st.integers(1, 1024))
def test_closed_forms_integer_arithmetic(n, c):
    assert A.eval_complexity("LiteMHLA", n, c).madds == n * n * c
    assert A.eval_complexity("MHSA", n, c).madds == 4 * n * c * c + 2 * n * n * c


@pytest.mark.parametrize("cfg", ["XS", "S", "M", "L"] + ABLATIONS)
def test_cross_check_every_config(cfg):
    c = variant(cfg) if cfg in REFERENCE_PARAMS else build_ablation(variant("S"), cfg)
    for g in (build(c), fuse_weights(build(c))):
        assert A.cross_check(g), A.cross_check_mismatches(g)


def _corrupt_counter(g):
    """Counts token mixing with N + 1 tokens per block."""
    rep = A.count_params(g)
    byname = dict(g.encoders())
    rows = []
    for r in rep.rows:
        if r.kind == "token_mix":
            m = byname[r.layer.split(".mixer.")[0]].mixer
            r = A.CostRow(r.layer, r.kind, r.stage, r.params, m.channels * (m.tokens + 1) ** 2, r.buffers)
        rows.append(r)
    return A.CostReport(rep.variant, rep.form, rows)


def test_cross_check_negative_control():
    g = build(variant("XS"))
    assert not A.cross_check(g, counter=_corrupt_counter)
    bad = A.cross_check_mismatches(g, counter=_corrupt_counter)
    assert bad == [n for n, e in g.encoders() if e.mixer is not None] and len(bad) == 12


def test_v1_counted_equals_half_ratio_formula():
    g = build(build_ablation(variant("S"), "mhla=v1"))
    rep = A.count_params(g)
    for name, enc in g.encoders():
        if enc.mixer is None:
            continue
        n, c = enc.mixer.tokens, enc.mixer.channels
        assert rep.block_madds(f"{name}.mixer") == 2 * (n * 0.5 * n) * c, name


def test_v1_counted_equals_realized_width_formula():
    g = build(build_ablation(variant("S"), "mhla=v1"))
    rep = A.count_params(g)
    for name, enc in g.encoders():
        if isinstance(enc.mixer, MHLAv1Spec):
            n, c = enc.mixer.tokens, enc.mixer.channels
            assert rep.block_madds(f"{name}.mixer") == 2 * n * enc.mixer.projected * c


def test_lite_mixer_param_rows():
    g = build(variant("S"))
    rep = A.count_params(g)
    enc = g["stage3.block0"]
    assert isinstance(enc.mixer, LiteMHLASpec)
    mixer_params = sum(r.params for r in rep.rows if r.layer.startswith("stage3.block0.mixer."))
    assert mixer_params == 4 * (49 * 49 + 49) + 2 * 192 + 192


def test_csv_round_trip(deploy_reports):
    rep = deploy_reports["M"]
    text = rep.to_csv()
    assert text.splitlines()[0] == "layer,kind,stage,params,madds,category"
    assert A.read_csv_totals(text) == (rep.params, rep.madds)
    assert A.read_csv_totals(rep.to_csv(verbose=True)) == (rep.params, rep.madds)


def test_csv_tamper_detected(deploy_reports):
    text = deploy_reports["XS"].to_csv().replace("stem.conv1.conv,conv,stem,448", "stem.conv1.conv,conv,stem,449")
    with pytest.raises(ValueError):
        A.read_csv_totals(text)


def test_count_madds_rejects_other_resolution():
    with pytest.raises(ValueError):
        A.count_madds(build(variant("XS")), input_res=224)
