import itertools

import numpy as np
import pytest

from pale.attention import AttentionParams, attention_forward
from pale.backbone import forward, init_variant, variant_config
from pale.complexity import (
    FLOP_TOL,
    PARAM_TOL,
    PUBLISHED,
    FlopReport,
    flops_attention_mode,
    flops_global_attention,
    flops_pale_attention,
    model_flops,
    model_params,
    verify_against_trace,
    within,
)
from pale.partition import PartitionSpec
from pale.tensor import Tensor
from pale.trace import trace_flops


def eq4(h, w, c):
    return 4 * h * w * c * c + 2 * c * (h * w) ** 2


def eq5(h, w, c, s_r, s_c):
    return 4 * h * w * c * c + h * w * c * (s_c * h + s_r * w + 27)


# ---------------------------------------------------------------- closed forms


def test_global_examples():
    assert flops_global_attention(8, 8, 16).total == 196_608
    for c in (1, 3, 16):
        assert flops_global_attention(1, 1, c).total == 4 * c * c + 2 * c
    assert flops_global_attention(2, 1, 1).terms["attn"] == 8


def test_pale_examples():
    assert flops_pale_attention(8, 8, 16, 2, 2).total == 125_952
    assert 2 * 8 * 8 > 2 * 8 + 2 * 8 + 27
    assert flops_pale_attention(8, 8, 16, 2, 2).total < flops_global_attention(8, 8, 16).total


def test_whole_map_pale_attention_terms_equal_global():
    for h, w, c in [(4, 4, 8), (6, 3, 2), (7, 7, 16)]:
        pale = flops_pale_attention(h, w, c, h, w).terms
        assert pale["row"] + pale["column"] == flops_global_attention(h, w, c).terms["attn"]


def test_report_invariants():
    rep = flops_pale_attention(8, 8, 16, 2, 2)
    assert rep.total == sum(rep.terms.values()) and rep.total_flops == 2 * rep.total
    with pytest.raises(ValueError):
        FlopReport({"qkv": -1})
    with pytest.raises(ValueError):
        flops_pale_attention(8, 8, 16, 3, 3)


@pytest.mark.parametrize("h,w,c,s_r,s_c", list(itertools.product((4, 8, 12), (4, 6, 12), (1, 8, 32), (1, 2), (1, 2))))
def test_pale_total_equals_formula(h, w, c, s_r, s_c):
    assert flops_pale_attention(h, w, c, s_r, s_c).total == eq5(h, w, c, s_r, s_c)
    assert flops_global_attention(h, w, c).total == eq4(h, w, c)


@pytest.mark.parametrize(
    "lo,hi",
    [
        ((12, 12, 8, 2, 2), (14, 12, 8, 2, 2)),  # h
        ((12, 12, 8, 2, 2), (12, 14, 8, 2, 2)),  # w
        ((12, 12, 8, 2, 2), (12, 12, 9, 2, 2)),  # c
        ((12, 12, 8, 2, 2), (12, 12, 8, 3, 2)),  # s_r
        ((12, 12, 8, 2, 2), (12, 12, 8, 2, 3)),  # s_c
    ],
)
def test_monotone_in_every_argument(lo, hi):
    assert flops_pale_attention(*lo).total < flops_pale_attention(*hi).total


def test_pale_cheaper_than_global_on_grid():
    checked = 0
    for h, w, s_r, s_c, c in itertools.product(range(2, 33, 2), range(2, 33, 2), (1, 2), (1, 2), (8, 64)):
        if 2 * h * w > s_c * h + s_r * w + 27:
            assert flops_pale_attention(h, w, c, s_r, s_c).total < flops_global_attention(h, w, c).total
            checked += 1
    assert checked > 500


# ---------------------------------------------------------------- published targets


@pytest.mark.parametrize("name", ["T", "S", "B"])
def test_published_targets(name):
    params, flops = PUBLISHED[name]
    cfg = variant_config(name)
    assert within(model_params(cfg)["total"], params, PARAM_TOL)
    assert within(model_flops(cfg).total, flops, FLOP_TOL)


def test_published_targets_match_reported_table():
    assert PUBLISHED == {"T": (22e6, 4.2e9), "S": (48e6, 9.0e9), "B": (85e6, 15.6e9)}


def test_model_flops_scales_with_pale_size_through_padding():
    # at 224 the stage extents are 56/28/14/7; sizes that do not divide them pay for padding
    t = variant_config("T")
    by_size = {s: model_flops(t.__class__(**{**t.__dict__, "pale_sizes": ((s, s),) * 4})).total for s in (1, 3, 5, 7, 9)}
    assert by_size[1] < by_size[3] < by_size[5]
    assert by_size[7] < by_size[5] < by_size[9]


def test_model_flops_layer_table_sums():
    rep = model_flops(variant_config("T"))
    counts = [v for row in rep.layers for k, v in row.items() if k not in ("layer", "h", "w", "c")]
    assert sum(counts) == rep.total
    assert len(rep.layers) == 4 + 22 + 1
    assert rep.other > 0
    assert set(rep.terms) == {"merge", "cpe", "attn", "mlp", "head"}


# ---------------------------------------------------------------- trace agreement


@pytest.mark.parametrize("h,w,c,s", [(8, 8, 16, 2), (14, 14, 32, 7), (16, 8, 16, 1)])
def test_parallel_trace_is_exact(rng, h, w, c, s):
    params = AttentionParams.init(c, 2, rng)
    with trace_flops() as tr:
        attention_forward(Tensor(rng.standard_normal((1, h, w, c)).astype(np.float32)), "pale_parallel", params, PartitionSpec(s, s))
    cmp = verify_against_trace(flops_pale_attention(h, w, c, s, s), tr)
    assert cmp.ok, cmp.mismatches()


def test_global_trace_is_exact(rng):
    params = AttentionParams.init(8, 2, rng, separable=False)
    with trace_flops() as tr:
        attention_forward(Tensor(rng.standard_normal((2, 4, 4, 8)).astype(np.float32)), "global", params)
    cmp = verify_against_trace(flops_global_attention(4, 4, 8), tr, batch=2)
    assert cmp.ok, cmp.mismatches()


def test_mismatched_pale_size_is_flagged(rng):
    params = AttentionParams.init(16, 2, rng)
    with trace_flops() as tr:
        attention_forward(Tensor(rng.standard_normal((1, 8, 8, 16)).astype(np.float32)), "pale_parallel", params, PartitionSpec(2, 2))
    cmp = verify_against_trace(flops_pale_attention(8, 8, 16, 4, 4), tr)
    assert not cmp.ok
    bad = {m.split(":")[0] for m in cmp.mismatches()}
    assert bad == {"row", "column", "total"}


@pytest.mark.parametrize("mode", ["pale_vanilla", "pale_sequential", "cross_shaped", "axial"])
def test_other_modes_trace_matches_mode_formula(rng, mode):
    params = AttentionParams.init(8, 2, rng)
    x = Tensor(rng.standard_normal((1, 6, 9, 8)).astype(np.float32))
    for block in (0, 1):
        with trace_flops() as tr:
            attention_forward(x, mode, params, PartitionSpec(2, 2), block)
        cmp = verify_against_trace(flops_attention_mode(mode, 6, 9, 8, PartitionSpec(2, 2), block), tr)
        assert cmp.ok, cmp.mismatches()


def test_tiny_model_trace_matches_model_flops():
    model = init_variant("tiny")
    with trace_flops() as tr:
        forward(model, Tensor(np.zeros((2, 64, 64, 3), np.float32)))
    rep = model_flops(model.config, (64, 64))
    assert tr.total() == 2 * rep.total
    for term, n in rep.terms.items():
        assert tr.total(scope=term) == 2 * n, term


def test_params_match_checkpoint_count():
    model = init_variant("S")
    assert model.num_params() == model_params(model.config)["total"]
