import struct

import numpy as np
import pytest

from pale.backbone import (
    BlockParams,
    VariantConfig,
    cpe,
    forward,
    forward_features,
    init_model,
    init_variant,
    mlp,
    pale_block,
    patch_merge,
    variant_config,
)
from pale.checkpoint import CheckpointError, decode, encode, load_checkpoint, load_model, save_checkpoint
from pale.complexity import model_params
from pale.gradcheck import grad_check
from pale.partition import PartitionSpec
from pale.tensor import Tensor
from pale.verify import _randomize, random_block


def T(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=float), dtype=dtype)


def zero_block(c, heads):
    blk = BlockParams.init(c, heads, 4, np.random.default_rng(0), np.float64)
    for name, t in blk.named():
        if not name.endswith("gamma"):
            t.data = np.zeros_like(t.data)
    return blk


def small_config(**kw):
    base = dict(
        name="small",
        dims=(4, 8),
        heads=(2, 2),
        depths=(1, 1),
        pale_sizes=((2, 2), (2, 2)),
        mlp_ratios=(2, 2),
        strides=(4, 2),
        num_classes=3,
    )
    base.update(kw)
    return VariantConfig(**base)


# ---------------------------------------------------------------- layers


def test_cpe_zero_kernel_is_identity(rng):
    x = T(rng.standard_normal((1, 5, 6, 4)))
    assert cpe(x, T(np.zeros((3, 3, 1, 4)))).data.tobytes() == x.data.tobytes()


def test_cpe_centre_kernel_doubles(rng):
    x = T(rng.standard_normal((1, 5, 6, 4)))
    k = np.zeros((3, 3, 1, 4))
    k[1, 1] = 1.0
    np.testing.assert_array_equal(cpe(x, T(k)).data, 2 * x.data)


def test_cpe_arbitrary_extent(rng):
    x = T(rng.standard_normal((1, 13, 9, 32)))
    assert cpe(x, T(rng.standard_normal((3, 3, 1, 32)))).shape == (1, 13, 9, 32)


def test_mlp_zero_weights_give_zero(rng):
    x = T(rng.standard_normal((2, 3, 3, 8)))
    out = mlp(x, T(np.zeros((8, 32))), T(np.zeros(32)), T(np.zeros((32, 8))), T(np.zeros(8)), ratio=4)
    assert not out.data.any()


def test_mlp_hidden_width_and_ratio_check(rng):
    blk = BlockParams.init(8, 2, 4, rng)
    assert blk.fc1_weight.shape == (8, 32)
    x = T(np.zeros((1, 2, 2, 8)), np.float32)
    with pytest.raises(ValueError):
        mlp(x, blk.fc1_weight, blk.fc1_bias, blk.fc2_weight, blk.fc2_bias, ratio=3)


def test_mlp_gradient(rng):
    args = [T(rng.standard_normal(s) * 0.5) for s in [(1, 2, 2, 4), (4, 8), (8,), (8, 4), (4,)]]
    assert grad_check(mlp, args) < 1e-6


def test_block_with_zero_weights_is_identity(rng):
    x = T(rng.standard_normal((1, 6, 6, 8)))
    for mode in ("pale_parallel", "pale_vanilla", "global"):
        out = pale_block(x, zero_block(8, 2), mode, 0, PartitionSpec(3, 3))
        assert out.data.tobytes() == x.data.tobytes()


def test_block_preserves_shape(rng):
    blk = BlockParams.init(64, 4, 4, rng)
    x = Tensor(rng.standard_normal((2, 14, 14, 64)).astype(np.float32))
    assert pale_block(x, blk, "pale_parallel", 0, PartitionSpec(7, 7)).shape == (2, 14, 14, 64)


def test_block_gradient_wrt_input(rng):
    blk = random_block(4, 2, rng)
    x = T(rng.standard_normal((1, 4, 4, 4)))
    assert grad_check(lambda t: pale_block(t, blk, "pale_parallel", 0, PartitionSpec(2, 2)), x) < 1e-4


def test_patch_merge_extents():
    model = init_variant("T")
    x = Tensor(np.zeros((1, 224, 224, 3), np.float32))
    shapes = []
    for i in range(3):
        x = patch_merge(x, i, model.stages[i], model.config)
        shapes.append(x.shape[1:])
    assert shapes == [(56, 56, 64), (28, 28, 128), (14, 14, 256)]


def test_patch_merge_small_and_empty_input():
    model = init_model(small_config())
    # the kernel is compared with the padded extent, so a 2x2 map still merges
    assert patch_merge(Tensor(np.zeros((1, 2, 2, 4), np.float32)), 1, model.stages[1], model.config).shape == (1, 1, 1, 8)
    with pytest.raises(ValueError):
        patch_merge(Tensor(np.zeros((1, 0, 2, 4), np.float32)), 1, model.stages[1], model.config)


# ---------------------------------------------------------------- variants


def test_variant_table():
    t, b = variant_config("Pale-T"), variant_config("B")
    assert (t.depths[2], t.dims[2], t.heads[2]) == (16, 256, 8)
    assert (b.heads[3], b.dims[3]) == (32, 1024)
    assert variant_config("S").dims == (96, 192, 384, 768)
    for name in ("T", "S", "B"):
        cfg = variant_config(name)
        assert cfg.depths == (2, 2, 16, 2) and cfg.mlp_ratios == (4,) * 4 and cfg.pale_sizes == ((7, 7),) * 4
        assert all(b == 2 * a for a, b in zip(cfg.dims, cfg.dims[1:]))
    with pytest.raises(ValueError):
        variant_config("XL")


def test_init_is_deterministic():
    a, b = init_variant("T", seed=3), init_variant("T", seed=3)
    assert encode(a.state_dict()) == encode(b.state_dict())
    assert encode(a.state_dict()) != encode(init_variant("T", seed=4).state_dict())


@pytest.mark.parametrize("name", ["T", "S", "B", "tiny"])
def test_param_count_matches_analytic(name):
    model = init_variant(name)
    n = model.num_params()
    assert n == model_params(model.config)["total"]
    assert n == sum(a.size for a in decode(encode(model.state_dict())).values())


# ---------------------------------------------------------------- forward


@pytest.fixture(scope="module")
def pale_t():
    return init_variant("T", seed=0)


def test_forward_logits_shape(pale_t):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 224, 224, 3)).astype(np.float32))
    y = forward(pale_t, x)
    assert y.shape == (2, 1000) and np.isfinite(y.data).all()


def test_stage_shapes(pale_t):
    x = Tensor(np.zeros((1, 224, 224, 3), np.float32))
    feats = forward_features(pale_t, x)
    assert [f.shape[1:] for f in feats] == [(56, 56, 64), (28, 28, 128), (14, 14, 256), (7, 7, 512)]


def test_non_square_input_is_finite(pale_t):
    x = Tensor(np.random.default_rng(1).standard_normal((1, 224, 160, 3)).astype(np.float32))
    assert np.isfinite(forward(pale_t, x).data).all()


def test_batch_permutation_and_separability():
    model = init_variant("tiny", seed=2)
    x = np.random.default_rng(2).standard_normal((3, 32, 40, 3)).astype(np.float32)
    y = forward(model, Tensor(x)).data
    perm = [2, 0, 1]
    np.testing.assert_allclose(forward(model, Tensor(x[perm])).data, y[perm], rtol=0, atol=1e-6)
    single = np.concatenate([forward(model, Tensor(x[i : i + 1])).data for i in range(3)])
    np.testing.assert_allclose(single, y, rtol=0, atol=1e-6)


def test_forward_rejects_bad_input():
    model = init_variant("tiny")
    with pytest.raises(ValueError):
        forward(model, Tensor(np.zeros((1, 32, 32, 4), np.float32)))
    with pytest.raises(ValueError):
        forward(model, Tensor(np.zeros((1, 16, 32, 3), np.float32)))


def test_end_to_end_gradient_small_model():
    model = init_model(small_config(), seed=0, dtype=np.float64)
    rng = np.random.default_rng(5)
    _randomize(model.named(), rng, np.float64)
    x = T(rng.standard_normal((1, 32, 32, 3)))
    state = model.state_dict()
    names = [
        "head.bias",
        "stages.1.blocks.0.attn.proj.bias",
        "stages.1.blocks.0.attn.q.dw.weight",
        "stages.0.blocks.0.cpe.bias",
        "stages.0.merge.norm.gamma",
    ]
    params = [state[n] for n in names]
    # some query weights move the pooled logits by ~1e-10; a larger step lifts them above roundoff
    assert grad_check(lambda *_: forward(model, x), params, eps=1e-4) < 1e-4


def test_stage_identity_degeneracy():
    cfg = small_config(depths=(3, 1))
    model = init_model(cfg, dtype=np.float64)
    for blk in model.stages[0].blocks:
        for name, t in blk.named():
            if not name.endswith("gamma"):
                t.data = np.zeros_like(t.data)
    x = T(np.random.default_rng(0).standard_normal((1, 32, 32, 3)))
    merged = patch_merge(x, 0, model.stages[0], cfg)
    out = forward_features(model, x)[0]
    assert out.data.tobytes() == merged.data.tobytes()


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    model = init_variant("tiny", seed=7)
    a, b = tmp_path / "a.pale", tmp_path / "b.pale"
    save_checkpoint(model, a)
    loaded = load_model(a, model.config)
    save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 32, 32, 3)).astype(np.float32))
    assert forward(model, x).data.tobytes() == forward(loaded, x).data.tobytes()


def test_checkpoint_float64_round_trip(tmp_path):
    state = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.float32(2.5) * np.ones(0, np.float32)}
    save_checkpoint(state, tmp_path / "x.pale")
    back = load_checkpoint(tmp_path / "x.pale")
    assert list(back) == ["a", "b"]
    assert back["a"].dtype == np.float64 and back["a"].tobytes() == state["a"].tobytes()


def test_checkpoint_errors(tmp_path):
    buf = encode(init_variant("tiny").state_dict())
    with pytest.raises(CheckpointError):
        decode(b"XALE" + buf[4:])
    with pytest.raises(CheckpointError):
        decode(buf[:-3])
    with pytest.raises(CheckpointError):
        decode(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(CheckpointError):
        decode(buf + b"\0")


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.pale"
    save_checkpoint(init_variant("tiny"), path)
    with pytest.raises(ValueError):
        load_model(path, small_config())
