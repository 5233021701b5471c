"""Invariant suites run by ``pale verify``.

Each suite returns a :class:`SuiteResult` whose ``failures`` name the
violated invariant together with the inputs that broke it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import MODES, AttentionParams, attention_forward, mode_spec, msa_group, qkv_separable
from .backbone import BlockParams, init_model, pale_block, variant_config, forward
from .complexity import flops_global_attention, flops_pale_attention, model_flops, verify_against_trace
from .gradcheck import grad_check
from .oracle import oracle_forward, reference_groups
from .partition import PartitionSpec, build_groups, pale_token_count
from .tensor import Tensor
from .trace import trace_flops


@dataclass
class SuiteResult:
    name: str
    failures: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    checks: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def expect(self, cond: bool, message: str) -> None:
        self.checks += 1
        if not cond:
            self.failures.append(message)


def _randomize(named, rng, dtype, gain: float = 1.0) -> None:
    # unit-scale activations: weights ~ gain / sqrt(fan_in), biases ~ 0.1
    for name, t in named:
        if t.ndim == 1:
            t.data = (0.1 * rng.standard_normal(t.shape)).astype(dtype)
        else:
            fan_in = math.prod(t.shape[:-1])
            t.data = (gain / math.sqrt(fan_in) * rng.standard_normal(t.shape)).astype(dtype)


def random_params(c: int, heads: int, rng: np.random.Generator, dtype=np.float64, gain: float = 1.0) -> AttentionParams:
    """Attention parameters with every entry, biases included, drawn at random."""
    p = AttentionParams.init(c, heads, rng, dtype)
    _randomize(p.named(), rng, dtype, gain)
    return p


def random_block(c: int, heads: int, rng: np.random.Generator, dtype=np.float64, ratio: int = 4) -> BlockParams:
    blk = BlockParams.init(c, heads, ratio, rng, dtype)
    _randomize(blk.named(), rng, dtype, 1.0)
    blk.norm1_gamma.data += 1.0
    blk.norm2_gamma.data += 1.0
    return blk


# --------------------------------------------------------------------------
# partition


def partition_suite(max_extent: int = 32, max_size: int = 8) -> SuiteResult:
    res = SuiteResult("partition")
    lines = [(n, s) for n in range(1, max_extent + 1) for s in range(1, max_size + 1) if n % s == 0]
    for interlaced in (True, False):
        for n, s in lines:
            g = build_groups(n, 1, PartitionSpec(s, 1, interlaced), "row").lines
            flat = np.sort(g.ravel())
            res.expect(
                np.array_equal(flat, np.arange(n)),
                f"bijection violated: extent={n} s={s} interlaced={interlaced}",
            )
            if interlaced and s > 1:
                res.expect(
                    bool((np.diff(g, axis=1) == n // s).all()),
                    f"constant interlace stride violated: extent={n} s={s}",
                )
    for (h, s_r), (w, s_c) in itertools.product(lines, lines):
        spec = PartitionSpec(s_r, s_c)
        rows = build_groups(h, w, spec, "row").token_index()
        cols = build_groups(h, w, spec, "column").token_index()
        hit_r = np.bincount(rows.ravel(), minlength=h * w)
        hit_c = np.bincount(cols.ravel(), minlength=h * w)
        res.expect(
            bool((hit_r == 1).all() and (hit_c == 1).all()),
            f"token bijection violated: h={h} w={w} s=({s_r},{s_c})",
        )
        expected = pale_token_count(h, w, s_r, s_c)
        for g in range(0, rows.shape[0], max(1, rows.shape[0] // 3)):
            union = np.union1d(rows[g], cols[g % cols.shape[0]]).size
            res.expect(union == expected, f"pale token count {expected} != union {union}: h={h} w={w} s=({s_r},{s_c}) g={g}")
    for h, w in itertools.product(range(1, 17), repeat=2):
        for axis in ("row", "column"):
            axial = build_groups(h, w, mode_spec("axial", None), axis)
            pale11 = build_groups(h, w, PartitionSpec(1, 1, True), axis)
            res.expect(
                np.array_equal(axial.token_index(), pale11.token_index()),
                f"axial groups differ from pale(1,1): h={h} w={w} axis={axis}",
            )
    return res


# --------------------------------------------------------------------------
# equivalence with the oracle, padding independence


def equivalence_grid(extents=(4, 5, 7, 9, 12, 16)):
    """Deterministic (h, w, s, c, heads) cases cycling through sizes, widths and head counts."""
    cases = []
    for k, (h, w) in enumerate(itertools.product(extents, repeat=2)):
        cases.append((h, w, (1, 2, 4)[k % 3], (8, 16)[(k // 3) % 2], (2, 4)[(k // 6) % 2]))
    return cases


def unpadded_reference(x: Tensor, mode: str, spec, params: AttentionParams, block_index: int = 0) -> np.ndarray:
    """Same attention computed without any padding: each group keeps only real tokens."""
    b, h, w, c = x.shape
    q, k, v = qkv_separable(x, params)
    branches = reference_groups(h, w, mode, *(spec_sizes(mode, spec)), block_index)
    width = c // len(branches)
    heads = params.heads // len(branches)
    out = np.zeros(x.shape, dtype=x.dtype)
    hits = np.zeros((h, w, len(branches)), dtype=x.dtype)
    for bi, groups in enumerate(branches):
        sl = slice(bi * width, (bi + 1) * width)
        for members in groups:
            idx = np.array([r * w + s for r, s in members])
            take = lambda t: Tensor(t.data[..., sl].reshape(b, h * w, width)[:, idx][:, None], dtype=x.dtype)
            y = msa_group(take(q), take(k), take(v), heads).data[:, 0]
            for n, (r, s) in enumerate(members):
                out[:, r, s, sl] += y[:, n]
                hits[r, s, bi] += 1
    out /= np.repeat(hits, width, axis=-1)[None]
    return ops.linear(Tensor(out), params.proj, params.proj_bias).data


def spec_sizes(mode: str, spec: PartitionSpec | None) -> tuple[int, int]:
    s = mode_spec(mode, spec)
    return (1, 1) if s is None else (s.s_r, s.s_c)


def equivalence_suite(
    cases=None, modes=MODES, seed: int = 0, inject_skip_mask: bool = False, tol32: float = 1e-5, tol64: float = 1e-10
) -> SuiteResult:
    res = SuiteResult("equiv")
    rng = np.random.default_rng(seed)
    cases = equivalence_grid() if cases is None else cases
    worst = {np.float32: 0.0, np.float64: 0.0}
    for mode in modes:
        for i, (h, w, s, c, heads) in enumerate(cases):
            dtype = np.float64 if i % 2 else np.float32
            params = random_params(c, heads, rng, dtype)
            x = Tensor(rng.standard_normal((1, h, w, c)), dtype=dtype)
            spec = PartitionSpec(s, s)
            bi = i % 2
            fast = attention_forward(x, mode, params, spec, bi).data
            ref = oracle_forward(x, mode, params, s, s, bi)
            err = float(np.abs(fast - ref).max())
            tol = tol64 if dtype == np.float64 else tol32
            worst[dtype] = max(worst[dtype], err)
            res.expect(err <= tol, f"oracle mismatch {err:.2e} > {tol:g}: mode={mode} h={h} w={w} s={s} c={c} heads={heads} {np.dtype(dtype).name}")
    res.notes.append(f"max |fast - oracle|: f32 {worst[np.float32]:.2e}, f64 {worst[np.float64]:.2e}")

    # whole-map pale is global attention
    for h, w in ((4, 4), (6, 4), (5, 7)):
        params = random_params(8, 2, rng, np.float64)
        x = Tensor(rng.standard_normal((2, h, w, 8)), dtype=np.float64)
        a = attention_forward(x, "pale_vanilla", params, PartitionSpec(h, w)).data
        g = attention_forward(x, "global", params).data
        err = float(np.abs(a - g).max())
        res.expect(err <= 1e-6, f"whole-map vanilla pale differs from global by {err:.2e}: h={h} w={w}")

    pad = padding_suite(seed=seed + 1, inject_skip_mask=inject_skip_mask)
    res.failures += pad.failures
    res.notes += pad.notes
    res.checks += pad.checks
    return res


def padding_suite(seed: int = 1, inject_skip_mask: bool = False, tol32: float = 1e-6) -> SuiteResult:
    """Masked-key contract: real-token outputs do not depend on padding."""
    res = SuiteResult("padding")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mode in ("axial", "cross_shaped", "pale_parallel", "pale_sequential", "pale_vanilla"):
        for h, w, s in ((5, 7, 2), (8, 8, 7), (9, 6, 4), (4, 10, 3)):
            params = random_params(8, 2, rng, np.float32)
            x = Tensor(rng.standard_normal((2, h, w, 8)), dtype=np.float32)
            spec = PartitionSpec(s, s)
            for bi in (0, 1):
                y = attention_forward(x, mode, params, spec, bi, mask_padding=not inject_skip_mask).data
                ref = unpadded_reference(x, mode, spec, params, bi)
                err = float(np.abs(y - ref).max())
                worst = max(worst, err)
                res.expect(
                    err <= tol32,
                    f"padding invariant violated (padded keys change real outputs by {err:.2e}): mode={mode} h={h} w={w} s={s}",
                )
    res.notes.append(f"max padding deviation (f32): {worst:.2e}")
    return res


# --------------------------------------------------------------------------
# gradients


def _primitive_cases(rng):
    t = lambda *shape: Tensor(rng.standard_normal(shape), dtype=np.float64)
    a, b = t(3, 4), t(4, 5)
    yield "matmul", lambda a, b: ops.matmul(a, b), [a, b]
    yield "batched matmul", lambda a, b: ops.matmul(a, b), [t(2, 3, 4), t(2, 4, 2)]
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    yield "softmax (masked)", lambda x: ops.softmax_lastdim(x, mask), [t(3, 5)]
    yield "softmax . matmul", lambda a, b: ops.softmax_lastdim(ops.matmul(a, b)), [a, b]
    yield "layer_norm", lambda x, g, be: ops.layer_norm(x, g, be), [t(2, 3, 3, 6), t(6), t(6)]
    yield "gelu", ops.gelu, [t(4, 5)]
    yield "conv2d dense s2", lambda x, k, bb: ops.conv2d(x, k, bb, stride=2, pad=1), [t(1, 5, 6, 3), t(3, 3, 3, 4), t(4)]
    yield "conv2d 7x7 s4", lambda x, k: ops.conv2d(x, k, None, stride=4, pad=3), [t(1, 9, 8, 2), t(7, 7, 2, 3)]
    yield "conv2d depthwise", lambda x, k: ops.conv2d(x, k, None, pad=1, groups=4), [t(2, 4, 3, 4), t(3, 3, 1, 4)]
    yield "conv2d grouped", lambda x, k: ops.conv2d(x, k, None, pad=1, groups=2), [t(1, 4, 4, 4), t(3, 3, 2, 6)]
    yield "mean_pool", ops.mean_pool_spatial, [t(2, 3, 4, 5)]
    yield "split/concat", lambda x: ops.concat_channels(ops.split_channels(x, 2)[::-1]), [t(2, 2, 2, 6)]
    idx = np.array([[0, 3, 3], [1, 2, 0]])
    yield "take/scatter", lambda x: ops.scatter_tokens(ops.take_tokens(x, idx), idx, 4), [t(2, 4, 3)]
    labels = np.array([0, 2, 1])
    yield "cross_entropy", lambda z: ops.cross_entropy(z, labels), [t(3, 4)]


def gradient_suite(seed: int = 0, tol: float = 1e-4, modes=MODES) -> SuiteResult:
    res = SuiteResult("gradcheck")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, f, inputs in _primitive_cases(rng):
        err = grad_check(f, inputs)
        worst = max(worst, err)
        res.expect(err < tol, f"gradient check failed for {name}: rel err {err:.2e}")
    for mode in modes:
        blk = random_block(8, 2, rng)
        x = Tensor(rng.standard_normal((1, 4, 4, 8)), dtype=np.float64)
        spec = PartitionSpec(2, 2)
        # input plus a representative set of parameters
        wrt = [x, blk.attn.q.pointwise, blk.attn.k.depthwise, blk.attn.v.bias, blk.attn.proj, blk.cpe_weight, blk.fc1_weight, blk.norm1_gamma]
        err = grad_check(lambda *_: pale_block(x, blk, mode, 1, spec), wrt)
        worst = max(worst, err)
        res.expect(err < tol, f"gradient check failed for {mode} block: rel err {err:.2e}")
    res.notes.append(f"max relative error: {worst:.2e}")
    return res


# --------------------------------------------------------------------------
# FLOP formulas vs traces


def flops_suite(extents=(8, 14, 16), widths=(16, 32), sizes=(1, 2, 7), seed: int = 0) -> SuiteResult:
    res = SuiteResult("flops")
    rng = np.random.default_rng(seed)
    for h, w, c, s in itertools.product(extents, extents, widths, sizes):
        params = AttentionParams.init(c, 2, rng)
        x = Tensor(rng.standard_normal((1, h, w, c)))
        spec = PartitionSpec(s, s)
        with trace_flops() as tr:
            attention_forward(x, "pale_parallel", params, spec)
        hp, wp = spec.padded_extents(h, w)
        cmp = verify_against_trace(flops_pale_attention(hp, wp, c, s, s), tr)
        res.expect(cmp.ok, f"parallel trace != analytic at h={h} w={w} c={c} s={s}: {cmp.mismatches()}")
    for h, w in itertools.product(extents, extents):
        for c in widths:
            params = AttentionParams.init(c, 2, rng, separable=False)
            with trace_flops() as tr:
                attention_forward(Tensor(rng.standard_normal((1, h, w, c))), "global", params)
            cmp = verify_against_trace(flops_global_attention(h, w, c), tr)
            res.expect(cmp.ok, f"global trace != analytic at h={h} w={w} c={c}: {cmp.mismatches()}")
    cfg = variant_config("tiny")
    model = init_model(cfg, seed)
    with trace_flops() as tr:
        forward(model, Tensor(rng.standard_normal((1, 64, 64, 3))))
    analytic = model_flops(cfg, (64, 64)).total
    res.expect(tr.total() == analytic, f"tiny model trace {tr.total()} != analytic {analytic}")
    return res


SUITES = {
    "partition": partition_suite,
    "equiv": equivalence_suite,
    "gradcheck": gradient_suite,
    "flops": flops_suite,
}
