"""End-to-end acceptance criteria, each at its stated tolerance."""

import json
import time

import numpy as np
import pytest

from pale.backbone import forward, init_model, init_variant, variant_config
from pale.checkpoint import encode, load_model, save_checkpoint
from pale.complexity import FLOP_TOL, PARAM_TOL, PUBLISHED, model_flops, model_params, within
from pale.data import synthesize
from pale.tensor import Tensor
from pale.train import train
from pale.verify import equivalence_suite, flops_suite, gradient_suite, padding_suite, partition_suite


def _suite_detail(res):
    head = f"{res.checks} checks, {len(res.failures)} failures"
    notes = "; ".join(res.notes)
    first = f"; first failure: {res.failures[0]}" if res.failures else ""
    return f"{head}{'; ' + notes if notes else ''}{first}"


def test_criterion_1_parameter_audit(acceptance):
    parts, ok = [], True
    for name in ("T", "S", "B"):
        n = model_params(variant_config(name))["total"]
        good = within(n, PUBLISHED[name][0], PARAM_TOL)
        ok &= good
        parts.append(f"Pale-{name} {n / 1e6:.2f}M vs {PUBLISHED[name][0] / 1e6:.0f}M")
    assert acceptance(1, "parameter counts within 5%", ok, ", ".join(parts))


def test_criterion_2_flop_audit(acceptance):
    parts, ok = [], True
    for name in ("T", "S", "B"):
        rep = model_flops(variant_config(name), (224, 224))
        target = PUBLISHED[name][1]
        good = within(rep.total, target, FLOP_TOL) or within(rep.total_flops, target, FLOP_TOL)
        ok &= good
        parts.append(f"Pale-{name} {rep.total / 1e9:.2f}G MA vs {target / 1e9:.1f}G")
    assert acceptance(2, "FLOPs at 224x224 within 10% under one convention", ok, ", ".join(parts))


def test_criterion_3_formula_trace_exactness(acceptance):
    res = flops_suite(extents=(8, 14, 16), widths=(16, 32), sizes=(1, 2, 7))
    assert acceptance(3, "analytic terms equal traced multiply-adds", res.ok, _suite_detail(res))


def test_criterion_4_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    res = equivalence_suite(tol32=1e-5, tol64=1e-10)
    detail = f"{_suite_detail(res)}; {time.perf_counter() - t0:.1f}s"
    assert acceptance(4, "every mode matches the brute-force oracle", res.ok, detail)


def test_criterion_5_gradient_suite(acceptance):
    res = gradient_suite(tol=1e-4)
    assert acceptance(5, "primitive and block gradients pass finite differences", res.ok, _suite_detail(res))


def test_criterion_6_partition_suite(acceptance):
    res = partition_suite(max_extent=32, max_size=8)
    assert acceptance(6, "partition bijection, pale token count, axial identity", res.ok, _suite_detail(res))


def test_criterion_7_padding_independence(acceptance):
    results = [padding_suite(seed=s, tol32=1e-6) for s in range(4)]
    ok = all(r.ok for r in results)
    detail = "; ".join(_suite_detail(r) for r in results)
    assert acceptance(7, "valid-token outputs independent of padding", ok, detail)


def _train_once(tmp_path, tag):
    cfg = variant_config("tiny")
    model = init_model(cfg, seed=0)
    train_set = synthesize(10, 60, 64, seed=1)
    eval_set = synthesize(10, 20, 64, seed=2)
    metrics = tmp_path / f"{tag}.jsonl"
    records = train(model, train_set, eval_set, steps=200, lr=0.1, batch_size=32, seed=0, eval_every=50, metrics_path=metrics)
    return model, records, metrics


@pytest.mark.slow
def test_criterion_8_toy_learning_signal(acceptance, tmp_path):
    model_a, rec_a, path_a = _train_once(tmp_path, "a")
    model_b, rec_b, path_b = _train_once(tmp_path, "b")
    evals = [r for r in rec_a if r.accuracy is not None]
    first, last = evals[0], evals[-1]
    drop = 1 - last.loss / first.loss

    def strip(path):
        return [{k: v for k, v in json.loads(line).items() if k != "wall_time"} for line in path.read_text().splitlines()]

    same = strip(path_a) == strip(path_b) and encode(model_a.state_dict()) == encode(model_b.state_dict())
    ok = last.step == 200 and drop >= 0.5 and last.accuracy >= 0.3 and same
    detail = (
        f"eval loss {first.loss:.3f} -> {last.loss:.3f} ({drop:.0%} decrease), "
        f"accuracy {first.accuracy:.2f} -> {last.accuracy:.2f}, deterministic={same}"
    )
    assert acceptance(8, "tiny model learns the synthetic task in 200 steps", ok, detail)


def test_criterion_9_checkpoint_round_trip(acceptance, tmp_path):
    model = init_variant("T", seed=11)
    first, second = tmp_path / "a.pale", tmp_path / "b.pale"
    save_checkpoint(model, first)
    loaded = load_model(first, model.config)
    save_checkpoint(loaded, second)
    same_bytes = first.read_bytes() == second.read_bytes()
    x = Tensor(np.random.default_rng(3).standard_normal((2, 224, 224, 3)).astype(np.float32))
    same_logits = forward(model, x).data.tobytes() == forward(loaded, x).data.tobytes()
    detail = f"{first.stat().st_size:,} bytes, files identical={same_bytes}, logits bitwise equal={same_logits}"
    assert acceptance(9, "save-load-save and logits round trip", same_bytes and same_logits, detail)
