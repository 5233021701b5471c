"""``pale`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import init_model, variant_config
from .bench import bench_attention, write_csv
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .complexity import FLOP_TOL, PARAM_TOL, PUBLISHED, model_flops, model_params, within
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, gen_synthetic_dataset, read_dataset
from .partition import PartitionSpec, build_groups, pale_token_count
from .train import evaluate, train
from .verify import SUITES

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _ints(text: str, sep: str = ",") -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(sep))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers separated by {sep!r}, got {text!r}") from None


# --------------------------------------------------------------------------
# partition


def _grid(labels: np.ndarray) -> str:
    width = len(str(int(labels.max()))) + 1
    return "\n".join("".join(f"{int(v):>{width}}" for v in row) for row in labels)


def cmd_partition(args) -> int:
    h, w, s_r, s_c = args.h, args.w, args.s_r, args.s_c
    spec = PartitionSpec(s_r, s_c, args.mode != "cross")
    if args.mode == "axial":
        spec = PartitionSpec(1, 1, True)
    if min(h, w) < 1 or h % spec.s_r or w % spec.s_c:
        raise UsageError(f"extents ({h}, {w}) must be positive multiples of the pale size ({spec.s_r}, {spec.s_c})")
    for axis in ("row", "column"):
        g = build_groups(h, w, spec, axis)
        label = np.empty(h * w, dtype=int)
        for k, members in enumerate(g.token_index()):
            label[members] = k
        kind = "interlaced" if spec.interlaced else "contiguous"
        print(f"{axis} groups ({g.group_count}, {kind}):")
        for k, lines in enumerate(g.lines):
            print(f"  group {k}: {axis}s {{{', '.join(str(int(i)) for i in lines)}}}")
        print(_grid(label.reshape(h, w)))
    print(f"pale token count: {pale_token_count(h, w, spec.s_r, spec.s_c)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# audit


def _audit_config(args) -> object:
    over = {}
    if args.pale_size:
        over["pale_sizes"] = ((args.pale_size, args.pale_size),) * 4
    if args.mode:
        over["attn_mode"] = args.mode
    if args.config:
        cfg = load_config(args.config)
        base = cfg.variant()
        return replace(base, **over)
    return variant_config(args.variant, **over)


def cmd_audit(args) -> int:
    cfg = _audit_config(args)
    size = (args.size, args.size)
    flops = model_flops(cfg, size)
    params = model_params(cfg)
    print(f"variant {cfg.name}  input {size[0]}x{size[1]}  mode {cfg.attn_mode}  pale {cfg.pale_sizes}")
    print(f"{'stage':<8}{'params':>14}{'MA':>18}{'FLOPs (2xMA)':>18}")
    for i in range(len(cfg.dims)):
        ma = sum(
            sum(v for k, v in row.items() if isinstance(v, int) and k not in ("h", "w", "c"))
            for row in flops.layers
            if row["layer"].startswith(f"stage{i}.")
        )
        print(f"stage{i + 1:<3}{params[f'stage{i}']:>14,}{ma:>18,}{2 * ma:>18,}")
    print(f"{'head':<8}{params['head']:>14,}{flops.terms['head']:>18,}{2 * flops.terms['head']:>18,}")
    print(f"{'total':<8}{params['total']:>14,}{flops.total:>18,}{flops.total_flops:>18,}")
    print(f"biases: {params['bias']:,}   norm/softmax/activation work (not in MA): {flops.other:,}")
    print(json.dumps({"terms": flops.terms, "params": params["total"]}, sort_keys=True))
    for row in flops.layers if args.per_layer else ():
        print(json.dumps(row, sort_keys=True))

    reference = (
        cfg.name in PUBLISHED
        and size == (224, 224)
        and cfg.attn_mode == "pale_parallel"
        and all(s == (7, 7) for s in cfg.pale_sizes)
        and cfg.num_classes == 1000
    )
    if cfg.pale_sizes != ((7, 7),) * 4:
        base = model_flops(replace(cfg, pale_sizes=((7, 7),) * 4), size).total
        rel = "greater than" if flops.total > base else "not greater than"
        print(f"MA {flops.total / 1e9:.3f}G is {rel} the pale-size-7 model ({base / 1e9:.3f}G)")
    if not reference:
        print("published targets apply only to T/S/B at 224x224, pale size 7, parallel mode")
        return EXIT_OK
    p_target, f_target = PUBLISHED[cfg.name]
    p_ok = within(params["total"], p_target, PARAM_TOL)
    f_ma = within(flops.total, f_target, FLOP_TOL)
    f_x2 = within(flops.total_flops, f_target, FLOP_TOL)
    print(f"params {params['total'] / 1e6:.2f}M vs {p_target / 1e6:.0f}M +-{PARAM_TOL:.0%}: {'PASS' if p_ok else 'FAIL'}")
    print(
        f"FLOPs {flops.total / 1e9:.2f}G (MA) / {flops.total_flops / 1e9:.2f}G (x2) vs {f_target / 1e9:.1f}G "
        f"+-{FLOP_TOL:.0%}: {'PASS' if f_ma or f_x2 else 'FAIL'} "
        f"(MA {'in' if f_ma else 'out of'} range, x2 {'in' if f_x2 else 'out of'} range)"
    )
    return EXIT_OK if p_ok and (f_ma or f_x2) else EXIT_FAIL


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = False
    for name in names:
        if name == "equiv":
            res = SUITES[name](inject_skip_mask=args.inject_fault == "skip-mask", seed=args.seed)
        else:
            res = SUITES[name](seed=args.seed) if name != "partition" else SUITES[name]()
        status = "PASS" if res.ok else "FAIL"
        print(f"[{status}] {name}: {res.checks} checks, {len(res.failures)} failures")
        for note in res.notes:
            print(f"    {note}")
        for msg in res.failures[: args.max_failures]:
            print(f"    {msg}")
        if len(res.failures) > args.max_failures:
            print(f"    ... {len(res.failures) - args.max_failures} more")
        failed |= not res.ok
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------
# data, training, evaluation


def cmd_gen_data(args) -> int:
    ds = gen_synthetic_dataset(args.classes, args.per_class, args.size, args.seed, args.out)
    print(f"wrote {len(ds)} samples ({args.classes} classes x {args.per_class}) of {args.size}x{args.size} to {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "precision", None):
        over["precision"] = args.precision
    if getattr(args, "data", None):
        over["data_path"] = str(args.data)
    if getattr(args, "out", None):
        over["out_dir"] = str(args.out)
    return replace(cfg, **over)


def _check_dataset(ds: Dataset, cfg: RunConfig, num_classes: int, role: str) -> None:
    h, w = ds.images.shape[1:3]
    if (h, w) != tuple(cfg.input_size):
        raise UsageError(f"{role} images are {h}x{w} but input.size is {cfg.input_size[0]}x{cfg.input_size[1]}")
    if ds.labels.min() < 0 or ds.labels.max() >= num_classes:
        raise UsageError(f"{role} labels fall outside [0, {num_classes})")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.data_path:
        raise UsageError("no dataset given (data.path or --data)")
    if not cfg.out_dir:
        raise UsageError("no output directory given (out.dir or --out)")
    variant = cfg.variant()
    ds = read_dataset(cfg.data_path)
    if cfg.data_eval_path:
        train_set, eval_set = ds, read_dataset(cfg.data_eval_path)
    else:
        cut = len(ds) * 4 // 5
        train_set = Dataset(ds.images[:cut], ds.labels[:cut])
        eval_set = Dataset(ds.images[cut:], ds.labels[cut:])
    for part, role in ((train_set, "training"), (eval_set, "evaluation")):
        _check_dataset(part, cfg, variant.num_classes, role)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    model = init_model(variant, cfg.seed, cfg.dtype)
    records = train(
        model,
        train_set,
        eval_set,
        cfg.train_steps,
        cfg.train_lr,
        cfg.train_batch_size,
        cfg.seed,
        cfg.train_eval_every,
        out / "metrics.jsonl",
    )
    save_checkpoint(model, out / "model.pale")
    evals = [r for r in records if r.accuracy is not None]
    first, last = evals[0], evals[-1]
    print(
        f"steps {cfg.train_steps}: eval loss {first.loss:.4f} -> {last.loss:.4f}, "
        f"accuracy {first.accuracy:.3f} -> {last.accuracy:.3f}; wrote {out / 'model.pale'}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if not cfg.data_path:
        raise UsageError("no dataset given (data.path or --data)")
    variant = cfg.variant()
    model = load_model(args.checkpoint, variant)
    ds = read_dataset(cfg.data_path)
    _check_dataset(ds, cfg, variant.num_classes, "evaluation")
    loss, acc = evaluate(model, ds)
    print(json.dumps({"samples": len(ds), "loss": loss, "accuracy": acc}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    modes = [m for m in args.modes.split(",") if m]
    if not modes:
        raise UsageError("empty mode list")
    shapes = [_ints(s, "x") for s in args.shapes.split(",") if s]
    if not shapes or any(len(s) != 4 for s in shapes):
        raise UsageError("shapes must look like BxHxWxC[,BxHxWxC...]")
    rows = bench_attention(modes, shapes, tuple(args.pale), args.repeats, args.heads, args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    write_csv(rows, sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pale", description="Pale-shaped attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="print row/column groups and the pale token count")
    p.add_argument("h", type=int)
    p.add_argument("w", type=int)
    p.add_argument("s_r", type=int)
    p.add_argument("s_c", type=int)
    p.add_argument("--mode", choices=("pale", "cross", "axial"), default="pale")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("audit", help="parameter and FLOP accounting against published targets")
    p.add_argument("--variant", default="T", choices=("T", "S", "B", "tiny"))
    p.add_argument("--config", type=Path)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--pale-size", type=int)
    p.add_argument("--mode")
    p.add_argument("--per-layer", action="store_true", help="emit one JSON object per layer")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", choices=("all", *SUITES), default="all")
    p.add_argument("--inject-fault", choices=("skip-mask",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-failures", type=int, default=10)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a synthetic oriented-texture dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "toy training run"), ("eval", cmd_eval, "evaluate a checkpoint")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path)
        p.add_argument("--data", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--out", type=Path)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time attention modes and emit CSV")
    p.add_argument("--modes", required=True, help="comma-separated attention modes")
    p.add_argument("--shapes", default="1x56x56x64", help="comma-separated BxHxWxC")
    p.add_argument("--pale", type=lambda s: _ints(s), default=(7, 7))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ValueError, FileNotFoundError) as err:
        print(f"pale {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
