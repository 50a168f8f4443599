"""Command-line entry point: ``cssm verify | train | eval | bench``.

Exit codes: 0 success, 1 property or verification failure, 2 usage or
configuration error. ``CSSM_OUT_DIR`` overrides the output directory of
``train`` and ``bench``.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import numcore as nc
from .config import ConfigError, RunConfig, apply_overrides, dump_run_config, load_run_config
from .model import init_model
from .tasks import (
    METRIC_HEADER,
    MetricReport,
    SpecError,
    evaluate,
    format_row,
    generate_dataset,
    load_dataset,
    save_dataset,
    train,
    write_csv,
)
from .verify import check_gradients, parse_sizes, run_all

OUT_ENV = "CSSM_OUT_DIR"
RESOLVED_NAME = "resolved.ini"

# acceptance bands for the fitted exponents
BANDS = {"coupled": (None, 1.2), "cross_attention": (1.6, None)}


class UsageError(Exception):
    """Bad flags, config or inputs: exit code 2."""


def _out_dir(cfg_dir: str, flag: str | None) -> Path:
    path = flag or os.environ.get(OUT_ENV) or cfg_dir
    return Path(path)


def _load_config(path: str | None, overrides) -> RunConfig:
    cfg = load_run_config(path) if path else RunConfig()
    return apply_overrides(cfg, overrides or [])


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    try:
        sizes = parse_sizes(args.sizes or "")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    results = run_all(args.tolerance, sizes, args.instances, args.seed, gradients=False)
    if not args.skip_gradients:
        results.append(check_gradients(args.seed, args.tolerance, include_model=args.model_gradients))
    print(f"{'property':<20} {'max_dev':>12} {'tolerance':>10} {'instances':>9}  verdict")
    ok = True
    for r in results:
        verdict = "pass" if r.passed else f"FAIL (replay seed {r.seed})"
        print(f"{r.name:<20} {r.max_dev:12.3e} {r.tolerance:10.1e} {r.instances:9d}  {verdict}")
        ok &= r.passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _aggregate(fusion: str, tag: str, reports: list[MetricReport]) -> list[list[str]]:
    cols = np.array([r.as_row() for r in reports], dtype=np.float64)
    mean = cols.mean(axis=0)
    std = cols.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(cols.shape[1])
    return [
        ["mean", fusion, tag] + [repr(float(v)) for v in mean],
        ["std", fusion, tag] + [repr(float(v)) for v in std],
    ]


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    out = _out_dir(cfg.out_dir, args.out)
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(dump_run_config(cfg))

    data = generate_dataset(cfg.task)
    save_dataset(data, out / "data")
    rows, test_rows, vals, tests = [], [], [], []
    for i in range(args.seeds):
        seed = cfg.seed + i
        res = train(cfg.model, data, cfg.optim, seed=seed)
        rows.extend(res.rows)
        res.store.save(out / f"seed{seed}.cssm")
        if res.val is not None:
            vals.append(res.val)
        if res.test is not None:
            tests.append(res.test)
            test_rows.append(format_row(seed, cfg.model.fusion, "test", res.test))
            r = res.test
            print(f"seed {seed}: test mae={r.mae:.4f} corr={r.corr:.4f} acc2={r.acc2:.4f} f1={r.f1:.4f} acc3={r.acc3:.4f}", flush=True)
    if vals:
        rows.extend(_aggregate(cfg.model.fusion, "final", vals))
    write_csv(out / "metrics.csv", rows)
    if tests:
        test_rows.extend(_aggregate(cfg.model.fusion, "test", tests))
        write_csv(out / "test.csv", test_rows)
        print(f"{cfg.model.fusion}: mean test f1 {float(test_rows[-2][6]):.4f} over {args.seeds} seed(s)")
    print(f"outputs in {out}")
    return 0


def _check_shapes(store: nc.ParameterStore, expected: nc.ParameterStore) -> None:
    problems = []
    for name in expected.names():
        if name not in store:
            problems.append(f"  missing {name}: expected {expected[name].shape}")
        elif store[name].shape != expected[name].shape:
            problems.append(f"  {name}: expected {expected[name].shape}, found {store[name].shape}")
    for name in store.names():
        if name not in expected:
            problems.append(f"  unexpected {name}: found {store[name].shape}")
    if problems:
        raise UsageError("checkpoint does not match the model config:\n" + "\n".join(problems))


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / RESOLVED_NAME
    if not cfg_path.exists():
        raise UsageError(f"no config at {cfg_path}; pass --config")
    cfg = _load_config(str(cfg_path), args.set)
    store = nc.ParameterStore.load(ckpt)
    _check_shapes(store, init_model(cfg.model, 0))
    data = load_dataset(args.data) if args.data else generate_dataset(cfg.task)
    if tuple(data.spec.raw_dims) != tuple(cfg.model.raw_dims):
        raise UsageError(f"dataset raw dims {data.spec.raw_dims} vs model raw dims {cfg.model.raw_dims}")
    split = data.split(args.split)
    try:
        report = evaluate(store.params, cfg.model, split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    row = format_row(ckpt.stem, cfg.model.fusion, args.split, report)
    print(",".join(METRIC_HEADER))
    print(",".join(row))
    if args.out:
        write_csv(args.out, [row])
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _verdict(fusion: str, exponent: float) -> str:
    lo, hi = BANDS.get(fusion, (None, None))
    if lo is None and hi is None:
        return "no band"
    ok = (lo is None or exponent >= lo) and (hi is None or exponent <= hi)
    band = f"<= {hi}" if lo is None else f">= {lo}"
    return f"{'pass' if ok else 'FAIL'} (band {band})"


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, args.set) if args.config or args.set else None
    model_cfg = cfg.model if cfg else bench_mod.bench_config()
    try:
        lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else list(bench_mod.DEFAULT_LENGTHS)
    except ValueError:
        raise UsageError(f"bad --lengths {args.lengths!r}") from None
    engines = args.engines.split(",") if args.engines else list(bench_mod.ENGINES)
    unknown = [e for e in engines if e not in bench_mod.ENGINES]
    if unknown:
        raise UsageError(f"unknown engines {unknown}; choose from {sorted(bench_mod.ENGINES)}")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    out = _out_dir(cfg.out_dir if cfg else "runs/bench", args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.float64 if args.float64 else np.float32
    try:
        records = bench_mod.run_sweep(
            lengths, model_cfg, args.repeats, args.batch, engines, seed=args.seed, dtype=dtype,
            threads=args.threads, log=print,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bench_mod.write_records(out / "bench.csv", records)
    ok = True
    for name in engines:
        recs = [r for r in records if r.engine == name]
        for metric in ("time", "memory"):
            try:
                k = bench_mod.fit_scaling_exponent(recs, metric)
            except bench_mod.InsufficientDataError as exc:
                print(f"{name:<20} {metric:<6} exponent n/a ({exc})")
                continue
            verdict = _verdict(recs[0].fusion, k)
            ok &= not verdict.startswith("FAIL")
            print(f"{name:<20} {metric:<6} exponent {k:6.3f}  {verdict}")
    print(f"records written to {out / 'bench.csv'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cssm", description="Coupled state-space multi-modal fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="engine-equivalence and gradient property suite")
    v.add_argument("--tolerance", type=float, default=None, help="one tolerance for every property (default: per property)")
    v.add_argument("--sizes", default="", help="instance bounds, e.g. L=64,N=8,E=8,M=4")
    v.add_argument("--instances", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--skip-gradients", action="store_true")
    v.add_argument("--model-gradients", action="store_true", help="also run end-to-end model gradient checks")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one fusion mode for k seeds")
    t.add_argument("config", nargs="?", default=None)
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--out", default=None, help=f"output directory (else ${OUT_ENV}, else run.out_dir)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="exported dataset directory (default: regenerate from config)")
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--config", default=None, help=f"default: {RESOLVED_NAME} next to the checkpoint")
    e.add_argument("--out", default=None, help="write the metric row to this CSV")
    e.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="sequence-length scaling sweep")
    b.add_argument("config", nargs="?", default=None)
    b.add_argument("--lengths", default=None, help="comma list (default: " + ",".join(map(str, bench_mod.DEFAULT_LENGTHS)) + ")")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--engines", default=None, help="comma list from " + ",".join(bench_mod.ENGINES))
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--float64", action="store_true")
    b.add_argument("--out", default=None)
    b.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
