"""Sequence-length scaling sweep: wall time and peak allocation per engine.

Peak memory is the high-water mark of traced allocations (numpy buffers are
reported to ``tracemalloc``) during one forward pass, measured separately
from the timed repeats so tracing overhead never enters the timings.
"""

from __future__ import annotations

import csv
import dataclasses
import gc
import statistics
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .config import CoupledModelConfig
from .model import ModalityBatch, init_model, model_forward

__all__ = [
    "BenchRecord",
    "InsufficientDataError",
    "ENGINES",
    "DEFAULT_LENGTHS",
    "bench_config",
    "measure",
    "run_sweep",
    "fit_scaling_exponent",
    "write_records",
    "BENCH_HEADER",
]

BENCH_HEADER = ["engine", "fusion", "L", "B", "D", "M", "threads", "median_s", "min_s", "max_s", "peak_bytes", "repeats"]
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)

# engine name -> (fusion mode, scan engine)
ENGINES = {
    "coupled-scan": ("coupled", "scan"),
    "coupled-sequential": ("coupled", "sequential"),
    "cross_attention": ("cross_attention", "scan"),
}


class InsufficientDataError(ValueError):
    """Too few (or too narrowly spread) lengths to fit an exponent."""


@dataclass
class BenchRecord:
    engine: str
    fusion: str
    L: int
    B: int
    D: int
    M: int
    threads: int
    median_s: float
    min_s: float
    max_s: float
    peak_bytes: int
    repeats: int
    failed: bool = False

    def row(self) -> list:
        if self.failed:
            return [self.engine, self.fusion, self.L, self.B, self.D, self.M, self.threads, "failed", "", "", "", self.repeats]
        return [
            self.engine,
            self.fusion,
            self.L,
            self.B,
            self.D,
            self.M,
            self.threads,
            f"{self.median_s:.6g}",
            f"{self.min_s:.6g}",
            f"{self.max_s:.6g}",
            self.peak_bytes,
            self.repeats,
        ]


def bench_config(**overrides) -> CoupledModelConfig:
    """Small model used by the sweep (the shape of the curves is what matters)."""
    base = dict(n_modalities=3, raw_dims=(20, 5, 10), d_model=16, d_state=8, n_layers=1, dt_rank_divisor=4)
    base.update(overrides)
    return CoupledModelConfig(**base)


def measure(fn: Callable[[], object], repeats: int = 5) -> tuple[list[float], int]:
    """Warm up once, time ``repeats`` calls, then one traced call for peak bytes."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    gc.collect()
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return times, peak


def _inputs(cfg: CoupledModelConfig, B: int, L: int, seed: int, dtype) -> ModalityBatch:
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(B, L, d)).astype(dtype) for d in cfg.raw_dims]
    masks = [np.ones((B, L), dtype=dtype) for _ in cfg.raw_dims]
    return ModalityBatch(xs, masks)


def run_sweep(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    cfg: CoupledModelConfig | None = None,
    repeats: int = 5,
    batch: int = 1,
    engines: Iterable[str] = tuple(ENGINES),
    seed: int = 0,
    dtype=np.float32,
    threads: int = 1,
    log: Callable[[str], None] | None = None,
) -> list[BenchRecord]:
    """Forward-pass (inference) time and peak memory for every engine and length."""
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = cfg or bench_config()
    records = []
    with threadpool_limits(limits=threads):
        n_threads = max([info.get("num_threads", 1) for info in threadpool_info()] or [1])
        for name in engines:
            fusion, engine = ENGINES[name]
            ecfg = dataclasses.replace(cfg, fusion=fusion, engine=engine)
            for L in lengths:
                try:
                    params = init_model(ecfg, seed).astype(dtype).params
                    data = _inputs(ecfg, batch, L, seed, dtype)
                    times, peak = measure(lambda: model_forward(params, ecfg, data, keep=False), repeats)
                    rec = BenchRecord(
                        name, fusion, L, batch, ecfg.d_model, ecfg.n_modalities, n_threads,
                        statistics.median(times), min(times), max(times), int(peak), repeats,
                    )
                except MemoryError:
                    rec = BenchRecord(name, fusion, L, batch, ecfg.d_model, ecfg.n_modalities, n_threads,
                                      float("nan"), float("nan"), float("nan"), 0, repeats, failed=True)
                finally:
                    params = data = None
                    gc.collect()
                records.append(rec)
                if log is not None:
                    log(",".join(map(str, rec.row())))
    return records


def fit_scaling_exponent(records: Sequence[BenchRecord], metric: str = "time") -> float:
    """Least-squares slope of log(time or bytes) against log(L)."""
    pts = [r for r in records if not r.failed]
    if len({r.engine for r in pts}) > 1:
        raise ValueError("records from more than one engine")
    Ls = np.array([r.L for r in pts], dtype=np.float64)
    if len(np.unique(Ls)) < 4 or Ls.max() / Ls.min() < 16:
        raise InsufficientDataError("need >= 4 lengths spanning at least 16x")
    if metric == "time":
        ys = np.array([r.median_s for r in pts], dtype=np.float64)
    elif metric == "memory":
        ys = np.array([r.peak_bytes for r in pts], dtype=np.float64)
    else:
        raise ValueError(f"metric must be 'time' or 'memory', got {metric!r}")
    slope, _ = np.polyfit(np.log(Ls), np.log(ys), 1)
    return float(slope)


def write_records(path: str | Path, records: Iterable[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in records:
            w.writerow(r.row())
