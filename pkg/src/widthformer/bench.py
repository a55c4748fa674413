"""Per-stage latency and exact MAC counts over feature-size settings."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .decoder import key_count, transform_forward, transform_full_forward
from .encoding import (
    bev_query_pe, height_distribution, pixel_refpe, reference_coefficients, width_refpe,
)
from .model import ModelConfig, WidthFormer
from .numeric import Mlp, count_macs, make_rng
from .scene import SceneSpec, gen_scene
from .width import height_maxpool, refine

BENCH_HEADER = ("stage", "h_i", "w_i", "c", "h_b", "macs", "ms_median")
# (H_I, W_I, C) at stride 16 for 128x352, 256x704 and 512x1408 inputs
DEFAULT_SIZES = ((8, 22, 64), (16, 44, 64), (32, 88, 64))


def parse_size(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"size must look like HxWxC, got {text!r}")
    return parts


@dataclass(frozen=True)
class BenchRow:
    stage: str
    h_i: int
    w_i: int
    c: int
    h_b: int
    macs: int
    ms_median: float


@dataclass
class BenchResult:
    rows: list[BenchRow]
    # (h_i, w_i, c) -> (decoder keys, full-feature oracle keys)
    key_counts: dict[tuple[int, int, int], tuple[int, int]] = field(default_factory=dict)

    def to_csv(self, timings: bool = True) -> str:
        """CSV report; ``timings=False`` blanks the advisory wall-clock column."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for r in self.rows:
            ms = f"{r.ms_median:.4f}" if timings and r.ms_median == r.ms_median else ""
            writer.writerow([r.stage, r.h_i, r.w_i, r.c, r.h_b, r.macs, ms])
        return buf.getvalue()


def _measure(fn, repeats: int):
    """``(macs, median ms, first result)``; ``repeats=0`` skips timing."""
    with count_macs() as counter:
        first = fn()
    macs = sum(counter.values())
    if repeats == 0:
        return macs, float("nan"), first
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return macs, statistics.median(times), first


def bench_setting(h_i: int, w_i: int, c: int, repeats: int = 3, n_cameras: int = 6, h_b: int = 32,
                  depth_bins: int = 32, heads: int = 4, seed: int = 0):
    config = ModelConfig(channels=c, heads=heads, depth_bins=depth_bins, bev_h=h_b, bev_w=h_b, rows=h_i)
    model = WidthFormer.init(config, seed=seed, with_aux=False)
    rig, feat = gen_scene(SceneSpec(n_cameras, h_i, w_i, c, seed))
    enc = config.encoder
    pixel_mlp = Mlp.init(make_rng(seed, 2), [enc.encode_width(True), c, c])

    pooled = height_maxpool(feat)
    width = refine(pooled, feat, model.refine)
    coeffs = reference_coefficients(feat, model.coeff_head)
    heights = height_distribution(feat, model.height_head)
    width_pe = width_refpe(feat, rig, config.bins, coeffs, heights, model.width_pe_mlp, enc)
    pixel_pe = pixel_refpe(feat, rig, config.bins, coeffs, pixel_mlp, True, enc)
    queries = bev_query_pe(model.grid, model.query_mlp, enc)

    def pe_stage():
        s = reference_coefficients(feat, model.coeff_head)
        t = height_distribution(feat, model.height_head)
        width_refpe(feat, rig, config.bins, s, t, model.width_pe_mlp, enc)
        bev_query_pe(model.grid, model.query_mlp, enc)

    stages = {
        "pool": lambda: height_maxpool(feat),
        "refine": lambda: refine(pooled, feat, model.refine),
        "pe": pe_stage,
        "decoder": lambda: transform_forward(width, width_pe, queries, model.decoder),
        "decoder_full": lambda: transform_full_forward(feat, pixel_pe, queries, model.decoder),
    }
    rows, results = [], {}
    for name, fn in stages.items():
        macs, ms, results[name] = _measure(fn, repeats)
        rows.append(BenchRow(name, h_i, w_i, c, h_b, macs, ms))
    keys = (key_count(results["decoder"][1]), key_count(results["decoder_full"][1]))
    return rows, keys


def run_bench(sizes=DEFAULT_SIZES, repeats: int = 3, n_cameras: int = 6, h_b: int = 32,
              depth_bins: int = 32, heads: int = 4, seed: int = 0, timed: bool = True) -> BenchResult:
    """Exact MAC counts and key counts per setting, plus median wall-clock when ``timed``.

    Timed runs pin BLAS to one thread so medians are comparable between settings.
    """
    if timed and repeats < 3:
        raise ValueError("repeats must be >= 3")
    if not timed:
        repeats = 0
    result = BenchResult([])
    with threadpool_limits(limits=1 if timed else None):
        for h_i, w_i, c in sizes:
            rows, keys = bench_setting(h_i, w_i, c, repeats, n_cameras, h_b, depth_bins, heads, seed)
            result.rows.extend(rows)
            result.key_counts[(h_i, w_i, c)] = keys
    return result


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
