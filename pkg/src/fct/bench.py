"""Analytic FLOP model and single-thread timing of naive SA against CSA.

Counting conventions (printed in every report header):
  * one multiply-accumulate = 2 FLOPs
  * radix-2 butterfly = 10 real FLOPs, so a length-n transform costs 5 n log2 n
  * normalizers cost a fixed number of FLOPs per map entry (NORM_FLOPS)
"""

import csv
import math
import os
import statistics
import time
import tracemalloc
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import attention as attn
from . import autodiff as ad
from .model import count_params, preset
from .numeric import Rng
from .spectral import half_len, next_pow2

MAC = 2
BUTTERFLY = 10
# per-entry cost: softmax = max, sub, exp, sum, div; logmax = abs, log, sum, div
NORM_FLOPS = {"softmax": 5, "logmax": 4, "identity": 0}
LN_FLOPS = 8  # mean, centre, square, mean, rsqrt-scale, gain, bias (per element, rounded)
GELU_FLOPS = 8

MECHANISMS = ("sa", "csa")

CONVENTIONS = (
    "FLOP conventions: 1 MAC = 2 FLOPs; FFT butterfly = 10 FLOPs (5 n log2 n per length-n transform); "
    f"normalizer FLOPs per map entry {NORM_FLOPS}; layernorm {LN_FLOPS}/element; GELU {GELU_FLOPS}/element. "
    "'layers' counts only dense parametric layers (stem, q/k/v/o, MLP, merging, head); "
    "'full' adds transforms, attention products, normalizers, fusion, layernorm and GELU."
)


class BenchError(RuntimeError):
    pass


def _check(mechanism, n, c):
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    if n < 1 or c < 1:
        raise ValueError("n and c must be positive")


def fft_flops(n):
    return 5 * n * math.log2(n) if n > 1 else 0.0


def analytic_cost(mechanism, n, c=1, term="map"):
    """Closed-form FLOPs of one attention mechanism over n tokens of c channels.

    term="map": the attention-map term alone, n^2 for SA and
    n^2/2 + 2 n log2 n for CSA (two transforms plus a half-length map).
    term="full": projections, transforms, both products, normalizer and
    blending, under the module-level conventions.
    """
    _check(mechanism, n, c)
    if term == "map":
        if mechanism == "sa":
            return float(n * n)
        return 0.5 * n * n + 2 * n * math.log2(n)
    if term != "full":
        raise ValueError(f"unknown term {term!r}")
    if mechanism == "sa":
        proj = 4 * MAC * n * c * c
        return float(proj + 2 * MAC * n * n * c + NORM_FLOPS["softmax"] * n * n)
    L = half_len(n)
    transforms = 2 * c * fft_flops(n)
    proj = 3 * 2 * MAC * L * c * c + MAC * n * c * c
    per_plane = 2 * MAC * L * L * c + NORM_FLOPS["logmax"] * L * L
    fusion = 2 * 3 * L * L
    return float(transforms + proj + 2 * per_plane + fusion)


# -- whole-model cost -------------------------------------------------------

def block_cost(kind, h, w, c, mlp_ratio=4, convention="full", normalizer="logmax"):
    n = h * w
    hidden = mlp_ratio * c
    mlp = 2 * MAC * n * c * hidden
    out_proj = MAC * n * c * c
    if kind == "spatial":
        p = next_pow2(n)
        L = half_len(p)
        qkv = 3 * 2 * MAC * L * c * c
        maps = 2 * (2 * MAC * L * L * c + NORM_FLOPS[normalizer] * L * L) + 6 * L * L
        transforms = 2 * c * fft_flops(p)
    else:
        p = next_pow2(c)
        L = half_len(p)
        qkv = 3 * MAC * n * c * c
        maps = 2 * (2 * MAC * L * L * n + NORM_FLOPS[normalizer] * L * L) + 6 * L * L
        transforms = 4 * n * fft_flops(p)
    total = qkv + out_proj + mlp
    if convention == "full":
        total += maps + transforms + 2 * LN_FLOPS * n * c + GELU_FLOPS * n * hidden + 2 * n * c
    elif convention != "layers":
        raise ValueError(f"unknown convention {convention!r}")
    return float(total)


def model_cost(config, convention="full"):
    """[(component, FLOPs)] for one forward pass of ``config`` on one image."""
    res = config.resolutions()
    out = []
    h0 = res[0]
    out.append(("stem", float(MAC * h0 * h0 * 48 * config.c1)))
    for i, (depth, kind, c) in enumerate(zip(config.depths, config.block_kinds, config.widths)):
        h = res[i]
        if i > 0:
            out.append((f"s{i}.merge", float(MAC * h * h * 2 * c * c)))
        for j in range(depth):
            out.append((f"s{i}.b{j}", block_cost(kind, h, h, c, config.mlp_ratio, convention)))
    out.append(("head", float(MAC * config.widths[-1] * config.num_classes)))
    return out


def model_flops(config, convention="full"):
    return sum(f for _, f in model_cost(config, convention))


# Table II of the reference architecture: (params in M, FLOPs in G)
PAPER_TABLE2 = {
    ("tiny", 224): (27.4, 4.9), ("small", 224): (52.6, 8.9),
    ("base", 224): (74.0, 15.3), ("large", 224): (179.0, 38.0),
    ("tiny", 512): (28.2, 25.7), ("small", 512): (54.8, 42.4),
    ("base", 512): (78.2, 69.8), ("large", 512): (174.5, 169.2),
}


@dataclass
class Table2Row:
    config: str
    resolution: int
    params_m: float
    paper_params_m: float
    params_dev: float
    gmac_layers: float
    gflops_full: float
    paper_gflops: float
    flops_dev: float


def table2_report(name, resolutions=(224, 512), num_classes=1000):
    """Our parameter and FLOP counts against the published cells.

    The published FLOPs column is compared with our dense-layer count in
    GMACs (the usual vision-model convention); NaN where no published cell
    exists.
    """
    rows = []
    for r in resolutions:
        if r not in (224, 384, 512):
            raise ValueError(f"resolution {r} not in (224, 384, 512)")
        cfg = preset(name, input_size=r, num_classes=num_classes)
        params = count_params(cfg) / 1e6
        gmac = model_flops(cfg, "layers") / MAC / 1e9
        gfull = model_flops(cfg, "full") / 1e9
        pp, pf = PAPER_TABLE2.get((name, r), (math.nan, math.nan))
        rows.append(Table2Row(name, r, params, pp, params / pp - 1, gmac, gfull, pf, gmac / pf - 1))
    return rows


def flop_ratio(name, lo=224, hi=512, convention="layers"):
    a = model_flops(preset(name, input_size=lo), convention)
    b = model_flops(preset(name, input_size=hi), convention)
    return b / a


def write_table2(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CONVENTIONS}\n")
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(Table2Row)])
        for r in rows:
            w.writerow(astuple(r))


# -- timing -----------------------------------------------------------------

@dataclass
class BenchRecord:
    mechanism: str
    n: int
    c: int
    analytic_flops: float
    measured_ns: int
    bytes_peak: int
    trials: int
    skipped: str = ""


def estimate_bytes(mechanism, n, c):
    if mechanism == "sa":
        return 8 * (3 * n * n + 6 * n * c)
    L = half_len(n)
    return 8 * (10 * L * L + 16 * n * c)


def _forward_fn(mechanism, n, c, seed):
    rng = Rng(seed).child(n, c)
    x = rng.normal((n, c))
    if mechanism == "sa":
        w = [rng.normal((c, c), 1 / math.sqrt(c)) for _ in range(4)]
        return lambda: attn.naive_sa(x, *w[:3]) @ w[3]
    p = {k: ad.const(v) for k, v in attn.init_csa(rng, c, half_len(n), 1 / math.sqrt(c)).items()}
    xv = ad.const(x)
    return lambda: attn.csa_tokens(xv, p, "spatial", "logmax", check=False).value


def configured_threads():
    return int(os.environ.get("FCT_THREADS", "1"))


def run_bench(mechanisms=MECHANISMS, sizes=(256, 1024, 4096), trials=30, warmup=5, c=16,
              seed=0, threads=None, memory_budget=2 * 1024 ** 3):
    """Median-of-trials forward timing per (mechanism, n); single-threaded only."""
    from threadpoolctl import threadpool_limits

    threads = configured_threads() if threads is None else threads
    if threads != 1:
        raise BenchError(f"benchmarks run on one worker; configured thread count is {threads}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    records = []
    with threadpool_limits(limits=1):
        for n in sizes:
            for mech in mechanisms:
                _check(mech, n, c)
                flops = analytic_cost(mech, n, c, "full")
                need = estimate_bytes(mech, n, c)
                if need > memory_budget:
                    records.append(BenchRecord(mech, n, c, flops, 0, need, 0,
                                               f"needs ~{need} bytes > budget {memory_budget}"))
                    continue
                fn = _forward_fn(mech, n, c, seed)
                with np.errstate(all="ignore"):
                    for _ in range(warmup):
                        fn()
                    times = []
                    for _ in range(trials):
                        t0 = time.perf_counter_ns()
                        fn()
                        times.append(max(1, time.perf_counter_ns() - t0))
                    tracemalloc.start()
                    fn()
                    _, peak = tracemalloc.get_traced_memory()
                    tracemalloc.stop()
                records.append(BenchRecord(mech, n, c, flops, int(statistics.median(times)), peak, trials))
    return records


def crossover(records, fast="csa", slow="sa"):
    """Smallest tested n from which ``fast`` is measured faster at every larger size."""
    t = {(r.mechanism, r.n): r.measured_ns for r in records if not r.skipped}
    sizes = sorted({n for m, n in t if (fast, n) in t and (slow, n) in t})
    n0 = None
    for n in reversed(sizes):
        if t[(fast, n)] < t[(slow, n)]:
            n0 = n
        else:
            break
    return n0


def write_bench(path, records):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CONVENTIONS}\n")
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(BenchRecord)])
        for r in records:
            w.writerow(astuple(r))
