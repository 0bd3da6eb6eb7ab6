import csv
import math

import numpy as np
import pytest

from fct import bench as B
from fct import model as M


def test_map_cost_closed_form():
    assert B.analytic_cost("sa", 4096) == 16_777_216
    assert B.analytic_cost("csa", 4096) == 8_486_912
    assert B.analytic_cost("csa", 4096) / B.analytic_cost("sa", 4096) == pytest.approx(0.506, abs=1e-3)


def test_map_cost_hand_counted_small_case():
    # n=8: SA map 64 entries; CSA half map 32 plus two transforms of 8 log2 8
    assert B.analytic_cost("sa", 8) == 64
    assert B.analytic_cost("csa", 8) == 32 + 2 * 8 * 3


def test_costs_monotone_in_n():
    for mech in B.MECHANISMS:
        for term in ("map", "full"):
            costs = [B.analytic_cost(mech, n, 16, term) for n in (16, 64, 256, 1024, 4096)]
            assert all(b > a for a, b in zip(costs, costs[1:]))


def test_csa_map_ratio_tends_to_half():
    r = [B.analytic_cost("csa", n) / B.analytic_cost("sa", n) for n in (2 ** k for k in range(6, 16))]
    assert all(b < a for a, b in zip(r, r[1:]))
    assert r[-1] == pytest.approx(0.5, abs=1e-3)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        B.analytic_cost("mlp", 16)
    with pytest.raises(ValueError):
        B.analytic_cost("sa", 0)
    with pytest.raises(ValueError):
        B.analytic_cost("sa", 16, term="nope")


def test_model_cost_is_sum_of_components():
    cfg = M.preset("tiny")
    for conv in ("layers", "full"):
        parts = B.model_cost(cfg, conv)
        assert B.model_flops(cfg, conv) == pytest.approx(sum(f for _, f in parts))
        assert len(parts) == 1 + sum(cfg.depths) + 3 + 1
    assert B.model_flops(cfg, "full") > B.model_flops(cfg, "layers")


def test_stem_cost_hand_counted():
    cfg = M.preset("micro")
    stem = dict(B.model_cost(cfg, "layers"))["stem"]
    assert stem == 2 * 4 * 4 * 48 * 8


def test_flops_grow_with_resolution():
    ratio = B.flop_ratio("tiny")
    assert ratio > (512 / 224) ** 2 * 0.9


def test_table2_report_rows():
    rows = B.table2_report("large")
    assert [r.resolution for r in rows] == [224, 512]
    cell = rows[1]
    assert cell.paper_params_m == 174.5 and cell.paper_gflops == 169.2
    assert cell.params_m == pytest.approx(M.count_params(M.preset("large", input_size=512)) / 1e6)
    assert math.isclose(cell.params_dev, cell.params_m / 174.5 - 1)
    assert B.table2_report("tiny", resolutions=()) == []


def test_table2_missing_cell_is_nan():
    row = B.table2_report("tiny", resolutions=(384,))[0]
    assert math.isnan(row.paper_params_m) and math.isnan(row.flops_dev)


def test_write_table2(tmp_path):
    B.write_table2(tmp_path / "t.csv", B.table2_report("tiny"))
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("# FLOP conventions")
    assert len(lines) == 4


def test_single_trial_single_size_gives_one_record():
    recs = B.run_bench(["csa"], [16], trials=1, warmup=0, c=4, threads=1)
    assert len(recs) == 1
    r = recs[0]
    assert (r.mechanism, r.n, r.c, r.trials) == ("csa", 16, 4, 1)
    assert r.measured_ns > 0 and r.analytic_flops == B.analytic_cost("csa", 16, 4, "full")


def test_refuses_multiple_threads():
    with pytest.raises(B.BenchError):
        B.run_bench(["sa"], [16], trials=1, threads=2)


def test_memory_budget_skips_size():
    recs = B.run_bench(["sa"], [64], trials=1, warmup=0, c=4, threads=1, memory_budget=10)
    assert recs[0].skipped and recs[0].measured_ns == 0


def test_crossover_rule():
    R = B.BenchRecord
    recs = [R("sa", 16, 4, 0, 10, 0, 1), R("csa", 16, 4, 0, 20, 0, 1),
            R("sa", 64, 4, 0, 30, 0, 1), R("csa", 64, 4, 0, 20, 0, 1),
            R("sa", 256, 4, 0, 90, 0, 1), R("csa", 256, 4, 0, 40, 0, 1)]
    assert B.crossover(recs) == 64
    assert B.crossover(recs[:2]) is None


def test_write_bench_has_conventions_header(tmp_path):
    recs = B.run_bench(["sa", "csa"], [16], trials=1, warmup=0, c=4, threads=1)
    B.write_bench(tmp_path / "b.csv", recs)
    with open(tmp_path / "b.csv") as fh:
        assert fh.readline().startswith("# FLOP conventions")
        rows = list(csv.DictReader(fh))
    assert [r["mechanism"] for r in rows] == ["sa", "csa"]
    assert np.all([int(r["measured_ns"]) > 0 for r in rows])
