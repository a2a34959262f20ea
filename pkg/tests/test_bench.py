import csv
import math

import pytest

from mtdaflow.bench import (
    bench_batch_composition,
    bench_reiteration,
    confidence_ratios,
    run_cell,
    run_cells,
    run_suite,
    summarize,
    write_csv,
)

DRY_BASE = {
    "mode": "dry_run",
    "data.image_size": 16,
    "data.synthetic.n_c": 3,
    "data.synthetic.per_class": 10,
    "hp.K": 30,
    "hp.K_prime": 0,
}


def test_confidence_ratios():
    trace = [
        {"iteration": 1, "accepted": 0, "correct": 0, "incorrect": 0},
        {"iteration": 10, "accepted": 5, "correct": 4, "incorrect": 1},
        {"iteration": 20, "accepted": 8, "correct": 6, "incorrect": 2},
        {"iteration": 30, "accepted": 12, "correct": 8, "incorrect": 4},
    ]
    r = confidence_ratios(trace, 30)
    assert r["early"] == pytest.approx(0.25)
    assert r["late"] == pytest.approx(1.0)


def test_confidence_ratios_edge_cases():
    assert confidence_ratios([{"iteration": 1, "accepted": 0}], 10) == {"early": None, "late": None}
    flat = [{"iteration": i, "accepted": 0, "correct": 2, "incorrect": i} for i in (1, 5, 10, 15)]
    r = confidence_ratios(flat, 15)
    assert math.isinf(r["early"])
    assert math.isinf(r["late"])


def test_batch_composition_needs_equal_sums():
    with pytest.raises(ValueError, match="share B_s"):
        bench_batch_composition([0], configs=((32, 32), (40, 16)))


def test_dry_run_cell_is_deterministic():
    a = run_cell("reiteration", "K*=3", {"hp.K_star": 3}, 1, DRY_BASE)
    b = run_cell("reiteration", "K*=3", {"hp.K_star": 3}, 1, DRY_BASE)
    assert a == b
    assert a["order"] == ["shift1", "shift2", "shift3"]
    assert a["average_target_accuracy"] is None
    assert set(a["additions"]) == {"1", "2", "3"}


def test_reiteration_table_sorted_by_key():
    rows = bench_reiteration([0, 1], k_stars=(1, 3), base=DRY_BASE)
    assert [r["key"] for r in rows] == ["K*=1", "K*=3"]
    assert all(r["seeds"] == 2 for r in rows)


def test_summarize_means_over_seeds():
    rows = [
        {"key": "a", "seed": 0, "average_target_accuracy": 0.5, "source_only": 0.4},
        {"key": "a", "seed": 1, "average_target_accuracy": 0.7, "source_only": None},
        {"key": "b", "seed": 0, "average_target_accuracy": None, "source_only": None},
    ]
    out = summarize(rows)
    assert out[0] == {"key": "a", "seeds": 2, "average_target_accuracy": pytest.approx(0.6), "source_only": 0.4}
    assert out[1]["average_target_accuracy"] is None


def test_write_csv_unions_columns(tmp_path):
    path = write_csv([{"key": "a", "x": 1}, {"key": "b", "y": None}], str(tmp_path / "t.csv"))
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows == [{"key": "a", "x": "1", "y": ""}, {"key": "b", "x": "", "y": ""}]


def test_run_suite(tmp_path):
    written = run_suite(["batch_composition"], [0], str(tmp_path), DRY_BASE)
    assert written["batch_composition"].name == "batch_composition.csv"
    with pytest.raises(ValueError, match="unknown bench suite"):
        run_suite(["nope"], [0], str(tmp_path), DRY_BASE)


@pytest.mark.slow
def test_process_pool_matches_serial_cells():
    cells = [("K*=1", {"hp.K_star": 1}), ("K*=3", {"hp.K_star": 3})]
    serial = run_cells("reiteration", cells, [0, 1], DRY_BASE, workers=1)
    pooled = run_cells("reiteration", cells, [0, 1], DRY_BASE, workers=2)
    assert pooled == serial
