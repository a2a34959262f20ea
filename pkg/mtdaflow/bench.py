"""
Desk-scale synthetic benchmark suite. Every cell is an independent curriculum run built
from (base config, cell overrides, seed); cells may run in a process pool and are merged
by key in sorted order.

Tables:
  reiteration        (K*, accuracy) at fixed K
  batch_composition  ((B_s, B_t), accuracy) at fixed B_s + B_t
  components         (K*, B_s, B_t, backbone) variations
  confidence_quality early vs late incorrect/correct ratio of would-be pseudo-labels (K* = 1)
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch.multiprocessing as mp

from .config import build_run_config, expand_dotted
from .evaluate import mean_or_none
from .runner import execute_run, load_registry

logger = logging.getLogger(__name__)

Cell = Tuple[str, Dict[str, Any]]


def run_cell(table: str, key: str, flat: Dict[str, Any], seed: int, base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """One independent run. `flat` holds dotted overrides; the seed drives hp and the generator."""
    cfg = build_run_config(
        expand_dotted(base or {}),
        expand_dotted(flat),
        expand_dotted({"hp.seed": seed, "data.synthetic.seed": seed, "progress": False}),
    )
    registry = load_registry(cfg.data)
    result = execute_run(registry, cfg.hp, cfg.backbone, mode=cfg.mode, config_echo=cfg.to_dict())
    m = result.manifest
    return {
        "table": table,
        "key": key,
        "seed": seed,
        "average_target_accuracy": (m.get("final") or {}).get("average_target_accuracy"),
        "source_only": (m.get("source_only") or {}).get("average_target_accuracy"),
        "order": [name for k, name in m["schedule"]["sequence"] if k == 1],
        "additions": {
            str(p["pass"]): {name: c["added"] for name, c in p["additions"].items()} for p in m["passes"]
        },
        "probes": m.get("probes", []),
        "ledger_size": m["ledger"]["size"],
    }


def run_cells(
    table: str,
    cells: Sequence[Cell],
    seeds: Sequence[int],
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    jobs = [(table, key, flat, seed, base) for key, flat in cells for seed in seeds]
    if workers > 1:
        with mp.get_context("spawn").Pool(processes=workers) as pool:
            rows = pool.starmap(run_cell, jobs)
    else:
        rows = [run_cell(*job) for job in jobs]
    return sorted(rows, key=lambda r: (r["key"], r["seed"]))


def summarize(rows: List[Dict[str, Any]], metric: str = "average_target_accuracy") -> List[Dict[str, Any]]:
    """Mean of `metric` over seeds per key (sorted by key)."""
    keys = sorted({r["key"] for r in rows})
    out = []
    for key in keys:
        cell = [r for r in rows if r["key"] == key]
        out.append(
            {
                "key": key,
                "seeds": len(cell),
                metric: mean_or_none([r[metric] for r in cell]),
                "source_only": mean_or_none([r["source_only"] for r in cell]),
            }
        )
    return out


def bench_reiteration(
    seeds: Sequence[int],
    k_stars: Sequence[int] = (1, 3, 5),
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    cells = [(f"K*={k}", {"hp.K_star": k}) for k in k_stars]
    return summarize(run_cells("reiteration", cells, seeds, base, workers))


def bench_batch_composition(
    seeds: Sequence[int],
    configs: Sequence[Tuple[int, int]] = ((32, 32), (48, 16)),
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    totals = {b_s + b_t for b_s, b_t in configs}
    if len(totals) != 1:
        raise ValueError(f"batch compositions must share B_s + B_t, got {sorted(totals)}")
    cells = [(f"({b_s},{b_t})", {"hp.B_s": b_s, "hp.B_t": b_t}) for b_s, b_t in configs]
    return summarize(run_cells("batch_composition", cells, seeds, base, workers))


def bench_components(
    seeds: Sequence[int],
    k_star: int = 3,
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    variants = [
        (1, 32, 32, "small_conv"),
        (k_star, 32, 32, "small_conv"),
        (k_star, 48, 16, "small_conv"),
        (k_star, 48, 16, "hybrid_conv_attention"),
    ]
    cells = [
        (
            f"{i}:K*={k},Bs={b_s},Bt={b_t},{kind}",
            {"hp.K_star": k, "hp.B_s": b_s, "hp.B_t": b_t, "backbone.kind": kind},
        )
        for i, (k, b_s, b_t, kind) in enumerate(variants)
    ]
    return summarize(run_cells("components", cells, seeds, base, workers))


def confidence_ratios(trace: List[Dict[str, Any]], iters: int) -> Dict[str, Optional[float]]:
    """
    incorrect/correct growth of would-be pseudo-labels over the first third and the final
    third of one domain's adaptation, from cumulative probe records.
    """
    audited = [p for p in trace if "correct" in p]
    if len(audited) < 2:
        return {"early": None, "late": None}

    def at(limit: float) -> Dict[str, Any]:
        before = [p for p in audited if p["iteration"] <= limit]
        return before[-1] if before else audited[0]

    def ratio(a: Dict[str, Any], b: Dict[str, Any]) -> Optional[float]:
        d_correct = b["correct"] - a["correct"]
        d_incorrect = b["incorrect"] - a["incorrect"]
        if d_correct <= 0:
            return None if d_incorrect <= 0 else float("inf")
        return d_incorrect / d_correct

    first, third, two_thirds, last = audited[0], at(iters / 3), at(2 * iters / 3), audited[-1]
    return {"early": ratio(first, third), "late": ratio(two_thirds, last)}


def bench_confidence_quality(
    seeds: Sequence[int],
    K: int = 3000,
    probes: int = 30,
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    """K* = 1, long per-domain adaptation with periodic selection probes."""
    flat = {"hp.K_star": 1, "hp.K": K, "hp.probe_every": max(1, K // probes)}
    rows = run_cells("confidence_quality", [("K*=1", flat)], seeds, base, workers)
    out = []
    for r in rows:
        for probe in r["probes"]:
            ratios = confidence_ratios(probe["trace"], K)
            out.append({"key": probe["domain"], "seed": r["seed"], **ratios})
    return sorted(out, key=lambda r: (r["key"], r["seed"]))


def write_csv(rows: List[Dict[str, Any]], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})
    return out


SUITES = {
    "reiteration": bench_reiteration,
    "batch_composition": bench_batch_composition,
    "components": bench_components,
    "confidence_quality": bench_confidence_quality,
}


def run_suite(
    names: Sequence[str],
    seeds: Sequence[int],
    out_dir: str,
    base: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> Dict[str, Path]:
    written = {}
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown bench suite {name!r}; one of {sorted(SUITES)}")
        logger.info("bench %s over seeds %s", name, list(seeds))
        rows = SUITES[name](seeds, base=base, workers=workers)
        written[name] = write_csv(rows, str(Path(out_dir) / f"{name}.csv"))
    return written
