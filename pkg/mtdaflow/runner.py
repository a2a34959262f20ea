"""
Curriculum pipeline construction and the kick entry point.

Root pipeline:
  source -> reiterations(loop: pass_start -> domains(loop: select -> adapt -> pseudo_label) -> pass_end)
         -> finetune -> final
"""

from __future__ import annotations

import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .config import BackboneSpec, DataSpec, HyperParams, RunConfig
from .curriculum import CurriculumState, DryRunTrainer, RunResult, TorchTrainer, Trainer
from .data import DatasetRegistry, ingest_directory, make_synthetic
from .ledger import PseudoSourceLedger
from .loop_node import LoopNode
from .losses import MetricsLog
from .manifest import utc_now, ledger_section, new_manifest, write_manifest
from .pipeline_node import PipelineNode
from .stages import (
    AdaptationNode,
    DomainSelectionNode,
    FinalEvaluationNode,
    FinetuneNode,
    PassEndNode,
    PassStartNode,
    PseudoLabelingNode,
    RunContext,
    SourceTrainingNode,
)

logger = logging.getLogger(__name__)


class RunAborted(Exception):
    """A stage ended fatal (or a loop bound was hit). `snapshot` locates the failure."""

    def __init__(self, snapshot: Dict[str, Any]):
        super().__init__(f"run aborted: {snapshot.get('errors')}")
        self.snapshot = snapshot


def build_curriculum_pipeline(hp: HyperParams, N: int) -> PipelineNode:
    """Fresh node instances for one run; loop bounds are K* passes and N domains per pass."""
    domains = PipelineNode(
        [
            ("select", DomainSelectionNode(), {}),
            ("adapt", AdaptationNode(), {}),
            ("pseudo_label", PseudoLabelingNode(), {}),
        ]
    )
    one_pass = PipelineNode(
        [
            ("pass_start", PassStartNode(), {}),
            (
                "domains",
                LoopNode(domains, {"path": "$.pseudo_labels.remaining", "equals": 0}),
                {"limit": {"max_iterations": N}},
            ),
            ("pass_end", PassEndNode(), {}),
        ]
    )
    return PipelineNode(
        [
            ("source", SourceTrainingNode(), {}),
            (
                "reiterations",
                LoopNode(one_pass, {"path": "$.pass_end.pass", "equals": hp.K_star}),
                {"limit": {"max_iterations": hp.K_star}},
            ),
            ("finetune", FinetuneNode(), {}),
            ("final", FinalEvaluationNode(), {}),
        ]
    )


def kick(root: PipelineNode, ctx: RunContext) -> Dict[str, Any]:
    """Execute the root pipeline. fatal/limit at the root -> RunAborted with a state snapshot."""
    out = root.execute(ctx, {})
    status = root.read_status()
    if status in ("fatal", "limit"):
        errors = root.read_error()
        snapshot = {
            "status": status,
            "errors": [f"{type(e).__name__}: {e}" for e in errors],
            **ctx.state.snapshot(),
            "ledger_size": len(ctx.ledger),
        }
        selected = ctx.state.selected
        if selected is not None:
            snapshot["domain"] = ctx.registry.domain(selected).name
        err = RunAborted(snapshot)
        if errors:
            raise err from errors[0]
        raise err
    return out


def make_trainer(
    mode: str,
    registry: DatasetRegistry,
    hp: HyperParams,
    spec: BackboneSpec,
    metrics: MetricsLog,
    progress: bool = False,
    log_every: int = 50,
) -> Trainer:
    if mode == "dry_run":
        return DryRunTrainer(registry, hp, spec, metrics)
    return TorchTrainer(registry, hp, spec, metrics, progress=progress, log_every=log_every)


def load_registry(data: DataSpec) -> DatasetRegistry:
    if data.directory is not None:
        return ingest_directory(data.directory, data.image_size)
    syn = data.synthetic
    assert syn is not None
    return make_synthetic(syn.n_c, syn.N, syn.shifts, syn.per_class, syn.seed, data.image_size)


def execute_run(
    registry: DatasetRegistry,
    hp: HyperParams,
    spec: BackboneSpec,
    *,
    mode: str = "train",
    run_dir: Optional[str] = None,
    config_echo: Optional[Dict[str, Any]] = None,
    progress: bool = False,
    log_every: int = 50,
) -> RunResult:
    """
    Run the whole curriculum. With run_dir: config.yaml, manifest.json, metrics.csv,
    checkpoints/pass_<k>.pt, checkpoints/final.pt and eval_report.{json,csv} are written there.
    The manifest is written (status "aborted") even when a stage fails.
    """
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if config_echo is not None:
            with open(out_dir / "config.yaml", "w", encoding="utf-8") as f:
                yaml.safe_dump(config_echo, f, sort_keys=True)
    metrics = MetricsLog(str(out_dir / "metrics.csv") if out_dir is not None else None)
    progress = progress and sys.stderr.isatty()
    trainer = make_trainer(mode, registry, hp, spec, metrics, progress, log_every)
    state = CurriculumState(K_star=hp.K_star, N=registry.N, iters_per_pass=hp.iters_per_pass)
    ledger = PseudoSourceLedger(registry)
    manifest = new_manifest(config_echo, registry, mode)
    ctx = RunContext(registry, trainer, ledger, state, manifest, out_dir)
    root = build_curriculum_pipeline(hp, registry.N)

    started = time.monotonic()
    logger.info(
        "run start: mode=%s N=%d n_c=%d K=%d K*=%d (%d iterations per domain and pass)",
        mode, registry.N, registry.n_c, hp.K, hp.K_star, hp.iters_per_pass,
    )
    try:
        kick(root, ctx)
        manifest["status"] = "complete"
    except RunAborted as e:
        manifest["status"] = "aborted"
        manifest["abort"] = e.snapshot
        raise
    finally:
        metrics.close()
        manifest["schedule"] = {
            "K": hp.K,
            "K_star": hp.K_star,
            "iters_per_pass": hp.iters_per_pass,
            "sequence": [[k, registry.domain(d).name] for k, d in state.sequence],
            "total_adaptation_iterations": state.adaptation_iterations,
        }
        manifest["probes"] = list(trainer.probes)
        manifest["ledger"] = ledger_section(ledger)
        manifest["stage_trace"] = ctx.trace
        manifest["node_calls"] = root.read_node_calls()
        manifest["finished_at"] = utc_now()
        manifest["elapsed_seconds"] = round(time.monotonic() - started, 3)
        if out_dir is not None:
            write_manifest(manifest, out_dir / "manifest.json")
    logger.info("run complete: %d adaptation iterations, ledger %d", state.adaptation_iterations, len(ledger))
    return RunResult(trainer.model, ledger, manifest, state)


def run_from_config(cfg: RunConfig, registry: Optional[DatasetRegistry] = None) -> RunResult:
    """Build the registry from cfg.data (unless given) and execute into cfg.output_dir."""
    registry = registry or load_registry(cfg.data)
    return execute_run(
        registry,
        cfg.hp,
        cfg.backbone,
        mode=cfg.mode,
        run_dir=cfg.output_dir,
        config_echo=cfg.to_dict(),
        progress=cfg.progress,
        log_every=cfg.log_every,
    )
