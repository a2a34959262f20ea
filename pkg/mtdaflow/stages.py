"""
Curriculum stages as StageNodes over one shared RunContext.

Each stage returns a single output port named after itself; loop conditions read
`$.pseudo_labels.remaining` (domain loop) and `$.pass_end.pass` (reiteration loop).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .curriculum import CurriculumState, Trainer, select_domain
from .data import DatasetRegistry
from .evaluate import EvalReport
from .ledger import PseudoSourceLedger
from .node import StageNode

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    registry: DatasetRegistry
    trainer: Trainer
    ledger: PseudoSourceLedger
    state: CurriculumState
    manifest: Dict[str, Any]
    run_dir: Optional[Path] = None
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def hp(self):
        return self.trainer.hp

    def checkpoint(self, name: str, extra: Dict[str, Any]) -> Optional[str]:
        if self.run_dir is None:
            return None
        path = self.run_dir / "checkpoints" / name
        self.trainer.save(str(path), extra)
        return str(path.relative_to(self.run_dir))


def addition_counts(ledger: PseudoSourceLedger, domain_id: int, reiteration: int) -> Dict[str, Any]:
    """added / correct / incorrect for one (pass, domain); correct/incorrect None without truth."""
    entries = [e for e in ledger.pseudo_entries() if e.domain_id == domain_id and e.reiteration == reiteration]
    truth = ledger.registry.domain(domain_id).hidden_truth()
    out: Dict[str, Any] = {"added": len(entries), "correct": None, "incorrect": None}
    if truth is not None:
        known = [e for e in entries if int(truth[e.index]) >= 0]
        correct = sum(1 for e in known if e.label == int(truth[e.index]))
        out["correct"] = correct
        out["incorrect"] = len(known) - correct
    return out


def _average(report: Optional[Dict[str, Any]]) -> Optional[float]:
    return None if report is None else report.get("average_target_accuracy")


class SourceTrainingNode(StageNode):
    """Step 1, then the source-only baseline evaluation."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        info = ctx.trainer.train_source()
        baseline = ctx.trainer.evaluate(None)
        ctx.manifest["source"] = info
        ctx.manifest["source_only"] = (
            None
            if baseline is None
            else {
                "per_domain_accuracy": baseline["per_domain_accuracy"],
                "average_target_accuracy": baseline["average_target_accuracy"],
            }
        )
        logger.info("source-only average target accuracy: %s", _average(baseline))
        return {"source": {**info, "baseline_average": _average(baseline)}}


class PassStartNode(StageNode):
    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        k = ctx.state.k_star + 1
        ctx.state.start_pass(k)
        ctx.trainer.start_pass(k)
        ctx.manifest["passes"].append(
            {"pass": k, "order": [], "uncertainty": [], "additions": {}, "ledger_size": len(ctx.ledger)}
        )
        logger.info("reiteration %d/%d", k, ctx.state.K_star)
        return {"pass_start": {"pass": k, "remaining": list(ctx.state.remaining)}}


class DomainSelectionNode(StageNode):
    """Stage 1: rank remaining domains by uncertainty with the current model."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        chosen, values = select_domain(ctx.trainer.domain_uncertainty, ctx.state.remaining)
        ctx.state.select(chosen)
        names = {d: ctx.registry.domain(d).name for d in values}
        record = {names[d]: values[d] for d in sorted(values)}
        current = ctx.manifest["passes"][-1]
        current["order"].append(names[chosen])
        current["uncertainty"].append(record)
        logger.info("pass %d q=%d selected %s (H=%s)", ctx.state.k_star, ctx.state.q, names[chosen], record)
        return {"selection": {"pass": ctx.state.k_star, "q": ctx.state.q, "domain": names[chosen], "uncertainty": record}}


class AdaptationNode(StageNode):
    """Stage 2: K/K* iterations on the selected domain."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        state = ctx.state
        assert state.selected is not None
        iters = state.iters_per_pass
        info = ctx.trainer.adapt(ctx.ledger, state.selected, iters, state)
        state.global_iteration += iters
        state.adaptation_iterations += iters
        return {"adaptation": {"domain": ctx.registry.domain(state.selected).name, **info}}


class PseudoLabelingNode(StageNode):
    """Stage 3: append confident samples of the selected domain, then drop it from this pass."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        state = ctx.state
        assert state.selected is not None
        domain = ctx.registry.domain(state.selected)
        before = len(ctx.ledger)
        added = ctx.trainer.pseudo_label(ctx.ledger, domain.domain_id, state)
        assert len(ctx.ledger) == before + added
        counts = addition_counts(ctx.ledger, domain.domain_id, state.k_star)
        ctx.manifest["passes"][-1]["additions"][domain.name] = counts
        logger.info("pass %d %s: %d pseudo-labels added (ledger %d)", state.k_star, domain.name, added, len(ctx.ledger))
        state.finish_domain()
        return {
            "pseudo_labels": {
                "pass": state.k_star,
                "domain": domain.name,
                **counts,
                "ledger_size": len(ctx.ledger),
                "remaining": len(state.remaining),
            }
        }


class PassEndNode(StageNode):
    """Pass accuracy, pass checkpoint, ingestion-trend check."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        k = ctx.state.k_star
        report = ctx.trainer.evaluate(None)
        current = ctx.manifest["passes"][-1]
        current["average_target_accuracy"] = _average(report)
        current["ledger_size"] = len(ctx.ledger)
        current["checkpoint"] = ctx.checkpoint(f"pass_{k}.pt", {"pass": k})
        passes = ctx.manifest["passes"]
        if len(passes) >= 2:
            for name, cell in current["additions"].items():
                prev = passes[-2]["additions"].get(name)
                if prev is not None and cell["added"] > prev["added"]:
                    logger.warning(
                        "%s: pass %d added %d pseudo-labels, more than pass %d (%d)",
                        name, k, cell["added"], k - 1, prev["added"],
                    )
        logger.info("pass %d done: average target accuracy %s, ledger %d", k, current["average_target_accuracy"], len(ctx.ledger))
        return {
            "pass_end": {
                "pass": k,
                "average_target_accuracy": current["average_target_accuracy"],
                "ledger_size": len(ctx.ledger),
            }
        }


class FinetuneNode(StageNode):
    """Step 3."""

    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        info = ctx.trainer.finetune(ctx.ledger, ctx.state)
        ctx.state.global_iteration += info["iterations"]
        ctx.manifest["finetune"] = info
        logger.info("fine-tuning done: %s", info)
        return {"finetune": info}


class FinalEvaluationNode(StageNode):
    def run(self, ctx: RunContext, params) -> Dict[str, Any]:
        report = ctx.trainer.evaluate(ctx.ledger)
        ctx.manifest["final"] = report
        ctx.manifest["checkpoint"] = ctx.checkpoint("final.pt", {"pass": "final"})
        if report is not None and ctx.run_dir is not None:
            er = EvalReport(**report)
            er.write_json(str(ctx.run_dir / "eval_report.json"))
            er.write_csv(str(ctx.run_dir / "eval_report.csv"))
        logger.info("final average target accuracy: %s", _average(report))
        return {"final": {"average_target_accuracy": _average(report), "ledger_size": len(ctx.ledger)}}
