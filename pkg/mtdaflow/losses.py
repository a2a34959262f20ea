"""
Training losses and the three-phase update of one adaptation iteration:
  1. psi-step on lambda_adv * l_adv (features detached)
  2. theta,phi-step on l_ce_mlp - lambda_adv * l_adv (through the gradient reversal layer)
  3. theta,phi'-step on lambda_edge * l_bce_edge + lambda_node * l_ce_node
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Any, Dict, List, Optional

import torch
import torch.nn.functional as F
from torch.optim import SGD

from .adversarial import EPS, adversarial_loss, discriminate, grl
from .backbone import ShapeContractError, extract
from .config import HyperParams
from .data import Minibatch
from .heads import EdgeTargets, build_edge_targets
from .model import ModelBundle

logger = logging.getLogger(__name__)

LOG_EPS = math.log(EPS)


class NonFiniteLossError(Exception):
    """A loss became NaN/Inf. `snapshot` carries iteration, phase and loss values."""

    def __init__(self, snapshot: Dict[str, Any]):
        super().__init__(f"non-finite loss: {snapshot}")
        self.snapshot = snapshot


def _masked_ce(logits: torch.Tensor, labels: torch.Tensor, label_mask: torch.Tensor, who: str) -> torch.Tensor:
    if logits.dim() != 2 or labels.shape[0] != logits.shape[0] or label_mask.shape[0] != logits.shape[0]:
        raise ShapeContractError(
            f"{who}: logits {tuple(logits.shape)}, labels {tuple(labels.shape)}, mask {tuple(label_mask.shape)}"
        )
    mask = label_mask.bool()
    if not bool(mask.any()):
        raise ShapeContractError(f"{who}: empty label mask (no labeled rows)")
    logp = F.log_softmax(logits[mask], dim=1).clamp_min(LOG_EPS)
    return -logp.gather(1, labels[mask].long().unsqueeze(1)).mean()


def ce_mlp(logits: torch.Tensor, labels: torch.Tensor, label_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the MLP head over labeled (ledger) rows."""
    return _masked_ce(logits, labels, label_mask, "ce_mlp")


def ce_node(node_logits: torch.Tensor, labels: torch.Tensor, label_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the graph head over labeled (ledger) rows."""
    return _masked_ce(node_logits, labels, label_mask, "ce_node")


def bce_edge(aff: torch.Tensor, targets: EdgeTargets) -> torch.Tensor:
    """Mean BCE between affinity and edge targets over masked off-diagonal pairs."""
    if aff.shape != targets.values.shape:
        raise ShapeContractError(f"bce_edge: affinity {tuple(aff.shape)} vs targets {tuple(targets.values.shape)}")
    off_diag = ~torch.eye(aff.shape[0], dtype=torch.bool, device=aff.device)
    sel = targets.mask.bool() & off_diag
    if not bool(sel.any()):
        raise ShapeContractError("bce_edge: empty pair mask")
    p = aff[sel].clamp(EPS, 1.0 - EPS)
    t = targets.values[sel].to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


@dataclass
class LossReport:
    l_ce_mlp: float
    l_bce_edge: float
    l_ce_node: float
    l_adv: float
    weighted_gnn: float
    lambda_adv: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class Optimizers:
    psi: SGD
    cls: SGD
    gnn: SGD


def _sgd(groups: List[Dict[str, Any]], hp: HyperParams) -> SGD:
    return SGD(groups, lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay)


def build_optimizers(model: ModelBundle, hp: HyperParams) -> Optimizers:
    """SGD with momentum; head parameters use head_lr_mult x the backbone learning rate."""
    head_lr = hp.lr * hp.head_lr_mult
    return Optimizers(
        psi=_sgd([{"params": model.psi(), "lr": head_lr}], hp),
        cls=_sgd([{"params": model.theta(), "lr": hp.lr}, {"params": model.phi(), "lr": head_lr}], hp),
        gnn=_sgd([{"params": model.theta(), "lr": hp.lr}, {"params": model.phi_prime(), "lr": head_lr}], hp),
    )


def build_source_optimizer(model: ModelBundle, hp: HyperParams) -> SGD:
    return _sgd(
        [{"params": model.theta(), "lr": hp.lr}, {"params": model.phi(), "lr": hp.lr * hp.head_lr_mult}], hp
    )


def build_finetune_optimizer(model: ModelBundle, hp: HyperParams) -> SGD:
    head_lr = hp.lr * hp.head_lr_mult
    return _sgd(
        [
            {"params": model.theta(), "lr": hp.lr},
            {"params": model.phi(), "lr": head_lr},
            {"params": model.phi_prime(), "lr": head_lr},
        ],
        hp,
    )


def _check_finite(iteration: int, phase: str, **losses: torch.Tensor) -> None:
    values = {k: v.detach().item() for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError({"iteration": iteration, "phase": phase, **values})


def _batch_labels(batch: Minibatch) -> torch.Tensor:
    b_s, b_t = batch.sizes
    return torch.cat([batch.ledger_labels.long(), torch.full((b_t,), -1, dtype=torch.long)])


def step_discriminator(
    model: ModelBundle, feats: torch.Tensor, flags: torch.Tensor, lambda_adv: float, opt: SGD, iteration: int = 0
) -> torch.Tensor:
    """Phase 1: only psi moves. Features are detached from the extractor."""
    opt.zero_grad(set_to_none=True)
    l_adv = adversarial_loss(discriminate(model.disc, feats.detach()), flags)
    _check_finite(iteration, "discriminator", l_adv=l_adv)
    (lambda_adv * l_adv).backward()
    opt.step()
    return l_adv.detach()


def step_classifier(
    model: ModelBundle,
    feats: torch.Tensor,
    labels: torch.Tensor,
    label_mask: torch.Tensor,
    flags: torch.Tensor,
    lambda_adv: float,
    opt: SGD,
    iteration: int = 0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Phase 2: theta, phi on l_ce_mlp - lambda_adv * l_adv (reversal inside grl)."""
    model.zero_grad(set_to_none=True)
    l_ce = ce_mlp(model.mlp(feats), labels, label_mask)
    if lambda_adv > 0:
        l_adv = adversarial_loss(discriminate(model.disc, grl(feats, lambda_adv)), flags)
        loss = l_ce + l_adv
    else:
        with torch.no_grad():
            l_adv = adversarial_loss(discriminate(model.disc, feats.detach()), flags)
        loss = l_ce
    _check_finite(iteration, "classifier", l_ce_mlp=l_ce, l_adv=l_adv)
    loss.backward()
    opt.step()
    return l_ce.detach(), l_adv.detach()


def graph_losses(
    model: ModelBundle, feats: torch.Tensor, ledger_labels: torch.Tensor, label_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Edge BCE (target rows use MLP argmax pseudo-labels) and node CE over ledger rows."""
    b_s = ledger_labels.shape[0]
    with torch.no_grad():
        pseudo = model.mlp(feats.detach()).argmax(dim=1)
    edge_labels = torch.cat([ledger_labels.long(), pseudo[b_s:]])
    aff, node_logits = model.graph(feats)
    full = torch.cat([ledger_labels.long(), torch.full((feats.shape[0] - b_s,), -1, dtype=torch.long)])
    return bce_edge(aff, build_edge_targets(edge_labels)), ce_node(node_logits, full, label_mask)


def step_graph(
    model: ModelBundle, images: torch.Tensor, batch: Minibatch, hp: HyperParams, opt: SGD, iteration: int = 0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Phase 3: theta, phi' on the weighted graph losses, on a fresh forward pass."""
    model.zero_grad(set_to_none=True)
    feats = extract(model.extractor, images)
    l_edge, l_node = graph_losses(model, feats, batch.ledger_labels, batch.label_mask)
    _check_finite(iteration, "graph", l_bce_edge=l_edge, l_ce_node=l_node)
    (hp.lambda_edge * l_edge + hp.lambda_node * l_node).backward()
    opt.step()
    return l_edge.detach(), l_node.detach()


def combine_and_step(
    model: ModelBundle, batch: Minibatch, hp: HyperParams, opts: Optimizers, lambda_adv: float, iteration: int = 0
) -> LossReport:
    """
    One adaptation iteration: forward, then the three update phases in order.
    lambda_adv = 0 skips phase 1; lambda_edge = lambda_node = 0 skips phase 3.
    """
    model.train()
    images = batch.images
    flags = batch.domain_flags
    labels = _batch_labels(batch)
    mask = batch.label_mask

    feats = extract(model.extractor, images)
    if lambda_adv > 0:
        step_discriminator(model, feats, flags, lambda_adv, opts.psi, iteration)
    l_ce, l_adv = step_classifier(model, feats, labels, mask, flags, lambda_adv, opts.cls, iteration)

    if hp.lambda_edge > 0 or hp.lambda_node > 0:
        l_edge, l_node = step_graph(model, images, batch, hp, opts.gnn, iteration)
    else:
        with torch.no_grad():
            l_edge, l_node = graph_losses(model, feats.detach(), batch.ledger_labels, mask)

    return LossReport(
        l_ce_mlp=l_ce.item(),
        l_bce_edge=l_edge.item(),
        l_ce_node=l_node.item(),
        l_adv=l_adv.item(),
        weighted_gnn=(hp.lambda_edge * l_edge + hp.lambda_node * l_node).item(),
        lambda_adv=float(lambda_adv),
    )


def finetune_step(
    model: ModelBundle, images: torch.Tensor, labels: torch.Tensor, hp: HyperParams, opt: SGD, iteration: int = 0
) -> LossReport:
    """Ledger-only batch: l_ce_mlp + lambda_edge * l_bce_edge + lambda_node * l_ce_node, no adversarial phase."""
    model.train()
    opt.zero_grad(set_to_none=True)
    feats = extract(model.extractor, images)
    mask = torch.ones(labels.shape[0], dtype=torch.bool)
    l_ce = ce_mlp(model.mlp(feats), labels, mask)
    aff, node_logits = model.graph(feats)
    l_edge = bce_edge(aff, build_edge_targets(labels))
    l_node = ce_node(node_logits, labels, mask)
    _check_finite(iteration, "finetune", l_ce_mlp=l_ce, l_bce_edge=l_edge, l_ce_node=l_node)
    weighted = hp.lambda_edge * l_edge + hp.lambda_node * l_node
    (l_ce + weighted).backward()
    opt.step()
    return LossReport(
        l_ce.detach().item(), l_edge.detach().item(), l_node.detach().item(), 0.0, weighted.detach().item(), 0.0
    )


METRIC_COLUMNS = ("iter", "pass", "domain", "l_ce_mlp", "l_bce_edge", "l_ce_node", "l_adv", "lambda_adv")


class MetricsLog:
    """Append-only per-iteration CSV. Without a path, rows are only counted."""

    def __init__(self, path: Optional[str] = None) -> None:
        self.path = Path(path) if path else None
        self.rows = 0
        self._fh: Optional[IO[str]] = None
        self._writer: Any = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists()
            self._fh = open(self.path, "a", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            if new:
                self._writer.writerow(METRIC_COLUMNS)

    def append(self, iteration: int, reiteration: int, domain: str, report: LossReport) -> None:
        self.rows += 1
        if self._writer is None:
            return
        self._writer.writerow(
            [
                iteration,
                reiteration,
                domain,
                f"{report.l_ce_mlp:.6f}",
                f"{report.l_bce_edge:.6f}",
                f"{report.l_ce_node:.6f}",
                f"{report.l_adv:.6f}",
                f"{report.lambda_adv:.6f}",
            ]
        )

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None
