"""
Reiterative curriculum engine: source training, uncertainty-ordered domain selection,
per-domain adaptation, graph-head pseudo-labeling into the ledger, and fine-tuning.

The algorithm lives in module-level functions; `TorchTrainer` binds them to one model and
its optimizer state, `DryRunTrainer` replays the same schedule without tensors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .adversarial import EPS, lambda_schedule
from .backbone import extract
from .config import BackboneSpec, HyperParams
from .data import (
    DatasetError,
    DatasetRegistry,
    DomainDataset,
    EpochSampler,
    MinibatchSampler,
    derive_seed,
    sample_minibatch,
    split_source,
)
from .evaluate import accuracy, evaluate, mlp_probabilities, predict, predict_graph
from .ledger import PseudoSourceLedger
from .losses import (
    LossReport,
    MetricsLog,
    NonFiniteLossError,
    Optimizers,
    build_finetune_optimizer,
    build_optimizers,
    build_source_optimizer,
    ce_mlp,
    combine_and_step,
    finetune_step,
)
from .model import ModelBundle, save_checkpoint

logger = logging.getLogger(__name__)

# Stream tags for derive_seed.
_STREAM_SOURCE = 4
_STREAM_FINETUNE = 5
_STREAM_CONTEXT = 3
_STREAM_DRY = 6

EMA_DECAY = 0.9


@dataclass
class CurriculumState:
    """Position in the schedule: reiteration k*, remaining domains, selected domain, q."""

    K_star: int
    N: int
    iters_per_pass: int
    k_star: int = 0
    remaining: List[int] = field(default_factory=list)
    selected: Optional[int] = None
    q: int = 0
    global_iteration: int = 0
    adaptation_iterations: int = 0
    sequence: List[Tuple[int, int]] = field(default_factory=list)

    def start_pass(self, k_star: int) -> None:
        if not 1 <= k_star <= self.K_star:
            raise ValueError(f"reiteration {k_star} outside [1, {self.K_star}]")
        self.k_star = k_star
        self.remaining = list(range(1, self.N + 1))
        self.selected = None
        self.q = 0

    def select(self, domain_id: int) -> None:
        if domain_id not in self.remaining:
            raise ValueError(f"domain {domain_id} is not remaining in pass {self.k_star}")
        self.selected = domain_id
        self.sequence.append((self.k_star, domain_id))

    def finish_domain(self) -> None:
        assert self.selected is not None
        self.remaining.remove(self.selected)
        self.selected = None
        self.q += 1

    def snapshot(self) -> Dict[str, Any]:
        return {
            "reiteration": self.k_star,
            "q": self.q,
            "selected": self.selected,
            "remaining": list(self.remaining),
            "global_iteration": self.global_iteration,
        }


# --- algorithm steps -------------------------------------------------------------------


def _progress(iterable: Iterable, enabled: bool, desc: str) -> Iterable:
    return tqdm(iterable, desc=desc, leave=False, disable=not enabled)


@torch.no_grad()
def source_accuracy(model: ModelBundle, registry: DatasetRegistry, rows: np.ndarray, batch_size: int) -> Optional[float]:
    if rows.size == 0:
        return None
    images, labels = registry.source.dataset[torch.from_numpy(rows)]
    return accuracy(predict(model, images, batch_size), labels)


def train_source(
    registry: DatasetRegistry,
    hp: HyperParams,
    spec: Optional[BackboneSpec] = None,
    progress: bool = False,
) -> Tuple[ModelBundle, Dict[str, Any]]:
    """
    Step 1: theta, phi on l_ce_mlp over source minibatches of B_s + B_t until the moving-average
    loss stops improving by min_delta for `patience` checks, or max_iters. phi', psi stay at init.
    """
    torch.manual_seed(hp.seed)
    c, h, _ = registry.image_shape
    model = ModelBundle.build(spec or BackboneSpec(), registry.n_c, in_channels=c, image_size=h)
    train_rows, val_rows = split_source(registry, hp.source_val_fraction, hp.seed)
    conv = hp.source_convergence
    opt = build_source_optimizer(model, hp)
    sampler = EpochSampler(len(train_rows), derive_seed(hp.seed, 0, 0, _STREAM_SOURCE))
    source = registry.source.dataset
    batch = hp.B_s + hp.B_t

    ema: Optional[float] = None
    best = math.inf
    stale = 0
    it = 0
    for it in _progress(range(1, conv.max_iters + 1), progress, "source"):
        images, labels = source[torch.from_numpy(train_rows[sampler.draw(batch)])]
        model.train()
        opt.zero_grad(set_to_none=True)
        logits = model.mlp(extract(model.extractor, images))
        loss = ce_mlp(logits, labels, torch.ones(labels.shape[0], dtype=torch.bool))
        value = loss.detach().item()
        if not math.isfinite(value):
            raise NonFiniteLossError({"iteration": it, "phase": "source", "l_ce_mlp": value})
        loss.backward()
        opt.step()
        ema = value if ema is None else EMA_DECAY * ema + (1.0 - EMA_DECAY) * value
        if it % conv.check_every == 0:
            if best - ema < conv.min_delta:
                stale += 1
            else:
                stale = 0
            best = min(best, ema)
            if stale >= conv.patience:
                logger.info("source training converged at iteration %d (loss %.4f)", it, ema)
                break
    eval_rows = val_rows if val_rows.size else train_rows
    info = {
        "iterations": it,
        "loss": ema,
        "validation_accuracy": source_accuracy(model, registry, eval_rows, hp.eval_batch_size),
    }
    logger.info("source training: %s", info)
    return model, info


def domain_uncertainty(model: ModelBundle, domain: DomainDataset, batch_size: int = 256) -> float:
    """Mean Shannon entropy of the MLP-head softmax over all samples of the domain (eval mode)."""
    if len(domain) == 0:
        raise DatasetError(f"domain {domain.name!r} is empty")
    p = mlp_probabilities(model, domain.images, batch_size)
    return float(-(p * p.clamp_min(EPS).log()).sum(dim=1).mean())


def select_domain(uncertainty: Callable[[int], float] | Dict[int, float], remaining: Iterable[int]) -> Tuple[int, Dict[int, float]]:
    """argmin of uncertainty over remaining domain ids; ties go to the lowest id."""
    ids = sorted(remaining)
    if not ids:
        raise ValueError("select_domain: no remaining domains")
    score = uncertainty.__getitem__ if isinstance(uncertainty, dict) else uncertainty
    values = {d: float(score(d)) for d in ids}
    best = min(ids, key=lambda d: (values[d], d))
    return best, values


def score_domain(
    model: ModelBundle,
    domain: DomainDataset,
    ledger: PseudoSourceLedger,
    hp: HyperParams,
    reiteration: int,
) -> Tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """
    Graph-head confidence for every domain sample not yet in the ledger. Batches are B_s ledger
    context rows + up to B_t candidates; every candidate is scored once (its first appearance).
    Returns (candidate indices, confidences w, argmax labels).
    """
    accepted = ledger.accepted_indices(domain.domain_id)
    candidates = np.array([i for i in range(len(domain)) if i not in accepted], dtype=np.int64)
    if candidates.size == 0:
        return candidates, torch.zeros(0), torch.zeros(0, dtype=torch.long)
    ctx_set = ledger.dataset()
    ctx_sampler = EpochSampler(len(ledger), derive_seed(hp.seed, reiteration, domain.domain_id, _STREAM_CONTEXT))

    def context(_: int) -> torch.Tensor:
        return ctx_set[torch.from_numpy(ctx_sampler.draw(hp.B_s))][0]

    probs = predict_graph(model, domain.images[torch.from_numpy(candidates)], context, hp.B_t)
    conf, labels = probs.max(dim=1)
    return candidates, conf, labels


def probe_selection(
    model: ModelBundle,
    domain: DomainDataset,
    ledger: PseudoSourceLedger,
    hp: HyperParams,
    reiteration: int,
    iteration: int,
) -> Dict[str, Any]:
    """Would-be pseudo-labels at this point of adaptation, audited against hidden truth."""
    candidates, conf, labels = score_domain(model, domain, ledger, hp, reiteration)
    keep = conf > hp.tau
    record: Dict[str, Any] = {"iteration": iteration, "accepted": int(keep.sum())}
    truth = domain.hidden_truth()
    if truth is not None and candidates.size:
        t = truth[torch.from_numpy(candidates)][keep]
        known = t >= 0
        record["correct"] = int((labels[keep][known] == t[known]).sum())
        record["incorrect"] = int(known.sum()) - record["correct"]
    return record


def adapt_domain(
    model: ModelBundle,
    ledger: PseudoSourceLedger,
    domain: DomainDataset,
    iters: int,
    hp: HyperParams,
    opts: Optional[Optimizers] = None,
    *,
    reiteration: int = 1,
    start_iteration: int = 0,
    metrics: Optional[MetricsLog] = None,
    probes: Optional[List[Dict[str, Any]]] = None,
    progress: bool = False,
    log_every: int = 50,
) -> ModelBundle:
    """
    `iters` adaptation iterations on `domain`: sample B_s ledger + B_t domain rows, then the
    three-phase update. iters=0 is a no-op.
    The lambda_adv ramp restarts at p=0 on every (pass, domain) call; p is the fraction of this
    call's iterations already run.
    """
    if iters <= 0:
        return model
    opts = opts or build_optimizers(model, hp)
    sampler = MinibatchSampler(len(ledger), len(domain), hp.seed, reiteration, domain.domain_id)
    report: Optional[LossReport] = None
    for k in _progress(range(1, iters + 1), progress, f"adapt {domain.name}"):
        lam = lambda_schedule((k - 1) / iters, hp.lambda_adv, hp.adv_schedule)
        batch = sample_minibatch(ledger, domain, hp, sampler)
        iteration = start_iteration + k
        report = combine_and_step(model, batch, hp, opts, lam, iteration)
        if metrics is not None:
            metrics.append(iteration, reiteration, domain.name, report)
        if k % log_every == 0:
            logger.debug("iter %d %s: %s", iteration, domain.name, report.as_dict())
        if probes is not None and hp.probe_every > 0 and (k == 1 or k % hp.probe_every == 0):
            probes.append(probe_selection(model, domain, ledger, hp, reiteration, k))
    if metrics is not None:
        metrics.flush()
    return model


def pseudo_label_domain(
    model: ModelBundle,
    domain: DomainDataset,
    ledger: PseudoSourceLedger,
    tau: float,
    hp: HyperParams,
    *,
    reiteration: int = 1,
    iteration: int = 0,
) -> int:
    """Append every not-yet-accepted sample whose graph-head confidence w > tau. Returns count added."""
    candidates, conf, labels = score_domain(model, domain, ledger, hp, reiteration)
    added = 0
    for i, w, c in zip(candidates.tolist(), conf.tolist(), labels.tolist()):
        if w > tau:
            ledger.add(domain.domain_id, i, c, w, reiteration, iteration, tau)
            added += 1
    return added


def finetune(
    model: ModelBundle,
    ledger: PseudoSourceLedger,
    K_prime: int,
    hp: HyperParams,
    *,
    start_iteration: int = 0,
    metrics: Optional[MetricsLog] = None,
    progress: bool = False,
) -> ModelBundle:
    """K' iterations on ledger-only batches of B_s + B_t with assigned labels as ground truth."""
    if K_prime <= 0:
        return model
    opt = build_finetune_optimizer(model, hp)
    ledger_set = ledger.dataset()
    sampler = EpochSampler(len(ledger), derive_seed(hp.seed, hp.K_star + 1, 0, _STREAM_FINETUNE))
    for k in _progress(range(1, K_prime + 1), progress, "finetune"):
        images, labels = ledger_set[torch.from_numpy(sampler.draw(hp.B_s + hp.B_t))]
        report = finetune_step(model, images, labels, hp, opt, start_iteration + k)
        if metrics is not None:
            metrics.append(start_iteration + k, hp.K_star + 1, "ledger", report)
    if metrics is not None:
        metrics.flush()
    return model


# --- trainers --------------------------------------------------------------------------


class Trainer:
    """What the stage nodes drive. One instance per run."""

    def __init__(self, registry: DatasetRegistry, hp: HyperParams, metrics: Optional[MetricsLog] = None) -> None:
        self.registry = registry
        self.hp = hp
        self.metrics = metrics or MetricsLog()
        self.model: Optional[ModelBundle] = None
        self.probes: List[Dict[str, Any]] = []

    def train_source(self) -> Dict[str, Any]:
        raise NotImplementedError

    def start_pass(self, k_star: int) -> None:
        """Hook at each reiteration start."""

    def domain_uncertainty(self, domain_id: int) -> float:
        raise NotImplementedError

    def adapt(self, ledger: PseudoSourceLedger, domain_id: int, iters: int, state: CurriculumState) -> Dict[str, Any]:
        raise NotImplementedError

    def pseudo_label(self, ledger: PseudoSourceLedger, domain_id: int, state: CurriculumState) -> int:
        raise NotImplementedError

    def finetune(self, ledger: PseudoSourceLedger, state: CurriculumState) -> Dict[str, Any]:
        raise NotImplementedError

    def evaluate(self, ledger: Optional[PseudoSourceLedger]) -> Optional[Dict[str, Any]]:
        raise NotImplementedError

    def save(self, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
        raise NotImplementedError


class TorchTrainer(Trainer):
    def __init__(
        self,
        registry: DatasetRegistry,
        hp: HyperParams,
        spec: Optional[BackboneSpec] = None,
        metrics: Optional[MetricsLog] = None,
        progress: bool = False,
        log_every: int = 50,
    ) -> None:
        super().__init__(registry, hp, metrics)
        self.spec = spec or BackboneSpec()
        self.progress = progress
        self.log_every = log_every
        self.opts: Optional[Optimizers] = None

    def _model(self) -> ModelBundle:
        if self.model is None:
            raise RuntimeError("source training has not run")
        return self.model

    def train_source(self) -> Dict[str, Any]:
        self.model, info = train_source(self.registry, self.hp, self.spec, self.progress)
        self.opts = build_optimizers(self.model, self.hp)
        return info

    def start_pass(self, k_star: int) -> None:
        if self.hp.reset_optimizer_each_pass and k_star > 1:
            self.opts = build_optimizers(self._model(), self.hp)

    def domain_uncertainty(self, domain_id: int) -> float:
        return domain_uncertainty(self._model(), self.registry.domain(domain_id), self.hp.eval_batch_size)

    def adapt(self, ledger: PseudoSourceLedger, domain_id: int, iters: int, state: CurriculumState) -> Dict[str, Any]:
        domain = self.registry.domain(domain_id)
        trace: Optional[List[Dict[str, Any]]] = [] if self.hp.probe_every > 0 else None
        adapt_domain(
            self._model(),
            ledger,
            domain,
            iters,
            self.hp,
            self.opts,
            reiteration=state.k_star,
            start_iteration=state.global_iteration,
            metrics=self.metrics,
            probes=trace,
            progress=self.progress,
            log_every=self.log_every,
        )
        if trace is not None:
            self.probes.append({"pass": state.k_star, "domain": domain.name, "trace": trace})
        return {"iterations": iters, "probes": len(trace or [])}

    def pseudo_label(self, ledger: PseudoSourceLedger, domain_id: int, state: CurriculumState) -> int:
        return pseudo_label_domain(
            self._model(),
            self.registry.domain(domain_id),
            ledger,
            self.hp.tau,
            self.hp,
            reiteration=state.k_star,
            iteration=state.global_iteration,
        )

    def finetune(self, ledger: PseudoSourceLedger, state: CurriculumState) -> Dict[str, Any]:
        finetune(
            self._model(),
            ledger,
            self.hp.K_prime,
            self.hp,
            start_iteration=state.global_iteration,
            metrics=self.metrics,
            progress=self.progress,
        )
        return {"iterations": self.hp.K_prime, "ledger_size": len(ledger)}

    def evaluate(self, ledger: Optional[PseudoSourceLedger]) -> Optional[Dict[str, Any]]:
        return evaluate(self._model(), self.registry, ledger, self.hp.eval_batch_size).to_dict()

    def save(self, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
        save_checkpoint(self._model(), path, extra)


class DryRunTrainer(Trainer):
    """
    Schedule-only stand-in: no gradient steps. Uncertainty follows the domain's shift metadata,
    confidences come from a seeded generator, so ledger and order are reproducible.
    """

    def __init__(
        self,
        registry: DatasetRegistry,
        hp: HyperParams,
        spec: Optional[BackboneSpec] = None,
        metrics: Optional[MetricsLog] = None,
    ) -> None:
        super().__init__(registry, hp, metrics)
        self.spec = spec or BackboneSpec()
        self._zero = LossReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def train_source(self) -> Dict[str, Any]:
        return {"iterations": 0, "loss": None, "validation_accuracy": None}

    def domain_uncertainty(self, domain_id: int) -> float:
        ds = self.registry.domain(domain_id)
        shift = ds.shift if ds.shift is not None else float(domain_id)
        return float(shift)

    def adapt(self, ledger: PseudoSourceLedger, domain_id: int, iters: int, state: CurriculumState) -> Dict[str, Any]:
        name = self.registry.domain(domain_id).name
        for k in range(1, iters + 1):
            self.metrics.append(state.global_iteration + k, state.k_star, name, self._zero)
        return {"iterations": iters, "probes": 0}

    def pseudo_label(self, ledger: PseudoSourceLedger, domain_id: int, state: CurriculumState) -> int:
        ds = self.registry.domain(domain_id)
        rng = np.random.default_rng(derive_seed(self.hp.seed, state.k_star, domain_id, _STREAM_DRY))
        accepted = ledger.accepted_indices(domain_id)
        truth = ds.hidden_truth()
        added = 0
        for i in range(len(ds)):
            w = float(rng.uniform(0.5, 1.0))
            flip = rng.uniform() < 0.1
            if i in accepted or not w > self.hp.tau:
                continue
            label = int(truth[i]) if truth is not None and int(truth[i]) >= 0 else int(rng.integers(self.registry.n_c))
            if flip:
                label = (label + 1) % self.registry.n_c
            ledger.add(domain_id, i, label, w, state.k_star, state.global_iteration, self.hp.tau)
            added += 1
        return added

    def finetune(self, ledger: PseudoSourceLedger, state: CurriculumState) -> Dict[str, Any]:
        return {"iterations": self.hp.K_prime, "ledger_size": len(ledger)}

    def evaluate(self, ledger: Optional[PseudoSourceLedger]) -> Optional[Dict[str, Any]]:
        return None

    def save(self, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
        torch.manual_seed(self.hp.seed)
        c, h, _ = self.registry.image_shape
        model = ModelBundle.build(self.spec, self.registry.n_c, in_channels=c, image_size=h)
        save_checkpoint(model, path, {**(extra or {}), "dry_run": True})


def run(
    registry: DatasetRegistry,
    hp: HyperParams,
    spec: Optional[BackboneSpec] = None,
    *,
    mode: str = "train",
    run_dir: Optional[str] = None,
    config_echo: Optional[Dict[str, Any]] = None,
    progress: bool = False,
    log_every: int = 50,
) -> "RunResult":
    """
    Full schedule: Step 1 source training; Step 2 K* passes, each selecting every domain once in
    ascending uncertainty (adapt K/K* iterations, pseudo-label, remove); Step 3 fine-tune K'.
    """
    from .runner import execute_run

    return execute_run(
        registry,
        hp,
        spec or BackboneSpec(),
        mode=mode,
        run_dir=run_dir,
        config_echo=config_echo,
        progress=progress,
        log_every=log_every,
    )


@dataclass
class RunResult:
    model: Optional[ModelBundle]
    ledger: PseudoSourceLedger
    manifest: Dict[str, Any]
    state: CurriculumState
