"""
Inference and metrics. Headline numbers use the MLP head (per-sample, no batch context);
the graph head is available with ledger context batches for diagnostics and pseudo-labeling.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from .backbone import extract
from .data import DatasetRegistry, DomainDataset
from .ledger import PseudoSourceLedger
from .model import ModelBundle

logger = logging.getLogger(__name__)


def _loader(images: torch.Tensor, batch_size: int) -> DataLoader:
    """Ordered, unshuffled chunks of `images`."""
    return DataLoader(TensorDataset(images), batch_size=batch_size, shuffle=False)


@torch.no_grad()
def mlp_probabilities(model: ModelBundle, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """softmax(G_mlp(F(x))) in eval mode, [n x n_c]."""
    was_training = model.training
    model.eval()
    out = []
    for (chunk,) in _loader(images, batch_size):
        out.append(torch.softmax(model.mlp(extract(model.extractor, chunk)), dim=1))
    model.train(was_training)
    if not out:
        return torch.zeros(0, model.n_c)
    return torch.cat(out)


def predict(model: ModelBundle, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """argmax of the MLP head; batch-size independent."""
    return mlp_probabilities(model, images, batch_size).argmax(dim=1)


@torch.no_grad()
def predict_graph(
    model: ModelBundle,
    images: torch.Tensor,
    context: Callable[[int], torch.Tensor],
    chunk: int,
) -> torch.Tensor:
    """
    Graph-head probabilities [n x n_c]. Rows are scored `chunk` at a time, each chunk batched
    after the labeled context returned by `context(chunk_index)`.
    """
    was_training = model.training
    model.eval()
    out = []
    for k, (rows,) in enumerate(_loader(images, chunk)):
        ctx = context(k)
        batch = torch.cat([ctx, rows], dim=0)
        _, node_logits = model.graph(extract(model.extractor, batch))
        out.append(torch.softmax(node_logits[ctx.shape[0]:], dim=1))
    model.train(was_training)
    if not out:
        return torch.zeros(0, model.n_c)
    return torch.cat(out)


def accuracy(preds: torch.Tensor, truth: Optional[torch.Tensor]) -> Optional[float]:
    """Fraction correct over rows with known truth (>= 0); None when nothing is known."""
    if truth is None:
        return None
    known = truth >= 0
    if not bool(known.any()):
        return None
    return int((preds[known] == truth[known]).sum()) / int(known.sum())


def confusion_matrix(preds: torch.Tensor, truth: torch.Tensor, n_c: int) -> List[List[int]]:
    known = truth >= 0
    idx = truth[known] * n_c + preds[known]
    counts = torch.bincount(idx, minlength=n_c * n_c).reshape(n_c, n_c)
    return counts.tolist()


def audit_ledger(
    ledger: PseudoSourceLedger, registry: Optional[DatasetRegistry] = None
) -> Dict[str, Dict[str, int]]:
    """
    Correct / incorrect pseudo-samples per (reiteration, domain) against hidden truth.
    Keys are "<reiteration>/<domain name>". Domains without truth are skipped with a warning.
    """
    registry = registry or ledger.registry
    audit: Dict[str, Dict[str, int]] = {}
    warned = set()
    for e in ledger.pseudo_entries():
        ds = registry.domain(e.domain_id)
        truth = ds.hidden_truth()
        if truth is None or int(truth[e.index]) < 0:
            if ds.name not in warned:
                logger.warning("audit skipped for %s: hidden ground truth missing", ds.name)
                warned.add(ds.name)
            continue
        key = f"{e.reiteration}/{ds.name}"
        cell = audit.setdefault(key, {"correct": 0, "incorrect": 0})
        if e.label == int(truth[e.index]):
            cell["correct"] += 1
        else:
            cell["incorrect"] += 1
    return dict(sorted(audit.items(), key=lambda kv: (int(kv[0].split("/")[0]), kv[0])))


def correct_pseudo_samples(audit: Dict[str, Dict[str, int]]) -> Dict[str, int]:
    """Correct pseudo-samples per domain in the final ledger."""
    out: Dict[str, int] = {}
    for key, cell in audit.items():
        name = key.split("/", 1)[1]
        out[name] = out.get(name, 0) + cell["correct"]
    return dict(sorted(out.items()))


@dataclass
class EvalReport:
    per_domain_accuracy: Dict[str, Optional[float]]
    average_target_accuracy: Optional[float]
    source_accuracy: Optional[float] = None
    confusion: List[List[int]] = field(default_factory=list)
    ledger_audit: Dict[str, Dict[str, int]] = field(default_factory=dict)
    correct_pseudo_samples: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write_json(self, path: str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return out

    def write_csv(self, path: str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["domain", "accuracy"])
            for name, acc in self.per_domain_accuracy.items():
                w.writerow([name, "" if acc is None else f"{acc:.6f}"])
            avg = self.average_target_accuracy
            w.writerow(["average", "" if avg is None else f"{avg:.6f}"])
        return out


def mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    known = [v for v in values if v is not None]
    return float(np.mean(known)) if known else None


def domain_accuracy(model: ModelBundle, ds: DomainDataset, batch_size: int = 256) -> Tuple[Optional[float], torch.Tensor]:
    preds = predict(model, ds.images, batch_size)
    return accuracy(preds, ds.hidden_truth()), preds


def evaluate(
    model: ModelBundle,
    registry: DatasetRegistry,
    ledger: Optional[PseudoSourceLedger] = None,
    batch_size: int = 256,
) -> EvalReport:
    """Per-target MLP-head accuracy, unweighted average, confusion over all targets, ledger audit."""
    per_domain: Dict[str, Optional[float]] = {}
    all_preds, all_truth = [], []
    for t in registry.targets:
        acc, preds = domain_accuracy(model, t, batch_size)
        per_domain[t.name] = acc
        truth = t.hidden_truth()
        if truth is not None:
            all_preds.append(preds)
            all_truth.append(truth)
    confusion = (
        confusion_matrix(torch.cat(all_preds), torch.cat(all_truth), registry.n_c) if all_truth else []
    )
    source_acc, _ = domain_accuracy(model, registry.source, batch_size)
    audit = audit_ledger(ledger, registry) if ledger is not None else {}
    return EvalReport(
        per_domain_accuracy=per_domain,
        average_target_accuracy=mean_or_none(list(per_domain.values())),
        source_accuracy=source_acc,
        confusion=confusion,
        ledger_audit=audit,
        correct_pseudo_samples=correct_pseudo_samples(audit),
    )


def plot_accuracy_curve(manifest: Dict[str, Any], path: str) -> Optional[Path]:
    """Average target accuracy after each pass (pass 0 = source-only model)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs, ys = [], []
    base = (manifest.get("source_only") or {}).get("average_target_accuracy")
    if base is not None:
        xs.append(0)
        ys.append(100.0 * base)
    for p in manifest.get("passes", []):
        if p.get("average_target_accuracy") is not None:
            xs.append(p["pass"])
            ys.append(100.0 * p["average_target_accuracy"])
    if not xs:
        logger.warning("no accuracy values to plot")
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("reiteration k*")
    ax.set_ylabel("average target accuracy (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(str(out), dpi=120)
    plt.close(fig)
    return out
