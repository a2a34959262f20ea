"""
PseudoSourceLedger: the source set progressively grown with accepted target pseudo-samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Set, Tuple

import torch
from torch.utils.data import TensorDataset

from .data import SOURCE_DOMAIN_ID, DatasetRegistry


class LedgerError(Exception):
    """Ledger invariant violated: duplicate sample, bad label or confidence not above tau."""


@dataclass(frozen=True)
class LedgerEntry:
    domain_id: int
    index: int
    label: int
    confidence: float
    reiteration: int
    accepted_at_iteration: int

    @property
    def uid(self) -> Tuple[int, int]:
        return (self.domain_id, self.index)

    @property
    def origin(self) -> bool:
        return self.domain_id == SOURCE_DOMAIN_ID


class PseudoSourceLedger:
    """
    Append-only. Starts with every source sample (origin entries); target samples join at most
    once, with the assigned label and the confidence observed at acceptance.
    """

    def __init__(self, registry: DatasetRegistry) -> None:
        self.registry = registry
        labels = registry.source.labels
        assert labels is not None
        self._entries: List[LedgerEntry] = [
            LedgerEntry(SOURCE_DOMAIN_ID, i, int(labels[i]), 1.0, 0, 0)
            for i in range(len(registry.source))
        ]
        self._uids: Set[Tuple[int, int]] = {e.uid for e in self._entries}
        self.origin_count = len(self._entries)
        self._cache: Optional[TensorDataset] = None

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, uid: Tuple[int, int]) -> bool:
        return uid in self._uids

    @property
    def entries(self) -> Tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def pseudo_entries(self) -> List[LedgerEntry]:
        return self._entries[self.origin_count:]

    def accepted_indices(self, domain_id: int) -> Set[int]:
        return {i for d, i in self._uids if d == domain_id}

    def add(
        self,
        domain_id: int,
        index: int,
        label: int,
        confidence: float,
        reiteration: int,
        iteration: int,
        tau: float,
    ) -> LedgerEntry:
        if domain_id == SOURCE_DOMAIN_ID:
            raise LedgerError("source samples are origin entries, not pseudo-samples")
        if (domain_id, index) in self._uids:
            raise LedgerError(f"sample {(domain_id, index)} is already in the ledger")
        if not 0 <= label < self.registry.n_c:
            raise LedgerError(f"label {label} outside [0, {self.registry.n_c})")
        if not confidence > tau:
            raise LedgerError(f"confidence {confidence:.6f} is not above tau={tau}")
        entry = LedgerEntry(domain_id, int(index), int(label), float(confidence), reiteration, iteration)
        self._entries.append(entry)
        self._uids.add(entry.uid)
        self._cache = None
        return entry

    def dataset(self) -> TensorDataset:
        """(images, assigned labels) in ledger order; rebuilt after growth."""
        if self._cache is None:
            images = torch.stack(
                [self.registry.domain(e.domain_id).images[e.index] for e in self._entries]
            )
            labels = torch.tensor([e.label for e in self._entries], dtype=torch.long)
            self._cache = TensorDataset(images, labels)
        return self._cache

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        images, labels = self.dataset().tensors
        return images, labels

    def additions(self) -> Dict[Tuple[int, int], int]:
        """Accepted pseudo-samples per (reiteration, domain_id)."""
        out: Dict[Tuple[int, int], int] = {}
        for e in self.pseudo_entries():
            key = (e.reiteration, e.domain_id)
            out[key] = out.get(key, 0) + 1
        return out

    def to_records(self) -> List[Dict[str, Any]]:
        return [asdict(e) for e in self.pseudo_entries()]
