"""
Run manifest: the JSON record of one curriculum run (config echo, per-pass order and
additions, accuracies, ledger, stage trace with output revisions).
"""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from .data import DatasetRegistry
from .ledger import PseudoSourceLedger
from .node import content_revision

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = "1"
TIMESTAMP_KEYS = ("created_at", "finished_at", "elapsed_seconds")


class ManifestSchemaError(Exception):
    """Manifest missing or written with a different schema version."""


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def new_manifest(config: Optional[Dict[str, Any]], registry: DatasetRegistry, mode: str) -> Dict[str, Any]:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "created_at": utc_now(),
        "status": "running",
        "mode": mode,
        "config": config or {},
        "domains": {
            "source": registry.source.name,
            "targets": [t.name for t in registry.targets],
            "class_names": list(registry.class_names),
        },
        "source": None,
        "source_only": None,
        "schedule": {},
        "passes": [],
        "probes": [],
        "finetune": None,
        "final": None,
        "ledger": None,
        "stage_trace": [],
    }


def ledger_section(ledger: PseudoSourceLedger) -> Dict[str, Any]:
    records = ledger.to_records()
    return {
        "origin_count": ledger.origin_count,
        "size": len(ledger),
        "pseudo_count": len(records),
        "revision": content_revision({"entries": records}),
        "entries": records,
    }


def write_manifest(manifest: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str) -> Dict[str, Any]:
    """Load manifest.json from a run directory or a direct path."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise ManifestSchemaError(f"manifest not found: {p}")
    data = json.loads(p.read_text(encoding="utf-8"))
    version = data.get("schema_version") if isinstance(data, dict) else None
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestSchemaError(
            f"Unsupported manifest schema: {version!r}. Engine supports: {MANIFEST_SCHEMA_VERSION}"
        )
    return data


def strip_timestamps(manifest: Dict[str, Any]) -> Dict[str, Any]:
    """Copy without wall-clock fields; two runs with identical config+seed compare equal on this."""
    return {k: v for k, v in manifest.items() if k not in TIMESTAMP_KEYS}


def additions_table(manifest: Dict[str, Any]) -> List[Dict[str, Any]]:
    """
    One row per recorded pass: {"pass", "cells": {domain: {added, correct, incorrect}},
    "total", "average_target_accuracy"}. Domains not processed in a pass render as zeros.
    """
    targets = manifest.get("domains", {}).get("targets", [])
    rows = []
    for p in manifest.get("passes", []):
        cells = {}
        for name in targets:
            cell = p.get("additions", {}).get(name) or {"added": 0, "correct": 0, "incorrect": 0}
            cells[name] = cell
        rows.append(
            {
                "pass": p["pass"],
                "order": p.get("order", []),
                "cells": cells,
                "total": sum(c["added"] for c in cells.values()),
                "average_target_accuracy": p.get("average_target_accuracy"),
            }
        )
    return rows
