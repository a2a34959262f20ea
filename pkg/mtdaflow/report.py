"""
Report rendering from a run manifest alone: pass-by-pass pseudo-sample ingestion table
(report.md via jinja2) and the accuracy-per-reiteration curve (accuracy_curve.png).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional

from jinja2 import Environment, PackageLoader, StrictUndefined

from .evaluate import plot_accuracy_curve
from .manifest import additions_table, load_manifest

logger = logging.getLogger(__name__)

REPORT_NAME = "report.md"
CURVE_NAME = "accuracy_curve.png"


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def _cell(cell: Dict[str, Any]) -> str:
    if cell.get("correct") is None:
        return str(cell["added"])
    return f"{cell['added']} ({cell['correct']}/{cell['incorrect']})"


def _environment() -> Environment:
    env = Environment(
        loader=PackageLoader("mtdaflow", "templates"),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
    )
    env.globals.update(pct=_pct, cell=_cell)
    return env


def render_report(manifest: Dict[str, Any], run_name: str = "run", curve: Optional[str] = None) -> str:
    """Pure function of the manifest."""
    status = manifest.get("status", "unknown")
    partial = status != "complete"
    final = manifest.get("final") or {}
    template = _environment().get_template("report.md.j2")
    return template.render(
        run_name=run_name,
        status=status,
        partial=partial,
        mode=manifest.get("mode", "train"),
        targets=manifest.get("domains", {}).get("targets", []),
        schedule=manifest.get("schedule") or {},
        source_only_average=(manifest.get("source_only") or {}).get("average_target_accuracy"),
        final_average=final.get("average_target_accuracy"),
        final_correct=final.get("correct_pseudo_samples") or {},
        rows=additions_table(manifest),
        curve=curve,
    )


def write_report(run_dir: str) -> Path:
    """Render report.md (and accuracy_curve.png when accuracies exist) into run_dir."""
    root = Path(run_dir)
    manifest = load_manifest(str(root))
    if manifest.get("status") != "complete":
        logger.warning("run in %s is %s; writing a partial report", root, manifest.get("status"))
    curve = plot_accuracy_curve(manifest, str(root / CURVE_NAME))
    text = render_report(manifest, run_name=root.name, curve=CURVE_NAME if curve is not None else None)
    out = root / REPORT_NAME
    out.write_text(text, encoding="utf-8")
    return out
