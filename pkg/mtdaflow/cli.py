"""
mtdaflow CLI: train, eval, report and bench.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 run aborted, 4 I/O error.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from .bench import run_suite
from .config import ConfigError, expand_dotted, load_run_config, parse_override
from .data import DatasetError
from .evaluate import evaluate
from .manifest import ManifestSchemaError
from .model import CheckpointSchemaError, load_checkpoint
from .report import write_report
from .runner import RunAborted, load_registry, run_from_config

logger = logging.getLogger(__name__)

EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_IO = 4

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def _fail(code: int, message: str) -> None:
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


def _run_guarded(fn) -> Any:
    """Map the error taxonomy onto exit codes."""
    try:
        return fn()
    except ConfigError as e:
        _fail(EXIT_CONFIG, f"config error: {e}")
    except DatasetError as e:
        _fail(EXIT_CONFIG, f"dataset error: {e}")
    except RunAborted as e:
        _fail(EXIT_ABORTED, f"{e} (state: {e.snapshot})")
    except (CheckpointSchemaError, ManifestSchemaError) as e:
        _fail(EXIT_IO, str(e))
    except OSError as e:
        _fail(EXIT_IO, f"I/O error: {e}")
    except Exception as e:
        logger.debug("internal error", exc_info=True)
        _fail(EXIT_INTERNAL, f"internal error: {e}")


def _data_layers(synthetic: bool, args: tuple, data_dir: Optional[str]) -> List[Dict[str, Any]]:
    """`--synthetic n_c=4 N=3 shifts=0.1,0.3,0.6` / `--data-dir DIR` -> config layers."""
    if args and not synthetic:
        raise ConfigError("data.synthetic", "key=value arguments need --synthetic")
    if synthetic and data_dir:
        raise ConfigError("data", "--synthetic and --data-dir are exclusive")
    layers: List[Dict[str, Any]] = []
    if synthetic:
        layers.append({"data": {"directory": None}})
        for item in args:
            layers.append({"data": {"synthetic": parse_override(item)}})
    if data_dir:
        layers.append({"data": {"directory": data_dir}})
    return layers


def _flag_layer(flags: Dict[str, Any]) -> Dict[str, Any]:
    return expand_dotted({k: v for k, v in flags.items() if v is not None})


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="DEBUG logging (per-iteration losses)")
def main(verbose: bool) -> None:
    """mtdaflow: reiterative curriculum multi-target domain adaptation.

    \b
    Exit codes: 0 success, 1 internal error, 2 configuration error,
    3 run aborted, 4 I/O error.
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@main.command()
@click.argument("args", nargs=-1)
@click.option("--config", "-c", "config_path", type=click.Path(), help="YAML config (flat dotted keys)")
@click.option("--synthetic", is_flag=True, help="Synthetic domains; ARGS are key=value generator settings")
@click.option("--data-dir", type=click.Path(), help="Directory dataset (source/, target_<name>/)")
@click.option("--out", "-o", "output_dir", help="Run directory")
@click.option("--K", "k_total", type=int, help="Total adaptation iterations per domain budget")
@click.option("--Kstar", "k_star", type=int, help="Reiterations K*")
@click.option("--Kprime", "k_prime", type=int, help="Fine-tuning iterations K'")
@click.option("--Bs", "b_s", type=int, help="Ledger rows per minibatch")
@click.option("--Bt", "b_t", type=int, help="Target rows per minibatch")
@click.option("--tau", type=float, help="Pseudo-label confidence threshold")
@click.option("--seed", type=int, help="Seed (also the synthetic generator seed)")
@click.option("--backbone", type=click.Choice(["small_conv", "hybrid_conv_attention"]))
@click.option("--set", "sets", multiple=True, help="Override key=value (dotted keys)")
@click.option("--dry-run", is_flag=True, help="Schedule-only run without gradient steps")
def train(
    args: tuple,
    config_path: Optional[str],
    synthetic: bool,
    data_dir: Optional[str],
    output_dir: Optional[str],
    k_total: Optional[int],
    k_star: Optional[int],
    k_prime: Optional[int],
    b_s: Optional[int],
    b_t: Optional[int],
    tau: Optional[float],
    seed: Optional[int],
    backbone: Optional[str],
    sets: tuple,
    dry_run: bool,
) -> None:
    """Run the full curriculum and write the run directory."""

    def go() -> None:
        flags = {
            "hp.K": k_total,
            "hp.K_star": k_star,
            "hp.K_prime": k_prime,
            "hp.B_s": b_s,
            "hp.B_t": b_t,
            "hp.tau": tau,
            "hp.seed": seed,
            "backbone.kind": backbone,
            "output_dir": output_dir,
            "mode": "dry_run" if dry_run else None,
        }
        layers = _data_layers(synthetic, args, data_dir)
        if seed is not None and synthetic and not any(a.startswith("seed=") for a in args):
            layers.append({"data": {"synthetic": {"seed": seed}}})
        layers.append(_flag_layer(flags))
        layers.extend(parse_override(s) for s in sets)
        cfg = load_run_config(config_path, layers)
        result = run_from_config(cfg)
        final = result.manifest.get("final") or {}
        click.echo(f"Run completed: {cfg.output_dir}")
        click.echo(f"Average target accuracy: {final.get('average_target_accuracy')}")

    _run_guarded(go)


@main.command("eval")
@click.argument("checkpoint", type=click.Path())
@click.argument("args", nargs=-1)
@click.option("--config", "-c", "config_path", type=click.Path(), help="YAML config for the dataset")
@click.option("--synthetic", is_flag=True)
@click.option("--data-dir", type=click.Path())
@click.option("--out", "-o", "output_dir", help="Where eval_report.{json,csv} go (default: <run>/eval)")
@click.option("--set", "sets", multiple=True)
def eval_(
    checkpoint: str,
    args: tuple,
    config_path: Optional[str],
    synthetic: bool,
    data_dir: Optional[str],
    output_dir: Optional[str],
    sets: tuple,
) -> None:
    """Evaluate a checkpoint on a dataset (default: the run's own config.yaml)."""

    def go() -> None:
        model, _ = load_checkpoint(checkpoint)
        ckpt = Path(checkpoint)
        run_dir = ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent
        path = config_path
        if path is None and (run_dir / "config.yaml").is_file():
            path = str(run_dir / "config.yaml")
        layers = _data_layers(synthetic, args, data_dir) + [parse_override(s) for s in sets]
        cfg = load_run_config(path, layers)
        registry = load_registry(cfg.data)
        if registry.n_c != model.n_c:
            raise ConfigError("data", f"dataset has {registry.n_c} classes, checkpoint {model.n_c}")
        result = evaluate(model, registry, batch_size=cfg.hp.eval_batch_size)
        for name, acc in result.per_domain_accuracy.items():
            click.echo(f"{name}: {acc}")
        click.echo(f"average: {result.average_target_accuracy}")
        out = Path(output_dir) if output_dir else run_dir / "eval"
        result.write_json(str(out / "eval_report.json"))
        result.write_csv(str(out / "eval_report.csv"))

    _run_guarded(go)


@main.command()
@click.argument("run_dir", type=click.Path())
def report(run_dir: str) -> None:
    """Render report.md and accuracy_curve.png from a run manifest."""

    def go() -> None:
        click.echo(f"Report written: {write_report(run_dir)}")

    _run_guarded(go)


def _seed_list(raw: str) -> List[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError("seeds", f"expected comma-separated integers, got {raw!r}") from e


@main.command()
@click.option("--suite", "suites", multiple=True, help="reiteration, batch_composition, components, confidence_quality")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seed list")
@click.option("--workers", default=1, show_default=True, type=int, help="Process pool size")
@click.option("--out", "-o", "output_dir", default="runs/bench", show_default=True)
@click.option("--config", "-c", "config_path", type=click.Path(), help="Base YAML config")
@click.option("--set", "sets", multiple=True)
@click.option("--dry-run", is_flag=True)
def bench(
    suites: tuple,
    seeds: str,
    workers: int,
    output_dir: str,
    config_path: Optional[str],
    sets: tuple,
    dry_run: bool,
) -> None:
    """Synthetic benchmark tables as CSV."""

    def go() -> None:
        layers = [parse_override(s) for s in sets]
        if dry_run:
            layers.append({"mode": "dry_run"})
        base = load_run_config(config_path, layers).to_dict()
        names = list(suites) or ["reiteration", "batch_composition"]
        for name, path in run_suite(names, _seed_list(seeds), output_dir, base, workers).items():
            click.echo(f"{name}: {path}")

    _run_guarded(go)


if __name__ == "__main__":
    main()
