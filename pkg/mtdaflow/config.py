"""
設定管理モジュール（YAML読み込み、dotted key 展開、deep merge、RunConfig 検証）。
優先順位: built-in defaults < config file < CLI flags。
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml


class ConfigError(Exception):
    """Invalid configuration. `key` names the offending dotted key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def load_yaml(file_path: str) -> Dict[str, Any]:
    """YAML ファイルを読み込む"""
    with open(file_path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """
    deep merge 実装

    ルール:
    - dict: 再帰マージ
    - list: 上書き
    - scalar: 上書き
    """
    result = base.copy()

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value

    return result


def expand_dotted(flat: Dict[str, Any]) -> Dict[str, Any]:
    """`{"hp.K": 1500}` -> `{"hp": {"K": 1500}}`. Nested dicts are expanded recursively."""
    nested: Dict[str, Any] = {}
    for key, value in (flat or {}).items():
        if isinstance(value, dict):
            value = expand_dotted(value)
        parts = str(key).split(".")
        cur = nested
        for part in parts[:-1]:
            nxt = cur.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                cur[part] = nxt
            cur = nxt
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(cur.get(leaf), dict):
            cur[leaf] = deep_merge(cur[leaf], value)
        else:
            cur[leaf] = value
    return nested


def parse_override(item: str) -> Dict[str, Any]:
    """`key=value` -> nested dict. Value is parsed as YAML scalar/list (`0.1,0.3` stays a string)."""
    if "=" not in item:
        raise ConfigError(item, "override must be key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(item, "override key is empty")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(key, f"cannot parse value {raw!r}: {e}") from e
    return expand_dotted({key: value})


@dataclass
class SourceConvergence:
    patience: int = 5
    min_delta: float = 1e-3
    max_iters: int = 2000
    check_every: int = 50


@dataclass
class HyperParams:
    B_s: int = 48
    B_t: int = 16
    tau: float = 0.7
    K: int = 1500
    K_star: int = 3
    K_prime: int = 200
    lambda_edge: float = 1.0
    lambda_node: float = 0.3
    lambda_adv: float = 1.0
    adv_schedule: str = "ramp"
    seed: int = 7
    lr: float = 1e-3
    head_lr_mult: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    source_convergence: SourceConvergence = field(default_factory=SourceConvergence)
    source_val_fraction: float = 0.1
    eval_batch_size: int = 256
    probe_every: int = 0
    reset_optimizer_each_pass: bool = False

    @property
    def iters_per_pass(self) -> int:
        """Adaptation iterations per (domain, pass): K / K*."""
        return self.K // self.K_star


@dataclass
class BackboneSpec:
    kind: str = "small_conv"
    d_f: int = 256
    pretrained_weights: Optional[str] = None
    conv_channels: List[int] = field(default_factory=lambda: [32, 64, 128])
    stem_channels: int = 64
    embed_dim: int = 128
    depth: int = 2
    num_heads: int = 4


@dataclass
class SyntheticSpec:
    n_c: int = 4
    N: int = 3
    shifts: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.6])
    per_class: int = 50
    seed: int = 7


@dataclass
class DataSpec:
    synthetic: Optional[SyntheticSpec] = field(default_factory=SyntheticSpec)
    directory: Optional[str] = None
    image_size: int = 32


@dataclass
class RunConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    data: DataSpec = field(default_factory=DataSpec)
    output_dir: str = "runs/latest"
    mode: str = "train"
    device: str = "cpu"
    progress: bool = True
    log_every: int = 50

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


BACKBONE_KINDS = ("small_conv", "hybrid_conv_attention")
MODES = ("train", "dry_run")
ADV_SCHEDULES = ("ramp", "fixed")


def _build(cls: Any, data: Dict[str, Any], prefix: str) -> Any:
    """Build dataclass `cls` from dict; unknown keys -> ConfigError naming the dotted key."""
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(dotted, "unknown configuration key")
        default = getattr(cls(), key)
        nested_cls = type(default) if is_dataclass(default) else _NESTED.get((cls, key))
        if nested_cls is not None:
            kwargs[key] = _build(nested_cls, value, dotted)
        else:
            kwargs[key] = value
    return cls(**kwargs)


# Optional dataclass-typed fields whose default may be None.
_NESTED = {(DataSpec, "synthetic"): SyntheticSpec}


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: RunConfig) -> RunConfig:
    """Validate before any compute. Raises ConfigError naming the offending key."""
    hp = cfg.hp
    for name in ("B_s", "B_t", "K", "K_star", "K_prime", "seed", "eval_batch_size", "probe_every"):
        _require(isinstance(getattr(hp, name), int), f"hp.{name}", "must be an integer")
    _require(hp.B_s >= 1, "hp.B_s", "must be >= 1")
    _require(hp.B_t >= 1, "hp.B_t", "must be >= 1")
    _require(hp.K >= 0, "hp.K", "must be >= 0")
    _require(hp.K_star >= 1, "hp.K_star", "must be >= 1")
    _require(hp.K % hp.K_star == 0, "hp.K", "K not divisible by K*")
    _require(hp.K_prime >= 0, "hp.K_prime", "must be >= 0")
    _require(0.0 < float(hp.tau) < 1.0, "hp.tau", "must lie in (0, 1)")
    for name in ("lambda_edge", "lambda_node", "lambda_adv"):
        _require(float(getattr(hp, name)) >= 0.0, f"hp.{name}", "must be >= 0")
    _require(hp.adv_schedule in ADV_SCHEDULES, "hp.adv_schedule", f"one of {ADV_SCHEDULES}")
    _require(float(hp.lr) > 0.0, "hp.lr", "must be > 0")
    _require(0.0 <= float(hp.source_val_fraction) < 1.0, "hp.source_val_fraction", "in [0, 1)")
    _require(hp.eval_batch_size >= 1, "hp.eval_batch_size", "must be >= 1")
    _require(hp.probe_every >= 0, "hp.probe_every", "must be >= 0")
    sc = hp.source_convergence
    _require(sc.patience >= 1, "hp.source_convergence.patience", "must be >= 1")
    _require(sc.max_iters >= 0, "hp.source_convergence.max_iters", "must be >= 0")
    _require(sc.check_every >= 1, "hp.source_convergence.check_every", "must be >= 1")

    bb = cfg.backbone
    _require(bb.kind in BACKBONE_KINDS, "backbone.kind", f"one of {BACKBONE_KINDS}")
    _require(bb.d_f > 0, "backbone.d_f", "must be > 0")
    _require(bb.embed_dim % bb.num_heads == 0, "backbone.num_heads", "must divide embed_dim")

    data = cfg.data
    _require(
        data.synthetic is not None or data.directory is not None,
        "data",
        "either data.synthetic or data.directory is required",
    )
    if data.synthetic is not None and data.directory is None:
        syn = data.synthetic
        if isinstance(syn.shifts, str):
            syn.shifts = [float(s) for s in syn.shifts.split(",") if s.strip()]
        _require(syn.n_c >= 2, "data.synthetic.n_c", "must be >= 2")
        _require(syn.N >= 1, "data.synthetic.N", "must be >= 1")
        _require(syn.per_class >= 10, "data.synthetic.per_class", "must be >= 10")
        _require(len(syn.shifts) == syn.N, "data.synthetic.shifts", "needs exactly N entries")
    _require(data.image_size >= 8, "data.image_size", "must be >= 8")

    _require(cfg.mode in MODES, "mode", f"one of {MODES}")
    _require(cfg.device == "cpu", "device", "only cpu is supported")
    _require(cfg.log_every >= 1, "log_every", "must be >= 1")
    return cfg


def default_config_dict() -> Dict[str, Any]:
    return RunConfig().to_dict()


def build_run_config(*layers: Dict[str, Any]) -> RunConfig:
    """Merge nested layers over defaults (later layers win), build and validate RunConfig."""
    merged = default_config_dict()
    for layer in layers:
        if layer:
            merged = deep_merge(merged, copy.deepcopy(layer))
    if merged.get("data", {}).get("directory"):
        merged["data"]["synthetic"] = None
    cfg = _build(RunConfig, merged, "")
    return validate(cfg)


def load_run_config(
    config_path: Optional[str] = None, overrides: Optional[List[Dict[str, Any]]] = None
) -> RunConfig:
    """
    RunConfig を読み込む。

    優先順位:
    1. built-in defaults（RunConfig の dataclass defaults）
    2. config file（flat dotted keys 可）
    3. CLI flags / `--set key=value`
    """
    file_layer: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError("config", f"config file not found: {config_path}")
        file_layer = expand_dotted(load_yaml(str(path)))
    return build_run_config(file_layer, *(overrides or []))


def dump_run_config(cfg: RunConfig, path: str) -> None:
    """Echo the validated config as YAML (nested keys)."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
