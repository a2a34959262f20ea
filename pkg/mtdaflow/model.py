"""
ModelBundle: extractor F (theta), MLP head (phi), graph head (phi') and discriminator D (psi),
plus the checkpoint schema and parameter hashing.

Checkpoint key schema (version 1), one flat state_dict:
  extractor.*   F
  mlp.*         G_mlp
  graph.edge.*  f_edge
  graph.node.*  f_node
  disc.*        D
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import torch
import torch.nn as nn

from .adversarial import Discriminator
from .backbone import Extractor, build_extractor
from .config import BackboneSpec
from .heads import GraphHead, MLPHead

CHECKPOINT_SCHEMA_VERSION = "1"


class CheckpointSchemaError(Exception):
    """Checkpoint was written with a different schema version."""


class CheckpointNotFoundError(OSError):
    """Checkpoint path does not exist."""


class ModelBundle(nn.Module):
    def __init__(self, extractor: Extractor, n_c: int, spec: Optional[BackboneSpec] = None) -> None:
        super().__init__()
        self.spec = spec or BackboneSpec()
        self.n_c = n_c
        self.extractor = extractor
        self.mlp = MLPHead(extractor.d_f, n_c)
        self.graph = GraphHead(extractor.d_f, n_c)
        self.disc = Discriminator(extractor.d_f)

    @classmethod
    def build(cls, spec: BackboneSpec, n_c: int, in_channels: int = 3, image_size: int = 32) -> "ModelBundle":
        return cls(build_extractor(spec, in_channels, image_size), n_c, spec)

    def theta(self) -> List[nn.Parameter]:
        return list(self.extractor.parameters())

    def phi(self) -> List[nn.Parameter]:
        return list(self.mlp.parameters())

    def phi_prime(self) -> List[nn.Parameter]:
        return list(self.graph.parameters())

    def psi(self) -> List[nn.Parameter]:
        return list(self.disc.parameters())

    def groups(self) -> Dict[str, List[nn.Parameter]]:
        return {"theta": self.theta(), "phi": self.phi(), "phi_prime": self.phi_prime(), "psi": self.psi()}


def parameter_hash(params: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of the given tensors, in order."""
    h = hashlib.sha256()
    for p in params:
        t = p.detach().cpu().contiguous()
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def group_hashes(model: ModelBundle) -> Dict[str, str]:
    return {name: parameter_hash(ps) for name, ps in model.groups().items()}


def save_checkpoint(model: ModelBundle, path: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "backbone": asdict(model.spec),
        "n_c": model.n_c,
        "in_channels": model.extractor.in_channels,
        "image_size": model.extractor.image_size,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, str(out))
    return out


def load_checkpoint(path: str) -> tuple[ModelBundle, Dict[str, Any]]:
    """Rebuild the bundle from a checkpoint. Returns (model in eval mode, extra)."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(str(p), map_location="cpu", weights_only=False)
    version = payload.get("schema_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointSchemaError(
            f"Unsupported checkpoint schema: {version!r}. Engine supports: {CHECKPOINT_SCHEMA_VERSION}"
        )
    spec = BackboneSpec(**{**payload["backbone"], "pretrained_weights": None})
    model = ModelBundle.build(spec, payload["n_c"], payload["in_channels"], payload["image_size"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
