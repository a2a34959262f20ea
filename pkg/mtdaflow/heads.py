"""
Dual classifier head: MLP head G_mlp and graph head G_gnn = (edge network, node classifier).
The 1x1 convolutions over the batch are realised as per-pair / per-node linear layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .backbone import ShapeContractError


class DegenerateBatchError(Exception):
    """The graph head needs at least two samples to form pairs."""


def _check_feats(feats: torch.Tensor, width: int, who: str) -> None:
    if feats.dim() != 2 or feats.shape[1] != width:
        raise ShapeContractError(f"{who}: expected B x {width} features, got {tuple(feats.shape)}")


class MLPHead(nn.Module):
    """Single fully connected layer d_f -> n_c. Returns pre-softmax logits."""

    def __init__(self, d_f: int, n_c: int) -> None:
        super().__init__()
        self.d_f = d_f
        self.fc = nn.Linear(d_f, n_c)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        _check_feats(feats, self.d_f, "mlp_forward")
        return self.fc(feats)


class EdgeNet(nn.Module):
    """Scores |f_i - f_j| with a d_f -> 256 -> 128 -> 1 stack; sigmoid gives the affinity matrix."""

    def __init__(self, d_f: int, hidden: Sequence[int] = (256, 128)) -> None:
        super().__init__()
        self.d_f = d_f
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Linear(d_f, h1), nn.ReLU(inplace=True), nn.Linear(h1, h2), nn.ReLU(inplace=True), nn.Linear(h2, 1)
        )

    def scores(self, feats: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid pair scores [B x B]."""
        _check_feats(feats, self.d_f, "edge_forward")
        if feats.shape[0] < 2:
            raise DegenerateBatchError(f"edge network needs B >= 2, got B={feats.shape[0]}")
        diff = (feats.unsqueeze(1) - feats.unsqueeze(0)).abs()
        return self.net(diff).squeeze(-1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.scores(feats))


def normalize_affinity(aff: torch.Tensor) -> torch.Tensor:
    """Force the diagonal to 1 and row-normalise so every row sums to 1."""
    if aff.dim() != 2 or aff.shape[0] != aff.shape[1]:
        raise ShapeContractError(f"affinity must be B x B, got {tuple(aff.shape)}")
    eye = torch.eye(aff.shape[0], dtype=torch.bool, device=aff.device)
    a = aff.masked_fill(eye, 1.0)
    rows = a.sum(dim=1, keepdim=True)
    assert bool((rows > 0).all()), "affinity row sums must be positive"
    return a / rows


class NodeNet(nn.Module):
    """concat(f_i, g_i) with g_i = sum_j Anorm[i][j] f_j, then 2 d_f -> 2 n_c -> n_c."""

    def __init__(self, d_f: int, n_c: int) -> None:
        super().__init__()
        self.d_f = d_f
        self.net = nn.Sequential(nn.Linear(2 * d_f, 2 * n_c), nn.ReLU(inplace=True), nn.Linear(2 * n_c, n_c))

    def aggregate(self, feats: torch.Tensor, aff: torch.Tensor) -> torch.Tensor:
        _check_feats(feats, self.d_f, "node_forward")
        if aff.shape != (feats.shape[0], feats.shape[0]):
            raise ShapeContractError(
                f"node_forward: affinity {tuple(aff.shape)} does not match batch {feats.shape[0]}"
            )
        return torch.cat([feats, normalize_affinity(aff) @ feats], dim=1)

    def forward(self, feats: torch.Tensor, aff: torch.Tensor) -> torch.Tensor:
        return self.net(self.aggregate(feats, aff))


class GraphHead(nn.Module):
    """G_gnn: edge network followed by the node classifier."""

    def __init__(self, d_f: int, n_c: int) -> None:
        super().__init__()
        self.edge = EdgeNet(d_f)
        self.node = NodeNet(d_f, n_c)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        aff = self.edge(feats)
        return aff, self.node(feats, aff)


def mlp_forward(head: MLPHead, feats: torch.Tensor) -> torch.Tensor:
    return head(feats)


def edge_forward(edge: EdgeNet, feats: torch.Tensor) -> torch.Tensor:
    return edge(feats)


def node_forward(node: NodeNet, feats: torch.Tensor, aff: torch.Tensor) -> torch.Tensor:
    return node(feats, aff)


@dataclass
class EdgeTargets:
    values: torch.Tensor
    mask: torch.Tensor


def build_edge_targets(labels: Union[torch.Tensor, Sequence[Optional[int]]]) -> EdgeTargets:
    """
    values[i][j] = 1 iff class_i == class_j. Ledger rows carry true labels, target rows MLP
    argmax pseudo-labels, so no label may be ABSENT (None or negative).
    """
    if isinstance(labels, torch.Tensor):
        lab = labels.detach().long().reshape(-1)
    else:
        if any(l is None for l in labels):
            raise ShapeContractError("build_edge_targets: ABSENT label in batch")
        lab = torch.tensor(list(labels), dtype=torch.long)
    if bool((lab < 0).any()):
        raise ShapeContractError("build_edge_targets: ABSENT label in batch")
    values = (lab.unsqueeze(0) == lab.unsqueeze(1)).float()
    return EdgeTargets(values=values, mask=torch.ones_like(values, dtype=torch.bool))
