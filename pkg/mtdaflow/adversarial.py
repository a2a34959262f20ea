"""
Domain discriminator D with a gradient reversal layer. Score convention: 1 = target, 0 = source.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from torch.autograd import Function

from .backbone import ShapeContractError

EPS = 1e-7


class GradientReversal(Function):
    """Identity forward; backward passes -lambda * grad."""

    @staticmethod
    def forward(ctx, x, lambda_adv):
        ctx.lambda_adv = lambda_adv
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_adv, None


def grl(feats: torch.Tensor, lambda_adv: float) -> torch.Tensor:
    if lambda_adv < 0:
        raise ValueError(f"lambda_adv must be >= 0, got {lambda_adv}")
    return GradientReversal.apply(feats, float(lambda_adv))


class Discriminator(nn.Module):
    """d_f -> 256 -> 1 MLP; forward returns pre-sigmoid scores [B]."""

    def __init__(self, d_f: int = 256, hidden: int = 256) -> None:
        super().__init__()
        self.d_f = d_f
        self.layers = nn.Sequential(nn.Linear(d_f, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 2 or feats.shape[1] != self.d_f:
            raise ShapeContractError(f"discriminate: expected B x {self.d_f}, got {tuple(feats.shape)}")
        return self.layers(feats).squeeze(-1)


def discriminate(disc: Discriminator, feats: torch.Tensor) -> torch.Tensor:
    """sigmoid(D(f)) in (0, 1)."""
    return torch.sigmoid(disc(feats))


def adversarial_loss(scores: torch.Tensor, domain_flags: torch.Tensor) -> torch.Tensor:
    """Mean BCE between domain scores and flags (0 ledger part, 1 target part)."""
    if scores.numel() == 0:
        raise ShapeContractError("adversarial_loss: empty batch")
    if scores.shape != domain_flags.shape:
        raise ShapeContractError(
            f"adversarial_loss: scores {tuple(scores.shape)} vs flags {tuple(domain_flags.shape)}"
        )
    p = scores.clamp(EPS, 1.0 - EPS)
    t = domain_flags.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def lambda_schedule(progress: float, ceiling: float = 1.0, mode: str = "ramp") -> float:
    """ceiling * (2 / (1 + exp(-10 p)) - 1) for mode='ramp'; the ceiling itself for 'fixed'."""
    if mode == "fixed":
        return float(ceiling)
    p = min(max(progress, 0.0), 1.0)
    return float(ceiling * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0))
