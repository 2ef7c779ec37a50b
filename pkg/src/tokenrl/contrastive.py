"""Momentum (BYOL-style) contrastive branch on the contrastive token.

An online projector + predictor chases the projection produced by an
exponential-moving-average copy of the encoder + projector. The loss is
the normalized MSE 2 - 2*cos(pred, target); the target side never
receives gradient.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn

from . import numerics
from .encoder import PyramidEncoder
from .envs import random_shift_batch


class ProjectionMLP(nn.Module):
    """linear -> batch-norm -> ReLU -> linear (BN needs batch >= 2 in train mode)."""

    def __init__(self, in_dim: int, hidden_dim: int = 384, out_dim: int = 96):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def byol_loss(pred: torch.Tensor, target_proj: torch.Tensor) -> torch.Tensor:
    """2 - 2*cosine(pred, target), averaged over rows; target is detached."""
    if pred.shape != target_proj.shape:
        raise numerics.ShapeError(
            f"byol_loss: shape mismatch {tuple(pred.shape)} vs {tuple(target_proj.shape)}"
        )
    p = pred.reshape(-1, pred.shape[-1])
    t = target_proj.detach().reshape(-1, target_proj.shape[-1])
    p_norm = p.norm(dim=-1)
    t_norm = t.norm(dim=-1)
    if (p_norm == 0).any() or (t_norm == 0).any():
        raise ValueError("byol_loss: zero-norm input")
    cos = (p * t).sum(dim=-1) / (p_norm * t_norm)
    return (2.0 - 2.0 * cos).mean()


@torch.no_grad()
def ema_update(online: nn.Module, target: nn.Module, tau: float):
    """Elementwise xi <- tau*xi + (1-tau)*theta over parameters and float buffers."""
    for p_o, p_t in zip(online.parameters(), target.parameters()):
        if p_o.shape != p_t.shape:
            raise numerics.ShapeError("ema_update: parameter shape mismatch")
        p_t.mul_(tau).add_(p_o, alpha=1.0 - tau)
    for b_o, b_t in zip(online.buffers(), target.buffers()):
        if b_t.dtype.is_floating_point:
            b_t.mul_(tau).add_(b_o, alpha=1.0 - tau)
        else:
            b_t.copy_(b_o)


def tau_schedule(step: int, total_steps: int, tau_base: float = 0.996) -> float:
    """Cosine ramp from tau_base at step 0 to 1.0 at total_steps."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


class ContrastiveLearner:
    """Owns the online projector/predictor and the EMA target encoder+projector."""

    def __init__(
        self,
        encoder: PyramidEncoder,
        total_steps: int,
        tau_base: float = 0.996,
        shift_pad: int = 4,
    ):
        dim = encoder.cfg.embed_dim
        self.projector = ProjectionMLP(dim)
        self.predictor = ProjectionMLP(96, out_dim=96)
        self.target_encoder = copy.deepcopy(encoder).requires_grad_(False)
        self.target_projector = copy.deepcopy(self.projector).requires_grad_(False)
        self.tau_base = tau_base
        self.total_steps = total_steps
        self.step = 0
        self.shift_pad = shift_pad

    def online_modules(self) -> nn.ModuleList:
        return nn.ModuleList([self.projector, self.predictor])

    def sync_target_tokens(self, encoder: PyramidEncoder):
        """Mirror newly padded policy tokens into the target encoder."""
        while self.target_encoder.num_tasks < encoder.num_tasks:
            idx = self.target_encoder.num_tasks
            self.target_encoder.add_policy_token()
            with torch.no_grad():
                self.target_encoder.policy_tokens[idx].copy_(encoder.policy_tokens[idx])
            self.target_encoder.policy_tokens[idx].requires_grad_(False)

    def loss(
        self,
        obs: torch.Tensor,
        encoder: PyramidEncoder,
        generator: torch.Generator,
    ) -> torch.Tensor:
        """One co-training term: predict the target projection of a second view."""
        v = random_shift_batch(obs, self.shift_pad, generator)
        v_prime = random_shift_batch(obs, self.shift_pad, generator)
        pred = self.predictor(self.projector(encoder.contrastive_feature(v)))
        with torch.no_grad():
            target = self.target_projector(self.target_encoder.contrastive_feature(v_prime))
        return byol_loss(pred, target)

    def update_target(self, encoder: PyramidEncoder):
        tau = tau_schedule(min(self.step, self.total_steps), self.total_steps, self.tau_base)
        ema_update(encoder, self.target_encoder, tau)
        ema_update(self.projector, self.target_projector, tau)
        self.step += 1
