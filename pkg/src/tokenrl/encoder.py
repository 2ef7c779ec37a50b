"""Pyramid token transformer for visual control.

Token layout is always [contrastive; policy 1..K; patch 1..N_stage].
Patch tokens are spatially pooled between stages (196 -> 98 -> 49 at the
default config); contrastive and policy tokens pass through untouched.
Each registered task owns one policy token; all attention / MLP weights
are D x D-shaped and independent of the number of tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics


class UnknownTaskError(KeyError):
    """Raised when a task id has no registered policy token."""


@dataclass
class EncoderConfig:
    image_size: int = 84
    input_channels: int = 9
    patch_size: int = 6          # 84 / 6 = 14, so 196 patches
    embed_dim: int = 192
    stages: int = 3
    blocks_per_stage: int = 3
    heads: int = 3
    mlp_ratio: int = 4
    state_dim: int = 50

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def stage_grids(self) -> list[tuple[int, int]]:
        """Patch-grid (h, w) at the input of each stage."""
        grids = [(self.grid, self.grid)]
        for s in range(1, self.stages):
            h, w = grids[-1]
            grids.append((h, w // 2) if s % 2 == 1 else (h // 2, w))
        return grids

    def stage_patch_counts(self) -> list[int]:
        return [h * w for h, w in self.stage_grids()]


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def pool_patch_grid(patches: torch.Tensor, h: int, w: int, stage: int) -> torch.Tensor:
    """Mean-pool a (B, h*w, D) patch-token grid, halving one axis.

    Odd stages halve the width (2x2 filter, stride (1, 2), one replicated
    bottom row); even stages halve the height (stride (2, 1), one
    replicated right column). Output counts follow 196 -> 98 -> 49.
    """
    b, n, d = patches.shape
    if n != h * w:
        raise numerics.ShapeError(f"pool: expected {h * w} patch tokens, got {n}")
    x = patches.transpose(1, 2).reshape(b, d, h, w)
    if stage % 2 == 1:
        if w % 2 != 0:
            raise numerics.ShapeError(f"pool: width {w} not even at stage {stage}")
        x = F.pad(x, (0, 0, 0, 1), mode="replicate")
        x = F.avg_pool2d(x, kernel_size=2, stride=(1, 2))
    else:
        if h % 2 != 0:
            raise numerics.ShapeError(f"pool: height {h} not even at stage {stage}")
        x = F.pad(x, (0, 1, 0, 0), mode="replicate")
        x = F.avg_pool2d(x, kernel_size=2, stride=(2, 1))
    return x.flatten(2).transpose(1, 2)


class SelfAttention(nn.Module):
    """Standard multi-head self-attention with optional attention tracing."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, trace=None) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        if trace is None:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            attn = numerics.softmax(q @ k.transpose(-2, -1) * self.scale, axis=-1)
            trace.record(attn)
            out = attn @ v
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: MHSA + residual, MLP + residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor, trace=None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), trace=trace)
        x = x + self.fc2(numerics.gelu(self.fc1(self.norm2(x))))
        return x


class PyramidEncoder(nn.Module):
    """The shared state encoder: patchify, token assembly, staged blocks.

    Call `encode` for the full token sequence, `policy_state` for the
    tanh-squashed 50-dim state of one task, `contrastive_feature` for the
    contrastive-token representation.
    """

    def __init__(self, cfg: EncoderConfig, num_tasks: int = 1):
        super().__init__()
        if num_tasks < 1:
            raise ValueError("need at least one task")
        self.cfg = cfg
        p, c, d = cfg.patch_size, cfg.input_channels, cfg.embed_dim
        self.patch_proj = nn.Linear(p * p * c, d)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, d))
        self.contrastive_token = nn.Parameter(torch.zeros(d))
        self.policy_tokens = nn.ParameterList(
            [nn.Parameter(torch.zeros(d)) for _ in range(num_tasks)]
        )
        self.stage_blocks = nn.ModuleList(
            nn.ModuleList(
                Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks_per_stage)
            )
            for _ in range(cfg.stages)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.state_dim)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight)
                nn.init.zeros_(m.bias)
        trunc_normal_(self.pos_embed)
        trunc_normal_(self.contrastive_token)
        for tok in self.policy_tokens:
            trunc_normal_(tok)

    @property
    def num_tasks(self) -> int:
        return len(self.policy_tokens)

    def check_task(self, task: int):
        if not (0 <= task < self.num_tasks):
            raise UnknownTaskError(f"no policy token for task {task}")

    def add_policy_token(self, init_from: int | None = None) -> int:
        """Register a new task. Copies the source token, or draws a fresh one.

        No existing parameter changes shape or value.
        """
        d = self.cfg.embed_dim
        tok = nn.Parameter(torch.zeros(d, dtype=self.contrastive_token.dtype))
        if init_from is None:
            trunc_normal_(tok)
        else:
            self.check_task(init_from)
            with torch.no_grad():
                tok.copy_(self.policy_tokens[init_from])
        self.policy_tokens.append(tok)
        return self.num_tasks - 1

    def patchify(self, obs: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) image in [0,1] -> (B, N, D) patch embeddings + E_pos.

        Each patch is flattened channel-major (C, P, P) before projection.
        """
        cfg = self.cfg
        if obs.ndim != 4 or obs.shape[1:] != (cfg.input_channels, cfg.image_size, cfg.image_size):
            raise numerics.ShapeError(
                f"expected (B, {cfg.input_channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(obs.shape)}"
            )
        p = cfg.patch_size
        b = obs.shape[0]
        x = obs.unfold(2, p, p).unfold(3, p, p)          # (B, C, gh, gw, P, P)
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(b, cfg.num_patches, -1)
        return self.patch_proj(x) + self.pos_embed

    def assemble(self, patches: torch.Tensor) -> torch.Tensor:
        """Prepend [contrastive; policy 1..K] to the patch tokens."""
        b = patches.shape[0]
        tokens = torch.stack([self.contrastive_token, *self.policy_tokens])
        return torch.cat([tokens.expand(b, -1, -1), patches], dim=1)

    def encode(self, obs: torch.Tensor, trace=None) -> torch.Tensor:
        """Full forward pass; returns the final (B, 1+K+N_last, D) sequence."""
        z = self.assemble(self.patchify(obs))
        prefix = 1 + self.num_tasks
        grids = self.cfg.stage_grids()
        for s, blocks in enumerate(self.stage_blocks):
            for block in blocks:
                z = block(z, trace=trace)
            if s < self.cfg.stages - 1:
                pooled = pool_patch_grid(z[:, prefix:], *grids[s], stage=s + 1)
                z = torch.cat([z[:, :prefix], pooled], dim=1)
        return z

    def project_state(self, token_repr: torch.Tensor) -> torch.Tensor:
        """192-dim policy-token output -> tanh-squashed 50-dim state."""
        return torch.tanh(self.head(self.norm(token_repr)))

    def policy_state(self, obs: torch.Tensor, task: int, trace=None) -> torch.Tensor:
        self.check_task(task)
        z = self.encode(obs, trace=trace)
        return self.project_state(z[:, 1 + task])

    def contrastive_feature(self, obs: torch.Tensor) -> torch.Tensor:
        return self.norm(self.encode(obs)[:, 0])
