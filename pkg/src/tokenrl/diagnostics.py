"""Attention introspection: gradient-weighted attention rollout for a policy
token, and the policy-token cosine-similarity matrix.

Rollout algorithm (normative): per block, weight attention by its
ReLU-clipped gradient, average heads, zero the lowest `discard_ratio`
fraction of entries, map pooled patch indices back to the original grid
by replicating each pooled cell over its source window, add identity,
row-normalize, and chain blocks by matrix product. The map read from the
policy-token row over patch columns is nonnegative and normalized to sum 1.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, PyramidEncoder


class AttentionTrace:
    """Collects per-block attention tensors (and, after backward, gradients)."""

    def __init__(self):
        self.attentions: list[torch.Tensor] = []

    def record(self, attn: torch.Tensor):
        if attn.requires_grad:
            attn.retain_grad()
        self.attentions.append(attn)

    def gradients(self) -> list[torch.Tensor]:
        grads = [a.grad for a in self.attentions]
        if any(g is None for g in grads):
            raise RuntimeError("incomplete trace: run a backward pass first")
        return grads


def capture_trace(encoder: PyramidEncoder, obs: torch.Tensor, task: int) -> AttentionTrace:
    """Forward + backward from the summed policy-token output of `task`."""
    encoder.check_task(task)
    trace = AttentionTrace()
    encoder.zero_grad()
    z = encoder.encode(obs, trace=trace)
    z[:, 1 + task].sum().backward()
    encoder.zero_grad()
    return trace


def _pool_source_map(cfg: EncoderConfig) -> list[list[list[int]]]:
    """For each stage, original-grid patch indices covered by each stage cell."""
    grids = cfg.stage_grids()
    sources: list[list[list[int]]] = [[[i] for i in range(cfg.num_patches)]]
    for s in range(1, cfg.stages):
        h_in, w_in = grids[s - 1]
        h_out, w_out = grids[s]
        prev = sources[-1]
        cur: list[list[int]] = []
        for r in range(h_out):
            for c in range(w_out):
                if s % 2 == 1:  # width halved, overlapping rows
                    rows = {min(r + k, h_in - 1) for k in (0, 1)}
                    cols = {2 * c, 2 * c + 1}
                else:           # height halved, overlapping cols
                    rows = {2 * r, 2 * r + 1}
                    cols = {min(c + k, w_in - 1) for k in (0, 1)}
                merged: set[int] = set()
                for rr in rows:
                    for cc in cols:
                        merged.update(prev[rr * w_in + cc])
                cur.append(sorted(merged))
        sources.append(cur)
    return sources


def _expansion_matrix(num_prefix: int, sources: list[list[int]], num_patches: int,
                      dtype=torch.float64) -> torch.Tensor:
    """0/1 matrix mapping stage tokens to the full [prefix + original-grid] space."""
    full = num_prefix + num_patches
    stage = num_prefix + len(sources)
    e = torch.zeros(full, stage, dtype=dtype)
    for i in range(num_prefix):
        e[i, i] = 1.0
    for j, cells in enumerate(sources):
        for i in cells:
            e[num_prefix + i, num_prefix + j] = 1.0
    return e


def grad_rollout(
    attentions: list[torch.Tensor],
    gradients: list[torch.Tensor],
    cfg: EncoderConfig,
    num_tasks: int,
    task: int,
    discard_ratio: float = 0.9,
) -> np.ndarray:
    """Chain gradient-weighted attention across blocks; returns the
    (grid x grid) saliency map of `task`'s policy token (nonnegative, sum 1)."""
    if len(attentions) != len(gradients) or not attentions:
        raise ValueError("incomplete trace")
    if not (0 <= task < num_tasks):
        raise ValueError(f"task {task} out of range")
    num_prefix = 1 + num_tasks
    full = num_prefix + cfg.num_patches
    source_map = _pool_source_map(cfg)
    blocks_per_stage = cfg.blocks_per_stage

    result = torch.eye(full, dtype=torch.float64)
    for b, (attn, grad) in enumerate(zip(attentions, gradients)):
        stage = min(b // blocks_per_stage, cfg.stages - 1)
        fused = torch.relu(attn[0].detach().double() * grad[0].detach().double()).mean(dim=0)
        t = fused.shape[0]
        k = int(t * t * discard_ratio)
        if k > 0:
            flat = fused.flatten().clone()
            _, idx = torch.topk(flat, k, largest=False)
            flat[idx] = 0.0
            fused = flat.reshape(t, t)
        e = _expansion_matrix(num_prefix, source_map[stage], cfg.num_patches)
        lifted = e @ fused @ e.T
        lifted = lifted + torch.eye(full, dtype=torch.float64)
        lifted = lifted / lifted.sum(dim=-1, keepdim=True)
        result = lifted @ result

    row = result[1 + task, num_prefix:].clamp(min=0.0)
    total = row.sum()
    if total <= 0:
        raise ValueError("degenerate rollout: empty saliency")
    return (row / total).reshape(cfg.grid, cfg.grid).numpy()


def token_similarity(tokens: torch.Tensor | list[torch.Tensor]) -> np.ndarray:
    """K x K cosine-similarity matrix of policy tokens."""
    if isinstance(tokens, (list, tuple)):
        tokens = torch.stack([t.detach() for t in tokens])
    t = tokens.detach().double()
    norms = t.norm(dim=-1)
    if (norms == 0).any():
        raise ValueError("zero-norm policy token")
    unit = t / norms[:, None]
    return (unit @ unit.T).numpy()


# ---------------------------------------------------------------------------
# export formats

def heatmap_to_rgb(saliency: np.ndarray, upsample: int = 6) -> np.ndarray:
    """Normalize a saliency grid to a hot-style uint8 RGB image."""
    m = saliency / (saliency.max() + 1e-12)
    big = np.repeat(np.repeat(m, upsample, axis=0), upsample, axis=1)
    r = np.clip(3.0 * big, 0, 1)
    g = np.clip(3.0 * big - 1.0, 0, 1)
    b = np.clip(3.0 * big - 2.0, 0, 1)
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray):
    """Binary P6 portable pixmap."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError("not a P6 pixmap")
        w, h = map(int, f.readline().split())
        if f.readline().strip() != b"255":
            raise ValueError("expected maxval 255")
        data = f.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def write_similarity_csv(path: str | Path, matrix: np.ndarray, names: list[str]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task"] + names)
        for name, row in zip(names, matrix):
            writer.writerow([name] + [f"{v:.8f}" for v in row])
