"""Soft actor-critic heads operating on the 50-dim projected state.

Tanh-Gaussian actor, clipped double Q critics with EMA targets, learned
temperature, uniform replay. The Q-target is averaged over multiple
randomly shifted views of the next observation; the critic loss sums the
Bellman error over two views of the current observation and both critics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU(inplace=True))
    net = nn.Sequential(*layers)
    for m in net:
        if isinstance(m, nn.Linear):
            nn.init.orthogonal_(m.weight)
            nn.init.zeros_(m.bias)
    return net


class Actor(nn.Module):
    """3-layer MLP producing the mean and std of a tanh-Gaussian policy.

    The raw log-std is squashed smoothly into [LOG_STD_MIN, LOG_STD_MAX]
    so the bound stays differentiable.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden_dim: int = 1024):
        super().__init__()
        self.action_dim = action_dim
        self.trunk = _mlp([state_dim, hidden_dim, hidden_dim, 2 * action_dim])

    def forward(self, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        numerics.assert_finite(state, "actor input state")
        mu, log_std = self.trunk(state).chunk(2, dim=-1)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (torch.tanh(log_std) + 1.0)
        numerics.assert_finite(mu, "actor mean")
        return mu, log_std.exp()


class Critic(nn.Module):
    """Two independent Q MLPs on (state, action)."""

    def __init__(self, state_dim: int, action_dim: int, hidden_dim: int = 1024):
        super().__init__()
        self.q1 = _mlp([state_dim + action_dim, hidden_dim, hidden_dim, 1])
        self.q2 = _mlp([state_dim + action_dim, hidden_dim, hidden_dim, 1])

    def forward(self, state: torch.Tensor, action: torch.Tensor):
        sa = torch.cat([state, action], dim=-1)
        return self.q1(sa).squeeze(-1), self.q2(sa).squeeze(-1)


def tanh_gaussian_log_prob(u: torch.Tensor, mu: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    """log pi(tanh(u)) for u ~ N(mu, std), summed over action dims.

    Uses log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)) for stability.
    """
    gauss = -0.5 * (((u - mu) / std) ** 2 + 2.0 * std.log() + math.log(2.0 * math.pi))
    correction = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
    return (gauss - correction).sum(dim=-1)


def sample_action(
    state: torch.Tensor,
    actor: Actor,
    mode: str = "stochastic",
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw a = tanh(mu + std*eps) with its log-probability.

    `mode="mean"` returns tanh(mu) deterministically. A fixed `eps` can be
    supplied for reproducible/differentiable reparameterized sampling.
    """
    mu, std = actor(state)
    if mode == "mean":
        u = mu
    else:
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        u = mu + std * eps
    action = torch.tanh(u)
    log_prob = tanh_gaussian_log_prob(u, mu, std)
    numerics.assert_finite(action, "sampled action")
    return action, log_prob


def augmented_q_target(
    next_obs_views: list[torch.Tensor],
    encode_fn,
    actor: Actor,
    critic_target: Critic,
    alpha: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Average of min-double-Q minus entropy over M augmented next-obs views.

    Must be called under torch.no_grad(); the views are already augmented.
    """
    if not next_obs_views:
        raise ValueError("need at least one view")
    vals = []
    for view in next_obs_views:
        state = encode_fn(view)
        action, log_prob = sample_action(state, actor, generator=generator)
        q1, q2 = critic_target(state, action)
        vals.append(torch.min(q1, q2) - alpha * log_prob)
    return torch.stack(vals).mean(dim=0)


def critic_loss(
    critic: Critic,
    obs_states: list[torch.Tensor],
    action: torch.Tensor,
    target_q: torch.Tensor,
) -> torch.Tensor:
    """Sum of Bellman MSEs over both critics and every current-obs view."""
    loss = 0.0
    for state in obs_states:
        q1, q2 = critic(state, action)
        loss = loss + F.mse_loss(q1, target_q) + F.mse_loss(q2, target_q)
    numerics.assert_finite(loss, "critic loss")
    return loss


def actor_loss(
    actor: Actor,
    critic: Critic,
    state: torch.Tensor,
    alpha: torch.Tensor,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """E[alpha*log pi - min Q]; `state` must already be detached from the encoder."""
    action, log_prob = sample_action(state, actor, generator=generator)
    q1, q2 = critic(state, action)
    loss = (alpha.detach() * log_prob - torch.min(q1, q2)).mean()
    numerics.assert_finite(loss, "actor loss")
    return loss, log_prob


def temperature_loss(
    log_alpha: torch.Tensor,
    log_prob: torch.Tensor,
    target_entropy: float,
) -> torch.Tensor:
    """J(alpha) = E[-alpha * (log pi + target_entropy)] with log pi detached."""
    loss = (log_alpha.exp() * (-log_prob - target_entropy).detach()).mean()
    numerics.assert_finite(loss, "temperature loss")
    return loss


def soft_update_critics(online: Critic, target: Critic, tau: float):
    """xi' = tau*xi + (1 - tau)*theta elementwise (tau=0 copies online)."""
    from .contrastive import ema_update

    ema_update(online, target, tau)


@dataclass
class Transition:
    obs: np.ndarray          # (84, 84, 9) uint8
    action: np.ndarray       # float32 in [-1, 1]
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Uniform ring buffer; overwrites oldest first, samples without replacement."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, transition: Transition):
        if not math.isfinite(transition.reward):
            raise numerics.NonFiniteError("non-finite reward pushed to replay")
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > len(self._data):
            raise ValueError(f"asked for {batch_size} of {len(self._data)} stored")
        idx = rng.choice(len(self._data), size=batch_size, replace=False)
        batch = [self._data[i] for i in idx]
        obs = np.stack([t.obs for t in batch])
        action = np.stack([t.action for t in batch]).astype(np.float32)
        reward = np.array([t.reward for t in batch], dtype=np.float32)
        next_obs = np.stack([t.next_obs for t in batch])
        done = np.array([t.done for t in batch], dtype=np.float32)
        return obs, action, reward, next_obs, done
