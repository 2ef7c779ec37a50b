"""Run configuration: paper-default hyperparameters, desk-scale preset,
plain-text key=value config files with CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderConfig


@dataclass
class RunConfig:
    # task / run
    env: str = "cartpole-balance"
    seed: int = 1
    total_env_steps: int = 100_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    # encoder
    embed_dim: int = 192
    patch_size: int = 6
    stages: int = 3
    blocks_per_stage: int = 3
    heads: int = 3
    mlp_ratio: int = 4
    state_dim: int = 50
    # optimization
    lr: float = 1e-4
    encoder_weight_decay: float = 0.1
    batch_size: int = 512
    alpha_l: float = 0.05          # encoder LR multiplier during transfer
    # SAC
    discount: float = 0.99
    init_temperature: float = 0.1
    # EMA retention for the target critics (target' = tau*target +
    # (1-tau)*online): 0.99 keeps the target slow, matching the usual SAC
    # soft-update rate of 0.01 expressed in the opposite convention.
    critic_tau: float = 0.99
    critic_target_update_freq: int = 2
    actor_update_freq: int = 2
    hidden_dim: int = 1024
    replay_capacity: int = 100_000
    seed_steps: int = 1000
    # augmentation / contrastive
    aug_pad: int = 4
    aug_views: int = 2
    tau_base: float = 0.996

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_channels=9,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            stages=self.stages,
            blocks_per_stage=self.blocks_per_stage,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            state_dim=self.state_dim,
        )

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


DESK_PRESET = {
    "embed_dim": 64,
    "blocks_per_stage": 2,
    "heads": 2,
    "batch_size": 64,
    # the small batch tolerates (and the short runs need) a hotter optimizer
    "lr": 5e-4,
}


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    values = dataclasses.asdict(cfg)
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    for key, raw in overrides.items():
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        current = values[key]
        if isinstance(current, bool):
            values[key] = raw in ("1", "true", "True")
        elif isinstance(current, int):
            values[key] = int(raw)
        elif isinstance(current, float):
            values[key] = float(raw)
        else:
            values[key] = raw
    return RunConfig(**values)


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    desk_scale: bool = False,
) -> RunConfig:
    """Defaults <- optional config file <- desk preset <- explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if desk_scale:
        cfg = apply_overrides(cfg, {k: str(v) for k, v in DESK_PRESET.items()})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
