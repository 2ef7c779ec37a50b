"""Multi-task training harness: per-task SAC heads over the shared encoder,
policy-token padding for transfer, frozen retests of earlier tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import sac
from .config import RunConfig
from .contrastive import ContrastiveLearner, ema_update
from .encoder import PyramidEncoder, UnknownTaskError
from .envs import make_env, obs_to_tensor, random_shift_batch
from .numerics import NonFiniteError, assert_finite


@dataclass
class TaskRecord:
    task_id: int
    env_name: str
    actor: sac.Actor
    critic: sac.Critic
    critic_target: sac.Critic
    log_alpha: torch.Tensor
    target_entropy: float
    env_steps: int = 0
    eval_history: list[dict] = field(default_factory=list)


class Trainer:
    """Owns the shared encoder, the contrastive branch, and per-task heads.

    Exactly one task trains at a time; earlier tasks keep their heads and
    can be retested (frozen) against the latest encoder at any point.
    """

    def __init__(self, cfg: RunConfig, first_env: str | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.np_rng = np.random.default_rng(cfg.seed + 2)

        self.encoder = PyramidEncoder(cfg.encoder_config(), num_tasks=1)
        updates_horizon = max(1, cfg.total_env_steps // 8)
        self.contrastive = ContrastiveLearner(
            self.encoder, total_steps=updates_horizon,
            tau_base=cfg.tau_base, shift_pad=cfg.aug_pad,
        )
        self.tasks: list[TaskRecord] = []
        self.replay: sac.ReplayBuffer | None = None
        self.update_count = 0
        self.encoder_lr_scale = 1.0
        self.encoder_opt: torch.optim.Optimizer | None = None
        self._head_opts: dict[int, dict[str, torch.optim.Optimizer]] = {}
        self.last_losses = {"critic_loss": 0.0, "actor_loss": 0.0, "contrastive_loss": 0.0}

        env_name = first_env or cfg.env
        self._register_task(env_name, token_index=0)
        self._build_encoder_optimizer()

    # ------------------------------------------------------------------ setup

    def _register_task(self, env_name: str, token_index: int) -> TaskRecord:
        env = make_env(env_name)  # validates the name, gives action_dim
        adim = env.spec.action_dim
        record = TaskRecord(
            task_id=token_index,
            env_name=env_name,
            actor=sac.Actor(self.cfg.state_dim, adim, self.cfg.hidden_dim),
            critic=sac.Critic(self.cfg.state_dim, adim, self.cfg.hidden_dim),
            critic_target=sac.Critic(self.cfg.state_dim, adim, self.cfg.hidden_dim),
            log_alpha=torch.tensor(math.log(self.cfg.init_temperature), requires_grad=True),
            target_entropy=-float(adim),
        )
        record.critic_target.load_state_dict(record.critic.state_dict())
        record.critic_target.requires_grad_(False)
        self.tasks.append(record)
        lr = self.cfg.lr
        self._head_opts[record.task_id] = {
            "actor": torch.optim.Adam(record.actor.parameters(), lr=lr),
            "critic": torch.optim.Adam(record.critic.parameters(), lr=lr),
            "alpha": torch.optim.Adam([record.log_alpha], lr=lr),
        }
        self.replay = sac.ReplayBuffer(self.cfg.replay_capacity)
        return record

    def _encoder_param_groups(self):
        """Split encoder params: decayed transformer weights / everything else.

        Weight matrices of the patch projection, attention, MLP and output
        head carry weight decay; LayerNorm params, biases, position
        embeddings and all tokens do not. Policy tokens train at the base
        (head) learning rate even when the encoder LR is scaled down.
        """
        decay, no_decay = [], []
        token_params = list(self.encoder.policy_tokens.parameters())
        token_ids = {id(p) for p in token_params}
        for name, p in self.encoder.named_parameters():
            if id(p) in token_ids:
                continue
            if name.endswith(".weight") and p.ndim >= 2:
                decay.append(p)
            else:
                no_decay.append(p)
        no_decay += list(self.contrastive.online_modules().parameters())
        lr_enc = self.cfg.lr * self.encoder_lr_scale
        return [
            {"params": decay, "lr": lr_enc, "weight_decay": self.cfg.encoder_weight_decay},
            {"params": no_decay, "lr": lr_enc, "weight_decay": 0.0},
            {"params": token_params, "lr": self.cfg.lr, "weight_decay": 0.0},
        ]

    def _build_encoder_optimizer(self):
        self.encoder_opt = torch.optim.AdamW(self._encoder_param_groups())

    # --------------------------------------------------------------- transfer

    def transfer_to(self, new_env: str, init_from_task: int, alpha_l: float | None = None) -> int:
        """Pad a policy token (copied from the source task), bind fresh heads,
        scale the shared encoder LR down by alpha_l, drop the old replay."""
        if not (0 <= init_from_task < len(self.tasks)):
            raise UnknownTaskError(f"no task {init_from_task}")
        token_index = self.encoder.add_policy_token(init_from=init_from_task)
        self.contrastive.sync_target_tokens(self.encoder)
        record = self._register_task(new_env, token_index)
        self.encoder_lr_scale = alpha_l if alpha_l is not None else self.cfg.alpha_l
        self._build_encoder_optimizer()
        return record.task_id

    # --------------------------------------------------------------- training

    def _encode_views(self, task: int, views: list[torch.Tensor]) -> list[torch.Tensor]:
        return [self.encoder.policy_state(v, task) for v in views]

    def _update(self, task: int):
        cfg = self.cfg
        record = self.tasks[task]
        obs, action, reward, next_obs, done = self.replay.sample(cfg.batch_size, self.np_rng)
        obs_t = obs_to_tensor(obs)
        next_t = obs_to_tensor(next_obs)
        action_t = torch.from_numpy(action)
        reward_t = torch.from_numpy(reward)
        not_done = 1.0 - torch.from_numpy(done)

        cur_views = [random_shift_batch(obs_t, cfg.aug_pad, self.torch_gen)
                     for _ in range(cfg.aug_views)]
        with torch.no_grad():
            next_views = [random_shift_batch(next_t, cfg.aug_pad, self.torch_gen)
                          for _ in range(cfg.aug_views)]
            target_component = sac.augmented_q_target(
                next_views,
                encode_fn=lambda v: self.contrastive.target_encoder.policy_state(v, task),
                actor=record.actor,
                critic_target=record.critic_target,
                alpha=record.log_alpha.exp(),
                generator=self.torch_gen,
            )
            target_q = reward_t + cfg.discount * not_done * target_component
            assert_finite(target_q, "Q target")

        cur_states = self._encode_views(task, cur_views)
        critic_loss = sac.critic_loss(record.critic, cur_states, action_t, target_q)
        contrastive_loss = self.contrastive.loss(obs_t, self.encoder, self.torch_gen)
        total_loss = critic_loss + contrastive_loss

        self.encoder_opt.zero_grad()
        self._head_opts[task]["critic"].zero_grad()
        total_loss.backward()
        self.encoder_opt.step()
        self._head_opts[task]["critic"].step()
        self.contrastive.update_target(self.encoder)

        self.last_losses["critic_loss"] = float(critic_loss.detach())
        self.last_losses["contrastive_loss"] = float(contrastive_loss.detach())
        self.last_losses["total_loss"] = float(total_loss.detach())

        if self.update_count % cfg.actor_update_freq == 0:
            state = cur_states[0].detach()
            actor_loss, log_prob = sac.actor_loss(
                record.actor, record.critic, state, record.log_alpha.exp(), self.torch_gen
            )
            self._head_opts[task]["actor"].zero_grad()
            actor_loss.backward()
            self._head_opts[task]["actor"].step()

            alpha_loss = sac.temperature_loss(record.log_alpha, log_prob, record.target_entropy)
            self._head_opts[task]["alpha"].zero_grad()
            alpha_loss.backward()
            self._head_opts[task]["alpha"].step()
            self.last_losses["actor_loss"] = float(actor_loss.detach())

        if self.update_count % cfg.critic_target_update_freq == 0:
            sac.soft_update_critics(record.critic, record.critic_target, cfg.critic_tau)
        self.update_count += 1

    def _act(self, record: TaskRecord, obs: np.ndarray, mode: str) -> np.ndarray:
        with torch.no_grad():
            state = self.encoder.policy_state(obs_to_tensor(obs).unsqueeze(0), record.task_id)
            action, _ = sac.sample_action(state, record.actor, mode, self.torch_gen)
        return action.squeeze(0).numpy().astype(np.float32)

    def train_task(self, task: int, env_steps: int, on_eval=None) -> list[dict]:
        """Run the SAC + contrastive co-training loop for `env_steps` env steps.

        Evaluates every cfg.eval_interval env steps (10 episodes, mean
        actions) and returns the metric rows.
        """
        if env_steps <= 0:
            return []
        cfg = self.cfg
        record = self.tasks[task]
        env = make_env(record.env_name)
        episode_counter = 0
        obs = env.reset(self._train_seed(task, episode_counter))
        rows: list[dict] = []
        next_eval = (record.env_steps // cfg.eval_interval + 1) * cfg.eval_interval
        target_steps = record.env_steps + env_steps

        while record.env_steps < target_steps:
            seeding = len(self.replay) * env.spec.action_repeat < cfg.seed_steps
            if seeding:
                action = (self.np_rng.random(env.spec.action_dim) * 2.0 - 1.0).astype(np.float32)
            else:
                action = self._act(record, obs, "stochastic")
            next_obs, reward, done = env.step(action)
            self.replay.push(sac.Transition(obs, action, float(reward), next_obs, done))
            record.env_steps += env.spec.action_repeat
            obs = next_obs
            if done:
                episode_counter += 1
                obs = env.reset(self._train_seed(task, episode_counter))
            if not seeding:
                self._update(task)
            if record.env_steps >= next_eval:
                row = self._eval_row(record)
                rows.append(row)
                record.eval_history.append(row)
                if on_eval is not None:
                    on_eval(row)
                next_eval += cfg.eval_interval
        return rows

    def _train_seed(self, task: int, episode: int) -> int:
        return self.cfg.seed * 1_000_003 + task * 10_007 + episode

    def _eval_row(self, record: TaskRecord) -> dict:
        returns = self.evaluate(record.task_id, self.cfg.eval_episodes)
        return {
            "env_step": record.env_steps,
            "episode_return": float(np.mean(returns)),
            "critic_loss": self.last_losses.get("critic_loss", 0.0),
            "actor_loss": self.last_losses.get("actor_loss", 0.0),
            "contrastive_loss": self.last_losses.get("contrastive_loss", 0.0),
            "alpha": float(self.tasks[record.task_id].log_alpha.exp().detach()),
        }

    # ------------------------------------------------------------- evaluation

    def evaluate(self, task: int, episodes: int = 10) -> list[float]:
        """Frozen rollouts with mean actions; mutates no trainable state."""
        if not (0 <= task < len(self.tasks)):
            raise UnknownTaskError(f"no task {task}")
        record = self.tasks[task]
        env = make_env(record.env_name)
        returns = []
        for ep in range(episodes):
            obs = env.reset(self.cfg.seed * 2_000_003 + task * 20_011 + ep)
            total, done = 0.0, False
            while not done:
                with torch.no_grad():
                    state = self.encoder.policy_state(
                        obs_to_tensor(obs).unsqueeze(0), record.task_id
                    )
                    action, _ = sac.sample_action(state, record.actor, "mean")
                obs, reward, done = env.step(action.squeeze(0).numpy())
                total += reward
            returns.append(total)
        return returns

    def retest(self, task: int, episodes: int = 10) -> tuple[float, float]:
        """Mean and sample std of episode returns with the latest encoder."""
        record = self.tasks[task]
        if record.env_steps == 0:
            raise RuntimeError(f"task {task} was never trained")
        returns = self.evaluate(task, episodes)
        mean = float(np.mean(returns))
        std = float(np.std(returns, ddof=1)) if len(returns) > 1 else 0.0
        return mean, std


def random_policy_baseline(env_name: str, episodes: int = 10, seed: int = 0) -> float:
    """Mean episode return of a uniform random policy (the harness's own baseline)."""
    env = make_env(env_name)
    rng = np.random.default_rng(seed)
    returns = []
    for ep in range(episodes):
        env.reset(seed * 1000 + ep)
        total, done = 0.0, False
        while not done:
            action = rng.random(env.spec.action_dim) * 2.0 - 1.0
            _, reward, done = env.step(action)
            total += reward
        returns.append(total)
    return float(np.mean(returns))
