import numpy as np
import pytest
import torch

from tokenrl.config import DESK_PRESET, RunConfig, apply_overrides, load_config
from tokenrl.encoder import UnknownTaskError
from tokenrl.transfer import Trainer, random_policy_baseline


def micro_cfg(**kw) -> RunConfig:
    base = dict(
        env="cartpole-balance", seed=3, total_env_steps=2000,
        eval_interval=1000, eval_episodes=1,
        embed_dim=16, stages=1, blocks_per_stage=1, heads=2, mlp_ratio=2,
        state_dim=6, hidden_dim=32, batch_size=8, replay_capacity=512,
        seed_steps=96,
    )
    base.update(kw)
    return RunConfig(**base)


def param_snapshot(module) -> dict:
    return {n: p.detach().clone() for n, p in module.named_parameters()}


# ---------------------------------------------------------------- config

class TestConfig:
    def test_desk_preset_values(self):
        cfg = load_config(desk_scale=True)
        assert cfg.embed_dim == 64 and cfg.blocks_per_stage == 2
        assert cfg.heads == 2 and cfg.batch_size == 64

    def test_overrides_typed(self):
        cfg = apply_overrides(RunConfig(), {"lr": "3e-4", "batch_size": "7", "env": "reacher-easy"})
        assert cfg.lr == 3e-4 and cfg.batch_size == 7 and cfg.env == "reacher-easy"

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            apply_overrides(RunConfig(), {"learning_rate": "1"})

    def test_file_then_override_precedence(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("seed=9\nlr=2e-4  # comment\n")
        cfg = load_config(p, overrides={"seed": "11"})
        assert cfg.seed == 11 and cfg.lr == 2e-4

    def test_to_text_round_trip(self):
        cfg = micro_cfg()
        from tokenrl.config import parse_config_text
        cfg2 = apply_overrides(RunConfig(), parse_config_text(cfg.to_text()))
        assert cfg2 == cfg


# ---------------------------------------------------------------- trainer

class TestTrainer:
    def test_zero_steps_changes_nothing(self):
        trainer = Trainer(micro_cfg())
        before = param_snapshot(trainer.encoder)
        assert trainer.train_task(0, 0) == []
        for n, p in trainer.encoder.named_parameters():
            assert torch.equal(before[n], p)

    def test_seeded_runs_bitwise_identical(self):
        t1 = Trainer(micro_cfg())
        t2 = Trainer(micro_cfg())
        t1.train_task(0, 256)
        t2.train_task(0, 256)
        for (n, p1), (_, p2) in zip(t1.encoder.named_parameters(),
                                    t2.encoder.named_parameters()):
            assert torch.equal(p1, p2), n
        for (n, p1), (_, p2) in zip(t1.tasks[0].critic.named_parameters(),
                                    t2.tasks[0].critic.named_parameters()):
            assert torch.equal(p1, p2), n

    def test_seeding_phase_defers_updates(self):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 64)  # 64 env steps = 8 transitions * repeat 8 < 96
        assert trainer.update_count == 0
        assert len(trainer.replay) == 8

    def test_updates_start_after_seeding(self):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 200)
        assert trainer.update_count > 0

    def test_eval_rows_emitted_on_interval(self):
        trainer = Trainer(micro_cfg(eval_interval=128, eval_episodes=1))
        rows = trainer.train_task(0, 256)
        assert [r["env_step"] for r in rows] == [128, 256]
        for key in ("episode_return", "critic_loss", "actor_loss",
                    "contrastive_loss", "alpha"):
            assert key in rows[0]


# ---------------------------------------------------------------- transfer

class TestTransfer:
    def _trained(self):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 200)
        return trainer

    def test_transfer_changes_no_preexisting_bit(self):
        trainer = self._trained()
        enc_before = param_snapshot(trainer.encoder)
        heads_before = param_snapshot(trainer.tasks[0].actor)
        task = trainer.transfer_to("cartpole-balance-sparse", init_from_task=0)
        assert task == 1
        for n, p in trainer.encoder.named_parameters():
            if n in enc_before:
                assert torch.equal(enc_before[n], p), n
        for n, p in trainer.tasks[0].actor.named_parameters():
            assert torch.equal(heads_before[n], p), n

    def test_new_token_copies_source(self):
        trainer = self._trained()
        trainer.transfer_to("cartpole-swingup", init_from_task=0)
        assert torch.equal(trainer.encoder.policy_tokens[1],
                           trainer.encoder.policy_tokens[0])

    def test_encoder_lr_scaled_tokens_not(self):
        trainer = self._trained()
        trainer.transfer_to("cartpole-swingup", init_from_task=0, alpha_l=0.05)
        groups = trainer.encoder_opt.param_groups
        lr = trainer.cfg.lr
        assert groups[0]["lr"] == pytest.approx(lr * 0.05)
        assert groups[1]["lr"] == pytest.approx(lr * 0.05)
        assert groups[2]["lr"] == pytest.approx(lr)   # policy tokens stay at base LR
        assert groups[0]["weight_decay"] == trainer.cfg.encoder_weight_decay
        assert groups[1]["weight_decay"] == 0.0 and groups[2]["weight_decay"] == 0.0

    def test_old_replay_dropped(self):
        trainer = self._trained()
        assert len(trainer.replay) > 0
        trainer.transfer_to("cartpole-swingup", init_from_task=0)
        assert len(trainer.replay) == 0

    def test_head_isolation_under_new_task_updates(self):
        trainer = self._trained()
        trainer.transfer_to("cartpole-balance-sparse", init_from_task=0)
        old_actor = param_snapshot(trainer.tasks[0].actor)
        old_critic = param_snapshot(trainer.tasks[0].critic)
        old_alpha = trainer.tasks[0].log_alpha.detach().clone()
        trainer.train_task(1, 200)
        for n, p in trainer.tasks[0].actor.named_parameters():
            assert torch.equal(old_actor[n], p), n
        for n, p in trainer.tasks[0].critic.named_parameters():
            assert torch.equal(old_critic[n], p), n
        assert torch.equal(old_alpha, trainer.tasks[0].log_alpha)

    def test_bad_source_task(self):
        trainer = self._trained()
        with pytest.raises(UnknownTaskError):
            trainer.transfer_to("cartpole-swingup", init_from_task=5)


# ---------------------------------------------------------------- evaluation

class TestEvaluation:
    def test_retest_is_pure_and_repeatable(self):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 200)
        before = param_snapshot(trainer.encoder)
        m1, s1 = trainer.retest(0, episodes=2)
        m2, s2 = trainer.retest(0, episodes=2)
        assert (m1, s1) == (m2, s2)
        for n, p in trainer.encoder.named_parameters():
            assert torch.equal(before[n], p), n

    def test_retest_untrained_task_rejected(self):
        trainer = Trainer(micro_cfg())
        with pytest.raises(RuntimeError):
            trainer.retest(0)

    def test_evaluate_unknown_task(self):
        trainer = Trainer(micro_cfg())
        with pytest.raises(UnknownTaskError):
            trainer.evaluate(3)

    def test_random_baseline_deterministic(self):
        b1 = random_policy_baseline("cartpole-balance", episodes=2, seed=0)
        b2 = random_policy_baseline("cartpole-balance", episodes=2, seed=0)
        assert b1 == b2
        assert 0.0 <= b1 <= 1000.0
