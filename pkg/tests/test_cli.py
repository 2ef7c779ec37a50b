import numpy as np
import pytest
import torch

from tokenrl import cli
from tokenrl.checkpoint import (CheckpointError, load_checkpoint,
                                read_manifest, save_checkpoint)
from tokenrl.config import RunConfig
from tokenrl.transfer import Trainer


def micro_overrides():
    return [
        "total_env_steps=256", "eval_interval=128", "eval_episodes=1",
        "embed_dim=16", "stages=1", "blocks_per_stage=1", "heads=2",
        "mlp_ratio=2", "state_dim=6", "hidden_dim=32", "batch_size=8",
        "replay_capacity=512", "seed_steps=96",
    ]


def micro_cfg(**kw):
    base = dict(
        env="cartpole-balance", seed=5, total_env_steps=256,
        eval_interval=128, eval_episodes=1,
        embed_dim=16, stages=1, blocks_per_stage=1, heads=2, mlp_ratio=2,
        state_dim=6, hidden_dim=32, batch_size=8, replay_capacity=512,
        seed_steps=96,
    )
    base.update(kw)
    return RunConfig(**base)


def run(args):
    return cli.main(args)


# ---------------------------------------------------------------- checkpoint

class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 200)
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, trainer)
        loaded = load_checkpoint(p)
        for (n, p1), (_, p2) in zip(trainer.encoder.named_parameters(),
                                    loaded.encoder.named_parameters()):
            assert torch.equal(p1, p2), n
        for (n, p1), (_, p2) in zip(trainer.tasks[0].critic_target.named_parameters(),
                                    loaded.tasks[0].critic_target.named_parameters()):
            assert torch.equal(p1, p2), n
        assert torch.equal(trainer.tasks[0].log_alpha, loaded.tasks[0].log_alpha)
        assert loaded.update_count == trainer.update_count
        assert loaded.contrastive.step == trainer.contrastive.step
        assert loaded.tasks[0].env_steps == trainer.tasks[0].env_steps

    def test_save_is_atomic(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, trainer)
        assert p.exists()
        assert not p.with_suffix(".ckpt.tmp").exists()

    def test_round_trip_preserves_transfer_chain(self, tmp_path):
        trainer = Trainer(micro_cfg())
        trainer.train_task(0, 200)
        trainer.transfer_to("cartpole-swingup", init_from_task=0, alpha_l=0.06)
        p = tmp_path / "b.ckpt"
        save_checkpoint(p, trainer)
        loaded = load_checkpoint(p)
        assert [r.env_name for r in loaded.tasks] == [r.env_name for r in trainer.tasks]
        assert loaded.encoder_lr_scale == pytest.approx(0.06)
        assert torch.equal(loaded.encoder.policy_tokens[1], trainer.encoder.policy_tokens[1])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOT-A-CKPT 1\nEND\n")
        with pytest.raises(CheckpointError, match="not a"):
            read_manifest(p)

    def test_bad_version_rejected(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "v.ckpt"
        save_checkpoint(p, trainer)
        data = p.read_bytes()
        p.write_bytes(data.replace(b"TOKENRL-CKPT 1\n", b"TOKENRL-CKPT 9\n", 1))
        with pytest.raises(CheckpointError, match="version"):
            read_manifest(p)

    def test_truncated_data_rejected(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, trainer)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 64])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_missing_end_rejected(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "e.ckpt"
        save_checkpoint(p, trainer)
        header = p.read_bytes().split(b"END\n", 1)[0]
        p.write_bytes(header)
        with pytest.raises(CheckpointError, match="no END"):
            read_manifest(p)

    def test_unknown_section_rejected(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "s.ckpt"
        save_checkpoint(p, trainer)
        data = p.read_bytes().replace(b"tensor encoder/", b"tensor sneaky/", 1)
        p.write_bytes(data)
        with pytest.raises(CheckpointError, match="unknown section"):
            read_manifest(p)

    def test_shape_mismatch_rejected(self, tmp_path):
        trainer = Trainer(micro_cfg())
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, trainer)
        data = p.read_bytes().replace(b"tensor encoder/head.bias 6 ",
                                      b"tensor encoder/head.bias 7 ", 1)
        p.write_bytes(data)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(p)


# ---------------------------------------------------------------- CLI

def train_args(out, extra=()):
    args = ["train", "--env", "cartpole-balance", "--seed", "5", "--out", str(out)]
    for kv in micro_overrides():
        args += ["--set", kv]
    return args + list(extra)


class TestCli:
    def test_train_writes_outputs(self, tmp_path):
        out = tmp_path / "run"
        assert run(train_args(out)) == 0
        csv_path = out / "task0_cartpole-balance.csv"
        assert (out / "task0_final.ckpt").exists()
        assert csv_path.exists()
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == ",".join(cli.CSV_COLUMNS)
        assert len(lines) == 3  # 2 eval rows at 128-step interval

    def test_rerun_is_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run(train_args(out1))
        run(train_args(out2))
        c1 = (out1 / "task0_cartpole-balance.csv").read_bytes()
        c2 = (out2 / "task0_cartpole-balance.csv").read_bytes()
        assert c1 == c2

    def test_manifest_echoes_config(self, tmp_path):
        out = tmp_path / "run"
        run(train_args(out))
        text = (out / "run_manifest.txt").read_text()
        assert "env=cartpole-balance" in text
        assert "seed=5" in text
        assert "task=0 cartpole-balance 256" in text

    def test_transfer_chains_and_retest(self, tmp_path, capsys):
        out1 = tmp_path / "r1"
        run(train_args(out1))
        out2 = tmp_path / "r2"
        code = run(["transfer", "--checkpoint", str(out1 / "task0_final.ckpt"),
                    "--env", "cartpole-balance-sparse", "--steps", "256",
                    "--out", str(out2)])
        assert code == 0
        manifest = (out2 / "run_manifest.txt").read_text()
        assert "chains_from=" in manifest
        assert "task=1 cartpole-balance-sparse 256" in manifest

        code = run(["retest", "--checkpoint", str(out2 / "task1_final.ckpt"),
                    "--task", "0", "--episodes", "1"])
        assert code == 0
        assert "task 0 (cartpole-balance)" in capsys.readouterr().out

    def test_viz_outputs(self, tmp_path):
        out = tmp_path / "run"
        run(train_args(out))
        viz = tmp_path / "viz"
        code = run(["viz", "--checkpoint", str(out / "task0_final.ckpt"),
                    "--task", "0", "--out", str(viz)])
        assert code == 0
        ppm = (viz / "rollout_task0.ppm").read_bytes()
        assert ppm.startswith(b"P6\n")
        sim = (viz / "token_similarity.csv").read_text().splitlines()
        assert sim[0] == "task,cartpole-balance"

    def test_selftest_passes(self, capsys):
        assert run(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "PASS" in out

    def test_bad_override_rejected(self):
        with pytest.raises(SystemExit):
            run(["train", "--set", "no-equals-sign"])
