"""Command-line entry points: train / transfer / retest / viz / selftest."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import diagnostics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .envs import make_env, obs_to_tensor
from .numerics import NonFiniteError
from .transfer import Trainer

CSV_COLUMNS = ["env_step", "episode_return", "critic_loss", "actor_loss",
               "contrastive_loss", "alpha"]


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _write_metrics(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([f"{row[c]:.10g}" if isinstance(row[c], float) else row[c]
                             for c in CSV_COLUMNS])


def _write_manifest(out_dir: Path, trainer: Trainer, ckpt_path: Path,
                    chains_from: str | None = None):
    lines = ["# effective configuration"]
    lines += trainer.cfg.to_text().splitlines()
    lines.append(f"encoder_lr_scale={trainer.encoder_lr_scale!r}")
    if chains_from:
        lines.append(f"chains_from={chains_from}")
    lines.append("# tasks (id env env_steps)")
    for rec in trainer.tasks:
        lines.append(f"task={rec.task_id} {rec.env_name} {rec.env_steps}")
    lines.append(f"checkpoint={ckpt_path}")
    _atomic_write_text(out_dir / "run_manifest.txt", "\n".join(lines) + "\n")


def _run_training(trainer: Trainer, task: int, steps: int, out_dir: Path,
                  chains_from: str | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = trainer.tasks[task]
    ckpt_path = out_dir / f"task{task}_final.ckpt"
    rows: list[dict] = []

    def on_eval(row):
        rows.append(row)
        save_checkpoint(out_dir / f"task{task}_step{row['env_step']}.ckpt", trainer)
        _write_metrics(out_dir / f"task{task}_{rec.env_name}.csv", rows)

    try:
        trainer.train_task(task, steps, on_eval=on_eval)
    except NonFiniteError:
        save_checkpoint(out_dir / f"task{task}_nan_abort.ckpt", trainer)
        raise
    save_checkpoint(ckpt_path, trainer)
    _write_metrics(out_dir / f"task{task}_{rec.env_name}.csv", rows)
    _write_manifest(out_dir, trainer, ckpt_path, chains_from)
    return ckpt_path


def cmd_train(args) -> int:
    cfg = load_config(args.config, _parse_overrides(args.set), desk_scale=args.desk)
    if args.env:
        cfg.env = args.env
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_env_steps = args.steps
    trainer = Trainer(cfg)
    ckpt = _run_training(trainer, 0, cfg.total_env_steps, Path(args.out))
    print(f"trained {cfg.env} for {cfg.total_env_steps} env steps -> {ckpt}")
    return 0


def cmd_transfer(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    task = trainer.transfer_to(args.env, init_from_task=len(trainer.tasks) - 1,
                               alpha_l=args.alpha_l)
    steps = args.steps if args.steps is not None else trainer.cfg.total_env_steps
    ckpt = _run_training(trainer, task, steps, Path(args.out),
                         chains_from=str(args.checkpoint))
    print(f"transferred to {args.env} (task {task}, alpha_l="
          f"{trainer.encoder_lr_scale}) -> {ckpt}")
    return 0


def cmd_retest(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    mean, std = trainer.retest(args.task, episodes=args.episodes)
    print(f"task {args.task} ({trainer.tasks[args.task].env_name}): "
          f"{mean:.2f} +- {std:.2f} over {args.episodes} episodes")
    return 0


def cmd_viz(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = trainer.tasks[args.task]
    env = make_env(args.obs_env or rec.env_name)
    obs = env.reset(args.obs_seed)
    obs_t = obs_to_tensor(obs).unsqueeze(0)

    trace = diagnostics.capture_trace(trainer.encoder, obs_t, args.task)
    saliency = diagnostics.grad_rollout(
        trace.attentions, trace.gradients(), trainer.encoder.cfg,
        trainer.encoder.num_tasks, args.task, discard_ratio=args.discard_ratio,
    )
    ppm_path = out_dir / f"rollout_task{args.task}.ppm"
    diagnostics.write_ppm(ppm_path, diagnostics.heatmap_to_rgb(saliency))

    sim = diagnostics.token_similarity(list(trainer.encoder.policy_tokens))
    csv_path = out_dir / "token_similarity.csv"
    diagnostics.write_similarity_csv(csv_path, sim, [r.env_name for r in trainer.tasks])
    print(f"wrote {ppm_path} and {csv_path}")
    return 0


def cmd_selftest(args) -> int:
    """Quick invariant sweep over the core modules."""
    from . import contrastive, numerics, sac
    from .encoder import EncoderConfig, PyramidEncoder
    from .envs import apply_shift

    torch.manual_seed(0)
    checks: list[tuple[str, bool]] = []

    x = torch.randn(4, 7, dtype=torch.float64)
    checks.append(("softmax rows sum to 1",
                   torch.allclose(numerics.softmax(x).sum(-1), torch.ones(4, dtype=torch.float64))))
    err = numerics.grad_check(lambda t: (t ** 2).sum().reshape(1), torch.tensor([3.0]))
    checks.append(("grad_check quadratic", err < 1e-8))

    cfg = EncoderConfig(image_size=84, patch_size=6, embed_dim=12, stages=3,
                        blocks_per_stage=1, heads=2, state_dim=5)
    enc = PyramidEncoder(cfg, num_tasks=2)
    z = enc.encode(torch.rand(1, 9, 84, 84))
    checks.append(("token count 1+K+49", z.shape[1] == 1 + 2 + 49))

    p = torch.tensor([[1.0, 0.0]])
    checks.append(("byol orthogonal = 2",
                   abs(float(contrastive.byol_loss(p, torch.tensor([[0.0, 1.0]]))) - 2.0) < 1e-12))
    checks.append(("tau schedule endpoints",
                   contrastive.tau_schedule(0, 10) == 0.996 and contrastive.tau_schedule(10, 10) == 1.0))

    img = np.arange(84 * 84 * 3, dtype=np.uint8).reshape(84, 84, 3) % 251
    checks.append(("zero shift is identity", np.array_equal(apply_shift(img, 0, 0), img)))

    buf = sac.ReplayBuffer(capacity=3)
    for i in range(4):
        buf.push(sac.Transition(np.zeros((2, 2, 1), np.uint8), np.zeros(1, np.float32),
                                float(i), np.zeros((2, 2, 1), np.uint8), False))
    checks.append(("ring eviction", len(buf) == 3 and buf._data[0].reward == 3.0))

    failed = 0
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenrl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one task from scratch")
    p.add_argument("--env", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--config", default=None)
    p.add_argument("--desk", action="store_true", help="desk-scale preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="pad a policy token and fine-tune on a new env")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--alpha-l", dest="alpha_l", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default="runs/transfer")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("retest", help="frozen evaluation of an earlier task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_retest)

    p = sub.add_parser("viz", help="attention rollout heatmap + token similarity CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", default="runs/viz")
    p.add_argument("--obs-env", default=None)
    p.add_argument("--obs-seed", type=int, default=0)
    p.add_argument("--discard-ratio", type=float, default=0.9)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("selftest", help="run the quick invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
