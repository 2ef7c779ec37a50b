"""Checkpoint format: a text manifest followed by raw float32 blobs.

Layout:

    TOKENRL-CKPT 1
    config <key>=<value>          # effective run config, one per line
    state <key>=<value>           # trainer counters (update count, tau step, ...)
    task <id> <env_steps> <env_name>
    tensor <name> <d0,d1,...|scalar> <offset> <nbytes>
    END
    <contiguous little-endian float32 data>

Tensor names are grouped into sections (encoder/, contrastive_online/,
contrastive_target/, tau_state/, actor/<task>/, critics/<task>/,
critic_targets/<task>/, log_alpha/<task>); unknown sections are rejected.
Integer buffers (e.g. batch-norm counters) are stored as float32 and cast
back on load. load(save(x)) is bitwise x for all float32 parameters.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

MAGIC = "TOKENRL-CKPT"
VERSION = 1

_SECTIONS = (
    "encoder/",
    "contrastive_online/",
    "contrastive_target/",
    "tau_state/",
    "actor/",
    "critics/",
    "critic_targets/",
    "log_alpha/",
)


class CheckpointError(ValueError):
    pass


def _named_tensors(trainer) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for k, v in trainer.encoder.state_dict().items():
        out[f"encoder/{k}"] = v
    for k, v in trainer.contrastive.projector.state_dict().items():
        out[f"contrastive_online/projector.{k}"] = v
    for k, v in trainer.contrastive.predictor.state_dict().items():
        out[f"contrastive_online/predictor.{k}"] = v
    for k, v in trainer.contrastive.target_encoder.state_dict().items():
        out[f"contrastive_target/encoder.{k}"] = v
    for k, v in trainer.contrastive.target_projector.state_dict().items():
        out[f"contrastive_target/projector.{k}"] = v
    out["tau_state/step"] = torch.tensor(float(trainer.contrastive.step))
    for rec in trainer.tasks:
        i = rec.task_id
        for k, v in rec.actor.state_dict().items():
            out[f"actor/task{i}/{k}"] = v
        for k, v in rec.critic.state_dict().items():
            out[f"critics/task{i}/{k}"] = v
        for k, v in rec.critic_target.state_dict().items():
            out[f"critic_targets/task{i}/{k}"] = v
        out[f"log_alpha/task{i}"] = rec.log_alpha.detach()
    return out


def save_checkpoint(path: str | Path, trainer) -> None:
    """Atomic (write-temp-then-rename) checkpoint of all trainable state."""
    path = Path(path)
    tensors = _named_tensors(trainer)
    header = [f"{MAGIC} {VERSION}"]
    header += [f"config {line}" for line in trainer.cfg.to_text().splitlines()]
    header.append(f"state update_count={trainer.update_count}")
    header.append(f"state encoder_lr_scale={trainer.encoder_lr_scale!r}")
    header.append(f"state contrastive_total_steps={trainer.contrastive.total_steps}")
    for rec in trainer.tasks:
        header.append(f"task {rec.task_id} {rec.env_steps} {rec.env_name}")

    blobs: list[bytes] = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        shape = ",".join(str(d) for d in t.shape) or "scalar"
        header.append(f"tensor {name} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    header.append("END")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> dict:
    """Parse the text header; returns config/state/tasks/tensor index."""
    meta = {"config": {}, "state": {}, "tasks": [], "tensors": {}}
    with open(path, "rb") as f:
        first = f.readline().decode().split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path}: not a {MAGIC} file")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"{path}: version {first[1]} != supported {VERSION}")
        while True:
            line = f.readline().decode()
            if not line:
                raise CheckpointError(f"{path}: truncated header (no END)")
            line = line.rstrip("\n")
            if line == "END":
                meta["data_start"] = f.tell()
                break
            kind, rest = line.split(" ", 1)
            if kind == "config":
                key, value = rest.split("=", 1)
                meta["config"][key] = value
            elif kind == "state":
                key, value = rest.split("=", 1)
                meta["state"][key] = value
            elif kind == "task":
                tid, steps, env = rest.split(" ", 2)
                meta["tasks"].append({"id": int(tid), "env_steps": int(steps), "env": env})
            elif kind == "tensor":
                name, shape, offset, nbytes = rest.rsplit(" ", 3)
                if not name.startswith(_SECTIONS):
                    raise CheckpointError(f"{path}: unknown section for tensor {name!r}")
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split(","))
                meta["tensors"][name] = (dims, int(offset), int(nbytes))
            else:
                raise CheckpointError(f"{path}: unknown header line kind {kind!r}")
    return meta


def load_checkpoint(path: str | Path):
    """Rebuild a Trainer from a checkpoint."""
    from .config import RunConfig, apply_overrides
    from .transfer import Trainer

    path = Path(path)
    meta = read_manifest(path)
    cfg = apply_overrides(RunConfig(), meta["config"])
    tasks = sorted(meta["tasks"], key=lambda t: t["id"])
    if not tasks:
        raise CheckpointError(f"{path}: no tasks recorded")

    trainer = Trainer(cfg, first_env=tasks[0]["env"])
    for t in tasks[1:]:
        trainer.transfer_to(t["env"], init_from_task=t["id"] - 1)
    for t in tasks:
        trainer.tasks[t["id"]].env_steps = t["env_steps"]
    trainer.update_count = int(meta["state"].get("update_count", 0))
    trainer.encoder_lr_scale = float(meta["state"].get("encoder_lr_scale", 1.0))
    trainer.contrastive.total_steps = int(meta["state"].get(
        "contrastive_total_steps", trainer.contrastive.total_steps))
    trainer._build_encoder_optimizer()

    expected = _named_tensors(trainer)
    missing = set(expected) - set(meta["tensors"])
    extra = set(meta["tensors"]) - set(expected)
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {sorted(missing)[:5]}, "
            f"unexpected {sorted(extra)[:5]})"
        )

    file_size = path.stat().st_size
    with open(path, "rb") as f:
        for name, (dims, offset, nbytes) in meta["tensors"].items():
            dest = expected[name]
            if tuple(dest.shape) != dims:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: file {dims}, "
                    f"model {tuple(dest.shape)}"
                )
            if meta["data_start"] + offset + nbytes > file_size:
                raise CheckpointError(f"{path}: truncated data for {name}")
            f.seek(meta["data_start"] + offset)
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated data for {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
            with torch.no_grad():
                dest.copy_(torch.from_numpy(arr.copy()).to(dest.dtype))

    # state_dict tensors returned by _named_tensors alias the live modules for
    # parameters, but log_alpha was detached; restore it explicitly.
    for rec in trainer.tasks:
        name = f"log_alpha/task{rec.task_id}"
        dims, offset, nbytes = meta["tensors"][name]
        with open(path, "rb") as f:
            f.seek(meta["data_start"] + offset)
            val = np.frombuffer(f.read(nbytes), dtype="<f4")
        with torch.no_grad():
            rec.log_alpha.copy_(torch.tensor(float(val[0])))
    trainer.contrastive.step = int(
        float(np.frombuffer(_read_tensor_bytes(path, meta, "tau_state/step"), dtype="<f4")[0])
    )
    return trainer


def _read_tensor_bytes(path, meta, name: str) -> bytes:
    dims, offset, nbytes = meta["tensors"][name]
    with open(path, "rb") as f:
        f.seek(meta["data_start"] + offset)
        return f.read(nbytes)
