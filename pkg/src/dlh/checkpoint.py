"""Checkpoint serialization.

A checkpoint is a torch.save payload of plain containers plus tensors,
loadable with ``weights_only=True``. Every file starts life under a
temporary name and is moved into place, so a crash mid-write never
clobbers the previous checkpoint.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch

from .networks import HierarchyModel, ModelConfig

MAGIC = "DLH-CKPT-v1"


class CheckpointError(RuntimeError):
    """Unreadable, foreign or version-mismatched checkpoint file."""


@dataclass
class CheckpointPayload:
    model: HierarchyModel
    iteration: int
    optimizer_state: Optional[dict]
    torch_rng: Optional[torch.Tensor]
    sampler_state: Optional[dict]
    train_config: Optional[dict]


def model_config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a ModelConfig, coercing sequence fields back to tuples."""
    kwargs = dict(d)
    for key in ("frame_shape", "conv_channels", "head_hidden"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def save_checkpoint(
    path: str | Path,
    model: HierarchyModel,
    optimizer: Optional[torch.optim.Optimizer] = None,
    iteration: int = 0,
    torch_generator: Optional[torch.Generator] = None,
    sampler_state: Optional[dict] = None,
    train_config=None,
) -> None:
    payload = {
        "magic": MAGIC,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "torch_rng": torch_generator.get_state() if torch_generator is not None else None,
        "sampler_state": sampler_state,
        "train_config": asdict(train_config) if train_config is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> CheckpointPayload:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as exc:  # unreadable or unsafe payload
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "magic" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint (no magic)")
    if payload["magic"] != MAGIC:
        raise CheckpointError(
            f"{path} has magic {payload['magic']!r}, expected {MAGIC!r}"
        )
    model = HierarchyModel(model_config_from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    return CheckpointPayload(
        model=model,
        iteration=int(payload.get("iteration", 0)),
        optimizer_state=payload.get("optimizer_state"),
        torch_rng=payload.get("torch_rng"),
        sampler_state=payload.get("sampler_state"),
        train_config=payload.get("train_config"),
    )
