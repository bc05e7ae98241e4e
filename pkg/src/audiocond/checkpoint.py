"""Versioned checkpoint container: model weights, codec basis, config, and
optional trainer state (optimizer moments + rng) for exact resume."""

from __future__ import annotations

from typing import Any

import numpy as np
import torch

from .codec import LatentCodec
from .errors import ParseError
from .model import ConditionedDiffusionModel, ModelConfig, build_model
from .tensorio import read_container, write_container

CHECKPOINT_KIND = "audiocond/checkpoint"


def save_checkpoint(
    path,
    model: ConditionedDiffusionModel,
    codec: LatentCodec,
    meta: dict[str, Any] | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {
        f"model.{name}": value.detach().cpu().numpy() for name, value in model.state_dict().items()
    }
    tensors["codec.basis"] = codec.basis
    full_meta = {
        "kind": CHECKPOINT_KIND,
        "config": model.cfg.to_dict(),
        "codec_frame_size": codec.frame_size,
    }
    full_meta.update(meta or {})
    tensors.update(extra_tensors or {})
    write_container(path, tensors, full_meta)


def load_checkpoint(path) -> tuple[ConditionedDiffusionModel, LatentCodec, dict[str, Any], dict[str, np.ndarray]]:
    """Returns (model, codec, meta, extra_tensors-not-part-of-the-model)."""
    tensors, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ParseError(f"{path}: not an audiocond checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    codec = LatentCodec(frame_size=int(meta["codec_frame_size"]), basis=tensors.pop("codec.basis"))
    model, _ = build_model(cfg, codec=codec, seed=0)
    state = {}
    extras = {}
    for name, arr in tensors.items():
        if name.startswith("model."):
            state[name[len("model.") :]] = torch.from_numpy(arr.copy())
        else:
            extras[name] = arr
    model.load_state_dict(state)
    return model, codec, meta, extras
