"""Adapter fine-tuning loop: only adapters, feature extractors, and zero-init
combiners receive gradients; the backbone stays frozen throughout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import dataio
from .codec import LatentCodec
from .conditioners import (
    ConditionMask,
    DynamicsCondition,
    MelodyCondition,
    RhythmCondition,
    extract_dynamics,
    extract_melody,
    extract_rhythm,
    sample_training_masks,
)
from .diffusion import apply_condition_dropout, noisy_latent, v_target
from .errors import ConfigError, DivergenceError, InvalidInputError
from .model import ConditionedDiffusionModel, ModelConfig

ADAPTER_CHOICES = ("attr", "audio", "melody-only")
DEFAULT_LR = 1e-4
DEFAULT_WEIGHT_DECAY = 1e-2


@dataclass
class PreparedClip:
    latent: np.ndarray  # (M, A) scaled clean latent
    text: np.ndarray  # (Lt, model_dim)
    melody: MelodyCondition | None = None
    dynamics: DynamicsCondition | None = None
    rhythm: RhythmCondition | None = None


@dataclass
class TrainingBatch:
    x0: torch.Tensor  # (B, M, A)
    eps: torch.Tensor  # (B, M, A)
    t: torch.Tensor  # (B,)
    text: torch.Tensor | None = None
    text_mask: torch.Tensor | None = None
    attr: torch.Tensor | None = None
    audio: torch.Tensor | None = None
    drops: dict = field(default_factory=dict)


def prepare_clips(
    records: list[dataio.ClipRecord],
    cfg: ModelConfig,
    codec: LatentCodec,
    clip_seconds: float,
    adapter: str,
) -> list[PreparedClip]:
    """Load, encode, and condition-extract every training clip up front."""
    if adapter not in ADAPTER_CHOICES:
        raise ConfigError(f"adapter must be one of {ADAPTER_CHOICES}, got {adapter!r}")
    clips = []
    for rec in records:
        audio = dataio.load_audio(rec.audio_path, segment_s=clip_seconds)[0]
        latent = codec.encode(audio).frames * cfg.latent_scale
        clip = PreparedClip(latent=latent, text=dataio.encode_text(rec.caption, cfg.model_dim, cfg.max_text_tokens))
        if adapter in ("attr", "melody-only"):
            clip.melody = extract_melody(audio)
            if adapter == "attr":
                clip.dynamics = extract_dynamics(audio)
                clip.rhythm = extract_rhythm(audio)
        clips.append(clip)
    if not clips:
        raise InvalidInputError("no training clips in manifest")
    lengths = {c.latent.shape[0] for c in clips}
    if len(lengths) > 1:
        raise InvalidInputError(f"clips have differing latent lengths {sorted(lengths)}")
    return clips


def training_step(model: ConditionedDiffusionModel, batch: TrainingBatch, optimizer: torch.optim.Optimizer) -> float:
    """One v-prediction MSE step over the trainable parameters."""
    x_t = noisy_latent(batch.x0, batch.eps, batch.t)
    target = v_target(batch.x0, batch.eps, batch.t)
    pred = model(
        x_t,
        batch.t,
        text=batch.text,
        text_mask=batch.text_mask,
        attr=batch.attr,
        audio=batch.audio,
    )
    loss = torch.mean((pred - target) ** 2)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss.item()}")
    if loss.requires_grad:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    # iterations whose conditions were all dropped touch only frozen paths
    # and carry no gradient; they still report their loss
    return float(loss.item())


class AdapterTrainer:
    """Owns the rng, optimizer, and batching for one adapter pipeline."""

    def __init__(
        self,
        model: ConditionedDiffusionModel,
        clips: list[PreparedClip],
        adapter: str,
        seed: int = 0,
        batch_size: int = 8,
        lr: float = DEFAULT_LR,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
        cond_dropout: bool = True,
        random_masking: bool = True,
    ):
        if adapter not in ADAPTER_CHOICES:
            raise ConfigError(f"adapter must be one of {ADAPTER_CHOICES}, got {adapter!r}")
        self.model = model
        self.clips = clips
        self.adapter = adapter
        self.kind = "audio" if adapter == "audio" else "attribute"
        self.batch_size = batch_size
        # cond_dropout/random_masking implement the standard protocol; the
        # overfit benchmark disables them, since with a frozen backbone a
        # dropped-condition iteration has no trainable gradient path at all
        self.cond_dropout = cond_dropout
        self.random_masking = random_masking
        self.rng = np.random.default_rng(seed)
        self.optimizer = torch.optim.AdamW(
            model.trainable_parameters(self.kind), lr=lr, weight_decay=weight_decay
        )
        self.step_count = 0
        self.losses: list[float] = []
        self.m = clips[0].latent.shape[0]

    def make_batch(self) -> TrainingBatch:
        rng = self.rng
        cfg = self.model.cfg
        idx = rng.integers(0, len(self.clips), self.batch_size)
        t = rng.uniform(0.0, 1.0, self.batch_size)
        x0 = np.stack([self.clips[i].latent for i in idx])
        eps = rng.standard_normal(x0.shape).astype(np.float32)

        present = {"text": True}
        present["attr" if self.kind == "attribute" else "audio"] = True
        if self.cond_dropout:
            kept, drops = apply_condition_dropout(rng, present)
        else:
            kept, drops = present, {}

        batch = TrainingBatch(
            x0=torch.from_numpy(x0.astype(np.float32)),
            eps=torch.from_numpy(eps),
            t=torch.from_numpy(t.astype(np.float32)),
            drops=drops,
        )
        if kept.get("text"):
            texts = [self.clips[i].text for i in idx]
            lmax = max(len(x) for x in texts)
            text = np.zeros((self.batch_size, lmax, cfg.model_dim), dtype=np.float32)
            mask = np.zeros((self.batch_size, lmax), dtype=bool)
            for b, emb in enumerate(texts):
                text[b, : len(emb)] = emb
                mask[b, : len(emb)] = True
            batch.text = torch.from_numpy(text)
            batch.text_mask = torch.from_numpy(mask)
        if kept.get("attr"):
            feats = []
            for i in idx:
                clip = self.clips[i]
                if self.random_masking:
                    lengths = (
                        clip.melody.frames.shape[0] if clip.melody else 1,
                        clip.dynamics.curve.shape[0] if clip.dynamics else 1,
                        clip.rhythm.probs.shape[0] if clip.rhythm else 1,
                    )
                    masks = tuple(sample_training_masks(rng, lengths))
                else:
                    masks = (None, None, None)
                feats.append(
                    self.model.extractors.featurize(
                        clip.melody, clip.dynamics, clip.rhythm,
                        masks, self.m,
                        fixed_projection=cfg.ablations.disable_extractor,
                    )
                )
            batch.attr = torch.stack(feats)
        if kept.get("audio"):
            if self.random_masking:
                keeps = [sample_training_masks(rng, (self.m,))[0].keep for _ in idx]
                keep = torch.from_numpy(np.stack(keeps).astype(np.float32))
                batch.audio = batch.x0 * keep[:, :, None]
            else:
                batch.audio = batch.x0.clone()
        return batch

    def step(self) -> float:
        loss = training_step(self.model, self.make_batch(), self.optimizer)
        self.step_count += 1
        self.losses.append(loss)
        return loss

    def run(self, steps: int) -> list[float]:
        for _ in range(steps):
            self.step()
        return self.losses

    # --- state for exact resume ---------------------------------------------

    def trainable_named(self) -> list[tuple[str, torch.nn.Parameter]]:
        ids = {id(p) for p in self.model.trainable_parameters(self.kind)}
        return [(n, p) for n, p in self.model.named_parameters() if id(p) in ids]

    def export_state(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors: dict[str, np.ndarray] = {}
        meta = {
            "step_count": self.step_count,
            "rng_state": self.rng.bit_generator.state,
            "adapter": self.adapter,
        }
        opt_steps = {}
        for name, p in self.trainable_named():
            state = self.optimizer.state.get(p)
            if state:
                tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].numpy()
                tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
                opt_steps[name] = float(state["step"])
        meta["opt_steps"] = opt_steps
        return tensors, meta

    def restore_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.step_count = int(meta["step_count"])
        self.rng.bit_generator.state = meta["rng_state"]
        opt_steps = meta.get("opt_steps", {})
        for name, p in self.trainable_named():
            if name in opt_steps:
                self.optimizer.state[p] = {
                    "step": torch.tensor(opt_steps[name]),
                    "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
                }
