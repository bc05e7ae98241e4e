"""Toy frozen diffusion Transformer with decoupled cross-attention adapters.

Every block runs (pre-LN) self-attention, frozen text cross-attention, the
two adapter branches, and an MLP. Only the adapters, the condition feature
extractors, and the zero-init combiners are trainable; everything else is
frozen at construction.

The frozen input/output projections are transposes of each other and span a
fixed low-frequency analysis basis of the audio frame (DCT components up to
model_dim/2 per channel, mixed by a seeded rotation). A randomly initialized
frozen backbone has no useful structure of its own, so this stands in for the
band-aware representations a pretrained model would have learned: adapters
can then steer content anywhere in the musically relevant band, while the
model remains blind outside it.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import (
    AttentionCapture,
    DecoupledAdapter,
    FrozenAttentionWeights,
    combine,
    decoupled_cross_attention,
    text_cross_attention,
)
from .codec import LatentCodec
from .conditioners import ConditionExtractors
from .errors import ConfigError
from .rope import build_angles, rotation_tables, apply_rotation


@dataclass
class Ablations:
    disable_rope: bool = False
    disable_extractor: bool = False
    disable_zero_cnn: bool = False
    double_heads: bool = False
    literal_eq9: bool = False
    no_value_rotation: bool = False

    @classmethod
    def from_flags(cls, flags: list[str]) -> "Ablations":
        mapping = {
            "no-rope": "disable_rope",
            "no-extractor": "disable_extractor",
            "no-cnn": "disable_zero_cnn",
            "double-heads": "double_heads",
            "literal-eq9": "literal_eq9",
            "no-value-rotation": "no_value_rotation",
        }
        ab = cls()
        for f in flags:
            if f not in mapping:
                raise ConfigError(f"unknown ablation {f!r}; choose from {sorted(mapping)}")
            setattr(ab, mapping[f], True)
        return ab


@dataclass
class ModelConfig:
    blocks: int = 4
    model_dim: int = 288
    c_r: int = 288
    head_count: int = 4
    frame_size: int = 1024
    latent_scale: float = 4.0
    rope_base: float = 10000.0
    rope_self_attention: bool = True
    mlp_ratio: int = 4
    max_text_tokens: int = 64
    ablations: Ablations = field(default_factory=Ablations)

    @property
    def latent_channels(self) -> int:
        return 2 * self.frame_size

    def validate(self) -> None:
        if self.c_r % 3 != 0:
            raise ConfigError(f"C_r must be divisible by 3, got {self.c_r}")
        if self.c_r % self.head_count != 0:
            raise ConfigError(f"C_r {self.c_r} not divisible by head count {self.head_count}")
        dh = self.c_r // self.head_count
        if dh % 2 != 0:
            raise ConfigError(f"per-head dim {dh} must be even (rotary pairs)")
        if self.ablations.double_heads and (self.c_r % (2 * self.head_count) or (dh // 2) % 2):
            raise ConfigError("double-heads ablation needs C_r divisible by 2*heads with even halved head dim")
        if self.model_dim != self.c_r:
            # the combiner adds attention outputs (width C_r) straight into
            # the residual stream (width model_dim)
            raise ConfigError(f"model_dim must equal C_r, got {self.model_dim} vs {self.c_r}")
        if self.model_dim % 2 != 0 or self.model_dim > self.latent_channels:
            raise ConfigError(f"model_dim must be even and <= {self.latent_channels}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ablations"] = Ablations(**d.get("ablations", {}))
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of the continuous diffusion time t in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, np.log(max_freq), half, dtype=t.dtype))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def forward(self, h: torch.Tensor, rope_tables=None) -> torch.Tensor:
        b, m, d = h.shape
        dh = d // self.heads

        def split(x):
            return x.view(b, m, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.wq(h)), split(self.wk(h)), split(self.wv(h))
        if rope_tables is not None:
            cos, sin = rope_tables
            q = apply_rotation(q, cos, sin)
            k = apply_rotation(k, cos, sin)
        scores = torch.matmul(q, k.transpose(-1, -2)) * dh**-0.5
        out = torch.matmul(torch.softmax(scores, dim=-1), v)
        out = out.transpose(1, 2).reshape(b, m, d)
        return self.wo(out)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.model_dim
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ln3 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, cfg.head_count)
        self.cross = FrozenAttentionWeights(dim, cfg.c_r, cfg.head_count)
        self.attr_adapter = DecoupledAdapter(self.cross, kind="attribute")
        self.audio_adapter = DecoupledAdapter(self.cross, kind="audio")
        self.mlp = nn.Sequential(
            nn.Linear(dim, cfg.mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * dim, dim),
        )


class ConditionedDiffusionModel(nn.Module):
    """v-prediction network over latent sequences with adapter conditioning."""

    def __init__(self, cfg: ModelConfig, codec_basis: np.ndarray):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dim, a = cfg.model_dim, cfg.latent_channels
        self.in_proj = nn.Linear(a, dim, bias=False)
        self.out_proj = nn.Linear(dim, a, bias=False)
        with torch.no_grad():
            w_in = _band_analysis_matrix(cfg, codec_basis)
            self.in_proj.weight.copy_(torch.from_numpy(w_in))
            self.out_proj.weight.copy_(torch.from_numpy(w_in.T.copy()))
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.blocks))
        self.extractors = ConditionExtractors(cfg.c_r)
        self.audio_extractor = nn.Conv1d(a, cfg.c_r, kernel_size=3, padding=1, padding_mode="replicate")

        dh = cfg.c_r // cfg.head_count
        self.rope_spec = build_angles(dh, cfg.rope_base)
        self.cross_heads = cfg.head_count
        if cfg.ablations.double_heads:
            self.cross_heads = 2 * cfg.head_count
            self.cross_rope_spec = build_angles(dh // 2, cfg.rope_base)
        else:
            self.cross_rope_spec = self.rope_spec

        self._freeze_backbone()
        self.capture: AttentionCapture | None = None

    def _freeze_backbone(self) -> None:
        trainable = set()
        for kind in ("attribute", "audio"):
            trainable.update(id(p) for p in self.trainable_parameters(kind))
        for p in self.parameters():
            if id(p) not in trainable:
                p.requires_grad_(False)

    def trainable_parameters(self, kind: str):
        """Parameters trained for one adapter pipeline ('attribute' or 'audio')."""
        params = []
        for block in self.blocks:
            adapter = block.attr_adapter if kind == "attribute" else block.audio_adapter
            params.extend(adapter.parameters())
        if kind == "attribute":
            params.extend(self.extractors.parameters())
        else:
            params.extend(self.audio_extractor.parameters())
        return params

    def frozen_parameter_names(self) -> list[str]:
        trainable = {id(p) for k in ("attribute", "audio") for p in self.trainable_parameters(k)}
        return [n for n, p in self.named_parameters() if id(p) not in trainable]

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        state = dict(self.named_parameters())
        for name in sorted(self.frozen_parameter_names()):
            h.update(name.encode())
            h.update(state[name].detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def enable_capture(self) -> AttentionCapture:
        self.capture = AttentionCapture()
        return self.capture

    def disable_capture(self) -> None:
        self.capture = None

    def forward(
        self,
        x_t: torch.Tensor,  # (B, M, A) scaled latents
        t: torch.Tensor,  # (B,)
        text: torch.Tensor | None = None,  # (B, Lt, model_dim)
        text_mask: torch.Tensor | None = None,  # (B, Lt) bool
        attr: torch.Tensor | None = None,  # (B, M, C_r) fused attribute features
        audio: torch.Tensor | None = None,  # (B, M, A) masked audio-condition latent
        use_attr_adapter: bool = True,
        use_audio_adapter: bool = True,
    ) -> torch.Tensor:
        cfg = self.cfg
        b, m, _ = x_t.shape
        h = self.in_proj(x_t) + self.time_mlp(sinusoidal_embedding(t.to(x_t.dtype), cfg.model_dim))[:, None, :]
        if text is None:
            text = torch.zeros(b, 1, cfg.model_dim, dtype=x_t.dtype)
        if audio is not None and use_audio_adapter:
            audio_feat = self.audio_extractor(audio.transpose(1, 2)).transpose(1, 2)
        else:
            audio_feat = None
        if not use_attr_adapter:
            attr = None

        self_tables = None
        if cfg.rope_self_attention:
            cos, sin = rotation_tables(self.rope_spec, torch.arange(m), dtype=x_t.dtype)
            self_tables = (cos, sin)

        use_rope = not cfg.ablations.disable_rope
        rotate_values = not cfg.ablations.no_value_rotation
        for i, block in enumerate(self.blocks):
            h = h + block.self_attn(block.ln1(h), self_tables)
            q_in = block.ln2(h)
            x_text = text_cross_attention(block.cross, q_in, text, text_mask)
            a_attr = a_audio = None
            if attr is not None:
                a_attr = decoupled_cross_attention(
                    block.cross, block.attr_adapter, self.cross_rope_spec, q_in, attr,
                    head_count=self.cross_heads, use_rope=use_rope, rotate_values=rotate_values,
                    capture=self.capture, layer_index=i,
                )
            if audio_feat is not None:
                a_audio = decoupled_cross_attention(
                    block.cross, block.audio_adapter, self.cross_rope_spec, q_in, audio_feat,
                    head_count=self.cross_heads, use_rope=use_rope, rotate_values=rotate_values,
                    capture=self.capture, layer_index=i,
                )
            h = h + combine(
                x_text, a_attr, a_audio,
                block.attr_adapter.combiner, block.audio_adapter.combiner,
                literal_eq9=cfg.ablations.literal_eq9,
                disable_zero_cnn=cfg.ablations.disable_zero_cnn,
            )
            h = h + block.mlp(block.ln3(h))
        return self.out_proj(h)


def _band_analysis_matrix(cfg: ModelConfig, codec_basis: np.ndarray) -> np.ndarray:
    """Frozen in-projection: low-band per-channel DCT rows composed with the
    codec basis transpose and a seeded orthonormal mixer."""
    n = cfg.frame_size
    a = cfg.latent_channels
    if codec_basis.shape != (a, a):
        raise ConfigError(f"codec basis {codec_basis.shape} does not match latent width {a}")
    k_max = cfg.model_dim // 2
    kk = np.arange(k_max)[:, None]
    nn_ = np.arange(n)[None, :]
    dct = np.cos(np.pi * (2 * nn_ + 1) * kk / (2 * n)) * np.sqrt(2.0 / n)
    dct[0] /= np.sqrt(2.0)
    d_band = np.zeros((cfg.model_dim, a), dtype=np.float64)
    for ch in (0, 1):
        d_band[ch::2, ch::2] = dct  # audio frames interleave L/R samples
    g = np.random.default_rng(cfg.blocks * 7919 + cfg.model_dim)
    q, r = np.linalg.qr(g.standard_normal((cfg.model_dim, cfg.model_dim)))
    q = q * np.sign(np.diag(r))
    return (q @ d_band @ codec_basis.astype(np.float64).T).astype(np.float32)


def build_model(cfg: ModelConfig, codec: LatentCodec | None = None, seed: int = 0):
    """Construct the model and its codec with deterministic initialization."""
    torch.manual_seed(seed)
    if codec is None:
        codec = LatentCodec(frame_size=cfg.frame_size, seed=seed)
    model = ConditionedDiffusionModel(cfg, codec.basis)
    return model, codec
