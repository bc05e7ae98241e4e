"""Frozen text cross-attention and rotary decoupled cross-attention adapters.

The frozen path projects the hidden sequence and the text embedding with the
original (untrained) weights and applies plain scaled-dot-product attention,
no positional rotation. Each adapter duplicates the frozen key/value
projections, rotates queries, keys, and values by token position, and feeds
its attention output through a zero-initialized pointwise convolution so a
freshly initialized adapter leaves the backbone output untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import CaptureError, DimensionError, InvalidInputError
from .rope import RotationSpec, apply_rotation, condition_positions, rotation_tables


class FrozenAttentionWeights(nn.Module):
    """Original cross-attention projections; immutable after construction."""

    def __init__(self, model_dim: int, c_r: int, head_count: int):
        super().__init__()
        if c_r % head_count != 0:
            raise DimensionError(f"C_r {c_r} not divisible by {head_count} heads")
        if (c_r // head_count) % 2 != 0:
            raise DimensionError(f"per-head dim {c_r // head_count} must be even for rotary pairs")
        self.model_dim = model_dim
        self.c_r = c_r
        self.head_count = head_count
        self.wq = nn.Linear(model_dim, c_r, bias=False)
        self.wk = nn.Linear(model_dim, c_r, bias=False)
        self.wv = nn.Linear(model_dim, c_r, bias=False)
        for p in self.parameters():
            p.requires_grad_(False)


class DecoupledAdapter(nn.Module):
    """Trainable key/value copies plus the zero-init combiner for one block."""

    def __init__(self, frozen: FrozenAttentionWeights, kind: str):
        super().__init__()
        self.kind = kind
        self.wk_prime = nn.Linear(frozen.model_dim, frozen.c_r, bias=False)
        self.wv_prime = nn.Linear(frozen.model_dim, frozen.c_r, bias=False)
        with torch.no_grad():
            self.wk_prime.weight.copy_(frozen.wk.weight)
            self.wv_prime.weight.copy_(frozen.wv.weight)
        self.combiner = nn.Conv1d(frozen.c_r, frozen.c_r, kernel_size=1)
        with torch.no_grad():
            self.combiner.weight.zero_()
            self.combiner.bias.zero_()


@dataclass
class AttentionMap:
    weights: np.ndarray  # (M, N) post-softmax probabilities
    layer_index: int
    head_index: int
    kind: str


class AttentionCapture:
    """Collects per-head attention probabilities from decoupled layers."""

    def __init__(self):
        self.records: list[tuple[int, str, torch.Tensor]] = []

    def add(self, layer_index: int, kind: str, probs: torch.Tensor) -> None:
        self.records.append((layer_index, kind, probs.detach()))

    def export(self, batch_index: int = -1) -> list[AttentionMap]:
        if not self.records:
            raise CaptureError("no attention maps captured; enable capture before the forward pass")
        maps = []
        for layer, kind, probs in self.records:
            sel = probs[batch_index]  # (H, M, N)
            for h in range(sel.shape[0]):
                maps.append(
                    AttentionMap(
                        weights=sel[h].cpu().numpy().astype(np.float32),
                        layer_index=layer,
                        head_index=h,
                        kind=kind,
                    )
                )
        return maps


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, l, c = x.shape
    return x.view(b, l, heads, c // heads).transpose(1, 2)  # (B, H, L, dh)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, dh = x.shape
    return x.transpose(1, 2).reshape(b, l, h * dh)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, H, M, dh) x (B, H, N, dh) -> output (B, H, M, dh), probs (B, H, M, N)."""
    scale = q.shape[-1] ** -0.5
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    return torch.matmul(probs, v), probs


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 2:
        return x.unsqueeze(0), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected (M, D) or (B, M, D), got {tuple(x.shape)}")


def text_cross_attention(
    w: FrozenAttentionWeights,
    x: torch.Tensor,
    c_text: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Frozen multi-head attention of hidden queries against text keys/values."""
    x, unbatch = _as_batched(torch.as_tensor(x))
    c_text, _ = _as_batched(torch.as_tensor(c_text))
    if c_text.shape[1] == 0:
        raise InvalidInputError("empty text condition")
    if x.shape[-1] != w.model_dim or c_text.shape[-1] != w.model_dim:
        raise DimensionError(
            f"hidden/text width must be {w.model_dim}, got {x.shape[-1]} and {c_text.shape[-1]}"
        )
    q = _split_heads(w.wq(x), w.head_count)
    k = _split_heads(w.wk(c_text), w.head_count)
    v = _split_heads(w.wv(c_text), w.head_count)
    out, _ = scaled_dot_attention(q, k, v, key_mask)
    out = _merge_heads(out)
    return out.squeeze(0) if unbatch else out


def decoupled_cross_attention(
    w: FrozenAttentionWeights,
    a: DecoupledAdapter,
    spec: RotationSpec,
    x: torch.Tensor,
    c: torch.Tensor | None,
    q_positions: torch.Tensor | None = None,
    k_positions: torch.Tensor | None = None,
    head_count: int | None = None,
    use_rope: bool = True,
    rotate_values: bool = True,
    capture: AttentionCapture | None = None,
    layer_index: int = 0,
) -> torch.Tensor:
    """Rotary decoupled cross-attention of hidden queries against a condition.

    Queries use the frozen Wq; keys and values use the adapter's trainable
    copies. All three are rotated by their token positions (value rotation can
    be ablated). An absent or empty condition yields an all-zero output.
    """
    x, unbatch = _as_batched(torch.as_tensor(x))
    b, m, _ = x.shape
    if c is None or (hasattr(c, "shape") and torch.as_tensor(c).shape[-2] == 0):
        out = torch.zeros(b, m, w.c_r, dtype=x.dtype, device=x.device)
        return out.squeeze(0) if unbatch else out
    c, _ = _as_batched(torch.as_tensor(c))
    if x.shape[-1] != w.model_dim or c.shape[-1] != w.model_dim:
        raise DimensionError(
            f"hidden/condition width must be {w.model_dim}, got {x.shape[-1]} and {c.shape[-1]}"
        )
    heads = head_count or w.head_count
    dh = w.c_r // heads
    if w.c_r % heads != 0 or dh % 2 != 0:
        raise DimensionError(f"C_r {w.c_r} with {heads} heads gives invalid per-head dim")
    if spec.d != dh:
        raise DimensionError(f"rotation spec dim {spec.d} != per-head dim {dh}")
    n = c.shape[1]
    if q_positions is None:
        q_positions = torch.arange(m)
    if k_positions is None:
        k_positions = condition_positions(n, m)

    q = _split_heads(w.wq(x), heads)
    k = _split_heads(a.wk_prime(c), heads)
    v = _split_heads(a.wv_prime(c), heads)
    if use_rope:
        qcos, qsin = rotation_tables(spec, q_positions, dtype=x.dtype)
        kcos, ksin = rotation_tables(spec, k_positions, dtype=x.dtype)
        q = apply_rotation(q, qcos, qsin)
        k = apply_rotation(k, kcos, ksin)
        if rotate_values:
            v = apply_rotation(v, kcos, ksin)
    out, probs = scaled_dot_attention(q, k, v)
    if capture is not None:
        capture.add(layer_index, a.kind, probs)
    out = _merge_heads(out)
    return out.squeeze(0) if unbatch else out


def combine(
    x_text: torch.Tensor,
    a_attr: torch.Tensor | None,
    a_audio: torch.Tensor | None,
    attr_combiner: nn.Conv1d | None,
    audio_combiner: nn.Conv1d | None,
    literal_eq9: bool = False,
    disable_zero_cnn: bool = False,
) -> torch.Tensor:
    """Superpose the text output with the zero-init-convolved adapter branches.

    Default form: x_text + Z_attr(a_attr) + Z_audio(a_audio), which leaves the
    frozen model exactly unchanged at initialization. literal_eq9 instead runs
    the summed streams through the attribute combiner; disable_zero_cnn drops
    the convolutions entirely (adapter outputs added raw).
    """
    x_text, unbatch = _as_batched(x_text)
    branches = []
    for branch in (a_attr, a_audio):
        if branch is None:
            branches.append(None)
            continue
        branch, _ = _as_batched(branch)
        if branch.shape != x_text.shape:
            raise DimensionError(f"branch shape {tuple(branch.shape)} != text shape {tuple(x_text.shape)}")
        branches.append(branch)
    a_attr, a_audio = branches

    def conv(z: nn.Conv1d, seq: torch.Tensor) -> torch.Tensor:
        return z(seq.transpose(1, 2)).transpose(1, 2)

    if literal_eq9:
        total = x_text
        for branch in (a_attr, a_audio):
            if branch is not None:
                total = total + branch
        out = total if disable_zero_cnn or attr_combiner is None else conv(attr_combiner, total)
    else:
        out = x_text
        if a_attr is not None:
            out = out + (a_attr if disable_zero_cnn else conv(attr_combiner, a_attr))
        if a_audio is not None:
            out = out + (a_audio if disable_zero_cnn else conv(audio_combiner, a_audio))
    return out.squeeze(0) if unbatch else out
