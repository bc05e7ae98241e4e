"""End-to-end generation: conditions in, guided sampling, latent out, WAV out.

Tasks:
  generate  - free generation, optionally steered by attribute conditions.
  outpaint  - keep a leading span of the reference, fill the rest.
  inpaint   - keep the edges of the reference, fill a middle span.

For inpaint/outpaint the kept region of the output latent is taken verbatim
from the reference (the model only fills the complement), so kept audio
round-trips through the codec exactly. Attribute and audio conditions are
applied with complementary masks: wherever the reference is visible the
attribute condition is masked out, and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import dataio
from .attention import AttentionMap
from .codec import AudioLatent, LatentCodec
from .conditioners import (
    ConditionMask,
    DynamicsCondition,
    MelodyCondition,
    RhythmCondition,
    complementary_mask,
    full_mask,
    resample_mask,
    spans_to_mask,
)
from .diffusion import SampleInputs, sample
from .errors import InvalidInputError
from .guidance import GuidanceScales
from .model import ConditionedDiffusionModel

TASKS = ("generate", "inpaint", "outpaint")
# keep-span defaults mirror the evaluation protocol (fractions of a 47 s clip:
# outpainting keeps the first 24 s, inpainting the first and last 5 s)
OUTPAINT_KEEP_FRAC = 24.0 / 47.0
INPAINT_EDGE_FRAC = 5.0 / 47.0


@dataclass
class GenerationResult:
    audio: np.ndarray  # (n, 2) float32
    latent: np.ndarray  # (M, A) unscaled latent actually decoded
    attention_maps: list[AttentionMap] | None = None


def default_keep_spans(task: str, duration_s: float) -> list[tuple[float, float]]:
    if task == "outpaint":
        return [(0.0, OUTPAINT_KEEP_FRAC * duration_s)]
    if task == "inpaint":
        edge = INPAINT_EDGE_FRAC * duration_s
        return [(0.0, edge), (duration_s - edge, duration_s)]
    return []


def generate(
    model: ConditionedDiffusionModel,
    codec: LatentCodec,
    caption: str = "",
    task: str = "generate",
    seconds: float | None = None,
    reference_audio: np.ndarray | None = None,
    keep_spans: list[tuple[float, float]] | None = None,
    attr_spans: list[tuple[float, float]] | None = None,
    melody: MelodyCondition | None = None,
    dynamics: DynamicsCondition | None = None,
    rhythm: RhythmCondition | None = None,
    scales: GuidanceScales | None = None,
    steps: int = 50,
    seed: int = 0,
    mode: str = "plain",
    dump_attention: bool = False,
    use_attr_adapter: bool = True,
) -> GenerationResult:
    # single-threaded math keeps outputs byte-identical across machine
    # thread configurations
    torch.set_num_threads(1)
    cfg = model.cfg
    scales = scales or GuidanceScales()

    ref_latent = None
    if reference_audio is not None:
        ref_latent = codec.encode(reference_audio).frames * cfg.latent_scale
        m = ref_latent.shape[0]
    elif seconds is not None:
        m = codec.frame_count(int(round(seconds * dataio.TARGET_RATE)))
    else:
        raise InvalidInputError("need a duration or a reference audio")
    duration_s = m * codec.frame_size / dataio.TARGET_RATE

    if task not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}")
    if task in ("inpaint", "outpaint") and ref_latent is None:
        raise InvalidInputError(f"task {task!r} requires a reference audio")
    if mode == "naive_masking" and ref_latent is None:
        raise InvalidInputError("naive masking requires a reference audio")

    # audio keep mask on the latent grid
    keep = None
    if ref_latent is not None:
        spans = keep_spans if keep_spans is not None else default_keep_spans(task, duration_s)
        if not spans:
            spans = [(0.0, duration_s)]
        keep = spans_to_mask(spans, m, frame_rate=dataio.TARGET_RATE / codec.frame_size)

    # attribute mask: complement of the audio keep mask, else user spans
    have_attr = any(c is not None for c in (melody, dynamics, rhythm)) and use_attr_adapter
    inputs = SampleInputs()
    if have_attr:
        if keep is not None:
            attr_latent_mask = complementary_mask(keep, m)
        elif attr_spans:
            attr_latent_mask = spans_to_mask(attr_spans, m, frame_rate=dataio.TARGET_RATE / codec.frame_size)
        else:
            attr_latent_mask = full_mask(m)
        masks = tuple(
            resample_mask(attr_latent_mask, _cond_len(c)) if c is not None else None
            for c in (melody, dynamics, rhythm)
        )
        with torch.no_grad():
            feats = model.extractors.featurize(
                melody, dynamics, rhythm, masks, m,
                fixed_projection=cfg.ablations.disable_extractor,
            )
        inputs.attr = feats[None]

    if caption.strip():
        emb = dataio.encode_text(caption, cfg.model_dim, cfg.max_text_tokens)
        inputs.text = torch.from_numpy(emb)[None]
    if ref_latent is not None:
        masked = ref_latent * keep.keep[:, None]
        inputs.audio = torch.from_numpy(masked.astype(np.float32))[None]

    rng = np.random.default_rng(seed)
    out = sample(
        model,
        m,
        cfg.latent_channels,
        inputs,
        scales,
        steps=steps,
        mode="naive_masking" if mode == "naive_masking" else "plain",
        reference=ref_latent if mode == "naive_masking" else None,
        keep_mask=keep.keep if (keep is not None and mode == "naive_masking") else None,
        rng=rng,
        capture_final_pass=dump_attention,
    )
    if mode != "naive_masking" and task in ("inpaint", "outpaint"):
        out = out.copy()
        out[keep.keep] = ref_latent[keep.keep]

    maps = model.capture.export(batch_index=-1) if (dump_attention and model.capture) else None
    model.disable_capture()

    unscaled = out / cfg.latent_scale
    audio = codec.decode(AudioLatent(frames=unscaled.astype(np.float32), frame_size=codec.frame_size))
    return GenerationResult(audio=audio, latent=unscaled, attention_maps=maps)


def _cond_len(c) -> int:
    for attr_name in ("frames", "curve", "probs"):
        if hasattr(c, attr_name):
            return getattr(c, attr_name).shape[0]
    raise InvalidInputError(f"not a condition object: {type(c)!r}")
