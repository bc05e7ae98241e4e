"""Synthetic overfit benchmark: 16 short tone-sequence clips.

Each clip walks through distinct pitch classes in the octave above middle C,
so a model that cannot localize the melody condition in time can do no better
than chance at frame-wise pitch-class accuracy, while a model with working
rotary conditioning can place each segment where it belongs.
"""

from __future__ import annotations

import os

import numpy as np

from . import dataio
from .conditioners import extract_melody
from .guidance import GuidanceScales
from .metrics import melody_accuracy
from .model import ConditionedDiffusionModel
from .pipeline import generate

RATE = dataio.TARGET_RATE
PITCH_CLASS_HZ = [261.6256 * 2 ** (k / 12) for k in range(12)]  # C4..B4


def tone_sequence(classes: list[int], seconds_per_segment: float, amplitude: float = 0.7) -> np.ndarray:
    """Stereo sine-tone sequence with short ramps between segments."""
    n_seg = int(round(seconds_per_segment * RATE))
    ramp = min(512, n_seg // 8)
    env = np.ones(n_seg)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    parts = []
    for c in classes:
        t = np.arange(n_seg) / RATE
        parts.append(amplitude * env * np.sin(2 * np.pi * PITCH_CLASS_HZ[c] * t))
    mono = np.concatenate(parts).astype(np.float32)
    return np.stack([mono, mono], axis=1)


def make_melody_benchmark(
    out_dir,
    n_clips: int = 16,
    seconds: float = 4.0,
    segments: int = 8,
    seed: int = 0,
) -> tuple[str, list[dataio.ClipRecord]]:
    """Write the benchmark WAVs plus a manifest; returns (manifest_path, records)."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_clips):
        classes = list(rng.permutation(12)[:segments])
        audio = tone_sequence(classes, seconds / segments)
        path = os.path.join(out_dir, f"clip{i:02d}.wav")
        dataio.save_wav(path, audio)
        caption = "synthetic tone sequence " + " ".join(str(c) for c in classes)
        records.append(dataio.ClipRecord(audio_path=path, caption=caption, duration_s=seconds))
    manifest = os.path.join(out_dir, "manifest.jsonl")
    dataio.write_manifest(manifest, records)
    return manifest, records


def regeneration_accuracy(
    model: ConditionedDiffusionModel,
    codec,
    records: list[dataio.ClipRecord],
    use_melody: bool = True,
    scales: GuidanceScales | None = None,
    steps: int = 50,
    seed: int = 0,
) -> list[float]:
    """Regenerate each training clip from its caption (+ melody condition when
    use_melody) and score frame-wise pitch-class agreement with the original."""
    accs = []
    for i, rec in enumerate(records):
        ref = dataio.load_audio(rec.audio_path)[0]
        melody = extract_melody(ref) if use_melody else None
        result = generate(
            model,
            codec,
            caption=rec.caption,
            seconds=len(ref) / RATE,
            melody=melody,
            scales=scales,
            steps=steps,
            seed=seed + i,
        )
        accs.append(melody_accuracy(ref, result.audio))
    return accs


# Settings for the 16-clip overfit ablation benchmark. The overfit runs
# disable condition dropout and random masking (with a frozen backbone a
# dropped-condition iteration has no trainable gradient path, so they only
# dilute the step budget) and use a higher learning rate than the full-scale
# recipe; regeneration is scored at unit guidance, i.e. the plain conditional
# prediction.
BENCH_CLIPS = 16
BENCH_SECONDS = 3.0
BENCH_SEGMENTS = 6
BENCH_STEPS = 1400
BENCH_LR = 3e-3
BENCH_EVAL_STEPS = 25
BENCH_SCALES = GuidanceScales(1.0, 1.0, 1.0)


def train_melody_overfit(
    records: list[dataio.ClipRecord],
    disable_rope: bool = False,
    steps: int = BENCH_STEPS,
    seed: int = 0,
):
    """Train a melody-only adapter on the benchmark; returns (model, codec, losses)."""
    from .model import Ablations, ModelConfig, build_model
    from .training import AdapterTrainer, prepare_clips

    cfg = ModelConfig(ablations=Ablations(disable_rope=disable_rope))
    model, codec = build_model(cfg, seed=seed)
    clips = prepare_clips(records, cfg, codec, clip_seconds=BENCH_SECONDS, adapter="melody-only")
    trainer = AdapterTrainer(
        model, clips, "melody-only", seed=seed, batch_size=8, lr=BENCH_LR,
        cond_dropout=False, random_masking=False,
    )
    losses = trainer.run(steps)
    return model, codec, losses
