"""Objective evaluation metrics: melody accuracy, dynamics correlation,
rhythm F1, and the novelty-curve smoothness value."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioners import DynamicsCondition, extract_dynamics, onset_envelope, _pick_peaks, RHY_HOP
from .errors import InvalidInputError, UndefinedMetricError

RATE = 44100
CHROMA_WINDOW = 2048
CHROMA_HOP = 512
CHROMA_FMIN = 60.0
MELODY_CHANCE_LEVEL = 1.0 / 12.0
BEAT_TOLERANCE_S = 0.070

SSM_BANDS = 64


@dataclass(frozen=True)
class Chromagram:
    frames: np.ndarray  # (12, T) pitch-class energies


@dataclass(frozen=True)
class NoveltyCurve:
    values: np.ndarray
    kernel_size: int = 3
    frame_rate: float = RATE / CHROMA_HOP


def _mono(audio: np.ndarray) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    return audio.mean(axis=1) if audio.ndim == 2 else audio


def _stft_mag(mono: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Magnitude STFT over fully covered frames: (n_frames, window//2+1)."""
    if len(mono) < window:
        raise InvalidInputError(f"audio shorter than one window ({len(mono)} < {window})")
    n_frames = 1 + (len(mono) - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.abs(np.fft.rfft(mono[idx] * np.hanning(window), axis=1))


def chromagram(audio: np.ndarray) -> Chromagram:
    """Fold STFT energy above 60 Hz into the 12 pitch classes (C..B)."""
    mag = _stft_mag(_mono(audio), CHROMA_WINDOW, CHROMA_HOP)
    freqs = np.fft.rfftfreq(CHROMA_WINDOW, d=1.0 / RATE)
    usable = freqs > CHROMA_FMIN
    # nearest-semitone fold; 261.626 Hz (C4) lands on class 0
    classes = np.round(12.0 * np.log2(freqs[usable] / 261.6256)).astype(int) % 12
    energy = mag[:, usable] ** 2
    out = np.zeros((12, mag.shape[0]))
    for c in range(12):
        out[c] = energy[:, classes == c].sum(axis=1)
    return Chromagram(frames=out)


def pitch_classes(chroma: Chromagram) -> tuple[np.ndarray, np.ndarray]:
    """Frame-wise argmax classes and a voiced flag (any energy at all)."""
    frames = chroma.frames
    return frames.argmax(axis=0), frames.sum(axis=0) > 0.0


def melody_accuracy(ref_audio: np.ndarray, gen_audio: np.ndarray) -> float:
    """Fraction of frames whose dominant pitch classes agree.

    Frames where either side is silent are excluded from the denominator
    (agreement on silence is meaningless, and excluding both sides keeps the
    metric symmetric).
    """
    ref_cls, ref_voiced = pitch_classes(chromagram(ref_audio))
    gen_cls, gen_voiced = pitch_classes(chromagram(gen_audio))
    n = min(len(ref_cls), len(gen_cls))
    ok = ref_voiced[:n] & gen_voiced[:n]
    if not ok.any():
        raise UndefinedMetricError("no comparable (voiced) frames")
    return float((ref_cls[:n][ok] == gen_cls[:n][ok]).mean())


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        n = min(len(a), len(b))
        # linear resample onto the shorter grid
        a = np.interp(np.linspace(0, 1, n), np.linspace(0, 1, len(a)), a)
        b = np.interp(np.linspace(0, 1, n), np.linspace(0, 1, len(b)), b)
    if len(a) < 3:
        raise UndefinedMetricError("need at least 3 points for a correlation")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        raise UndefinedMetricError("constant curve has no defined correlation")
    return float((a * b).sum() / denom)


def dynamics_correlation(gen_audio: np.ndarray, target: DynamicsCondition) -> float:
    """Pearson r between the generated audio's loudness curve and the target."""
    gen = extract_dynamics(gen_audio)
    return pearson(gen.curve.ravel(), np.asarray(target.curve).ravel())


def _greedy_match(ref: np.ndarray, est: np.ndarray, tol: float) -> int:
    """One-to-one chronological matching within tol seconds; returns hits."""
    i = j = hits = 0
    while i < len(ref) and j < len(est):
        d = est[j] - ref[i]
        if abs(d) < tol:
            hits += 1
            i += 1
            j += 1
        elif d < 0:
            j += 1
        else:
            i += 1
    return hits


def beat_times_from_audio(audio: np.ndarray) -> np.ndarray:
    """Builtin beat estimates: onset-envelope peaks, in seconds."""
    env = onset_envelope(audio)
    peaks = _pick_peaks(env, threshold=0.3, min_gap_frames=int(round(0.250 * RATE / RHY_HOP)))
    return peaks * RHY_HOP / RATE


def rhythm_f1(
    input_beats: np.ndarray,
    gen_audio: np.ndarray | None = None,
    estimated_beats: np.ndarray | None = None,
    tolerance: float = BEAT_TOLERANCE_S,
) -> float:
    """F1 between input beat timestamps and beats found in the generated audio.

    Passing estimated_beats bypasses audio extraction so the 70 ms matching
    logic can be tested on its own.
    """
    ref = np.sort(np.asarray(input_beats, dtype=np.float64))
    if ref.size == 0:
        raise UndefinedMetricError("empty input beat list")
    if np.any(ref < 0):
        raise InvalidInputError("beat timestamps must be non-negative")
    if estimated_beats is None:
        if gen_audio is None:
            raise InvalidInputError("need generated audio or estimated beats")
        est = beat_times_from_audio(gen_audio)
    else:
        est = np.sort(np.asarray(estimated_beats, dtype=np.float64))
    if est.size == 0:
        return 0.0
    hits = _greedy_match(ref, est, tolerance)
    precision = hits / len(est)
    recall = hits / len(ref)
    if precision + recall == 0.0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def _band_features(audio: np.ndarray) -> np.ndarray:
    """Coarse magnitude-spectrogram features for the self-similarity matrix."""
    mag = _stft_mag(_mono(audio), CHROMA_WINDOW, CHROMA_HOP)
    n_bins = mag.shape[1]
    edges = np.linspace(0, n_bins, SSM_BANDS + 1).astype(int)
    return np.stack([mag[:, a:b].mean(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)


def novelty_curve(audio: np.ndarray) -> NoveltyCurve:
    """Checkerboard-kernel novelty along the diagonal of the cosine SSM."""
    audio = np.asarray(audio)
    if len(audio) < RATE:
        raise InvalidInputError("need at least one second of audio")
    feats = _band_features(audio)
    norms = np.linalg.norm(feats, axis=1)
    unit = feats / np.maximum(norms, 1e-12)[:, None]
    ssm = unit @ unit.T
    # 3x3 Gaussian-tapered checkerboard (only the corners are nonzero)
    axis = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-0.5 * axis**2)
    kernel = np.outer(np.sign(axis) * g, np.sign(axis) * g)
    kernel /= np.abs(kernel).sum()
    padded = np.pad(ssm, 1, mode="edge")
    t = ssm.shape[0]
    values = np.array(
        [(padded[i : i + 3, i : i + 3] * kernel).sum() for i in range(t)]
    )
    return NoveltyCurve(values=values)


def smoothness_value(audio: np.ndarray, boundary_seconds: float) -> float:
    """Second difference of the max-normalized novelty curve at the boundary.

    Large negative values indicate an abrupt seam.
    """
    curve = novelty_curve(audio)
    v = curve.values
    peak = np.abs(v).max()
    if peak > 0:
        v = v / peak
    # frames are left-aligned; index the frame whose window center sits on
    # the boundary
    i = int(round(boundary_seconds * curve.frame_rate - CHROMA_WINDOW / (2 * CHROMA_HOP)))
    if i < 1 or i > len(v) - 2:
        raise InvalidInputError(f"boundary at frame {i} is not interior to the clip")
    return float(v[i - 1] - 2.0 * v[i] + v[i + 1])
