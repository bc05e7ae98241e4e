"""Melody, dynamics, and rhythm condition extraction plus masking.

Extraction is plain numpy/scipy signal processing. The trainable feature
extractors that turn conditions into the cross-attention input live in
``ConditionExtractors`` (torch) so gradients can flow during adapter training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.signal import savgol_filter
from torch import nn

from .errors import ConfigError, DimensionError, InvalidInputError, SampleRateError

RATE = 44100

# Constant-Q melody analysis. 128 bins at 24 bins/octave from C1 span about
# 5.3 octaves (32.7 Hz .. ~1.28 kHz), which covers the melodic range above the
# 261.2 Hz high-pass cutoff at quarter-tone resolution.
CQT_BINS = 128
CQT_FMIN = 32.70
CQT_BINS_PER_OCTAVE = 24
CQT_HOP = 1024
MELODY_TOP_K = 4
MELODY_HIGHPASS_HZ = 261.2
SILENCE_EPS = 1e-7

# Dynamics: STFT energy at the chromagram's 2048/512 framing, dB floor -90,
# Savitzky-Golay smoothing over 31 frames (order 3) at ~86 frames/s.
DYN_WINDOW = 2048
DYN_HOP = 512
DYN_FLOOR_DB = -90.0
DYN_SAVGOL_WINDOW = 31
DYN_SAVGOL_ORDER = 3

# Rhythm: spectral-flux onset envelope. The shorter window keeps flux peaks
# within a few hops of the true onset times.
RHY_WINDOW = 1024
RHY_HOP = 512
DOWNBEAT_EVERY = 4


@dataclass(frozen=True)
class MelodyCondition:
    frames: np.ndarray  # (N, 128) of {0, 1}
    frame_rate: float


@dataclass(frozen=True)
class DynamicsCondition:
    curve: np.ndarray  # (N, 1) dB in [-90, 0]
    frame_rate: float


@dataclass(frozen=True)
class RhythmCondition:
    probs: np.ndarray  # (N, 2) beat/downbeat probabilities in [0, 1]
    frame_rate: float


@dataclass(frozen=True)
class ConditionMask:
    keep: np.ndarray  # (N,) bool, True = condition visible


def _check_audio(audio: np.ndarray, sample_rate: int) -> np.ndarray:
    if sample_rate != RATE:
        raise SampleRateError(f"extractors expect {RATE} Hz, got {sample_rate}")
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim == 1:
        audio = audio[:, None]
    if audio.size == 0:
        raise InvalidInputError("empty audio")
    return audio


def cqt_bin_frequencies(
    n_bins: int = CQT_BINS, fmin: float = CQT_FMIN, bins_per_octave: int = CQT_BINS_PER_OCTAVE
) -> np.ndarray:
    """Center frequency of each CQT bin; tests derive expected bins from this."""
    k = np.arange(n_bins)
    return fmin * 2.0 ** (k / bins_per_octave)


def _cqt_magnitudes(mono: np.ndarray, hop: int = CQT_HOP) -> np.ndarray:
    """Direct per-bin windowed DFT at constant Q. Returns (n_frames, n_bins)."""
    freqs = cqt_bin_frequencies()
    q = 1.0 / (2.0 ** (1.0 / CQT_BINS_PER_OCTAVE) - 1.0)
    n_frames = max(1, len(mono) // hop)
    centers = np.arange(n_frames) * hop + hop // 2
    mags = np.zeros((n_frames, CQT_BINS), dtype=np.float64)
    mono32 = mono.astype(np.float32)
    for b, f in enumerate(freqs):
        n_k = int(np.ceil(q * RATE / f))
        half = n_k // 2
        t = np.arange(n_k)
        window = np.hanning(n_k)
        phase = 2.0 * np.pi * f * t / RATE
        kr = (window * np.cos(phase) / window.sum()).astype(np.float32)
        ki = (window * np.sin(phase) / window.sum()).astype(np.float32)
        padded = np.pad(mono32, (half, n_k))
        # frame start in padded coordinates = center - half + half = center
        frames = padded[centers[:, None] + t[None, :]]
        mags[:, b] = np.hypot(frames @ kr, frames @ ki)
    return mags


def extract_melody(audio: np.ndarray, sample_rate: int = RATE, stereo_cqt: bool = False) -> MelodyCondition:
    """Top-4 CQT activations per frame, high-passed above 261.2 Hz.

    The top-4 selection runs before the high-pass so that bass-dominated
    frames lose their activations instead of promoting weaker bins.
    """
    audio = _check_audio(audio, sample_rate)
    if stereo_cqt and audio.shape[1] == 2:
        mags = np.maximum(_cqt_magnitudes(audio[:, 0]), _cqt_magnitudes(audio[:, 1]))
    else:
        mags = _cqt_magnitudes(audio.mean(axis=1))
    n_frames = mags.shape[0]
    frames = np.zeros((n_frames, CQT_BINS), dtype=np.float32)
    order = np.argsort(mags, axis=1)[:, -MELODY_TOP_K:]
    voiced = mags.max(axis=1) > SILENCE_EPS
    rows = np.repeat(np.arange(n_frames), MELODY_TOP_K)
    frames[rows, order.ravel()] = 1.0
    frames[~voiced] = 0.0
    cutoff_bin = int(np.searchsorted(cqt_bin_frequencies(), MELODY_HIGHPASS_HZ))
    frames[:, :cutoff_bin] = 0.0
    return MelodyCondition(frames=frames, frame_rate=RATE / CQT_HOP)


def _frame_signal(mono: np.ndarray, window: int, hop: int) -> np.ndarray:
    if len(mono) < window:
        mono = np.pad(mono, (0, window - len(mono)))
    n_frames = 1 + (len(mono) - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return mono[idx]


def extract_dynamics(audio: np.ndarray, sample_rate: int = RATE) -> DynamicsCondition:
    """Smoothed frame-energy loudness curve in dB, clamped to [-90, 0]."""
    audio = _check_audio(audio, sample_rate)
    mono = audio.mean(axis=1).astype(np.float64)
    frames = _frame_signal(mono, DYN_WINDOW, DYN_HOP)
    w = np.hanning(DYN_WINDOW)
    # window-weighted mean power; spectrally this is the (Parseval-scaled)
    # spectrogram energy of each frame
    power = ((frames * w) ** 2).sum(axis=1) / (w**2).sum()
    db = 10.0 * np.log10(np.maximum(power, 1e-12))
    db = np.clip(db, DYN_FLOOR_DB, 0.0)
    win = min(DYN_SAVGOL_WINDOW, len(db) if len(db) % 2 == 1 else len(db) - 1)
    if win > DYN_SAVGOL_ORDER:
        db = savgol_filter(db, win, DYN_SAVGOL_ORDER)
    db = np.clip(db, DYN_FLOOR_DB, 0.0)
    return DynamicsCondition(curve=db[:, None].astype(np.float32), frame_rate=RATE / DYN_HOP)


def onset_envelope(audio: np.ndarray, sample_rate: int = RATE) -> np.ndarray:
    """Spectral-flux onset strength, normalized to [0, 1] for audible input."""
    audio = _check_audio(audio, sample_rate)
    mono = audio.mean(axis=1).astype(np.float64)
    frames = _frame_signal(mono, RHY_WINDOW, RHY_HOP) * np.hanning(RHY_WINDOW)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    flux = np.maximum(np.diff(mag, axis=0, prepend=mag[:1]), 0.0).sum(axis=1)
    peak = flux.max()
    if peak > 1e-4:
        flux = flux / peak
    return flux.astype(np.float32)


def _pick_peaks(env: np.ndarray, threshold: float = 0.3, min_gap_frames: int = 10) -> np.ndarray:
    thr = threshold * env.max() if env.max() > 0 else np.inf
    candidates = [
        i
        for i in range(1, len(env) - 1)
        if env[i] >= env[i - 1] and env[i] > env[i + 1] and env[i] >= thr
    ]
    picked: list[int] = []
    for i in sorted(candidates, key=lambda i: -env[i]):
        if all(abs(i - j) >= min_gap_frames for j in picked):
            picked.append(i)
    return np.array(sorted(picked), dtype=int)


def extract_rhythm(
    audio: np.ndarray | None = None,
    sample_rate: int = RATE,
    provider: str = "builtin",
    path=None,
) -> RhythmCondition:
    """Beat/downbeat probabilities from the builtin onset provider or a file."""
    if provider == "file":
        from .tensorio import read_cond

        arr, header = read_cond(path)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DimensionError(f"{path}: rhythm condition must be (N, 2), got {arr.shape}")
        return RhythmCondition(probs=arr, frame_rate=float(header.get("frame_rate", RATE / RHY_HOP)))
    if provider != "builtin":
        raise InvalidInputError(f"unknown rhythm provider {provider!r}")
    env = onset_envelope(audio, sample_rate)
    probs = np.zeros((len(env), 2), dtype=np.float32)
    probs[:, 0] = env
    peaks = _pick_peaks(env)
    if len(peaks) >= 2:
        # comb-filter style period estimate: median inter-peak gap, downbeat
        # on every DOWNBEAT_EVERY-th peak starting from the strongest
        start = int(np.argmax(env[peaks]))
        for j, p in enumerate(peaks):
            if (j - start) % DOWNBEAT_EVERY == 0:
                probs[p, 1] = env[p]
    return RhythmCondition(probs=probs, frame_rate=RATE / RHY_HOP)


# --- masking ----------------------------------------------------------------


def sample_training_masks(rng: np.random.Generator, lengths: tuple[int, ...]) -> tuple[ConditionMask, ...]:
    """One contiguous masked span per condition, fraction uniform in [0.1, 0.9].

    Each entry consumes independent randomness from the generator; training
    passes the three attribute-condition lengths (melody, dynamics, rhythm).
    """
    masks = []
    for n in lengths:
        keep = np.ones(n, dtype=bool)
        frac = rng.uniform(0.1, 0.9)
        span = int(np.clip(round(frac * n), max(1, int(np.ceil(0.1 * n))), int(0.9 * n)))
        offset = int(rng.integers(0, n - span + 1))
        keep[offset : offset + span] = False
        masks.append(ConditionMask(keep=keep))
    return tuple(masks)


def complementary_mask(attr_mask: ConditionMask, audio_len: int) -> ConditionMask:
    """Audio keep-mask = logical complement of the attribute keep-mask.

    The attribute mask must already live on the audio latent grid
    (see resample_mask); keep-sets are then disjoint and exhaustive.
    """
    keep = np.asarray(attr_mask.keep, dtype=bool)
    if len(keep) != audio_len:
        raise DimensionError(f"attribute mask length {len(keep)} != audio length {audio_len}")
    return ConditionMask(keep=~keep)


def resample_mask(mask: ConditionMask, new_len: int) -> ConditionMask:
    """Nearest-frame resampling of a boolean mask onto another frame grid."""
    keep = np.asarray(mask.keep, dtype=bool)
    if new_len == len(keep):
        return ConditionMask(keep=keep.copy())
    idx = np.minimum((np.arange(new_len) * len(keep)) // new_len, len(keep) - 1)
    return ConditionMask(keep=keep[idx])


def full_mask(n: int, keep: bool = True) -> ConditionMask:
    return ConditionMask(keep=np.full(n, keep, dtype=bool))


def spans_to_mask(spans: list[tuple[float, float]], n: int, frame_rate: float) -> ConditionMask:
    keep = np.zeros(n, dtype=bool)
    for start, end in spans:
        a = int(np.clip(round(start * frame_rate), 0, n))
        b = int(np.clip(round(end * frame_rate), 0, n))
        keep[a:b] = True
    return ConditionMask(keep=keep)


# --- trainable feature extractors -------------------------------------------


class _ConvStack(nn.Module):
    # replicate padding keeps constant condition streams constant through the
    # stack (zero padding would dent the edges)
    def __init__(self, in_channels: int, out_channels: int, hidden: int = 64, nonlinearity: bool = True):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, hidden, kernel_size=3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv1d(hidden, out_channels, kernel_size=3, padding=1, padding_mode="replicate")
        self.nonlinearity = nonlinearity

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, C, N)
        h = self.conv1(x)
        if self.nonlinearity:
            h = torch.nn.functional.gelu(h)
        return self.conv2(h)


class ConditionExtractors(nn.Module):
    """Per-condition 1-D conv stacks mapping each attribute to C_r/3 channels."""

    def __init__(self, c_r: int, nonlinearity: bool = True):
        super().__init__()
        if c_r % 3 != 0:
            raise ConfigError(f"cross-attention dimension must be divisible by 3, got {c_r}")
        self.c_r = c_r
        chunk = c_r // 3
        self.melody = _ConvStack(128, chunk, nonlinearity=nonlinearity)
        self.dynamics = _ConvStack(1, chunk, nonlinearity=nonlinearity)
        self.rhythm = _ConvStack(2, chunk, nonlinearity=nonlinearity)

    def featurize(
        self,
        melody: MelodyCondition | None,
        dynamics: DynamicsCondition | None,
        rhythm: RhythmCondition | None,
        masks: tuple[ConditionMask | None, ConditionMask | None, ConditionMask | None],
        m: int,
        fixed_projection: bool = False,
    ) -> torch.Tensor:
        """Fuse conditions into the (m, C_r) cross-attention input.

        Masked frames are zeroed before extraction; each branch is
        interpolated to the query length and the three chunks concatenated
        (melody, dynamics, rhythm). Absent conditions contribute zeros.
        fixed_projection bypasses the conv stacks with a seeded frozen linear
        map (the extractor-ablation path).
        """
        parts = []
        # dynamics are rescaled by the dB floor so conv inputs stay O(1); the
        # map is a pure gain, keeping featurize linear in the condition data
        specs = [
            (melody.frames if melody else None, self.melody, 128, 1.0),
            (dynamics.curve if dynamics else None, self.dynamics, 1, -1.0 / DYN_FLOOR_DB),
            (rhythm.probs if rhythm else None, self.rhythm, 2, 1.0),
        ]
        chunk = self.c_r // 3
        for (data, stack, in_ch, gain), mask in zip(specs, masks):
            if data is None:
                parts.append(torch.zeros(m, chunk))
                continue
            x = torch.as_tensor(np.asarray(data, dtype=np.float32)) * gain
            if mask is not None:
                if len(mask.keep) != x.shape[0]:
                    raise DimensionError(f"mask length {len(mask.keep)} != condition length {x.shape[0]}")
                x = x * torch.as_tensor(mask.keep.astype(np.float32))[:, None]
            x = x.T.unsqueeze(0)  # (1, C, N)
            if fixed_projection:
                x = _fixed_projection(in_ch, chunk)(x)
            else:
                x = stack(x)
            x = torch.nn.functional.interpolate(x, size=m, mode="linear", align_corners=False)
            parts.append(x.squeeze(0).T)  # (m, chunk)
        return torch.cat(parts, dim=1)


_FIXED_PROJ_CACHE: dict[tuple[int, int], nn.Conv1d] = {}


def _fixed_projection(in_ch: int, out_ch: int) -> nn.Conv1d:
    """Frozen seeded pointwise projection used by the extractor ablation."""
    key = (in_ch, out_ch)
    if key not in _FIXED_PROJ_CACHE:
        conv = nn.Conv1d(in_ch, out_ch, kernel_size=1, bias=False)
        g = torch.Generator().manual_seed(1000 + in_ch * 7 + out_ch)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / np.sqrt(in_ch))
        conv.weight.requires_grad_(False)
        _FIXED_PROJ_CACHE[key] = conv
    return _FIXED_PROJ_CACHE[key]
