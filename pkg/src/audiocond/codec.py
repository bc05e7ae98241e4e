"""Invertible frame codec between stereo waveforms and latent sequences.

Each non-overlapping frame of ``frame_size`` samples x 2 channels is flattened
to a vector of 2*frame_size values and rotated by a fixed orthonormal basis,
giving one latent frame with A = 2*frame_size channels. The map is exactly
invertible, which the inpainting/outpainting contracts rely on: a kept region
pasted from a reference latent decodes back to the reference audio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, SampleRateError

CODEC_RATE = 44100
DEFAULT_FRAME_SIZE = 1024


def orthonormal_basis(n: int, seed: int) -> np.ndarray:
    """Seeded random orthonormal n x n matrix (QR of a Gaussian)."""
    g = np.random.default_rng(seed).standard_normal((n, n))
    q, r = np.linalg.qr(g)
    # fix the QR sign ambiguity so the basis is a deterministic function of the seed
    q = q * np.sign(np.diag(r))
    return q.astype(np.float32)


@dataclass(frozen=True)
class AudioLatent:
    frames: np.ndarray  # (N_audio, A) float32
    sample_rate: int = CODEC_RATE
    frame_size: int = DEFAULT_FRAME_SIZE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]


@dataclass
class LatentCodec:
    frame_size: int = DEFAULT_FRAME_SIZE
    basis: np.ndarray = field(default=None)  # (A, A), rows orthonormal
    seed: int = 0

    def __post_init__(self):
        if self.basis is None:
            self.basis = orthonormal_basis(2 * self.frame_size, self.seed)
        if self.basis.shape != (2 * self.frame_size, 2 * self.frame_size):
            raise DimensionError(
                f"codec basis must be {2 * self.frame_size}x{2 * self.frame_size}, got {self.basis.shape}"
            )

    @property
    def channels(self) -> int:
        return 2 * self.frame_size

    def frame_count(self, n_samples: int) -> int:
        return -(-n_samples // self.frame_size)

    def encode(self, audio: np.ndarray, sample_rate: int = CODEC_RATE) -> AudioLatent:
        """Stereo (n, 2) float32 at 44.1 kHz -> (N_audio, A) latent."""
        if sample_rate != CODEC_RATE:
            raise SampleRateError(f"codec expects {CODEC_RATE} Hz, got {sample_rate}")
        audio = np.asarray(audio, dtype=np.float32)
        if audio.ndim != 2 or audio.shape[1] != 2:
            raise DimensionError(f"expected (n, 2) stereo audio, got {audio.shape}")
        n = self.frame_count(len(audio))
        padded = np.zeros((n * self.frame_size, 2), dtype=np.float32)
        padded[: len(audio)] = audio
        flat = padded.reshape(n, 2 * self.frame_size)  # interleaved L/R per frame
        frames = flat @ self.basis.T
        return AudioLatent(frames=frames, sample_rate=sample_rate, frame_size=self.frame_size)

    def decode(self, latent: AudioLatent) -> np.ndarray:
        """Inverse projection; output has n_frames * frame_size samples."""
        frames = np.asarray(latent.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != self.channels:
            raise DimensionError(f"latent has {frames.shape} frames, codec expects width {self.channels}")
        flat = frames @ self.basis
        return flat.reshape(-1, 2)
