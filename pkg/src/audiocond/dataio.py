"""Audio ingestion, manifests, and the deterministic toy text encoder."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DecodeError, InvalidInputError, ParseError

TARGET_RATE = 44100


def load_wav(path) -> tuple[int, np.ndarray]:
    """Read a PCM WAV file as float32 stereo in [-1, 1], untouched rate."""
    if not os.path.exists(path):
        raise InvalidInputError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except Exception as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] > 2:
        raise DecodeError(f"{path}: {data.shape[1]} channels, expected 1 or 2")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        # covers 24-bit PCM, which scipy widens to int32
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float32)
    else:
        raise DecodeError(f"{path}: unsupported sample format {data.dtype}")
    if x.shape[1] == 1:
        x = np.repeat(x, 2, axis=1)
    return int(rate), x


def save_wav(path, audio: np.ndarray, rate: int = TARGET_RATE) -> None:
    wavfile.write(path, rate, np.ascontiguousarray(audio, dtype=np.float32))


def resample(audio: np.ndarray, rate: int, target_rate: int = TARGET_RATE) -> np.ndarray:
    """Windowed-sinc (polyphase FIR) resampling; exact passthrough when rates match."""
    if rate == target_rate:
        return audio
    g = np.gcd(rate, target_rate)
    return resample_poly(audio, target_rate // g, rate // g, axis=0).astype(np.float32)


def segment(audio: np.ndarray, rate: int, segment_s: float) -> list[np.ndarray]:
    """Split into non-overlapping fixed-length chunks, zero-padding the tail."""
    n = int(round(segment_s * rate))
    if n <= 0:
        raise InvalidInputError(f"segment length {segment_s}s is too short")
    chunks = []
    for start in range(0, len(audio), n):
        c = audio[start : start + n]
        if len(c) < n:
            c = np.concatenate([c, np.zeros((n - len(c), audio.shape[1]), dtype=np.float32)])
        chunks.append(c)
    return chunks


def load_audio(path, target_rate: int = TARGET_RATE, segment_s: float | None = None) -> list[np.ndarray]:
    """Decode, resample to target_rate, and optionally segment a WAV file."""
    rate, audio = load_wav(path)
    audio = resample(audio, rate, target_rate)
    if len(audio) == 0:
        raise InvalidInputError(f"{path}: empty audio")
    if segment_s is None:
        return [audio]
    return segment(audio, target_rate, segment_s)


# --- toy text encoder -------------------------------------------------------

MAX_TEXT_TOKENS = 64


def encode_text(caption: str, dim: int, max_tokens: int = MAX_TEXT_TOKENS) -> np.ndarray:
    """Deterministic embedding: each whitespace token hashes to a unit vector.

    The empty caption maps to a single all-zero token, which doubles as the
    null condition for classifier-free guidance.
    """
    tokens = caption.split()[:max_tokens]
    if not tokens:
        return np.zeros((1, dim), dtype=np.float32)
    rows = []
    for tok in tokens:
        seed = int.from_bytes(hashlib.sha256(tok.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(dim)
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows).astype(np.float32)


def null_text(dim: int) -> np.ndarray:
    return np.zeros((1, dim), dtype=np.float32)


# --- dataset manifests ------------------------------------------------------


@dataclass
class ClipRecord:
    audio_path: str
    caption: str
    split: str = "train"
    duration_s: float | None = None


def write_manifest(path, records: list[ClipRecord]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            d = {k: v for k, v in asdict(r).items() if v is not None}
            f.write(json.dumps(d) + "\n")
    os.replace(tmp, path)


def read_manifest(path, check_files: bool = True) -> list[ClipRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                rec = ClipRecord(**d)
            except (json.JSONDecodeError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: bad manifest line: {e}") from e
            if check_files and not os.path.exists(rec.audio_path):
                raise InvalidInputError(f"{path}:{lineno}: missing audio file {rec.audio_path}")
            records.append(rec)
    return records
