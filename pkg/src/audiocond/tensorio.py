"""Shared on-disk tensor formats.

Single-tensor ``.cond`` files: one line of JSON (format, version, kind, shape,
dtype, optional frame_rate) terminated by a newline, followed by the raw
little-endian float32 payload in C order.

Multi-tensor containers (checkpoints): one JSON header line holding named
tensor descriptors (shape + byte offset into the payload) plus arbitrary
JSON metadata, followed by the concatenated payloads.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .errors import ParseError

COND_FORMAT = "audiocond/cond"
CONTAINER_FORMAT = "audiocond/tensors"
VERSION = 1


def write_cond(path, array: np.ndarray, kind: str, frame_rate: float | None = None) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header: dict[str, Any] = {
        "format": COND_FORMAT,
        "version": VERSION,
        "kind": kind,
        "dtype": "f32le",
        "shape": list(array.shape),
    }
    if frame_rate is not None:
        header["frame_rate"] = float(frame_rate)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(array.tobytes())
    os.replace(tmp, path)


def read_cond(path) -> tuple[np.ndarray, dict[str, Any]]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParseError(f"{path}: bad condition header: {e}") from e
        _check_header(header, COND_FORMAT, path)
        shape = tuple(header["shape"])
        payload = f.read()
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise ParseError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return array, header


def _check_header(header: dict, expected_format: str, path) -> None:
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise ParseError(f"{path}: not a {expected_format} file")
    if header.get("version") != VERSION:
        raise ParseError(f"{path}: unsupported version {header.get('version')}")
    if header.get("dtype", "f32le") != "f32le":
        raise ParseError(f"{path}: unsupported dtype {header.get('dtype')}")


def write_container(path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    entries = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CONTAINER_FORMAT,
        "version": VERSION,
        "dtype": "f32le",
        "meta": meta or {},
        "tensors": entries,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParseError(f"{path}: bad container header: {e}") from e
        _check_header(header, CONTAINER_FORMAT, path)
        payload = f.read()
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        chunk = payload[start : start + 4 * n]
        if len(chunk) != 4 * n:
            raise ParseError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return tensors, header["meta"]
