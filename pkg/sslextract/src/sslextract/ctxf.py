"""CTXF: the binary feature container the training side consumes.

Layout (all little-endian):
    magic "CTXF" | version u32 | kind u8 | frame_rate f32 | frames u32 |
    dim u32 | id_len u16 | id UTF-8 | frames*dim float32, row-major
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CTXF"
VERSION = 1
KIND_CODES = {"mel": 0, "phoneme": 1, "word": 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

_HEADER = struct.Struct("<4sIBfIIH")


@dataclass
class FeatureRecord:
    """One utterance's features for one teacher kind."""

    utterance_id: str
    kind: str
    frame_rate_hz: float
    values: np.ndarray  # [frames, dim] float32

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown kind {self.kind!r}; "
                             f"expected one of {sorted(KIND_CODES)}")
        self.values = np.ascontiguousarray(self.values, dtype="<f4")
        if self.values.ndim != 2:
            raise ValueError(f"values must be [frames, dim], got {self.values.shape}")


def write_ctxf(rec: FeatureRecord, path: str | Path) -> None:
    """Write atomically: a reader never sees a half-written file."""
    path = Path(path)
    if not np.all(np.isfinite(rec.values)):
        raise ValueError("features contain non-finite values")
    id_bytes = rec.utterance_id.encode("utf-8")
    frames, dim = rec.values.shape
    header = _HEADER.pack(MAGIC, VERSION, KIND_CODES[rec.kind],
                          float(rec.frame_rate_hz), frames, dim, len(id_bytes))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(id_bytes)
        fh.write(rec.values.tobytes())
    os.replace(tmp, path)


def read_ctxf(path: str | Path) -> FeatureRecord:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated payload (file shorter than header)")
    magic, version, kind_code, frame_rate, frames, dim, id_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if kind_code not in CODE_KINDS:
        raise ValueError(f"{path}: unknown kind code {kind_code}")
    offset = _HEADER.size
    if len(blob) < offset + id_len:
        raise ValueError(f"{path}: truncated payload (utterance id cut short)")
    utt_id = blob[offset:offset + id_len].decode("utf-8")
    offset += id_len
    expected = frames * dim * 4
    if len(blob) - offset != expected:
        raise ValueError(f"{path}: truncated payload (header claims {expected} "
                         f"bytes, found {len(blob) - offset})")
    values = np.frombuffer(blob, dtype="<f4", count=frames * dim,
                           offset=offset).reshape(frames, dim).copy()
    return FeatureRecord(utt_id, CODE_KINDS[kind_code], float(frame_rate), values)
