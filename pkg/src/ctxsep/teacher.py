"""Teacher features: the CTXF container format and a mock SSL teacher.

CTXF layout (all little-endian):
    magic "CTXF" | version u32 | kind u8 | frame_rate f32 | frames u32 |
    dim u32 | id_len u16 | id UTF-8 | frames*dim float32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureMatrix

MAGIC = b"CTXF"
VERSION = 1
KIND_CODES = {"mel": 0, "phoneme": 1, "word": 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

# mean-pool factors applied to the 100 Hz log-Mel clock by the mock teacher
POOL_FACTORS = {"phoneme": 2, "word": 4}

_HEADER = struct.Struct("<4sIBfIIH")


@dataclass
class TeacherFeatures:
    """A teacher representation for one utterance."""

    utterance_id: str
    kind: str
    features: FeatureMatrix

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown teacher kind {self.kind!r}; expected one of {sorted(KIND_CODES)}")


def write_ctxf(tf: TeacherFeatures, path: str | Path) -> None:
    """Serialize a TeacherFeatures to disk; values are stored as float32."""
    values = np.ascontiguousarray(tf.features.values, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise ValueError("teacher features contain non-finite values")
    id_bytes = tf.utterance_id.encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, KIND_CODES[tf.kind],
                          float(tf.features.frame_rate_hz),
                          tf.features.frames, tf.features.dim, len(id_bytes))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(id_bytes)
        fh.write(values.tobytes())


def read_ctxf(path: str | Path) -> TeacherFeatures:
    """Read a CTXF file back, bit-exact for float32 payloads."""
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
        raise ValueError(
            f"{path}: truncated payload (header claims {expected} bytes, found {len(blob) - offset})")
    values = np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=offset)
    values = values.reshape(frames, dim).copy()
    return TeacherFeatures(utt_id, CODE_KINDS[kind_code],
                           FeatureMatrix(values, float(frame_rate)))


def mock_teacher(mel: FeatureMatrix, kind: str, dim_out: int = 64,
                 seed: int = 0, utterance_id: str = "") -> TeacherFeatures:
    """Stand-in for an SSL teacher: a frozen random linear map of the log-Mel
    plus mean pooling (x2 for phoneme-rate, x4 for word-rate).

    The projection depends only on (seed, kind, dims), so every utterance in
    a corpus sees the same frozen teacher.
    """
    if kind == "mel":
        raise ValueError("kind 'mel' needs no mock teacher; use log_mel directly")
    if kind not in POOL_FACTORS:
        raise ValueError(f"unknown teacher kind {kind!r}")
    rng = np.random.default_rng([seed, KIND_CODES[kind], mel.dim, dim_out])
    projection = rng.normal(0.0, 1.0 / np.sqrt(mel.dim), size=(mel.dim, dim_out))
    projected = mel.values.astype(np.float64) @ projection
    factor = POOL_FACTORS[kind]
    t = projected.shape[0] // factor
    if t == 0:
        raise ValueError(f"too few frames ({projected.shape[0]}) to pool by {factor}")
    pooled = projected[:t * factor].reshape(t, factor, dim_out).mean(axis=1)
    return TeacherFeatures(utterance_id, kind,
                           FeatureMatrix(pooled.astype(np.float32),
                                         mel.frame_rate_hz / factor))
