"""CTXF serialization round trips and mock-teacher properties."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from ctxsep import teacher
from ctxsep.audio import Waveform
from ctxsep.features import FeatureMatrix, log_mel


def _random_tf(seed: int = 0, frames: int = 50, dim: int = 64,
               kind: str = "phoneme", utt_id: str = "utt0001") -> teacher.TeacherFeatures:
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((frames, dim)).astype(np.float32)
    return teacher.TeacherFeatures(utt_id, kind, FeatureMatrix(values, 50.0))


def test_ctxf_round_trip_is_exact(tmp_path: Path) -> None:
    tf = _random_tf()
    path = tmp_path / "x.ctxf"
    teacher.write_ctxf(tf, path)
    back = teacher.read_ctxf(path)
    assert back.utterance_id == tf.utterance_id
    assert back.kind == tf.kind
    assert back.features.frame_rate_hz == tf.features.frame_rate_hz
    assert back.features.values.tobytes() == tf.features.values.tobytes()


def test_ctxf_header_layout(tmp_path: Path) -> None:
    tf = _random_tf(frames=3, dim=2, kind="word", utt_id="ab")
    path = tmp_path / "x.ctxf"
    teacher.write_ctxf(tf, path)
    blob = path.read_bytes()
    expected_header = struct.pack("<4sIBfIIH", b"CTXF", 1, 2, 50.0, 3, 2, 2)
    assert blob[:len(expected_header)] == expected_header
    assert blob[len(expected_header):len(expected_header) + 2] == b"ab"
    assert len(blob) == len(expected_header) + 2 + 3 * 2 * 4


def test_ctxf_rejects_bad_magic(tmp_path: Path) -> None:
    path = tmp_path / "x.ctxf"
    teacher.write_ctxf(_random_tf(), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="bad magic"):
        teacher.read_ctxf(path)


def test_ctxf_rejects_version_mismatch(tmp_path: Path) -> None:
    path = tmp_path / "x.ctxf"
    teacher.write_ctxf(_random_tf(), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="version"):
        teacher.read_ctxf(path)


def test_ctxf_rejects_truncated_and_padded_payload(tmp_path: Path) -> None:
    path = tmp_path / "x.ctxf"
    teacher.write_ctxf(_random_tf(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="truncated payload"):
        teacher.read_ctxf(path)
    path.write_bytes(blob + b"\x00\x00")
    with pytest.raises(ValueError, match="truncated payload"):
        teacher.read_ctxf(path)
    path.write_bytes(blob[:10])
    with pytest.raises(ValueError, match="truncated payload"):
        teacher.read_ctxf(path)


def test_teacher_kind_is_validated() -> None:
    with pytest.raises(ValueError, match="unknown teacher kind"):
        teacher.TeacherFeatures("u", "syllable", FeatureMatrix(np.zeros((2, 2)), 50.0))


def _one_second_mel(seed: int = 0) -> FeatureMatrix:
    rng = np.random.default_rng(seed)
    return log_mel(Waveform(rng.uniform(-0.5, 0.5, 16000), 16000))


def test_mock_teacher_rates_and_shapes() -> None:
    mel = _one_second_mel()
    assert mel.frames == 97
    phoneme = teacher.mock_teacher(mel, "phoneme", seed=1)
    word = teacher.mock_teacher(mel, "word", seed=1)
    assert phoneme.features.values.shape == (48, 64)
    assert phoneme.features.frame_rate_hz == pytest.approx(50.0)
    assert word.features.values.shape == (24, 64)
    assert word.features.frame_rate_hz == pytest.approx(25.0)


def test_mock_teacher_is_linear() -> None:
    rng = np.random.default_rng(3)
    a = FeatureMatrix(rng.standard_normal((40, 80)), 100.0)
    b = FeatureMatrix(rng.standard_normal((40, 80)), 100.0)
    both = FeatureMatrix(a.values + b.values, 100.0)
    fa = teacher.mock_teacher(a, "phoneme", seed=7).features.values.astype(np.float64)
    fb = teacher.mock_teacher(b, "phoneme", seed=7).features.values.astype(np.float64)
    fab = teacher.mock_teacher(both, "phoneme", seed=7).features.values.astype(np.float64)
    rel = np.max(np.abs(fab - (fa + fb))) / np.max(np.abs(fab))
    assert rel <= 1e-6


def test_mock_teacher_is_frozen_per_seed() -> None:
    mel = _one_second_mel(1)
    x = teacher.mock_teacher(mel, "word", seed=5).features.values
    y = teacher.mock_teacher(mel, "word", seed=5).features.values
    z = teacher.mock_teacher(mel, "word", seed=6).features.values
    assert x.tobytes() == y.tobytes()
    assert x.tobytes() != z.tobytes()


def test_mock_teacher_rejects_mel_kind() -> None:
    with pytest.raises(ValueError, match="log_mel directly"):
        teacher.mock_teacher(_one_second_mel(), "mel")


def test_mock_teacher_round_trips_through_ctxf(tmp_path: Path) -> None:
    tf = teacher.mock_teacher(_one_second_mel(), "phoneme", seed=2, utterance_id="utt0000")
    path = tmp_path / "t.ctxf"
    teacher.write_ctxf(tf, path)
    back = teacher.read_ctxf(path)
    assert back.features.values.tobytes() == tf.features.values.tobytes()
    assert back.utterance_id == "utt0000"
