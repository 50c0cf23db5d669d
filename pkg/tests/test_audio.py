"""WAV round trips, SNR mixing math, and toy-corpus determinism."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile
from scipy.stats import kstest

from ctxsep import audio

SR = 16000


def _sine(freq: float, n: int = SR, amp: float = 0.5) -> audio.Waveform:
    t = np.arange(n) / SR
    return audio.Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


def test_wav_round_trip_within_one_step(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    w = audio.Waveform(rng.uniform(-1, 1, 2000), SR)
    audio.save_wav(tmp_path / "x.wav", w)
    back = audio.load_wav(tmp_path / "x.wav")
    assert back.sample_rate_hz == SR
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768.0


def test_pcm16_scaling_convention(tmp_path: Path) -> None:
    # a stored int16 value of 16384 must load as exactly 0.5
    wavfile.write(tmp_path / "x.wav", SR, np.array([16384, -32768, 0], dtype="<i2"))
    w = audio.load_wav(tmp_path / "x.wav")
    assert w.samples.tolist() == [0.5, -1.0, 0.0]


def test_float32_wav_passes_through(tmp_path: Path) -> None:
    data = np.array([0.25, -0.125], dtype=np.float32)
    wavfile.write(tmp_path / "x.wav", SR, data)
    w = audio.load_wav(tmp_path / "x.wav")
    assert np.allclose(w.samples, data)


def test_save_clamps_out_of_range(tmp_path: Path) -> None:
    w = audio.Waveform(np.array([2.0, -2.0]), SR)
    audio.save_wav(tmp_path / "x.wav", w)
    back = audio.load_wav(tmp_path / "x.wav")
    assert np.allclose(back.samples, [32767 / 32768.0, -1.0])


def test_load_rejects_multichannel(tmp_path: Path) -> None:
    wavfile.write(tmp_path / "st.wav", SR, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(ValueError, match="mono"):
        audio.load_wav(tmp_path / "st.wav")


def test_load_rejects_unsupported_encoding(tmp_path: Path) -> None:
    wavfile.write(tmp_path / "i32.wav", SR, np.zeros(100, dtype=np.int32))
    with pytest.raises(ValueError, match="encoding"):
        audio.load_wav(tmp_path / "i32.wav")


def test_load_rejects_malformed_header(tmp_path: Path) -> None:
    (tmp_path / "bad.wav").write_bytes(b"definitely not a RIFF file")
    with pytest.raises(ValueError, match="malformed WAV header"):
        audio.load_wav(tmp_path / "bad.wav")


def test_equal_power_sources_mix_at_unit_gain() -> None:
    s1, s2 = _sine(300), _sine(440)
    rec = audio.mix_at_snr(s1, s2, 0.0)
    # equal power at 0 dB leaves s2 essentially unscaled
    assert np.allclose(rec.sources[1].samples, s2.samples, atol=1e-9)
    assert np.allclose(rec.mixture.samples, s1.samples + s2.samples)


def test_remixed_snr_matches_request() -> None:
    rng = np.random.default_rng(5)
    for _ in range(25):
        snr = float(rng.uniform(-12, 12))
        s1 = audio.Waveform(rng.standard_normal(4000) * rng.uniform(0.05, 0.4), SR)
        s2 = audio.Waveform(rng.standard_normal(4000) * rng.uniform(0.05, 0.4), SR)
        rec = audio.mix_at_snr(s1, s2, snr)
        assert audio.measured_snr_db(rec.sources[0], rec.sources[1]) == pytest.approx(snr, abs=1e-6)


def test_mixture_scales_linearly_with_first_source() -> None:
    s1, s2 = _sine(250, amp=0.3), _sine(410, amp=0.2)
    doubled = audio.Waveform(2 * s1.samples, SR)
    m1 = audio.mix_at_snr(s1, s2, 3.0).mixture.samples
    m2 = audio.mix_at_snr(doubled, s2, 3.0).mixture.samples
    assert np.allclose(m2, 2 * m1, atol=1e-12)


def test_mix_rejects_silent_and_mismatched_inputs() -> None:
    s = _sine(300)
    silent = audio.Waveform(np.zeros(SR), SR)
    with pytest.raises(ValueError, match="silent"):
        audio.mix_at_snr(s, silent, 0.0)
    with pytest.raises(ValueError, match="length"):
        audio.mix_at_snr(s, _sine(300, n=SR // 2), 0.0)
    with pytest.raises(ValueError, match="sample rate"):
        audio.mix_at_snr(s, audio.Waveform(s.samples, 8000), 0.0)


def test_toy_corpus_is_bit_identical_per_seed(tmp_path: Path) -> None:
    m1 = audio.synth_toy_corpus(4, 0.1, seed=9, out_dir=tmp_path / "a")
    m2 = audio.synth_toy_corpus(4, 0.1, seed=9, out_dir=tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for name in ["utt0000_mix.wav", "utt0002_s1.wav"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m3 = audio.synth_toy_corpus(4, 0.1, seed=10, out_dir=tmp_path / "c")
    assert m1.read_bytes() != m3.read_bytes()


def test_toy_corpus_manifest_schema(tmp_path: Path) -> None:
    manifest = audio.synth_toy_corpus(3, 0.1, seed=1, out_dir=tmp_path)
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(rows) == 3
    for row in rows:
        assert set(row) == {"id", "mix", "sources", "snr_db", "teachers"}
        assert len(row["sources"]) == 2
        assert -5.0 <= row["snr_db"] <= 5.0
        assert row["teachers"] == {}
        assert (tmp_path / row["mix"]).exists()
    entries = audio.load_manifest(manifest)
    assert [e.id for e in entries] == ["utt0000", "utt0001", "utt0002"]


def test_corpus_snr_survives_disk_round_trip(tmp_path: Path) -> None:
    manifest = audio.synth_toy_corpus(12, 0.2, seed=3, out_dir=tmp_path)
    for e in audio.load_manifest(manifest):
        s0 = audio.load_wav(tmp_path / e.sources[0])
        s1 = audio.load_wav(tmp_path / e.sources[1])
        assert audio.measured_snr_db(s0, s1) == pytest.approx(e.snr_db, abs=0.01)


def test_corpus_snr_distribution_is_uniform(tmp_path: Path) -> None:
    manifest = audio.synth_toy_corpus(500, 0.05, seed=0, out_dir=tmp_path)
    snrs = [e.snr_db for e in audio.load_manifest(manifest)]
    assert kstest(snrs, "uniform", args=(-5.0, 10.0)).pvalue > 0.01


def test_waveform_validation() -> None:
    with pytest.raises(ValueError, match="mono"):
        audio.Waveform(np.zeros((2, 10)), SR)
    with pytest.raises(ValueError, match="finite"):
        audio.Waveform(np.array([0.0, np.nan]), SR)
    with pytest.raises(ValueError, match="positive"):
        audio.Waveform(np.zeros(10), 0)
