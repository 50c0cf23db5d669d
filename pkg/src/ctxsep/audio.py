"""Waveform I/O, SNR-controlled mixing, and a synthetic two-speaker corpus."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass
class Waveform:
    """Mono audio: float samples in [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    def power(self) -> float:
        """Mean squared amplitude."""
        return float(np.mean(self.samples ** 2))


@dataclass
class MixtureRecord:
    """One simulated mixture: the mix, its clean sources, and how it was made."""

    id: str
    mixture: Waveform
    sources: list[Waveform]
    snr_db: float
    seed: int = 0


def load_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file.

    16-bit PCM is scaled by 1/32768 into [-1, 1); 32-bit float passes
    through. Anything else (or a multichannel file, or a non-WAV header)
    is an error.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"malformed WAV header in {path}: {exc}") from exc
    if data.ndim != 1:
        raise ValueError(f"{path} has {data.shape[1]} channels; only mono is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path} uses unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit PCM, little-endian. Samples are clamped to [-1, 1] first;
    a load/save round trip moves any sample by at most one quantization step."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    quantized = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), w.sample_rate_hz, quantized)


def mix_at_snr(s1: Waveform, s2: Waveform, snr_db: float,
               id: str = "", seed: int = 0) -> MixtureRecord:
    """Scale s2 so that s1 sits snr_db above it, then sum.

    The gain is g = 10^(-snr_db/20) * sqrt(P1/P2) with P the mean squared
    amplitude; the returned sources are [s1, g*s2] so the record remixes
    exactly.
    """
    if s1.sample_rate_hz != s2.sample_rate_hz:
        raise ValueError(f"sample rate mismatch: {s1.sample_rate_hz} vs {s2.sample_rate_hz}")
    if len(s1) != len(s2):
        raise ValueError(f"length mismatch: {len(s1)} vs {len(s2)}")
    p1, p2 = s1.power(), s2.power()
    if p1 == 0.0 or p2 == 0.0:
        raise ValueError("cannot set an SNR against a silent source")
    gain = 10.0 ** (-snr_db / 20.0) * np.sqrt(p1 / p2)
    scaled = Waveform(gain * s2.samples, s2.sample_rate_hz)
    mixture = Waveform(s1.samples + scaled.samples, s1.sample_rate_hz)
    return MixtureRecord(id=id, mixture=mixture, sources=[s1, scaled],
                         snr_db=float(snr_db), seed=seed)


def measured_snr_db(s1: Waveform, s2: Waveform) -> float:
    """SNR of s1 over s2 from their powers."""
    return float(10.0 * np.log10(s1.power() / s2.power()))


def _harmonic_voice(rng: np.random.Generator, n: int, sample_rate_hz: int,
                    f0_low: float, f0_high: float) -> np.ndarray:
    """One synthetic speaker: a few harmonics under a slow amplitude envelope."""
    f0 = rng.uniform(f0_low, f0_high)
    t = np.arange(n) / sample_rate_hz
    voiced = np.zeros(n)
    for h in range(1, 5):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        voiced += np.sin(2.0 * np.pi * h * f0 * t + phase) / h
    am_rate = rng.uniform(0.5, 3.0)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 0.55 + 0.45 * np.sin(2.0 * np.pi * am_rate * t + am_phase)
    voiced *= envelope
    return 0.3 * voiced / np.max(np.abs(voiced))


def synth_toy_corpus(num_utterances: int, duration_s: float, seed: int,
                     out_dir: str | Path, sample_rate_hz: int = 16000) -> Path:
    """Simulate a two-speaker corpus and write WAVs plus a JSONL manifest.

    Speaker slots draw fundamentals from disjoint bands (110-150 Hz and
    220-320 Hz) and the mixing SNR from U[-5, 5] dB. Everything is derived
    from (seed, utterance index), so repeated runs are bit-identical.
    Returns the manifest path.
    """
    if num_utterances <= 0:
        raise ValueError("num_utterances must be positive")
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(round(duration_s * sample_rate_hz))
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for i in range(num_utterances):
            rng = np.random.default_rng([seed, i])
            utt_id = f"utt{i:04d}"
            a = Waveform(_harmonic_voice(rng, n, sample_rate_hz, 110.0, 150.0), sample_rate_hz)
            b = Waveform(_harmonic_voice(rng, n, sample_rate_hz, 220.0, 320.0), sample_rate_hz)
            snr_db = float(rng.uniform(-5.0, 5.0))
            record = mix_at_snr(a, b, snr_db, id=utt_id, seed=seed)
            peak = float(np.max(np.abs(record.mixture.samples)))
            if peak > 0.99:
                # common rescale keeps the SNR exact and the PCM write unclipped
                factor = 0.99 / peak
                record.mixture.samples *= factor
                for src in record.sources:
                    src.samples *= factor
            paths = {
                "mix": f"{utt_id}_mix.wav",
                "sources": [f"{utt_id}_s0.wav", f"{utt_id}_s1.wav"],
            }
            save_wav(out_dir / paths["mix"], record.mixture)
            for p, src in zip(paths["sources"], record.sources):
                save_wav(out_dir / p, src)
            row = {"id": utt_id, "mix": paths["mix"], "sources": paths["sources"],
                   "snr_db": snr_db, "teachers": {}}
            fh.write(json.dumps(row) + "\n")
    return manifest_path


@dataclass
class ManifestEntry:
    """One manifest row; paths are relative to the manifest's directory."""

    id: str
    mix: str
    sources: list[str]
    snr_db: float
    teachers: dict[str, str] = field(default_factory=dict)


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                entries.append(ManifestEntry(
                    id=row["id"], mix=row["mix"], sources=list(row["sources"]),
                    snr_db=float(row["snr_db"]), teachers=dict(row.get("teachers", {}))))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing manifest field {exc}") from exc
    return entries


def save_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            row = {"id": e.id, "mix": e.mix, "sources": e.sources,
                   "snr_db": e.snr_db, "teachers": e.teachers}
            fh.write(json.dumps(row) + "\n")
