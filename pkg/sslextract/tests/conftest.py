from __future__ import annotations

import json
import wave
from pathlib import Path

import numpy as np
import pytest
import torch
from transformers import HubertConfig, HubertModel


@pytest.fixture(scope="session")
def hubert_base_dir(tmp_path_factory) -> Path:
    """A base-size hubert checkpoint with random weights, saved locally."""
    torch.manual_seed(0)
    model = HubertModel(HubertConfig())
    d = tmp_path_factory.mktemp("hubert_base")
    model.save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def tiny_hubert_dir(tmp_path_factory) -> Path:
    """A deliberately non-base 4-layer model for the rejection path."""
    torch.manual_seed(1)
    cfg = HubertConfig(num_hidden_layers=4, hidden_size=32,
                       intermediate_size=64, num_attention_heads=2,
                       conv_dim=[16] * 7)
    model = HubertModel(cfg)
    d = tmp_path_factory.mktemp("hubert_tiny")
    model.save_pretrained(d)
    return d


def write_wav(path: Path, samples: np.ndarray, rate: int = 16000,
              channels: int = 1) -> None:
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    if channels > 1:
        pcm = np.repeat(pcm[:, None], channels, axis=1).reshape(-1)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def tone(duration_s: float, freq: float, rate: int = 16000) -> np.ndarray:
    t = np.arange(int(duration_s * rate)) / rate
    return (0.3 * np.sin(2 * np.pi * freq * t)).astype(np.float32)


@pytest.fixture()
def toy_manifest(tmp_path) -> Path:
    """Two 0.5 s utterances with handwritten wavs and manifest."""
    root = tmp_path / "corpus"
    root.mkdir()
    entries = []
    for n, (f0, f1) in enumerate([(220.0, 330.0), (180.0, 400.0)]):
        s0, s1 = tone(0.5, f0), tone(0.5, f1)
        uid = f"utt{n:04d}"
        write_wav(root / f"{uid}_s0.wav", s0)
        write_wav(root / f"{uid}_s1.wav", s1)
        write_wav(root / f"{uid}_mix.wav", s0 + s1)
        entries.append({"id": uid, "mix": f"{uid}_mix.wav",
                        "sources": [f"{uid}_s0.wav", f"{uid}_s1.wav"],
                        "snr_db": 0.0, "teachers": {}})
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(e) + "\n" for e in entries))
    return manifest
