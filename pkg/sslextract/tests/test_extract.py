from __future__ import annotations

import numpy as np
import pytest

from conftest import tone, write_wav
from sslextract.extract import Extractor, load_wav16k
from sslextract.layermap import LayerMap


def test_pcm_scaling(tmp_path):
    write_wav(tmp_path / "a.wav", np.array([0.5, -0.25, 0.0]))
    got = load_wav16k(tmp_path / "a.wav")
    # 16384/32768 = 0.5 within one quantization step
    assert np.allclose(got, [0.5, -0.25, 0.0], atol=1 / 32768)


def test_rejects_8khz(tmp_path):
    write_wav(tmp_path / "a.wav", tone(0.5, 200.0, rate=8000), rate=8000)
    with pytest.raises(ValueError, match="expected 16 kHz"):
        load_wav16k(tmp_path / "a.wav")


def test_rejects_stereo(tmp_path):
    write_wav(tmp_path / "a.wav", tone(0.1, 200.0), channels=2)
    with pytest.raises(ValueError, match="multichannel"):
        load_wav16k(tmp_path / "a.wav")


def test_one_second_frame_oracle(hubert_base_dir):
    # pinned once from the base conv stride stack (5,2,2,2,2,2,2):
    # 16000 samples -> 49 frames; transformer dim 768, conv dim 512
    ex = Extractor("hubert", checkpoint=hubert_base_dir)
    feats = ex.features(tone(1.0, 220.0), ("phoneme", "word", "mel"))
    assert feats["phoneme"].shape == (49, 768)
    assert feats["word"].shape == (49, 768)
    assert feats["mel"].shape == (49, 512)
    assert ex.frame_rate_hz == 50.0
    assert all(v.dtype == np.float32 for v in feats.values())


def test_layers_differ(hubert_base_dir):
    ex = Extractor("hubert", checkpoint=hubert_base_dir)
    feats = ex.features(tone(1.0, 220.0), ("phoneme", "word"))
    assert not np.array_equal(feats["phoneme"], feats["word"])


def test_extraction_deterministic(hubert_base_dir):
    ex = Extractor("hubert", checkpoint=hubert_base_dir)
    wav = tone(1.0, 220.0)
    a = ex.features(wav, ("phoneme",))["phoneme"]
    b = ex.features(wav, ("phoneme",))["phoneme"]
    assert np.array_equal(a, b)


def test_non_base_rejected(tiny_hubert_dir):
    with pytest.raises(ValueError, match="not base-size"):
        Extractor("hubert", checkpoint=tiny_hubert_dir)


def test_override_admits_non_base(tiny_hubert_dir):
    ex = Extractor("hubert", checkpoint=tiny_hubert_dir,
                   layer_map=LayerMap("hubert", phoneme_layer=2, word_layer=1))
    feats = ex.features(tone(0.5, 220.0), ("phoneme", "mel"))
    assert feats["phoneme"].shape[1] == 32
    assert feats["mel"].shape[1] == 16


def test_override_beyond_depth_rejected(tiny_hubert_dir):
    with pytest.raises(ValueError, match="exceeds"):
        Extractor("hubert", checkpoint=tiny_hubert_dir,
                  layer_map=LayerMap("hubert", phoneme_layer=11, word_layer=9))


def test_unknown_role_rejected(tiny_hubert_dir):
    ex = Extractor("hubert", checkpoint=tiny_hubert_dir,
                   layer_map=LayerMap("hubert", phoneme_layer=2, word_layer=1))
    with pytest.raises(ValueError, match="unknown role"):
        ex.features(tone(0.1, 220.0), ("prosody",))
