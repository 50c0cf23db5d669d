"""Log-mel features, mock teachers, and the CTXF feature-file format.

Teachers live at three clock rates: mel at 100 Hz, phoneme-like at 50 Hz,
word-like at 25 Hz. The trainer pools whichever side is faster, so the
rates only need to divide evenly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ctxsep import audio
from ctxsep.features import log_mel
from ctxsep.teacher import mock_teacher, read_ctxf, write_ctxf

out = Path("demo_out/corpus")
manifest = audio.synth_toy_corpus(2, 1.0, 7, out)
entry = audio.load_manifest(manifest)[0]

wav = audio.load_wav(out / entry.sources[0])
mel = log_mel(wav)
print(f"log-mel: {mel.values.shape} at {mel.frame_rate_hz} Hz")

# mel teachers are the log-mel itself; phoneme and word are pooled
# random projections standing in for SSL layers
for kind in ("phoneme", "word"):
    t = mock_teacher(mel, kind, dim_out=64, seed=3, utterance_id=entry.id)
    f = t.features
    print(f"{kind:8s} teacher: {f.values.shape} at {f.frame_rate_hz} Hz")

# round trip through the binary format: f32 exact
t = mock_teacher(mel, "phoneme", dim_out=64, seed=3, utterance_id=entry.id)
path = Path("demo_out") / "phoneme0.ctxf"
write_ctxf(t, path)
back = read_ctxf(path)
assert np.array_equal(back.features.values, t.features.values)
print(f"CTXF round trip ok: {path} ({path.stat().st_size} bytes), "
      f"kind={back.kind}, rate={back.features.frame_rate_hz} Hz")
