"""Build a toy two-speaker corpus and inspect what got written.

Each utterance is a pair of band-limited tone-complex sources mixed at a
uniformly drawn SNR in [-5, 5] dB. The manifest is one JSON object per
line; paths are relative to the manifest's directory.
"""
from __future__ import annotations

import json
from pathlib import Path

from ctxsep import audio

out = Path("demo_out/corpus")
manifest = audio.synth_toy_corpus(num_utterances=8, duration_s=1.0, seed=0,
                                  out_dir=out)
print(f"manifest: {manifest}")

entries = audio.load_manifest(manifest)
print(f"{len(entries)} utterances, first entry:")
print(json.dumps(json.loads(manifest.read_text().splitlines()[0]), indent=2))

# the generator scales source 2 so the measured SNR matches the draw
for e in entries[:4]:
    s0 = audio.load_wav(out / e.sources[0])
    s1 = audio.load_wav(out / e.sources[1])
    got = audio.measured_snr_db(s0, s1)
    print(f"{e.id}: manifest snr {e.snr_db:+.2f} dB, measured {got:+.2f} dB")

mix = audio.load_wav(out / entries[0].mix)
print(f"mix: {mix.samples.shape[0]} samples at {mix.sample_rate_hz} Hz, "
      f"peak {abs(mix.samples).max():.3f}")
