"""Overfit a single mixture: the smallest end-to-end training check.

One 1 s two-speaker mixture, segregate-stage training from scratch for
2000 steps at lr 1e-3 on a 4-block model. A working implementation
drives SI-SDRi far past +5 dB on the training mixture in well under
ten minutes of CPU.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

import ctxsep.autodiff as ad
from ctxsep import audio
from ctxsep.metrics import improvement_pair
from ctxsep.model import ModelConfig, Separator, load_checkpoint
from ctxsep.trainer import TrainConfig, train_segregate

started = time.time()
manifest = audio.synth_toy_corpus(1, 1.0, 11, Path("demo_out/one"))
model_cfg = ModelConfig(num_blocks=4, embed_dim=64, bottleneck_dim=32,
                        conv_kernel=3, dilation_cycle=[1, 2, 4, 8],
                        num_speakers=2)
cfg = TrainConfig(stage="segregate", two_stage=False, dev_fraction=0.0,
                  batch_size=1, max_epochs=2000, lr0=1e-3, seed=0)
result = train_segregate(cfg, model_cfg, manifest, Path("demo_out/one_run"))
print(f"trained {result.steps_run} steps -> {result.ckpt_path}")

sep = Separator(model_cfg, seed=cfg.seed)
sep.params.load_arrays(load_checkpoint(result.ckpt_path))
entry = audio.load_manifest(manifest)[0]
root = manifest.parent
mix = audio.load_wav(root / entry.mix)
refs = [audio.load_wav(root / p).samples for p in entry.sources]
with ad.no_grad():
    est = [t.values.astype(np.float64) for t in sep.forward_separation(mix.samples)]
perm, si_sdri = improvement_pair(mix.samples, est, refs, metric="si_sdr")

minutes = (time.time() - started) / 60
print(f"SI-SDRi on the training mixture: {si_sdri:+.2f} dB "
      f"(permutation {tuple(perm)}) in {minutes:.1f} min")
print("PASS (>= +5 dB)" if si_sdri >= 5.0 else "FAIL (< +5 dB)")
