"""Run a pretrained SSL model and dump layer features as CTXF files.

One forward pass per source waveform yields every requested role; the
transformer layers and the conv encoder share the model's stride stack,
so all outputs land on the same frame grid.
"""
from __future__ import annotations

import json
import math
import os
import wave
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .ctxf import FeatureRecord, write_ctxf
from .layermap import DEFAULTS, MODEL_NAMES, ROLES, BASE_HIDDEN, BASE_NUM_LAYERS, LayerMap

DEFAULT_CHECKPOINTS = {
    "hubert": "facebook/hubert-base-ls960",
    "wav2vec2": "facebook/wav2vec2-base",
    "wavlm": "microsoft/wavlm-base",
}

SAMPLE_RATE_HZ = 16000


def _model_class(name: str):
    # imported lazily so --help works without loading torch model code
    from transformers import HubertModel, Wav2Vec2Model, WavLMModel
    return {"hubert": HubertModel, "wav2vec2": Wav2Vec2Model,
            "wavlm": WavLMModel}[name]


def load_wav16k(path: str | Path) -> np.ndarray:
    """Mono 16-bit PCM at 16 kHz, scaled to [-1, 1] float32."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: multichannel unsupported")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = fh.getframerate()
        if rate != SAMPLE_RATE_HZ:
            raise ValueError(f"{path}: expected 16 kHz, got {rate} Hz")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


class Extractor:
    """A loaded model plus its layer map, ready to featurize waveforms."""

    def __init__(self, model_name: str, checkpoint: str | Path | None = None,
                 layer_map: LayerMap | None = None):
        if model_name not in MODEL_NAMES:
            raise ValueError(f"unknown model {model_name!r}; "
                             f"expected one of {MODEL_NAMES}")
        self.model_name = model_name
        self.checkpoint = str(checkpoint or DEFAULT_CHECKPOINTS[model_name])
        self.overridden = layer_map is not None
        self.layer_map = layer_map or DEFAULTS[model_name]

        self.model = _model_class(model_name).from_pretrained(self.checkpoint)
        self.model.eval()
        cfg = self.model.config
        if not self.overridden and (cfg.num_hidden_layers != BASE_NUM_LAYERS
                                    or cfg.hidden_size != BASE_HIDDEN):
            raise ValueError(
                f"{self.checkpoint}: {cfg.num_hidden_layers}-layer/"
                f"{cfg.hidden_size}-dim model is not base-size; the default "
                f"layer map only applies to base variants, pass explicit "
                f"layer overrides to use this checkpoint")
        if self.layer_map.phoneme_layer > cfg.num_hidden_layers \
                or self.layer_map.word_layer > cfg.num_hidden_layers:
            raise ValueError(f"layer map exceeds the model's "
                             f"{cfg.num_hidden_layers} transformer layers")
        if self.layer_map.mel_proxy_layer != len(cfg.conv_stride):
            raise ValueError(f"mel proxy must be the last conv layer "
                             f"({len(cfg.conv_stride)} in this model)")
        stride = math.prod(cfg.conv_stride)
        self.frame_rate_hz = SAMPLE_RATE_HZ / stride

    def header_lines(self) -> list[str]:
        m = self.layer_map
        return [
            f"ssl-extract: model={self.model_name} checkpoint={self.checkpoint}",
            f"layer map (1-based): phoneme=transformer layer {m.phoneme_layer}, "
            f"word=transformer layer {m.word_layer}, "
            f"mel_proxy=conv layer {m.mel_proxy_layer}"
            + (" [overridden]" if self.overridden else " [defaults]"),
        ]

    def features(self, samples: np.ndarray, roles: tuple[str, ...]) -> dict[str, np.ndarray]:
        """One forward pass; returns role -> [frames, dim] float32."""
        for role in roles:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
        x = torch.from_numpy(np.asarray(samples, dtype=np.float32)).unsqueeze(0)
        out: dict[str, np.ndarray] = {}
        with torch.no_grad():
            need_transformer = any(r in roles for r in ("phoneme", "word"))
            if need_transformer:
                hidden = self.model(x, output_hidden_states=True).hidden_states
                for role in ("phoneme", "word"):
                    if role in roles:
                        # hidden[k] is the k-th transformer layer, 1-based
                        layer = self.layer_map.layer_for(role)
                        out[role] = hidden[layer][0].numpy().astype(np.float32)
            if "mel" in roles:
                conv = self.model.feature_extractor(x)
                out["mel"] = conv[0].transpose(0, 1).numpy().astype(np.float32)
        return out


def extract_manifest(extractor: Extractor, manifest_path: str | Path,
                     roles: tuple[str, ...], out_dir: str | Path | None = None,
                     workers: int = 1, log=print) -> int:
    """Featurize every source in the manifest; returns files written.

    The manifest is rewritten atomically with teacher paths keyed
    "<kind>_<source index>", relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out_dir = Path(out_dir) if out_dir is not None else root / "teachers"
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = [json.loads(line) for line in
               manifest_path.read_text().splitlines() if line.strip()]

    def one_source(entry: dict, i: int) -> dict[str, str]:
        samples = load_wav16k(root / entry["sources"][i])
        feats = extractor.features(samples, roles)
        written = {}
        for kind, values in feats.items():
            path = out_dir / f"{entry['id']}_{kind}_{i}.ctxf"
            write_ctxf(FeatureRecord(entry["id"], kind,
                                     extractor.frame_rate_hz, values), path)
            written[f"{kind}_{i}"] = os.path.relpath(path, root)
        return written

    jobs = [(e, i) for e in entries for i in range(len(e["sources"]))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: one_source(*j), jobs))
    else:
        results = [one_source(*j) for j in jobs]

    count = 0
    for (entry, _), written in zip(jobs, results):
        entry.setdefault("teachers", {}).update(written)
        count += len(written)

    tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp.write_text("".join(json.dumps(e) + "\n" for e in entries))
    os.replace(tmp, manifest_path)
    log(f"wrote {count} teacher files for {len(entries)} utterances -> {out_dir}")
    return count
