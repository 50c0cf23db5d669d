"""Separation metrics: SDR/SI-SDR improvements and manifest-level evaluation."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import Waveform, load_manifest, load_wav
from .losses import Permutation, pit, si_sdr

log = logging.getLogger(__name__)


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def sdr(estimate, reference, eps: float = 1e-8) -> float:
    """Plain (non-scale-invariant) SDR in dB.

    10*log10 of reference energy over error energy; the error energy is
    floored at eps times the reference energy, capping the value at 80 dB
    and making the hand cases exact (perfect -> 80, [0.9,0] vs [1,0] -> 20,
    zero estimate -> 0).
    """
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    num = float(np.dot(ref, ref))
    if num == 0.0:
        raise ValueError("reference signal is identically zero")
    den = float(np.dot(ref - est, ref - est))
    return float(10.0 * np.log10(num / max(den, eps * num)))


_METRICS = {"si_sdr": si_sdr, "sdr": sdr}


def improvement_pair(mix, estimates: list, references: list,
                     metric: str = "si_sdr") -> tuple[Permutation, float]:
    """Best-permutation improvement of a metric over the unprocessed mixture.

    All signals are trimmed to the shortest length present. Returns the
    permutation that maximizes the summed metric and the mean improvement
    metric(est, ref) - metric(mix, ref) across speakers.
    """
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(_METRICS)}")
    if len(estimates) != len(references) or not estimates:
        raise ValueError("need equally many estimates and references")
    fn = _METRICS[metric]
    mix = _samples(mix)
    ests = [_samples(e) for e in estimates]
    refs = [_samples(r) for r in references]
    n = min(len(mix), *(len(x) for x in ests + refs))
    mix, ests, refs = mix[:n], [e[:n] for e in ests], [r[:n] for r in refs]
    s = len(ests)
    scores = np.array([[fn(ests[i], refs[j]) for j in range(s)] for i in range(s)])
    perm, _ = pit(-scores)  # maximize by minimizing the negation
    improvements = [scores[i, j] - fn(mix, refs[j]) for i, j in enumerate(perm)]
    return perm, float(np.mean(improvements))


@dataclass
class EvalReport:
    """Per-utterance metric rows plus corpus-level means."""

    rows: list[dict] = field(default_factory=list)
    aggregate: dict | None = None


def _aggregate(rows: list[dict]) -> dict | None:
    if not rows:
        return None
    return {
        "si_sdri_mean": float(np.mean([r["si_sdri"] for r in rows])),
        "sdri_mean": float(np.mean([r["sdri"] for r in rows])),
        "n": len(rows),
    }


def evaluate_records(records: list[tuple[str, Waveform, list[Waveform]]],
                     forward_fn) -> EvalReport:
    """Evaluate a separation callable over loaded (id, mix, sources) triples.

    forward_fn maps mixture samples to a list of estimated source arrays;
    references and the mixture are trimmed to the estimate length.
    """
    rows = []
    for utt_id, mix, sources in records:
        estimates = forward_fn(mix.samples)
        n = min(len(mix.samples), *(len(e) for e in estimates))
        mix_trimmed = mix.samples[:n]
        ests = [np.asarray(e, dtype=np.float64)[:n] for e in estimates]
        refs = [s.samples[:n] for s in sources]
        scores = np.array([[si_sdr(e, r) for r in refs] for e in ests])
        perm, _ = pit(-scores)
        si_mix = float(np.mean([si_sdr(mix_trimmed, r) for r in refs]))
        si_est = float(np.mean([scores[i, j] for i, j in enumerate(perm)]))
        _, sdri = improvement_pair(mix_trimmed, ests, refs, metric="sdr")
        rows.append({
            "id": utt_id,
            "si_sdr_mix": si_mix,
            "si_sdr_est": si_est,
            "si_sdri": si_est - si_mix,
            "sdri": sdri,
            "permutation": list(perm.mapping),
        })
    report = EvalReport(rows=rows, aggregate=_aggregate(rows))
    if not rows:
        warnings.warn("evaluated 0 utterances; report is empty", stacklevel=2)
    return report


def _forward_from_checkpoint(ckpt_path: Path):
    """Build an inference callable from a checkpoint and its config sidecar."""
    from .config import load_run_config  # local import avoids a cycle

    config_path = Path(str(ckpt_path) + ".config.json")
    if not config_path.exists():
        raise FileNotFoundError(
            f"missing config sidecar {config_path}; it is written next to every checkpoint")
    run = load_run_config(config_path)
    from .model import Separator, load_checkpoint

    sep = Separator(run.model, seed=run.train.seed)
    arrays = load_checkpoint(ckpt_path)
    separation_names = [n for n in sep.params.names()]
    missing = [n for n in separation_names if n not in arrays]
    if missing:
        raise ValueError(f"{ckpt_path}: checkpoint lacks tensors {missing[:4]}...")
    sep.params.load_arrays({n: arrays[n] for n in separation_names})

    def forward(samples: np.ndarray) -> list[np.ndarray]:
        with ad.no_grad():
            return [t.values.astype(np.float64) for t in sep.forward_separation(samples)]

    return forward


def evaluate_manifest(manifest_path: str | Path, ckpt_path: str | Path,
                      out_dir: str | Path | None = None,
                      forward_fn=None) -> EvalReport:
    """Separate every manifest utterance and score it; optionally write
    report.jsonl and aggregate.json under out_dir."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = load_manifest(manifest_path)
    if forward_fn is None and entries:
        forward_fn = _forward_from_checkpoint(Path(ckpt_path))
    records = [
        (e.id, load_wav(root / e.mix), [load_wav(root / p) for p in e.sources])
        for e in entries
    ]
    report = evaluate_records(records, forward_fn)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.jsonl", "w") as fh:
            for row in report.rows:
                fh.write(json.dumps(row) + "\n")
        with open(out_dir / "aggregate.json", "w") as fh:
            json.dump(report.aggregate if report.aggregate is not None else {"n": 0}, fh, indent=2)
            fh.write("\n")
    return report
