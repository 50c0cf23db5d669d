"""Exact SDR hand cases, permutation improvements, manifest evaluation."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from ctxsep import audio, metrics


def test_sdr_hand_cases_are_exact() -> None:
    assert abs(metrics.sdr([0.9, 0.0], [1.0, 0.0]) - 20.0) <= 1e-9
    ref = np.array([0.3, -0.2, 0.5])
    assert metrics.sdr(ref, ref) == 80.0  # eps cap
    assert metrics.sdr(np.zeros(3), ref) == 0.0
    assert metrics.sdr(2 * ref, ref) == 0.0  # error energy equals signal energy


def test_sdr_validation() -> None:
    with pytest.raises(ValueError, match="zero"):
        metrics.sdr([0.1, 0.2], [0.0, 0.0])
    with pytest.raises(ValueError, match="length"):
        metrics.sdr([0.1], [0.1, 0.2])


def test_sdr_is_not_scale_invariant() -> None:
    # sanity: this is the plain variant, distinct from si_sdr
    rng = np.random.default_rng(0)
    ref = rng.standard_normal(1000)
    est = ref + 0.1 * rng.standard_normal(1000)
    assert abs(metrics.sdr(2 * est, ref) - metrics.sdr(est, ref)) > 1.0


def _two_tone_case():
    rng = np.random.default_rng(1)
    t = np.arange(8000) / 16000
    a = np.sin(2 * np.pi * 220 * t) * 0.4
    b = np.sin(2 * np.pi * 340 * t) * 0.4
    mix = a + b
    noisy_a = a + 0.02 * rng.standard_normal(len(t))
    noisy_b = b + 0.02 * rng.standard_normal(len(t))
    return mix, a, b, noisy_a, noisy_b


def test_improvement_pair_picks_best_assignment() -> None:
    mix, a, b, noisy_a, noisy_b = _two_tone_case()
    # estimates arrive swapped; the permutation must unswap them
    perm, gain = metrics.improvement_pair(mix, [noisy_b, noisy_a], [a, b], metric="si_sdr")
    assert perm.mapping == (1, 0)
    assert gain > 10.0
    perm_sdr, gain_sdr = metrics.improvement_pair(mix, [noisy_b, noisy_a], [a, b], metric="sdr")
    assert perm_sdr.mapping == (1, 0)
    assert gain_sdr > 10.0


def test_improvement_pair_trims_to_shortest() -> None:
    mix, a, b, noisy_a, noisy_b = _two_tone_case()
    perm, gain = metrics.improvement_pair(mix[:7000], [noisy_a, noisy_b[:6500]], [a, b], "si_sdr")
    assert perm.mapping == (0, 1)
    assert gain > 10.0


def test_improvement_pair_validation() -> None:
    with pytest.raises(ValueError, match="unknown metric"):
        metrics.improvement_pair(np.ones(4), [np.ones(4)], [np.ones(4)], "pesq")
    with pytest.raises(ValueError, match="equally many"):
        metrics.improvement_pair(np.ones(4), [np.ones(4)], [], "sdr")


def _toy_records(tmp_path: Path, n: int = 4):
    manifest = audio.synth_toy_corpus(n, 0.25, seed=21, out_dir=tmp_path)
    entries = audio.load_manifest(manifest)
    records = [
        (e.id, audio.load_wav(tmp_path / e.mix), [audio.load_wav(tmp_path / s) for s in e.sources])
        for e in entries
    ]
    return manifest, records


def test_oracle_model_scores_high(tmp_path: Path) -> None:
    manifest, records = _toy_records(tmp_path)
    by_id = {utt_id: [s.samples for s in sources] for utt_id, _, sources in records}
    order = iter([utt_id for utt_id, _, _ in records])

    def oracle(samples: np.ndarray) -> list[np.ndarray]:
        return by_id[next(order)]

    report = metrics.evaluate_records(records, oracle)
    assert report.aggregate["n"] == len(records)
    assert report.aggregate["si_sdri_mean"] >= 60.0
    for row in report.rows:
        assert row["si_sdri"] >= 60.0


def test_identity_model_scores_zero(tmp_path: Path) -> None:
    manifest, records = _toy_records(tmp_path)

    def identity(samples: np.ndarray) -> list[np.ndarray]:
        return [samples.copy(), samples.copy()]

    report = metrics.evaluate_records(records, identity)
    for row in report.rows:
        assert abs(row["si_sdri"]) <= 1e-6
        assert abs(row["sdri"]) <= 1e-6
    assert abs(report.aggregate["si_sdri_mean"]) <= 1e-6


def test_evaluate_manifest_writes_report_files(tmp_path: Path) -> None:
    manifest, records = _toy_records(tmp_path, n=3)
    out_dir = tmp_path / "eval"

    def identity(samples: np.ndarray) -> list[np.ndarray]:
        return [samples.copy(), samples.copy()]

    report = metrics.evaluate_manifest(manifest, ckpt_path=None, out_dir=out_dir,
                                       forward_fn=identity)
    rows = [json.loads(line) for line in (out_dir / "report.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"id", "si_sdr_mix", "si_sdr_est", "si_sdri", "sdri", "permutation"}
    agg = json.loads((out_dir / "aggregate.json").read_text())
    assert agg["n"] == 3
    assert agg == report.aggregate


def test_evaluate_empty_manifest_warns(tmp_path: Path) -> None:
    empty = tmp_path / "manifest.jsonl"
    empty.write_text("")
    out_dir = tmp_path / "eval"
    with pytest.warns(UserWarning, match="0 utterances"):
        report = metrics.evaluate_manifest(empty, ckpt_path=None, out_dir=out_dir,
                                           forward_fn=lambda s: [s])
    assert report.rows == [] and report.aggregate is None
    assert json.loads((out_dir / "aggregate.json").read_text()) == {"n": 0}
