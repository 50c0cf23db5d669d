"""Built-in verification battery: gradient checks over every primitive and
both losses through a tiny model, plus the metric, PIT, and format oracles.

Runs in well under a minute so it can gate a fresh build. The corrupt flag
swaps in an op with a deliberately wrong backward pass; the battery must
notice and fail, proving the checker has teeth.
"""
from __future__ import annotations

import struct
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .audio import load_wav, synth_toy_corpus
from .features import FeatureMatrix, log_mel
from .losses import InfoNCEConfig, infonce, pit, si_sdr, si_sdr_loss
from .metrics import sdr
from .model import ModelConfig, Separator, load_checkpoint, save_checkpoint
from .teacher import mock_teacher, read_ctxf, write_ctxf, TeacherFeatures
from .trainer import TrainConfig, group_loss, load_training_data, segregate_loss


def _bad_exp(t: ad.Tensor) -> ad.Tensor:
    out = ad.Tensor(np.exp(t.values))
    out.requires_grad = True
    out._parents = (t,)

    def backward_fn(g: np.ndarray) -> None:
        ad._accumulate(t, g * 1.25 * out.values)  # wrong: scale should be 1.0

    out._backward = backward_fn
    return out


def _primitive_gradients(corrupt: bool) -> float:
    rng = np.random.default_rng(20)

    def store(**arrays) -> ad.ParamStore:
        p = ad.ParamStore()
        for name, arr in arrays.items():
            p.add(name, arr.astype(np.float64))
        return p

    worst = 0.0
    cases = [
        (store(a=rng.normal(size=(3, 5)), b=rng.normal(size=(3, 5))),
         lambda q: ad.sum_(q["a"] * q["b"] + q["a"] / (ad.exp(q["b"]) + 2.0))),
        (store(a=rng.uniform(0.5, 2.0, (4, 4))),
         lambda q: ad.sum_(ad.log(q["a"]) + ad.sqrt(q["a"]) + ad.pow_(q["a"], 1.7))),
        (store(a=rng.normal(size=(2, 9))),
         lambda q: ad.sum_(ad.sigmoid(q["a"]) + ad.relu(q["a"] - 0.1))),
        (store(a=rng.normal(size=(3, 7)), s=rng.uniform(0.1, 0.9, 3)),
         lambda q: ad.sum_(ad.prelu(q["a"], q["s"]))),
        (store(a=rng.normal(size=(2, 6))),
         lambda q: ad.sum_(ad.clamp_min(q["a"], 0.2) * ad.mean_(q["a"], axis=1, keepdims=True))),
        (store(a=rng.normal(size=(12,))),
         lambda q: ad.sum_(ad.narrow(ad.reshape(q["a"], (3, 4)), 1, 2, axis=1))),
        (store(a=rng.normal(size=(3, 4))),
         lambda q, c=rng.normal(size=(4, 3)): ad.sum_(ad.transpose2d(q["a"]) * c)),
        (store(a=rng.normal(size=(2, 8)), b=rng.normal(size=(2, 3))),
         lambda q: ad.sum_(ad.concat([q["a"], q["b"]], axis=1))),
        (store(a=rng.normal(size=(2, 10))),
         lambda q, c=rng.normal(size=(2, 15)): ad.sum_(ad.pad1d(q["a"], 2, 3) * c)),
        (store(x=rng.normal(size=(3, 20)), w=rng.normal(size=(4, 3, 5))),
         lambda q: ad.sum_(ad.conv1d(q["x"], q["w"], stride=2, dilation=2) ** 2)),
        (store(x=rng.normal(size=(4, 7)), w=rng.normal(size=(4, 2, 6))),
         lambda q: ad.sum_(ad.conv_transpose1d(q["x"], q["w"], stride=3) ** 2)),
        (store(x=rng.normal(size=(5, 11)), g=rng.uniform(0.5, 1.5, 5), b=rng.normal(size=5)),
         lambda q: ad.sum_(ad.global_layer_norm(q["x"], q["g"], q["b"]) ** 3)),
    ]
    if corrupt:
        cases.append((store(a=rng.normal(size=(3, 3))),
                      lambda q: ad.sum_(_bad_exp(q["a"]))))
    for params, f in cases:
        worst = max(worst, ad.grad_check(f, params))
    return worst


def _tiny_setup(tmp: Path):
    manifest = synth_toy_corpus(1, 0.3, 21, tmp / "corpus")
    model_cfg = ModelConfig(num_blocks=2, embed_dim=12, bottleneck_dim=6,
                            conv_kernel=3, dilation_cycle=[1, 2], num_speakers=2)
    cfg = TrainConfig(stage="group", targets={"mel": 1.0, "phoneme": 1.0, "signal": 1.0},
                      mock_on_the_fly=True, mock_dim=8, seed=21)
    data, resolved = load_training_data(manifest, cfg, model_cfg,
                                        kinds=("mel", "phoneme"))
    return data[0], resolved, cfg


def _model_gradients(tmp: Path) -> tuple[float, float]:
    utt, model_cfg, cfg = _tiny_setup(tmp)
    group = Separator(model_cfg, seed=21, dtype=np.float64,
                      predictor_kinds=("mel", "phoneme"), signal_head=True,
                      segregator=False)
    err_group = ad.grad_check(lambda q: group_loss(group, utt, cfg)[0],
                              group.params, max_coords=3)
    seg = Separator(model_cfg, seed=22, dtype=np.float64)
    err_seg = ad.grad_check(lambda q: segregate_loss(seg, utt, cfg)[0],
                            seg.params, max_coords=3)
    return err_group, err_seg


def _pit_vs_hungarian() -> float:
    rng = np.random.default_rng(33)
    worst = 0.0
    for s in (2, 3):
        for _ in range(50):
            matrix = rng.normal(size=(s, s))
            _, total = pit(matrix)
            rows, cols = linear_sum_assignment(matrix)
            worst = max(worst, abs(total - matrix[rows, cols].sum()))
    return worst


def _metric_hand_values() -> float:
    worst = abs(sdr(np.array([0.9, 0.0]), np.array([1.0, 0.0])) - 20.0)
    worst = max(worst, abs(sdr(np.array([1.0, 0.0]), np.array([1.0, 0.0])) - 80.0))
    worst = max(worst, abs(sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0])) - 0.0))
    rng = np.random.default_rng(34)
    ref = rng.normal(size=16000)
    est = ref + 0.1 * rng.normal(size=16000)
    worst = max(worst, abs(si_sdr(3.0 * est, ref) - si_sdr(est, ref)))
    return worst


def _infonce_analytic() -> float:
    pred = ad.Tensor(np.array([[1.0, 0.0]]))
    cands = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    worst = abs(float(infonce(pred, cands, 1.0).values) - np.log1p(np.exp(-1.0)))
    worst = max(worst, abs(float(infonce(pred, cands, 0.1).values)
                           - np.log1p(np.exp(-10.0))))
    return worst


def _formats_roundtrip(tmp: Path) -> bool:
    rng = np.random.default_rng(35)
    values = rng.normal(size=(7, 5)).astype(np.float32)
    tf = TeacherFeatures("u0", "phoneme", FeatureMatrix(values, 50.0))
    write_ctxf(tf, tmp / "t.ctxf")
    back = read_ctxf(tmp / "t.ctxf")
    blob = (tmp / "t.ctxf").read_bytes()
    ok = np.array_equal(back.features.values, values)
    ok = ok and blob[:13] == struct.pack("<4sIBf", b"CTXF", 1, 1, 50.0)

    arrays = {"b/w": rng.normal(size=(2, 3)).astype(np.float32),
              "a/w": rng.normal(size=4).astype(np.float32)}
    save_checkpoint(arrays, tmp / "t.caws")
    loaded = load_checkpoint(tmp / "t.caws")
    ok = ok and all(np.array_equal(loaded[k], arrays[k]) for k in arrays)
    ok = ok and (tmp / "t.caws").read_bytes().find(b"a/w") < \
        (tmp / "t.caws").read_bytes().find(b"b/w")
    return ok


def _shape_chain(tmp: Path) -> bool:
    sep = Separator(ModelConfig(num_blocks=2, embed_dim=8, bottleneck_dim=4,
                                dilation_cycle=[1], num_speakers=2), seed=1)
    with ad.no_grad():
        em = sep.encode(np.zeros(16000, dtype=np.float32))
        ok = em.values.shape[1] == 999
        mask = ad.Tensor(np.ones_like(em.values))
        ok = ok and sep.apply_mask_decode(em, mask).values.shape == (16000,)
    manifest = synth_toy_corpus(1, 1.0, 36, tmp / "chain")
    wav = load_wav(manifest.parent / "utt0000_s0.wav")
    mel = log_mel(wav)
    ok = ok and mel.frames == 97
    word = mock_teacher(mel, "word", dim_out=8, seed=0)
    ok = ok and word.features.frames == 24 and word.features.frame_rate_hz == 25.0
    return ok


def run_selfcheck(corrupt: bool = False, emit=print) -> bool:
    started = time.time()
    results: list[tuple[str, bool, str]] = []
    with tempfile.TemporaryDirectory() as tmpdir:
        tmp = Path(tmpdir)

        err = _primitive_gradients(corrupt)
        results.append(("primitive gradients", err <= 1e-4, f"max rel err {err:.2e}"))

        g_err, s_err = _model_gradients(tmp)
        results.append(("model gradients, hybrid group loss", g_err <= 1e-4,
                        f"max rel err {g_err:.2e}"))
        results.append(("model gradients, PIT SI-SDR", s_err <= 1e-4,
                        f"max rel err {s_err:.2e}"))

        gap = _pit_vs_hungarian()
        results.append(("pit vs hungarian", gap <= 1e-9, f"max gap {gap:.2e}"))

        m_err = _metric_hand_values()
        results.append(("sdr/si-sdr hand values", m_err <= 1e-6, f"max err {m_err:.2e}"))

        nce_err = _infonce_analytic()
        results.append(("infonce analytic", nce_err <= 1e-9, f"max err {nce_err:.2e}"))

        results.append(("ctxf/caws roundtrip", _formats_roundtrip(tmp), "byte-exact"))
        results.append(("shape chain", _shape_chain(tmp), "16000 -> 999 -> 16000; 97 mel; 24 word"))

    for name, ok, detail in results:
        emit(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    passed = sum(ok for _, ok, _ in results)
    emit(f"selfcheck: {passed}/{len(results)} passed in {time.time() - started:.1f}s")
    return passed == len(results)
