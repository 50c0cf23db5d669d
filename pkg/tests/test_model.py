"""Separator shape bookkeeping, sharing properties, and checkpoint format."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from ctxsep import autodiff as ad
from ctxsep import losses, model


def tiny_config(**overrides) -> model.ModelConfig:
    base = dict(num_blocks=4, embed_dim=16, bottleneck_dim=8, conv_kernel=3,
                dilation_cycle=[1, 2], num_speakers=2,
                predictor_out_dims={"mel": 80, "phoneme": 64, "word": 64},
                predictor_stride={"mel": 10, "phoneme": 20, "word": 40})
    base.update(overrides)
    return model.ModelConfig(**base)


def test_config_validation() -> None:
    with pytest.raises(ValueError, match="even"):
        tiny_config(num_blocks=3)
    with pytest.raises(ValueError, match="num_speakers"):
        tiny_config(num_speakers=1)
    with pytest.raises(ValueError, match="odd"):
        tiny_config(conv_kernel=4)
    with pytest.raises(ValueError, match="dilation_cycle"):
        tiny_config(dilation_cycle=[])
    cfg = tiny_config()
    assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_frame_counts() -> None:
    sep = model.Separator(tiny_config(), seed=0)
    rng = np.random.default_rng(0)
    em = sep.encode(rng.uniform(-1, 1, 16000))
    assert em.shape == (16, 999)
    assert np.all(em.values >= 0.0)
    assert sep.encode(np.ones(32)).shape == (16, 1)
    assert sep.encoder_rate_hz(16000) == pytest.approx(1000.0)
    with pytest.raises(ValueError, match="shorter"):
        sep.encode(np.ones(31))


def test_extract_context_streams() -> None:
    sep = model.Separator(tiny_config(), seed=1)
    em = sep.encode(np.random.default_rng(1).uniform(-1, 1, 1600))
    streams = sep.extract_context(em)
    assert len(streams) == 2
    for c in streams:
        assert c.shape == (8, em.shape[1])


def test_zero_input_gives_zero_context_at_init() -> None:
    # fresh biases are zero, so the whole linear path stays at zero
    sep = model.Separator(tiny_config(), seed=2)
    streams = sep.extract_context(sep.encode(np.zeros(640)))
    for c in streams:
        assert np.all(c.values == 0.0)


def test_predict_teacher_rates_and_sharing() -> None:
    sep = model.Separator(tiny_config(), seed=3, predictor_kinds=("phoneme", "mel"))
    c = ad.Tensor(np.random.default_rng(2).standard_normal((8, 1000)).astype(np.float32))
    pred = sep.predict_teacher(c, "phoneme")
    assert pred.shape == (64, 50)  # stride 20, kernel 20
    assert sep.predict_teacher(c, "mel").shape == (80, 100)
    again = sep.predict_teacher(c, "phoneme")
    assert np.array_equal(pred.values, again.values)  # one shared predictor
    with pytest.raises(ValueError, match="unknown kind"):
        sep.predict_teacher(c, "foo")


def test_segregate_masks() -> None:
    sep = model.Separator(tiny_config(), seed=4)
    em = sep.encode(np.random.default_rng(3).uniform(-1, 1, 1600))
    c1, c2 = sep.extract_context(em)
    m1 = sep.segregate(c1)
    assert m1.shape == em.shape
    assert np.all((m1.values > 0.0) & (m1.values < 1.0))
    # branches share weights: identical context -> identical mask
    same = sep.segregate(ad.Tensor(c1.values.copy()))
    assert np.array_equal(m1.values, same.values)
    # zeroed final conv -> sigmoid(0) everywhere
    sep.params["segregator/mask.w"].values[:] = 0.0
    sep.params["segregator/mask.b"].values[:] = 0.0
    assert np.all(sep.segregate(c2).values == 0.5)


def test_apply_mask_decode_lengths() -> None:
    sep = model.Separator(tiny_config(), seed=5)
    em = sep.encode(np.random.default_rng(4).uniform(-1, 1, 16000))
    ones = ad.Tensor(np.ones_like(em.values))
    out = sep.apply_mask_decode(em, ones)
    assert out.shape == (16000,)  # (999-1)*16 + 32
    assert sep.output_length(16000) == 16000
    assert sep.output_length(16015) == 16000  # leftover samples are dropped
    plain = ad.conv_transpose1d(em, sep.params["decoder/deconv.w"], stride=16)
    assert np.array_equal(out.values, plain.values.reshape(-1))
    zeros = ad.Tensor(np.zeros_like(em.values))
    assert np.all(sep.apply_mask_decode(em, zeros).values == 0.0)
    with pytest.raises(ValueError, match="shape mismatch"):
        sep.apply_mask_decode(em, ad.Tensor(np.ones((16, 10), dtype=np.float32)))


def test_forward_separation_end_to_end_shapes() -> None:
    sep = model.Separator(tiny_config(), seed=6)
    x = np.random.default_rng(5).uniform(-1, 1, 16000)
    outs = sep.forward_separation(x)
    assert len(outs) == 2
    for s in outs:
        assert s.shape == (16000,)
    again = sep.forward_separation(x)
    for a, b in zip(outs, again):
        assert np.array_equal(a.values, b.values)


def test_every_namespace_receives_gradient() -> None:
    sep = model.Separator(tiny_config(), seed=7)
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, 1600)
    refs = rng.uniform(-1, 1, (2, sep.output_length(1600)))
    outs = sep.forward_separation(x)
    total = losses.si_sdr_loss(outs[0], refs[0]) + losses.si_sdr_loss(outs[1], refs[1])
    ad.backward(total)
    for namespace in ("encoder/", "context/", "segregator/", "decoder/"):
        norm = sep.params.subset(namespace).grad_l2_norm()
        assert norm > 0.0, f"no gradient reached {namespace}"


def test_simo_head_permutation_covariance() -> None:
    cfg = tiny_config()
    sep = model.Separator(cfg, seed=8)
    x = np.random.default_rng(7).uniform(-1, 1, 1600)
    before = [c.values.copy() for c in sep.extract_context(sep.encode(x))]
    outs_before = [o.values.copy() for o in sep.forward_separation(x)]
    b = cfg.bottleneck_dim
    for name in ("context/head.w", "context/head.b"):
        vals = sep.params[name].values
        sep.params[name].values = np.concatenate([vals[b:], vals[:b]], axis=0)
    after = [c.values for c in sep.extract_context(sep.encode(x))]
    assert np.allclose(after[0], before[1]) and np.allclose(after[1], before[0])
    outs_after = [o.values for o in sep.forward_separation(x)]
    assert np.allclose(outs_after[0], outs_before[1], atol=1e-6)
    assert np.allclose(outs_after[1], outs_before[0], atol=1e-6)


def test_construction_is_bit_reproducible() -> None:
    a = model.Separator(tiny_config(), seed=9, predictor_kinds=("word",), signal_head=True)
    b = model.Separator(tiny_config(), seed=9, predictor_kinds=("word",), signal_head=True)
    c = model.Separator(tiny_config(), seed=10, predictor_kinds=("word",), signal_head=True)
    for name, t in a.params.items():
        assert t.values.tobytes() == b.params[name].values.tobytes()
    assert a.params["encoder/conv.w"].values.tobytes() != c.params["encoder/conv.w"].values.tobytes()


def test_group_stage_model_has_no_segregator() -> None:
    sep = model.Separator(tiny_config(), seed=11, predictor_kinds=("phoneme",),
                          signal_head=True, segregator=False)
    names = sep.params.names()
    assert not any(n.startswith("segregator/") for n in names)
    assert any(n.startswith("predictor/phoneme") for n in names)
    assert any(n.startswith("signal_head/") for n in names)
    with pytest.raises(ValueError, match="without a segregator"):
        sep.segregate(ad.Tensor(np.zeros((8, 10), dtype=np.float32)))


def test_signal_head_mask_path() -> None:
    sep = model.Separator(tiny_config(), seed=12, signal_head=True, segregator=False)
    em = sep.encode(np.random.default_rng(8).uniform(-1, 1, 1600))
    c1, _ = sep.extract_context(em)
    mask = sep.signal_head_mask(c1)
    assert mask.shape == em.shape
    assert np.all((mask.values > 0.0) & (mask.values < 1.0))
    est = sep.apply_mask_decode(em, mask)
    assert est.shape == (sep.output_length(1600),)


def test_checkpoint_round_trip_exact(tmp_path: Path) -> None:
    sep = model.Separator(tiny_config(), seed=13, predictor_kinds=("mel",), signal_head=True)
    path = tmp_path / "m.caws"
    model.save_checkpoint(sep.params, path)
    back = model.load_checkpoint(path)
    assert sorted(back) == sep.params.names()
    for name, t in sep.params.items():
        assert back[name].tobytes() == t.values.tobytes()
    # loading into a fresh model reproduces the forward pass bit for bit
    other = model.Separator(tiny_config(), seed=99, predictor_kinds=("mel",), signal_head=True)
    other.params.load_arrays(back)
    x = np.random.default_rng(9).uniform(-1, 1, 800)
    for a, b in zip(sep.forward_separation(x), other.forward_separation(x)):
        assert np.array_equal(a.values, b.values)


def test_checkpoint_header_layout(tmp_path: Path) -> None:
    path = tmp_path / "x.caws"
    model.save_checkpoint({"b": np.zeros((2,), np.float32), "a": np.ones((1, 3), np.float32)}, path)
    blob = path.read_bytes()
    assert blob[:4] == b"CAWS"
    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 2)
    # "a" comes first despite insertion order
    name_len = struct.unpack_from("<H", blob, 12)[0]
    assert blob[14:14 + name_len] == b"a"


def test_checkpoint_error_paths(tmp_path: Path) -> None:
    path = tmp_path / "x.caws"
    model.save_checkpoint({"a": np.ones(4, np.float32)}, path)
    blob = path.read_bytes()
    (tmp_path / "magic.caws").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        model.load_checkpoint(tmp_path / "magic.caws")
    bad_version = blob[:4] + struct.pack("<I", 7) + blob[8:]
    (tmp_path / "ver.caws").write_bytes(bad_version)
    with pytest.raises(ValueError, match="version"):
        model.load_checkpoint(tmp_path / "ver.caws")
    (tmp_path / "trunc.caws").write_bytes(blob[:-6])
    with pytest.raises(ValueError, match="truncated"):
        model.load_checkpoint(tmp_path / "trunc.caws")
    (tmp_path / "trail.caws").write_bytes(blob + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        model.load_checkpoint(tmp_path / "trail.caws")


def test_load_arrays_rejects_mismatches() -> None:
    sep = model.Separator(tiny_config(), seed=14)
    with pytest.raises(KeyError, match="no matching parameter"):
        sep.params.load_arrays({"nonsense": np.zeros(3, np.float32)})
    with pytest.raises(ValueError, match="shape mismatch"):
        sep.params.load_arrays({"encoder/conv.w": np.zeros((1, 1, 1), np.float32)})
