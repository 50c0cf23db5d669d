"""The SIMO-SISO masking separator and its checkpoint format.

Pipeline: waveform -> strided conv encoder -> context extractor (N/2 dilated
conv blocks, SIMO channel-split head) -> per-stream segregator (N/2 blocks,
weights shared across streams) -> sigmoid masks -> transposed-conv decoder.
The group-stage extras (teacher predictors and a 1x1 mask head on the
context streams) hang off the same parameter store under their own
namespaces.

Checkpoint layout (CAWS, little-endian):
    magic "CAWS" | version u32 | tensor count u32 | per tensor:
    name_len u16 | name UTF-8 | ndim u8 | dims u32 each | float32 data,
    tensors in lexicographic name order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

DEFAULT_PREDICTOR_DIMS = {"mel": 80, "phoneme": 64, "word": 64}
DEFAULT_PREDICTOR_STRIDES = {"mel": 10, "phoneme": 20, "word": 40}


@dataclass
class ModelConfig:
    """Separator hyperparameters; defaults give the toy-scale backbone."""

    num_blocks: int = 8
    embed_dim: int = 128
    bottleneck_dim: int = 64
    conv_kernel: int = 3
    dilation_cycle: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    num_speakers: int = 2
    enc_kernel: int = 32
    enc_stride: int = 16
    predictor_out_dims: dict[str, int] = field(default_factory=dict)
    predictor_stride: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_blocks <= 0 or self.num_blocks % 2 != 0:
            raise ValueError(f"num_blocks must be positive and even, got {self.num_blocks}")
        if self.num_speakers < 2:
            raise ValueError(f"num_speakers must be >= 2, got {self.num_speakers}")
        for name in ("embed_dim", "bottleneck_dim", "conv_kernel", "enc_kernel", "enc_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd so block padding preserves length")
        if not self.dilation_cycle or any(d <= 0 for d in self.dilation_cycle):
            raise ValueError("dilation_cycle must be a non-empty list of positive integers")

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks, "embed_dim": self.embed_dim,
            "bottleneck_dim": self.bottleneck_dim, "conv_kernel": self.conv_kernel,
            "dilation_cycle": list(self.dilation_cycle), "num_speakers": self.num_speakers,
            "enc_kernel": self.enc_kernel, "enc_stride": self.enc_stride,
            "predictor_out_dims": dict(self.predictor_out_dims),
            "predictor_stride": dict(self.predictor_stride),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                     dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Separator:
    """The separation network; all parameters live in one ParamStore.

    Namespaces: encoder/, context/, segregator/, decoder/, and (when
    requested) predictor/<kind> and signal_head/. Parameters are created in
    a fixed order from a single seeded generator, so construction is
    bit-reproducible.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 predictor_kinds: tuple[str, ...] = (), signal_head: bool = False,
                 segregator: bool = True):
        self.config = config
        self.dtype = dtype
        self.predictor_kinds = tuple(sorted(predictor_kinds))
        self.has_signal_head = signal_head
        self.has_segregator = segregator
        for kind in self.predictor_kinds:
            if kind not in config.predictor_out_dims or kind not in config.predictor_stride:
                raise ValueError(f"predictor kind {kind!r} missing from predictor_out_dims/stride")
        self.params = ad.ParamStore()
        self._build(np.random.default_rng([seed]))

    # construction -----------------------------------------------------

    def _conv(self, rng, name: str, c_out: int, c_in: int, k: int) -> None:
        self.params.add(f"{name}.w", _kaiming_uniform(rng, (c_out, c_in, k), self.dtype))
        self.params.add(f"{name}.b", np.zeros(c_out, dtype=self.dtype))

    def _block(self, rng, prefix: str) -> None:
        cfg = self.config
        b, p = cfg.bottleneck_dim, cfg.conv_kernel
        self._conv(rng, f"{prefix}/conv", b, b, p)
        self.params.add(f"{prefix}/gln.g", np.ones(b, dtype=self.dtype))
        self.params.add(f"{prefix}/gln.b", np.zeros(b, dtype=self.dtype))
        self._conv(rng, f"{prefix}/proj", b, b, 1)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        half = cfg.num_blocks // 2
        self._conv(rng, "encoder/conv", cfg.embed_dim, 1, cfg.enc_kernel)
        self._conv(rng, "context/bottleneck", cfg.bottleneck_dim, cfg.embed_dim, 1)
        for j in range(half):
            self._block(rng, f"context/block{j}")
        self._conv(rng, "context/head",
                   cfg.num_speakers * cfg.bottleneck_dim, cfg.bottleneck_dim, 1)
        if self.has_segregator:
            for j in range(half):
                self._block(rng, f"segregator/block{j}")
            self._conv(rng, "segregator/mask", cfg.embed_dim, cfg.bottleneck_dim, 1)
        if self.has_segregator or self.has_signal_head:
            # decoder has no bias: a zero mask must decode to exact silence
            self.params.add("decoder/deconv.w",
                            _kaiming_uniform(rng, (cfg.embed_dim, 1, cfg.enc_kernel), self.dtype))
        if self.has_signal_head:
            self._conv(rng, "signal_head/mask", cfg.embed_dim, cfg.bottleneck_dim, 1)
        for kind in self.predictor_kinds:
            stride = cfg.predictor_stride[kind]
            self._conv(rng, f"predictor/{kind}", cfg.predictor_out_dims[kind],
                       cfg.bottleneck_dim, stride)

    # forward pieces ---------------------------------------------------

    def _conv_apply(self, x: ad.Tensor, name: str, stride: int = 1,
                    dilation: int = 1) -> ad.Tensor:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return ad.conv1d(x, w, stride=stride, dilation=dilation) + ad.reshape(b, (-1, 1))

    def _block_apply(self, x: ad.Tensor, prefix: str, dilation: int) -> ad.Tensor:
        pad = dilation * (self.config.conv_kernel - 1) // 2
        y = self._conv_apply(ad.pad1d(x, pad, pad), f"{prefix}/conv", dilation=dilation)
        y = ad.relu(y)
        y = ad.global_layer_norm(y, self.params[f"{prefix}/gln.g"], self.params[f"{prefix}/gln.b"])
        y = self._conv_apply(y, f"{prefix}/proj")
        return x + y

    def num_frames(self, num_samples: int) -> int:
        cfg = self.config
        if num_samples < cfg.enc_kernel:
            raise ValueError(f"input ({num_samples} samples) shorter than one kernel ({cfg.enc_kernel})")
        return (num_samples - cfg.enc_kernel) // cfg.enc_stride + 1

    def output_length(self, num_samples: int) -> int:
        return (self.num_frames(num_samples) - 1) * self.config.enc_stride + self.config.enc_kernel

    def encoder_rate_hz(self, sample_rate_hz: int) -> float:
        return sample_rate_hz / self.config.enc_stride

    def encode(self, x: np.ndarray) -> ad.Tensor:
        """Waveform samples [tau] -> nonnegative embedding [D, T]."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1)
        self.num_frames(len(x))  # validates length
        xt = ad.Tensor(x.reshape(1, -1))
        return ad.relu(self._conv_apply(xt, "encoder/conv", stride=self.config.enc_stride))

    def extract_context(self, em: ad.Tensor) -> list[ad.Tensor]:
        """Mixture embedding [D, T] -> S context streams, each [B, T]."""
        cfg = self.config
        y = self._conv_apply(em, "context/bottleneck")
        for j in range(cfg.num_blocks // 2):
            dilation = cfg.dilation_cycle[j % len(cfg.dilation_cycle)]
            y = self._block_apply(y, f"context/block{j}", dilation)
        heads = self._conv_apply(y, "context/head")
        return [ad.narrow(heads, i * cfg.bottleneck_dim, cfg.bottleneck_dim, axis=0)
                for i in range(cfg.num_speakers)]

    def predict_teacher(self, c: ad.Tensor, kind: str) -> ad.Tensor:
        """Context stream [B, T] -> teacher-rate prediction [dim_out, T_out]."""
        if kind not in self.predictor_kinds:
            raise ValueError(f"unknown kind {kind!r}; configured: {list(self.predictor_kinds)}")
        return self._conv_apply(c, f"predictor/{kind}",
                                stride=self.config.predictor_stride[kind])

    def segregate(self, c: ad.Tensor) -> ad.Tensor:
        """Context stream [B, T] -> mask in (0,1), shape [D, T]; weights shared."""
        if not self.has_segregator:
            raise ValueError("model was built without a segregator")
        cfg = self.config
        y = c
        for j in range(cfg.num_blocks // 2):
            dilation = cfg.dilation_cycle[j % len(cfg.dilation_cycle)]
            y = self._block_apply(y, f"segregator/block{j}", dilation)
        return ad.sigmoid(self._conv_apply(y, "segregator/mask"))

    def signal_head_mask(self, c: ad.Tensor) -> ad.Tensor:
        """Group-stage stand-in mask straight off a context stream."""
        if not self.has_signal_head:
            raise ValueError("model was built without a signal head")
        w, b = self.params["signal_head/mask.w"], self.params["signal_head/mask.b"]
        return ad.sigmoid(ad.conv1d(c, w) + ad.reshape(b, (-1, 1)))

    def apply_mask_decode(self, em: ad.Tensor, mask: ad.Tensor) -> ad.Tensor:
        """Masked embedding -> waveform [(T-1)*stride + kernel]."""
        if em.values.shape != mask.values.shape:
            raise ValueError(f"shape mismatch: embedding {em.values.shape}, mask {mask.values.shape}")
        masked = em * mask
        out = ad.conv_transpose1d(masked, self.params["decoder/deconv.w"],
                                  stride=self.config.enc_stride)
        return ad.reshape(out, (-1,))

    def forward_separation(self, x: np.ndarray) -> list[ad.Tensor]:
        em = self.encode(x)
        return [self.apply_mask_decode(em, self.segregate(c))
                for c in self.extract_context(em)]


# checkpoint I/O -------------------------------------------------------

CKPT_MAGIC = b"CAWS"
CKPT_VERSION = 1


def save_checkpoint(params, path: str | Path) -> None:
    """Write named tensors as float32, lexicographic by name."""
    if isinstance(params, ad.ParamStore):
        arrays = params.state_arrays()
    else:
        arrays = dict(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
        except (struct.error, ValueError) as exc:
            raise ValueError(f"{path}: truncated checkpoint") from exc
        if arr.size != size:
            raise ValueError(f"{path}: truncated checkpoint")
        arrays[name] = arr.reshape(dims).copy()
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return arrays
