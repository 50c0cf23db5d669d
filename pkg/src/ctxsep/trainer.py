"""Two-stage training: group stage against teacher features, then the
segregate stage for the full masking separator.

Both stages share one loop: seeded batch order, Adam with gradient
clipping, plateau learning-rate decay and early stopping on the dev loss,
best-checkpoint selection. The group stage trains encoder + context
extractor (+ predictors and an optional signal head); the segregate stage
starts from those weights and trains the whole model with PIT SI-SDR.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import load_manifest, load_wav
from .features import log_mel
from .losses import InfoNCEConfig, candidate_indices, hybrid_loss, infonce, pit_nodes, si_sdr_loss
from .model import (DEFAULT_PREDICTOR_STRIDES, ModelConfig, Separator,
                    load_checkpoint, save_checkpoint)
from .teacher import mock_teacher, read_ctxf

CONTEXT_KINDS = ("mel", "phoneme", "word")
TARGET_NAMES = ("signal",) + CONTEXT_KINDS


@dataclass
class TrainConfig:
    """Knobs for one training stage."""

    stage: str = "segregate"
    targets: dict[str, float] = field(default_factory=dict)
    lr0: float = 1e-3
    batch_size: int = 2
    max_epochs: int = 200
    plateau_patience: int = 5
    early_stop_patience: int = 30
    lr_decay: float = 0.5
    infonce: InfoNCEConfig = field(default_factory=InfoNCEConfig)
    seed: int = 0
    group_ckpt: str | None = None
    two_stage: bool = True
    transfer: str = "context+encoder"
    dev_fraction: float = 0.1
    grad_clip: float = 5.0
    min_improvement: float = 1e-6
    mock_on_the_fly: bool = False
    mock_dim: int = 64

    def __post_init__(self):
        if self.stage not in ("group", "segregate"):
            raise ValueError(f"stage must be 'group' or 'segregate', got {self.stage!r}")
        for name, weight in self.targets.items():
            if name not in TARGET_NAMES:
                raise ValueError(f"unknown target {name!r}; expected subset of {TARGET_NAMES}")
            if weight <= 0:
                raise ValueError(f"target weight for {name!r} must be positive")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise ValueError("patience values must be positive")
        if self.transfer not in ("context", "context+encoder"):
            raise ValueError(f"transfer must be 'context' or 'context+encoder', got {self.transfer!r}")
        if not (0.0 <= self.dev_fraction < 1.0):
            raise ValueError("dev_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "targets": dict(self.targets), "lr0": self.lr0,
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "plateau_patience": self.plateau_patience,
            "early_stop_patience": self.early_stop_patience, "lr_decay": self.lr_decay,
            "infonce": {"temperature": self.infonce.temperature,
                        "num_negatives": self.infonce.num_negatives,
                        "seed": self.infonce.seed},
            "seed": self.seed, "group_ckpt": self.group_ckpt, "two_stage": self.two_stage,
            "transfer": self.transfer, "dev_fraction": self.dev_fraction,
            "grad_clip": self.grad_clip, "min_improvement": self.min_improvement,
            "mock_on_the_fly": self.mock_on_the_fly, "mock_dim": self.mock_dim,
        }


class Adam:
    """Bias-corrected Adam over a ParamStore, deterministic iteration order."""

    def __init__(self, params: ad.ParamStore, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(t.values), np.zeros_like(t.values))
            for name, t in params.items()
        }

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            m, v = self.moments[name]
            m *= b1
            m += (1.0 - b1) * t.grad
            v *= b2
            v += (1.0 - b2) * t.grad * t.grad
            m_hat = m / bias1
            v_hat = v / bias2
            t.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(optimizer: Adam, lr: float | None = None) -> None:
    """One in-place update; gradients must be populated."""
    optimizer.step(lr)


def plateau_schedule(history: list[float], lr: float, patience: int = 5,
                     factor: float = 0.5, min_improvement: float = 1e-6) -> float:
    """Replay the decay rule over a dev-loss history, starting from lr.

    The rate halves each time `patience` consecutive epochs fail to improve
    on the best seen loss by at least min_improvement; the counter resets on
    improvement and on decay.
    """
    if not history:
        raise ValueError("history must be nonempty")
    best = np.inf
    since = 0
    out = lr
    for loss in history:
        if best - loss >= min_improvement:
            best = loss
            since = 0
        else:
            since += 1
            if since >= patience:
                out *= factor
                since = 0
    return out


def early_stop(history: list[float], patience: int = 30,
               min_improvement: float = 1e-6) -> bool:
    """True once the best loss is at least `patience` epochs old."""
    best = np.inf
    best_epoch = -1
    for i, loss in enumerate(history):
        if best - loss >= min_improvement:
            best = loss
            best_epoch = i
    return best_epoch >= 0 and (len(history) - 1 - best_epoch) >= patience


def dev_split(ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic train/dev id split by seeded hash ordering."""
    def key(utt_id: str) -> tuple[str, str]:
        return (hashlib.sha256(f"{seed}:{utt_id}".encode()).hexdigest(), utt_id)

    ordered = sorted(ids, key=key)
    n_dev = int(round(fraction * len(ids)))
    dev = set(ordered[:n_dev])
    return [i for i in ids if i not in dev], [i for i in ids if i in dev]


# data loading ---------------------------------------------------------


@dataclass
class TeacherBundle:
    """Aligned teacher material for one (utterance, kind) pair.

    pooled is [S, T, dim] on the common clock; cand_idx[speaker] indexes
    the flattened pooled array per frame; pred_pool is the integer factor
    by which the predictor output must be mean-pooled to reach that clock.
    """

    pooled: np.ndarray
    cand_idx: list[np.ndarray]
    pred_pool: int
    frames: int


@dataclass
class Utterance:
    id: str
    mix: np.ndarray
    sources: list[np.ndarray]
    teachers: dict[str, TeacherBundle] = field(default_factory=dict)


def _pool_rows(values: np.ndarray, factor: int) -> np.ndarray:
    t = values.shape[0] // factor
    return values[:t * factor].reshape(t, factor, values.shape[1]).mean(axis=1)


def _load_teacher_features(entry, root: Path, kind: str, source_idx: int,
                           source: np.ndarray, sample_rate: int, cfg: TrainConfig):
    if cfg.mock_on_the_fly:
        mel = log_mel(_waveform(source, sample_rate))
        if kind == "mel":
            return mel.values.astype(np.float64), mel.frame_rate_hz
        tf = mock_teacher(mel, kind, dim_out=cfg.mock_dim, seed=cfg.infonce.seed,
                          utterance_id=entry.id)
        return tf.features.values.astype(np.float64), tf.features.frame_rate_hz
    key = f"{kind}_{source_idx}"
    if key not in entry.teachers:
        raise FileNotFoundError(
            f"utterance {entry.id!r}: missing teacher file for {key!r}; "
            f"run prepare-teachers first")
    tf = read_ctxf(root / entry.teachers[key])
    return tf.features.values.astype(np.float64), tf.features.frame_rate_hz


def _waveform(samples: np.ndarray, sample_rate: int):
    from .audio import Waveform

    return Waveform(samples, sample_rate)


def _bundle_teachers(kind: str, raw: list[tuple[np.ndarray, float]],
                     pred_rate: float, pred_frames: int,
                     cfg: TrainConfig) -> TeacherBundle:
    """Pool teacher/prediction clocks together and freeze candidate indices."""
    rates = {rate for _, rate in raw}
    if len(rates) != 1:
        raise ValueError(f"{kind}: teacher streams disagree on frame rate: {sorted(rates)}")
    rate = rates.pop()
    teacher_pool, pred_pool = 1, 1
    if rate > pred_rate:
        factor = rate / pred_rate
        if abs(factor - round(factor)) > 1e-6:
            raise ValueError(
                f"{kind}: teacher rate {rate} Hz is not an integer multiple of the "
                f"predictor output rate {pred_rate} Hz")
        teacher_pool = int(round(factor))
    elif pred_rate > rate:
        factor = pred_rate / rate
        if abs(factor - round(factor)) > 1e-6:
            raise ValueError(
                f"{kind}: predictor output rate {pred_rate} Hz is not an integer "
                f"multiple of the teacher rate {rate} Hz")
        pred_pool = int(round(factor))
    values = [_pool_rows(v, teacher_pool) if teacher_pool > 1 else v for v, _ in raw]
    frames = min(pred_frames // pred_pool, *(v.shape[0] for v in values))
    if frames <= 0:
        raise ValueError(f"{kind}: no aligned frames left")
    pooled = np.stack([v[:frames] for v in values]).astype(np.float32)
    s = pooled.shape[0]
    nce = replace(cfg.infonce)
    cand_idx = []
    for speaker in range(s):
        rows = []
        for t in range(frames):
            pairs, _ = candidate_indices(nce, speaker, t, frames, s)
            rows.append([sp * frames + fr for sp, fr in pairs])
        cand_idx.append(np.asarray(rows, dtype=np.int64))
    return TeacherBundle(pooled=pooled, cand_idx=cand_idx, pred_pool=pred_pool, frames=frames)


def load_training_data(manifest_path: str | Path, cfg: TrainConfig,
                       model_cfg: ModelConfig, kinds: tuple[str, ...],
                       sample_rate: int = 16000) -> tuple[list[Utterance], ModelConfig]:
    """Load waveforms and (for the group stage) aligned teacher bundles.

    Returns the utterances and a ModelConfig whose predictor dims/strides
    are resolved against the teacher headers.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = load_manifest(manifest_path)
    if not entries:
        raise ValueError(f"{manifest_path}: empty manifest")

    out_dims = dict(model_cfg.predictor_out_dims)
    strides = dict(model_cfg.predictor_stride)
    for kind in kinds:
        strides.setdefault(kind, DEFAULT_PREDICTOR_STRIDES[kind])
    enc_rate = sample_rate / model_cfg.enc_stride

    utterances = []
    for entry in entries:
        mix = load_wav(root / entry.mix)
        if mix.sample_rate_hz != sample_rate:
            raise ValueError(f"{entry.id}: expected {sample_rate} Hz, got {mix.sample_rate_hz}")
        sources = [load_wav(root / p).samples.astype(np.float32) for p in entry.sources]
        utt = Utterance(id=entry.id, mix=mix.samples.astype(np.float32), sources=sources)
        enc_frames = (len(utt.mix) - model_cfg.enc_kernel) // model_cfg.enc_stride + 1
        for kind in kinds:
            raw = [
                _load_teacher_features(entry, root, kind, i, src, sample_rate, cfg)
                for i, src in enumerate(sources)
            ]
            dim = raw[0][0].shape[1]
            if any(v.shape[1] != dim for v, _ in raw):
                raise ValueError(f"{entry.id}: teacher dims disagree for kind {kind!r}")
            if kind in out_dims and out_dims[kind] != dim:
                raise ValueError(
                    f"dim mismatch between predictor config and teacher header for "
                    f"{kind!r}: config {out_dims[kind]}, teacher {dim}")
            out_dims.setdefault(kind, dim)
            stride = strides[kind]
            if (enc_frames - stride) // stride + 1 <= 0:
                raise ValueError(f"{entry.id}: too short for predictor kind {kind!r}")
            pred_rate = enc_rate / stride
            pred_frames = (enc_frames - stride) // stride + 1
            utt.teachers[kind] = _bundle_teachers(kind, raw, pred_rate, pred_frames, cfg)
        utterances.append(utt)

    resolved = replace(model_cfg, predictor_out_dims=out_dims, predictor_stride=strides)
    return utterances, resolved


# loss assembly --------------------------------------------------------


def _contextual_loss_matrix(sep: Separator, streams: list[ad.Tensor], kind: str,
                            bundle: TeacherBundle, temperature: float) -> list[list[ad.Tensor]]:
    s = len(streams)
    preds = []
    for c in streams:
        p = ad.transpose2d(sep.predict_teacher(c, kind))     # [T_pred, dim]
        if bundle.pred_pool > 1:
            t2 = p.values.shape[0] // bundle.pred_pool
            p = ad.mean_(ad.reshape(ad.narrow(p, 0, t2 * bundle.pred_pool, axis=0),
                                    (t2, bundle.pred_pool, p.values.shape[1])), axis=1)
        preds.append(ad.narrow(p, 0, bundle.frames, axis=0))
    flat = bundle.pooled.reshape(-1, bundle.pooled.shape[2])
    matrix = []
    for i in range(s):
        row = []
        for j in range(s):
            positives = bundle.pooled[j][:, None, :]
            negatives = flat[bundle.cand_idx[j]]
            cand = np.concatenate([positives, negatives], axis=1)
            row.append(infonce(preds[i], cand, temperature))
        matrix.append(row)
    return matrix


def _signal_loss_matrix(sep: Separator, em: ad.Tensor, streams: list[ad.Tensor],
                        sources: list[np.ndarray], use_signal_head: bool) -> list[list[ad.Tensor]]:
    length = (em.values.shape[1] - 1) * sep.config.enc_stride + sep.config.enc_kernel
    refs = [s[:length] for s in sources]
    estimates = []
    for c in streams:
        mask = sep.signal_head_mask(c) if use_signal_head else sep.segregate(c)
        estimates.append(sep.apply_mask_decode(em, mask))
    return [[si_sdr_loss(est, ref) for ref in refs] for est in estimates]


def group_loss(sep: Separator, utt: Utterance, cfg: TrainConfig):
    """Hybrid PIT loss for one utterance in the group stage.

    Returns (scalar node, per-target component values at the chosen
    permutation, permutation).
    """
    em = sep.encode(utt.mix)
    streams = sep.extract_context(em)
    s = len(streams)
    matrices: dict[str, list[list[ad.Tensor]]] = {}
    for kind in sorted(utt.teachers):
        if kind in cfg.targets:
            matrices[kind] = _contextual_loss_matrix(
                sep, streams, kind, utt.teachers[kind], cfg.infonce.temperature)
    if "signal" in cfg.targets:
        matrices["signal"] = _signal_loss_matrix(sep, em, streams, utt.sources,
                                                 use_signal_head=True)
    hybrid = [[hybrid_loss({k: matrices[k][i][j] for k in matrices}, cfg.targets)
               for j in range(s)] for i in range(s)]
    perm, total = pit_nodes(hybrid)
    components = {
        k: float(np.mean([matrices[k][i][j].values for i, j in enumerate(perm)]))
        for k in matrices
    }
    return total * (1.0 / s), components, perm


def segregate_loss(sep: Separator, utt: Utterance, cfg: TrainConfig):
    """PIT SI-SDR loss over the full separation model."""
    em = sep.encode(utt.mix)
    streams = sep.extract_context(em)
    matrix = _signal_loss_matrix(sep, em, streams, utt.sources, use_signal_head=False)
    perm, total = pit_nodes(matrix)
    s = len(streams)
    components = {"signal": float(total.values) / s}
    return total * (1.0 / s), components, perm


# the shared loop ------------------------------------------------------


@dataclass
class TrainResult:
    ckpt_path: Path
    best_epoch: int
    best_dev_loss: float
    epochs: list[dict]
    first_step_components: dict[str, float]
    steps_run: int


def _config_hash(run_dict: dict) -> str:
    return hashlib.sha256(json.dumps(run_dict, sort_keys=True).encode()).hexdigest()[:16]


def _sidecar_run_dict(model_cfg: ModelConfig, cfg: TrainConfig, manifest: str,
                      out_dir: str, run_dict: dict | None) -> dict:
    from .config import DataConfig, run_dict as canonical

    base = canonical(model_cfg, cfg, DataConfig(str(manifest), str(out_dir)))
    if run_dict is not None:
        base = {**run_dict, "model": model_cfg.to_dict()}
    return base


def _run_loop(sep: Separator, data: list[Utterance], cfg: TrainConfig,
              loss_fn, ckpt_path: Path, run_dict: dict) -> TrainResult:
    train_ids, dev_ids = dev_split([u.id for u in data], cfg.dev_fraction, cfg.seed)
    by_id = {u.id: u for u in data}
    train_set = [by_id[i] for i in train_ids]
    dev_set = [by_id[i] for i in dev_ids]
    schedule_on = len(dev_set) > 0

    optimizer = Adam(sep.params, cfg.lr0)
    lr = cfg.lr0
    history: list[float] = []
    best_loss = np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    epochs_log: list[dict] = []
    first_step_components: dict[str, float] = {}
    step = 0

    log_path = Path(str(ckpt_path) + ".log.jsonl")
    epochs_path = Path(str(ckpt_path) + ".epochs.jsonl")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)

    with open(log_path, "w") as log_fh, open(epochs_path, "w") as epoch_fh:
        for epoch in range(1, cfg.max_epochs + 1):
            order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_set))
            epoch_losses: list[float] = []
            epoch_components: dict[str, list[float]] = {}
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[k] for k in order[start:start + cfg.batch_size]]
                sep.params.zero_grad()
                nodes = []
                for utt in batch:
                    node, components, _ = loss_fn(sep, utt, cfg)
                    nodes.append(node)
                    for k, v in components.items():
                        epoch_components.setdefault(k, []).append(v)
                    if step == 0 and not first_step_components:
                        first_step_components = dict(components)
                total = nodes[0] if len(nodes) == 1 else ad.sum_(ad.concat(
                    [ad.reshape(n, (1,)) for n in nodes], axis=0)) * (1.0 / len(nodes))
                ad.backward(total)
                sep.params.clip_grad_l2(cfg.grad_clip)
                optimizer.step(lr)
                step += 1
                loss_val = float(total.values)
                epoch_losses.append(loss_val)
                log_fh.write(json.dumps(
                    {"epoch": epoch, "step": step, "loss": loss_val, "lr": lr}) + "\n")

            train_loss = float(np.mean(epoch_losses))
            if dev_set:
                dev_losses = []
                dev_components: dict[str, list[float]] = {}
                with ad.no_grad():
                    for utt in dev_set:
                        node, components, _ = loss_fn(sep, utt, cfg)
                        dev_losses.append(float(node.values))
                        for k, v in components.items():
                            dev_components.setdefault(k, []).append(v)
                dev_loss = float(np.mean(dev_losses))
                dev_comp_means = {k: float(np.mean(v)) for k, v in dev_components.items()}
            else:
                dev_loss = train_loss
                dev_comp_means = {}

            history.append(dev_loss)
            if best_loss - dev_loss >= cfg.min_improvement:
                best_loss = dev_loss
                best_epoch = epoch
                best_state = sep.params.state_arrays()

            row = {
                "epoch": epoch, "train_loss": train_loss, "dev_loss": dev_loss, "lr": lr,
                "components": {k: float(np.mean(v)) for k, v in epoch_components.items()},
                "dev_components": dev_comp_means,
            }
            epochs_log.append(row)
            epoch_fh.write(json.dumps(row) + "\n")

            if schedule_on:
                lr = plateau_schedule(history, cfg.lr0, cfg.plateau_patience,
                                      cfg.lr_decay, cfg.min_improvement)
                if early_stop(history, cfg.early_stop_patience, cfg.min_improvement):
                    break

    if best_state is None:  # no improvement ever recorded; keep the final weights
        best_state = sep.params.state_arrays()
        best_epoch = len(history)
        best_loss = history[-1] if history else np.inf
    save_checkpoint(best_state, ckpt_path)
    meta = {"stage": cfg.stage, "epoch": best_epoch, "dev_loss": best_loss,
            "config_hash": _config_hash(run_dict)}
    Path(str(ckpt_path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    Path(str(ckpt_path) + ".config.json").write_text(
        json.dumps(run_dict, indent=2, sort_keys=True) + "\n")
    return TrainResult(ckpt_path=ckpt_path, best_epoch=best_epoch, best_dev_loss=best_loss,
                       epochs=epochs_log, first_step_components=first_step_components,
                       steps_run=step)


def train_group(cfg: TrainConfig, model_cfg: ModelConfig, manifest: str | Path,
                out_dir: str | Path, run_dict: dict | None = None) -> TrainResult:
    """Stage 1: encoder + context extractor against teacher targets."""
    if cfg.stage != "group":
        raise ValueError(f"train_group called with stage {cfg.stage!r}")
    if not cfg.targets:
        raise ValueError("no group-stage target configured")
    out_dir = Path(out_dir)
    kinds = tuple(k for k in sorted(cfg.targets) if k in CONTEXT_KINDS)
    data, resolved_cfg = load_training_data(manifest, cfg, model_cfg, kinds)
    sep = Separator(resolved_cfg, seed=cfg.seed, predictor_kinds=kinds,
                    signal_head="signal" in cfg.targets, segregator=False)
    run_dict = _sidecar_run_dict(resolved_cfg, cfg, manifest, out_dir, run_dict)
    return _run_loop(sep, data, cfg, group_loss, out_dir / "group.caws", run_dict)


TRANSFER_PREFIXES = {"context": ("context/",), "context+encoder": ("encoder/", "context/")}


def load_group_weights(sep: Separator, group_ckpt: str | Path, transfer: str) -> list[str]:
    """Copy transferred namespaces from a group checkpoint into a stage-2 model.

    Returns the names loaded. Predictor and signal-head tensors in the
    checkpoint are ignored; shapes must match exactly.
    """
    arrays = load_checkpoint(group_ckpt)
    prefixes = TRANSFER_PREFIXES[transfer]
    loaded = []
    for name in sep.params.names():
        if any(name.startswith(p) for p in prefixes):
            if name not in arrays:
                raise ValueError(f"group checkpoint lacks tensor {name!r}")
            loaded.append(name)
    sep.params.load_arrays({n: arrays[n] for n in loaded})
    return loaded


def train_segregate(cfg: TrainConfig, model_cfg: ModelConfig, manifest: str | Path,
                    out_dir: str | Path, run_dict: dict | None = None) -> TrainResult:
    """Stage 2: full separator with PIT SI-SDR, optionally from a group checkpoint."""
    if cfg.stage != "segregate":
        raise ValueError(f"train_segregate called with stage {cfg.stage!r}")
    out_dir = Path(out_dir)
    data, resolved_cfg = load_training_data(manifest, cfg, model_cfg, kinds=())
    sep = Separator(resolved_cfg, seed=cfg.seed)
    if cfg.two_stage:
        if not cfg.group_ckpt:
            raise ValueError("two-stage mode requires group_ckpt (group checkpoint path)")
        load_group_weights(sep, cfg.group_ckpt, cfg.transfer)
    run_dict = _sidecar_run_dict(resolved_cfg, cfg, manifest, out_dir, run_dict)
    return _run_loop(sep, data, cfg, segregate_loss, out_dir / "segregate.caws", run_dict)
