"""Training losses: SI-SDR, InfoNCE over teacher frames, and PIT."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import Waveform
from .teacher import TeacherFeatures

EPS = 1e-8


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_sdr(estimate, reference, zero_mean: bool = True, eps: float = EPS) -> float:
    """Scale-invariant SDR in dB.

    Both signals are mean-removed (unless zero_mean=False), the reference is
    rescaled by the projection alpha = <est, ref> / (<ref, ref> + eps), and
    the ratio of target to residual energy is returned in dB.
    """
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is identically zero")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    alpha = float(np.dot(est, ref) / (np.dot(ref, ref) + eps))
    target = alpha * ref
    residual = est - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    return float(10.0 * np.log10((num + eps) / (den + eps)))


_LOG10 = float(np.log(10.0))


def si_sdr_loss(estimate: ad.Tensor, reference: np.ndarray,
                eps: float = EPS) -> ad.Tensor:
    """Negative SI-SDR as a differentiable graph node.

    estimate is a [T] (or [1, T]) tensor on the tape; reference is a plain
    array of the same length.
    """
    ref = np.asarray(reference, dtype=estimate.values.dtype).reshape(-1)
    est = ad.reshape(estimate, (-1,))
    if est.values.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.values.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is identically zero")
    n = ref.size
    est = est - ad.sum_(est) * (1.0 / n)
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    alpha = ad.sum_(est * ref) * (1.0 / (ref_energy + eps))
    target_energy = alpha * alpha * ref_energy
    residual = est - alpha * ad.Tensor(ref)
    residual_energy = ad.sum_(residual * residual)
    ratio = (target_energy + eps) / (residual_energy + eps)
    return ad.log(ratio) * (-10.0 / _LOG10)


@dataclass
class InfoNCEConfig:
    """Contrastive-loss knobs: softmax temperature and negative sampling."""

    temperature: float = 0.1
    num_negatives: int = 31
    seed: int = 0


@dataclass
class CandidateSet:
    """Per-frame contrastive candidates; the positive always sits first."""

    positive: np.ndarray
    negatives: list[np.ndarray] = field(default_factory=list)
    with_replacement: bool = False

    def as_array(self) -> np.ndarray:
        return np.stack([self.positive] + list(self.negatives), axis=0)


def candidate_indices(cfg: InfoNCEConfig, speaker: int, frame: int,
                      num_frames: int, num_speakers: int) -> tuple[list[tuple[int, int]], bool]:
    """Deterministic (speaker, frame) indices of the negatives for one anchor.

    Other speakers' same-frame vectors are always included; the remainder is
    sampled without replacement from all other frames of every speaker. If
    the utterance is too short, sampling falls back to replacement and the
    second return value flags it.
    """
    if not (0 <= speaker < num_speakers) or not (0 <= frame < num_frames):
        raise ValueError("anchor index out of range")
    rng = np.random.default_rng([cfg.seed, speaker, frame])
    fixed = [(s, frame) for s in range(num_speakers) if s != speaker]
    fixed = fixed[:cfg.num_negatives]
    remaining = cfg.num_negatives - len(fixed)
    pool = [(s, t) for s in range(num_speakers) for t in range(num_frames) if t != frame]
    replace = remaining > len(pool)
    if remaining > 0:
        chosen = rng.choice(len(pool), size=remaining, replace=replace)
        fixed += [pool[int(c)] for c in chosen]
    return fixed, replace


def build_candidates(targets: list[TeacherFeatures], speaker: int, frame: int,
                     cfg: InfoNCEConfig) -> CandidateSet:
    """Assemble the contrastive candidate set for one anchor frame.

    targets holds the aligned teacher features of every speaker in the
    utterance (same kind, same frame count). Deterministic in cfg.seed.
    """
    if not targets:
        raise ValueError("no teacher targets given")
    frames = targets[0].features.frames
    for tf in targets:
        if tf.features.frames != frames:
            raise ValueError("teacher streams disagree on frame count; align them first")
    indices, replaced = candidate_indices(cfg, speaker, frame, frames, len(targets))
    positive = targets[speaker].features.values[frame]
    negatives = [targets[s].features.values[t] for s, t in indices]
    return CandidateSet(positive, negatives, with_replacement=replaced)


def infonce(pred: ad.Tensor, candidates, temperature: float) -> ad.Tensor:
    """InfoNCE over frames: -log softmax of the positive among candidates.

    pred is a [T, D] tensor on the tape; candidates is either a [T, K+1, D]
    array (positive first) or a length-T list of CandidateSet. Cosine
    similarities are divided by the temperature; the per-frame losses are
    averaged. Always >= 0, and exactly 0 when the positive is the only
    candidate.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if pred.values.ndim != 2:
        raise ValueError(f"prediction must be [T, D], got shape {pred.values.shape}")
    if isinstance(candidates, (list, tuple)):
        if len(candidates) == 0:
            raise ValueError("empty candidate list")
        cand = np.stack([c.as_array() for c in candidates], axis=0)
    else:
        cand = np.asarray(candidates)
    if cand.ndim != 3:
        raise ValueError(f"candidates must be [T, K+1, D], got shape {cand.shape}")
    t_frames, n_cand, dim = cand.shape
    if cand.shape[0] != pred.values.shape[0] or dim != pred.values.shape[1]:
        raise ValueError(
            f"prediction {pred.values.shape} does not match candidates {cand.shape}")
    if n_cand < 1:
        raise ValueError("empty candidate set")
    cand = cand.astype(pred.values.dtype)

    pred3 = ad.reshape(pred, (t_frames, 1, dim))
    dots = ad.sum_(pred3 * cand, axis=2)                       # [T, K+1]
    pred_norm = ad.reshape(ad.sqrt(ad.sum_(pred * pred, axis=1)), (t_frames, 1))
    cand_norm = np.sqrt(np.sum(cand.astype(np.float64) ** 2, axis=2)).astype(cand.dtype)
    cosine = dots / ad.clamp_min(pred_norm * cand_norm, EPS)
    logits = cosine * (1.0 / temperature)

    # stabilized log-sum-exp with a detached per-frame shift
    shift = logits.values.max(axis=1, keepdims=True)
    lse = ad.log(ad.sum_(ad.exp(logits - shift), axis=1)) + ad.reshape(ad.Tensor(shift), (t_frames,))
    onehot = np.zeros((1, n_cand), dtype=cand.dtype)
    onehot[0, 0] = 1.0
    positive_logit = ad.sum_(logits * onehot, axis=1)
    return ad.mean_(lse - positive_logit)


def hybrid_loss(components: dict[str, ad.Tensor],
                weights: dict[str, float] | None = None) -> ad.Tensor:
    """Weighted sum of named loss terms; missing weights default to 1.0."""
    if not components:
        raise ValueError("no loss components given")
    weights = dict(weights or {})
    unknown = set(weights) - set(components)
    if unknown:
        raise ValueError(f"unknown loss component name(s): {sorted(unknown)}")
    total = None
    for name in sorted(components):
        term = components[name] * float(weights.get(name, 1.0))
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class Permutation:
    """A speaker assignment: output i is matched to reference mapping[i]."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"not a permutation: {self.mapping}")

    def __iter__(self):
        return iter(self.mapping)


def pit(loss_matrix: np.ndarray) -> tuple[Permutation, float]:
    """Exhaustive permutation-invariant assignment.

    loss_matrix[i, j] is the loss of pairing output i with reference j.
    Returns the permutation minimizing the total and that total; ties break
    lexicographically.
    """
    matrix = np.asarray(loss_matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"loss matrix must be square, got shape {matrix.shape}")
    s = matrix.shape[0]
    best_perm = None
    best_total = np.inf
    for perm in itertools.permutations(range(s)):
        total = float(sum(matrix[i, perm[i]] for i in range(s)))
        if total < best_total:
            best_total = total
            best_perm = perm
    return Permutation(best_perm), best_total


def pit_nodes(loss_nodes: list[list[ad.Tensor]]) -> tuple[Permutation, ad.Tensor]:
    """PIT over a matrix of scalar graph nodes.

    The permutation is chosen on the forward values; the returned total is
    the sum of the selected nodes, so gradients flow only through the
    winning assignment.
    """
    s = len(loss_nodes)
    values = np.array([[float(loss_nodes[i][j].values) for j in range(s)] for i in range(s)])
    perm, _ = pit(values)
    total = None
    for i, j in enumerate(perm):
        total = loss_nodes[i][j] if total is None else total + loss_nodes[i][j]
    return perm, total
