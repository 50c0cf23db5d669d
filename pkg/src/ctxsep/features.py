"""Frame-level features: STFT, log-Mel, and frame-rate alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .audio import Waveform


@dataclass
class FeatureMatrix:
    """Frames-by-dimensions feature array tagged with its frame rate."""

    values: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def stft(w: Waveform, n_fft: int, hop: int) -> FeatureMatrix:
    """One-sided STFT with a periodic Hann window and no padding.

    Output is complex [T_f, n_fft//2 + 1] with T_f = floor((len - n_fft)/hop) + 1.
    """
    if n_fft <= 0 or (n_fft & (n_fft - 1)) != 0:
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not (0 < hop <= n_fft):
        raise ValueError(f"hop must satisfy 0 < hop <= n_fft, got {hop}")
    x = w.samples
    if len(x) < n_fft:
        raise ValueError(f"waveform ({len(x)} samples) shorter than one frame ({n_fft})")
    t_f = (len(x) - n_fft) // hop + 1
    s_t, = x.strides
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(t_f, n_fft), strides=(hop * s_t, s_t), writeable=False)
    window = get_window("hann", n_fft, fftbins=True)
    spec = np.fft.rfft(frames * window, axis=1)
    return FeatureMatrix(spec, w.sample_rate_hz / hop)


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate_hz: int, n_fft: int, n_mels: int,
                   fmin: float, fmax: float) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filters evaluated at the rfft bin frequencies.

    Returns (filters [n_mels, n_fft//2 + 1], center frequencies in Hz).
    Triangles peak at 1 and adjacent filters cross at their shared edge.
    """
    if not (0.0 <= fmin < fmax <= sample_rate_hz / 2):
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got [{fmin}, {fmax}]")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lower, center, upper = edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]
    up = (bin_hz[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bin_hz[None, :]) / (upper - center)[:, None]
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb, center


def log_mel(w: Waveform, n_fft: int = 512, hop: int = 160, n_mels: int = 80,
            fmin: float = 0.0, fmax: float = 8000.0,
            power_floor: float = 1e-10) -> FeatureMatrix:
    """Natural-log mel power spectrogram, floored before the log."""
    spec = stft(w, n_fft, hop)
    power = np.abs(spec.values) ** 2
    fb, _ = mel_filterbank(w.sample_rate_hz, n_fft, n_mels, fmin, fmax)
    mel_power = power @ fb.T
    return FeatureMatrix(np.log(np.maximum(mel_power, power_floor)), spec.frame_rate_hz)


def _integer_ratio(fast: float, slow: float) -> int:
    ratio = fast / slow
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * ratio:
        raise ValueError(f"frame rates {fast} Hz and {slow} Hz have a non-integer ratio")
    return factor


def _pool(values: np.ndarray, factor: int) -> np.ndarray:
    t = values.shape[0] // factor
    return values[:t * factor].reshape(t, factor, values.shape[1]).mean(axis=1)


def align_frames(a: FeatureMatrix, b: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Bring two feature streams to a common clock.

    The faster stream is mean-pooled down by the integer rate ratio, then
    both are trimmed to the shorter length. A non-integer ratio is an error.
    """
    av, bv = a.values, b.values
    rate = min(a.frame_rate_hz, b.frame_rate_hz)
    if a.frame_rate_hz > b.frame_rate_hz:
        av = _pool(av, _integer_ratio(a.frame_rate_hz, b.frame_rate_hz))
    elif b.frame_rate_hz > a.frame_rate_hz:
        bv = _pool(bv, _integer_ratio(b.frame_rate_hz, a.frame_rate_hz))
    t = min(av.shape[0], bv.shape[0])
    if t == 0:
        raise ValueError("alignment left no frames")
    return FeatureMatrix(av[:t], rate), FeatureMatrix(bv[:t], rate)
