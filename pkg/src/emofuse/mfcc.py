"""MFCC pipeline: framing, Hamming window, DFT power spectrum, mel filterbank,
log-DCT cepstra, log-energy, and delta / delta-delta derivatives.

Defaults produce the 39-dim per-frame vector
[c1..c12, log_energy, 13 deltas, 13 delta-deltas].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioSegment
from .errors import ParameterError, TooShortError
from .fmx import FeatureMatrix

LOG_FLOOR = 1e-10
DELTA_WINDOW = 2


@dataclass
class FrameConfig:
    frame_ms: float = 40.0
    hop_ms: float = 20.0
    n_mels: int = 26
    n_ceps: int = 12
    include_energy: bool = True
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.frame_ms > self.hop_ms > 0:
            raise ParameterError(f"need frame_ms > hop_ms > 0, got {self.frame_ms}/{self.hop_ms}")
        if not self.n_ceps < self.n_mels:
            raise ParameterError(f"need n_ceps < n_mels, got {self.n_ceps}/{self.n_mels}")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def out_dim(self) -> int:
        base = self.n_ceps + (1 if self.include_energy else 0)
        return 3 * base


def n_frames(n_samples: int, cfg: FrameConfig) -> int:
    if n_samples < cfg.frame_len:
        raise TooShortError(f"{n_samples} samples < one frame ({cfg.frame_len})")
    return (n_samples - cfg.frame_len) // cfg.hop + 1


def hamming(n: int) -> np.ndarray:
    """w[k] = 0.54 - 0.46*cos(2*pi*k/(n-1))."""
    if n < 2:
        raise ParameterError(f"hamming needs N >= 2, got {n}")
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_signal(seg: AudioSegment, cfg: FrameConfig) -> np.ndarray:
    """Slice into overlapping frames and apply the Hamming window.

    Returns (n_frames, frame_len); frame f covers samples
    [f*hop, f*hop + frame_len).
    """
    x = seg.samples
    count = n_frames(len(x), cfg)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(count)[:, None]
    return x[idx] * hamming(cfg.frame_len)[None, :]


def power_spectrum(frame: np.ndarray) -> np.ndarray:
    """Y_k = |DFT(frame)|^2 / N over the non-redundant half k in [0, N/2].

    Accepts a single frame or a stack of frames (last axis = time).
    """
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    spec = np.fft.rfft(frame, n=n, axis=-1)
    return (spec.real**2 + spec.imag**2) / n


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrameConfig, f_lo: float = 0.0, f_hi: float | None = None) -> np.ndarray:
    """Triangular filters (n_mels, n_bins) with centers equally spaced in mel.

    Filter m peaks (weight 1) at its center and falls to zero at the
    neighboring centers; evaluated at the DFT bin frequencies of a
    frame_len-point transform.
    """
    if cfg.n_mels < 2:
        raise ParameterError("need at least 2 mel filters")
    f_hi = f_hi if f_hi is not None else cfg.sample_rate / 2.0
    n = cfg.frame_len
    n_bins = n // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / n
    centers = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), cfg.n_mels + 2))
    bank = np.zeros((cfg.n_mels, n_bins))
    for m in range(1, cfg.n_mels + 1):
        left, center, right = centers[m - 1], centers[m], centers[m + 1]
        up = (bin_hz - left) / (center - left)
        down = (right - bin_hz) / (right - center)
        bank[m - 1] = np.maximum(0.0, np.minimum(up, down))
    return bank


def dct_basis(n_mels: int, n_ceps: int) -> np.ndarray:
    """DCT-II basis rows for coefficients i = 1..n_ceps over n_mels filters.

    basis[i-1, m] = cos((m + 0.5) * i * pi / n_mels) for m = 0..n_mels-1,
    which is orthogonal to constant filterbank energies.
    """
    i = np.arange(1, n_ceps + 1)[:, None]
    m = np.arange(n_mels)[None, :]
    return np.cos((m + 0.5) * i * np.pi / n_mels)


def mfcc_frame(power: np.ndarray, cfg: FrameConfig, bank: np.ndarray | None = None) -> np.ndarray:
    """Cepstral coefficients 1..n_ceps of one power spectrum (or a stack).

    Filterbank outputs are floored at LOG_FLOOR before the log10.
    """
    bank = mel_filterbank(cfg) if bank is None else bank
    energies = np.maximum(power @ bank.T, LOG_FLOOR)
    return np.log10(energies) @ dct_basis(cfg.n_mels, cfg.n_ceps).T


def delta(features: np.ndarray | FeatureMatrix, order: int = 1) -> np.ndarray:
    """Regression deltas with window W=2; boundary frames are repeated.

    delta_t = sum_{n=1..W} n*(c[t+n] - c[t-n]) / (2 * sum n^2); order=2
    applies the same operator twice.
    """
    if order not in (1, 2):
        raise ParameterError(f"order must be 1 or 2, got {order}")
    data = features.data if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    t = data.shape[0]
    if t < 2 * DELTA_WINDOW + 1:
        raise TooShortError(f"delta needs >= {2 * DELTA_WINDOW + 1} frames, got {t}")
    for _ in range(order):
        padded = np.concatenate([data[:1]] * DELTA_WINDOW + [data] + [data[-1:]] * DELTA_WINDOW)
        num = np.zeros_like(data)
        for n in range(1, DELTA_WINDOW + 1):
            num += n * (padded[DELTA_WINDOW + n : DELTA_WINDOW + n + t] - padded[DELTA_WINDOW - n : DELTA_WINDOW - n + t])
        data = num / (2.0 * sum(n * n for n in range(1, DELTA_WINDOW + 1)))
    return data


def log_energy(frames: np.ndarray) -> np.ndarray:
    """log10 of the windowed-frame energy, floored for silence."""
    return np.log10(np.sum(frames**2, axis=-1) + LOG_FLOOR)


def extract_mfcc39(seg: AudioSegment, cfg: FrameConfig | None = None) -> FeatureMatrix:
    """Full per-frame feature matrix: [c1..c12, log_energy, deltas, delta-deltas]."""
    cfg = cfg or FrameConfig()
    frames = frame_signal(seg, cfg)
    power = power_spectrum(frames)
    bank = mel_filterbank(cfg)
    static = mfcc_frame(power, cfg, bank)
    labels = [f"mfcc_{i:02d}" for i in range(1, cfg.n_ceps + 1)]
    if cfg.include_energy:
        static = np.concatenate([static, log_energy(frames)[:, None]], axis=1)
        labels.append("log_energy")
    d1 = delta(static, 1)
    d2 = delta(d1, 1)
    data = np.concatenate([static, d1, d2], axis=1)
    labels = labels + [f"d_{name}" for name in labels] + [f"dd_{name}" for name in labels]
    return FeatureMatrix(data, labels)
