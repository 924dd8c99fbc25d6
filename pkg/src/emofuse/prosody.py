"""Utterance-level prosodic features: F0 track, RMS energy, voiced/unvoiced
rhythm, and their statistics, packed into a 103-dim vector.

F0 comes from frame-level normalized autocorrelation with parabolic peak
interpolation; a frame is voiced when the autocorrelation peak and the frame
RMS both clear their thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioSegment
from .errors import EmptyInputError
from .mfcc import FrameConfig
from .fmx import FeatureMatrix

F0_MIN_HZ = 50.0
F0_MAX_HZ = 500.0
NCCF_THRESHOLD = 0.45
RMS_THRESHOLD = 0.01
PROSODY_DIM = 103

STAT_NAMES = ["mean", "std", "max", "min", "skew", "kurt"]


@dataclass
class VoicingTrack:
    """Per-frame voicing flags, F0 in Hz (0 where unvoiced), and RMS energy."""

    voiced: np.ndarray
    f0_hz: np.ndarray
    rms: np.ndarray
    hop_s: float

    def __post_init__(self):
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.rms = np.asarray(self.rms, dtype=np.float64)
        if not (len(self.voiced) == len(self.f0_hz) == len(self.rms)):
            raise ValueError("voiced/f0/rms must share the frame grid")

    @property
    def n_frames(self) -> int:
        return len(self.voiced)


def _unwindowed_frames(seg: AudioSegment, cfg: FrameConfig) -> np.ndarray:
    from .mfcc import n_frames

    count = n_frames(len(seg.samples), cfg)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(count)[:, None]
    return seg.samples[idx]


def estimate_f0(
    seg: AudioSegment,
    cfg: FrameConfig | None = None,
    nccf_threshold: float = NCCF_THRESHOLD,
    rms_threshold: float = RMS_THRESHOLD,
) -> VoicingTrack:
    """Frame-level F0 by normalized autocorrelation over the 50-500 Hz lag range.

    A frame is voiced when the best normalized-autocorrelation peak is at
    least nccf_threshold and its RMS is at least rms_threshold; F0 is then
    rate/lag with parabolic interpolation around the integer peak.
    """
    cfg = cfg or FrameConfig(sample_rate=seg.sample_rate)
    frames = _unwindowed_frames(seg, cfg)
    count, flen = frames.shape
    rms = np.sqrt(np.mean(frames**2, axis=1))

    min_lag = int(round(seg.sample_rate / F0_MAX_HZ))
    max_lag = int(round(seg.sample_rate / F0_MIN_HZ))
    max_lag = min(max_lag, flen - 2)
    # one extra lag each side so the parabolic fit has neighbors
    lags = np.arange(min_lag - 1, max_lag + 2)
    corr = np.empty((count, len(lags)))
    for j, lag in enumerate(lags):
        head = frames[:, : flen - lag]
        tail = frames[:, lag:]
        num = np.sum(head * tail, axis=1)
        den = np.sqrt(np.sum(head**2, axis=1) * np.sum(tail**2, axis=1))
        corr[:, j] = np.where(den > 0.0, num / np.maximum(den, 1e-30), 0.0)

    searchable = corr[:, 1:-1]
    # subharmonic guard: a periodic signal peaks at every lag multiple, so take
    # the smallest-lag local maximum within 3% of the global peak
    global_best = np.max(searchable, axis=1)
    is_local_max = (searchable >= corr[:, :-2]) & (searchable >= corr[:, 2:])
    candidate = is_local_max & (searchable >= 0.97 * global_best[:, None])
    has_candidate = np.any(candidate, axis=1)
    best = np.where(has_candidate, np.argmax(candidate, axis=1), np.argmax(searchable, axis=1))
    peak = searchable[np.arange(count), best]

    left = corr[np.arange(count), best]
    mid = corr[np.arange(count), best + 1]
    right = corr[np.arange(count), best + 2]
    denom = left - 2.0 * mid + right
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(denom == 0, 1.0, denom), 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    lag_star = lags[best + 1] + shift

    f0 = seg.sample_rate / lag_star
    voiced = (peak >= nccf_threshold) & (rms >= rms_threshold)
    f0 = np.where(voiced, np.clip(f0, F0_MIN_HZ, F0_MAX_HZ), 0.0)
    return VoicingTrack(voiced, f0, rms, hop_s=cfg.hop / seg.sample_rate)


def _runs(flags: np.ndarray) -> list[tuple[bool, int, int]]:
    """Maximal runs of identical flags as (value, start, length)."""
    out = []
    start = 0
    for i in range(1, len(flags) + 1):
        if i == len(flags) or flags[i] != flags[start]:
            out.append((bool(flags[start]), start, i - start))
            start = i
    return out


def voiced_runs(track: VoicingTrack) -> tuple[list[float], list[float]]:
    """Durations (seconds) of maximal voiced and unvoiced runs."""
    if track.n_frames == 0:
        raise EmptyInputError("empty voicing track")
    voiced_d, unvoiced_d = [], []
    for value, _, length in _runs(track.voiced):
        (voiced_d if value else unvoiced_d).append(length * track.hop_s)
    return voiced_d, unvoiced_d


def summarize_stats(samples) -> np.ndarray:
    """(mean, std, max, min, skewness, excess kurtosis), population moments.

    std/skew/kurtosis are 0 when n < 2 or the variance is below 1e-12.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("cannot summarize an empty sample list")
    mean = float(np.mean(x))
    var = float(np.mean((x - mean) ** 2))
    if x.size < 2 or var < 1e-12:
        return np.array([mean, 0.0, float(np.max(x)), float(np.min(x)), 0.0, 0.0])
    m3 = float(np.mean((x - mean) ** 3))
    m4 = float(np.mean((x - mean) ** 4))
    return np.array(
        [mean, np.sqrt(var), float(np.max(x)), float(np.min(x)), m3 / var**1.5, m4 / var**2 - 3.0]
    )


def _stats_or_zeros(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return summarize_stats(x) if x.size else np.zeros(6)


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - np.mean(x)
    denom = float(np.sum(xc**2))
    return float(np.sum(xc * y) / denom) if denom > 0 else 0.0


def _poly_block(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degree-1 and degree-2 fit coefficients plus the two fit RMSEs.

    Returns (coeffs[5], rmse[2]); zeros where the region holds too few points.
    """
    coeffs = np.zeros(5)
    rmse = np.zeros(2)
    if len(x) >= 2 and len(np.unique(x)) >= 2:
        c1 = np.polyfit(x, y, 1)
        coeffs[0:2] = c1
        rmse[0] = np.sqrt(np.mean((np.polyval(c1, x) - y) ** 2))
    if len(x) >= 3 and len(np.unique(x)) >= 3:
        c2 = np.polyfit(x, y, 2)
        coeffs[2:5] = c2
        rmse[1] = np.sqrt(np.mean((np.polyval(c2, x) - y) ** 2))
    return coeffs, rmse


def _contour_features(track: VoicingTrack) -> tuple[np.ndarray, list[str]]:
    """52 contour dims: per signal (F0 over voiced frames, RMS over all frames)
    and per region (three thirds plus the whole utterance), degree-1 and
    degree-2 polynomial coefficients (5 each), then fit RMSEs for the thirds.
    """
    n = track.n_frames
    t = np.arange(n) * track.hop_s
    thirds = [(0, n // 3), (n // 3, 2 * n // 3), (2 * n // 3, n)]
    regions = thirds + [(0, n)]
    region_names = ["first", "middle", "last", "whole"]

    signals = {
        "f0": (t[track.voiced], track.f0_hz[track.voiced]),
        "energy": (t, track.rms),
    }
    coeff_vals, coeff_labels = [], []
    rmse_vals, rmse_labels = [], []
    for sig_name, (sx, sy) in signals.items():
        for (lo, hi), reg_name in zip(regions, region_names):
            t_lo, t_hi = lo * track.hop_s, hi * track.hop_s
            inside = (sx >= t_lo) & (sx < t_hi) if reg_name != "whole" else np.ones(len(sx), bool)
            x = sx[inside] - t_lo
            coeffs, rmse = _poly_block(x, sy[inside])
            coeff_vals.append(coeffs)
            coeff_labels += [f"{sig_name}_{reg_name}_{c}" for c in ("lin1", "lin0", "quad2", "quad1", "quad0")]
            if reg_name != "whole":
                rmse_vals.append(rmse)
                rmse_labels += [f"{sig_name}_{reg_name}_rmse1", f"{sig_name}_{reg_name}_rmse2"]
    values = np.concatenate(coeff_vals + rmse_vals)
    return values, coeff_labels + rmse_labels


def prosody_vector(track: VoicingTrack) -> FeatureMatrix:
    """The 103-dim prosodic summary of one utterance as a 1x103 FeatureMatrix.

    Groups: F0 stats, F0-difference stats, energy stats, energy-difference
    stats, voiced/unvoiced duration stats, voicing-rate scalars, per-run F0
    and energy slopes, and the 52-dim contour-polynomial block. F0 groups are
    zero for fully unvoiced input.
    """
    if track.n_frames == 0:
        raise EmptyInputError("empty voicing track")

    f0_voiced = track.f0_hz[track.voiced]
    f0_diffs = []
    run_f0_slopes, run_energy_slopes = [], []
    for value, start, length in _runs(track.voiced):
        if not value:
            continue
        seg_f0 = track.f0_hz[start : start + length]
        seg_rms = track.rms[start : start + length]
        if length >= 2:
            f0_diffs.append(np.diff(seg_f0))
            t = np.arange(length) * track.hop_s
            run_f0_slopes.append(_slope(t, seg_f0))
            run_energy_slopes.append(_slope(t, seg_rms))
    f0_diffs = np.concatenate(f0_diffs) if f0_diffs else np.zeros(0)

    voiced_d, unvoiced_d = voiced_runs(track)
    total_s = track.n_frames * track.hop_s
    # gaps = unvoiced runs strictly between voiced runs (trim leading/trailing)
    lo = 0 if track.voiced[0] else 1
    hi = len(unvoiced_d) if track.voiced[-1] else len(unvoiced_d) - 1
    gaps = unvoiced_d[lo:hi] if hi > lo else []
    rate_scalars = np.array(
        [
            float(np.mean(track.voiced)),
            len(voiced_d) / total_s,
            float(np.mean(gaps)) if len(gaps) else 0.0,
        ]
    )

    contour_vals, contour_labels = _contour_features(track)
    groups = [
        ("f0", _stats_or_zeros(f0_voiced)),
        ("f0_diff", _stats_or_zeros(f0_diffs)),
        ("energy", summarize_stats(track.rms)),
        ("energy_diff", _stats_or_zeros(np.diff(track.rms) if track.n_frames > 1 else [])),
        ("voiced_dur", _stats_or_zeros(voiced_d)),
        ("unvoiced_dur", _stats_or_zeros(unvoiced_d)),
    ]
    values = [vals for _, vals in groups] + [rate_scalars, _stats_or_zeros(run_f0_slopes), _stats_or_zeros(run_energy_slopes), contour_vals]
    labels = [f"{g}_{s}" for g, _ in groups for s in STAT_NAMES]
    labels += ["voiced_ratio", "voiced_runs_per_s", "mean_gap_s"]
    labels += [f"f0_slope_{s}" for s in STAT_NAMES] + [f"energy_slope_{s}" for s in STAT_NAMES]
    labels += contour_labels
    vec = np.concatenate(values)
    if len(vec) != PROSODY_DIM or len(labels) != PROSODY_DIM:
        raise AssertionError(f"prosody layout drifted: {len(vec)} values, {len(labels)} labels")
    return FeatureMatrix(vec, labels)


def extract_prosody103(seg: AudioSegment, cfg: FrameConfig | None = None) -> FeatureMatrix:
    """estimate_f0 + prosody_vector in one call."""
    return prosody_vector(estimate_f0(seg, cfg))
