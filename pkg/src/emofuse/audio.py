"""Raw speech ingestion: WAV reading, resampling to 16 kHz, 7 s segmentation.

Every segment leaving this module has exactly SEGMENT_SAMPLES samples at
TARGET_RATE Hz.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, FormatError, TooShortError, UnsupportedError

TARGET_RATE = 16000
SEGMENT_S = 7.0
SEGMENT_SAMPLES = int(SEGMENT_S * TARGET_RATE)  # 112000
MIN_REMAINDER_S = 1.0  # shorter trailing scraps are dropped

SUPPORTED_INPUT_RATES = (8000, 16000, 22050, 44100, 48000)

# windowed-sinc resampler: Hann window, 32 taps per side
_RESAMPLE_HALF_WIDTH = 32


@dataclass
class AudioSegment:
    """Mono PCM audio, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatError("AudioSegment needs 1-d samples")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise FormatError(f"non-finite samples in {self.source_id!r}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> AudioSegment:
    """Read a RIFF/PCM16 WAV file; amplitudes scaled to [-1, 1] by 1/32768.

    Multi-channel files keep only the first channel.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAV file: {exc}") from exc
    if comptype != "NONE":
        raise UnsupportedError(f"{path}: compressed WAV ({comptype}) not supported")
    if sampwidth != 2:
        raise UnsupportedError(f"{path}: only 16-bit PCM supported, got {8 * sampwidth}-bit")
    data = np.frombuffer(raw, dtype="<i2")
    if n_channels > 1:
        data = data[::n_channels]
    samples = data.astype(np.float64) / 32768.0
    return AudioSegment(samples, rate, source_id=str(path))


def write_wav(path, seg: AudioSegment) -> None:
    """Write PCM16 mono WAV (clips amplitudes to [-1, 1))."""
    scaled = np.clip(seg.samples, -1.0, 32767.0 / 32768.0)
    pcm = np.round(scaled * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(seg.sample_rate)
        wf.writeframes(pcm.tobytes())


def _sinc_kernel(offsets: np.ndarray, cutoff: float) -> np.ndarray:
    # cutoff in cycles per input sample; Hann window over the 32-tap half width
    w = _RESAMPLE_HALF_WIDTH
    window = np.where(np.abs(offsets) <= w, 0.5 + 0.5 * np.cos(np.pi * offsets / w), 0.0)
    return 2.0 * cutoff * np.sinc(2.0 * cutoff * offsets) * window


def resample_16k(seg: AudioSegment) -> AudioSegment:
    """Band-limited resampling to 16 kHz (windowed-sinc, Hann, 32 taps/side).

    The signal is extended past each edge by anti-symmetric reflection
    (x[-k] = 2*x[0] - x[k]), which continues constants and linear trends
    exactly, and kernels are renormalized per output sample so DC is
    preserved bit-exactly.
    """
    if seg.sample_rate not in SUPPORTED_INPUT_RATES:
        raise UnsupportedError(f"unsupported input rate {seg.sample_rate}")
    if seg.sample_rate == TARGET_RATE:
        return seg
    x = seg.samples
    n_in = len(x)
    ratio = TARGET_RATE / seg.sample_rate
    n_out = int(round(n_in * ratio))
    step = 1.0 / ratio  # input samples per output sample
    cutoff = 0.5 * min(1.0, ratio)
    w = _RESAMPLE_HALF_WIDTH
    if n_in < w + 1:
        raise TooShortError(f"resampling needs > {w} samples, got {n_in}")
    left = 2.0 * x[0] - x[w:0:-1]
    right = 2.0 * x[-1] - x[-2 : -w - 2 : -1]
    ext = np.concatenate([left, x, right])
    tap_offsets = np.arange(-w + 1, w + 1)
    out = np.empty(n_out, dtype=np.float64)
    block = 16384
    for start in range(0, n_out, block):
        n = np.arange(start, min(start + block, n_out))
        centers = n * step
        base = np.floor(centers).astype(np.int64)
        idx = base[:, None] + tap_offsets[None, :]
        offs = idx - centers[:, None]
        kern = _sinc_kernel(offs, cutoff)
        kern = kern / kern.sum(axis=1, keepdims=True)
        out[n] = (kern * ext[idx + w]).sum(axis=1)
    return AudioSegment(out, TARGET_RATE, source_id=seg.source_id)


def clip_pad_7s(seg: AudioSegment) -> list[AudioSegment]:
    """Split a 16 kHz utterance into consecutive non-overlapping 7 s segments.

    A trailing remainder of at least MIN_REMAINDER_S is repeat-padded
    (remainder concatenated with itself cyclically, truncated to 7 s);
    anything shorter is dropped.
    """
    if len(seg.samples) == 0:
        raise EmptyInputError(f"empty utterance {seg.source_id!r}")
    if seg.sample_rate != TARGET_RATE:
        raise UnsupportedError(f"clip_pad_7s expects {TARGET_RATE} Hz, got {seg.sample_rate}")
    x = seg.samples
    segments: list[AudioSegment] = []
    n_full = len(x) // SEGMENT_SAMPLES
    for i in range(n_full):
        chunk = x[i * SEGMENT_SAMPLES : (i + 1) * SEGMENT_SAMPLES]
        segments.append(AudioSegment(chunk.copy(), TARGET_RATE, f"{seg.source_id}_s{i}"))
    rem = x[n_full * SEGMENT_SAMPLES :]
    if len(rem) >= MIN_REMAINDER_S * TARGET_RATE:
        reps = -(-SEGMENT_SAMPLES // len(rem))  # ceil division
        padded = np.tile(rem, reps)[:SEGMENT_SAMPLES]
        segments.append(AudioSegment(padded, TARGET_RATE, f"{seg.source_id}_s{n_full}"))
    return segments
