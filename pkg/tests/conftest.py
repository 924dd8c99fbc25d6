import numpy as np
import pytest

from emofuse.audio import AudioSegment


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise_segment(rng):
    return AudioSegment(rng.standard_normal(112000) * 0.1, 16000, "noise")


def sine_segment(freq_hz: float, duration_s: float = 7.0, amp: float = 0.3,
                 rate: int = 16000, source_id: str = "sine") -> AudioSegment:
    t = np.arange(int(duration_s * rate)) / rate
    return AudioSegment(amp * np.sin(2.0 * np.pi * freq_hz * t), rate, source_id)
