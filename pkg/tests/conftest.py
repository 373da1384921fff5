import numpy as np
import pytest
import torch

from revoice.audio_core import AudioBuffer


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tone(freq_hz: float, duration_s: float, sample_rate: int, amp: float = 0.5) -> AudioBuffer:
    t = np.arange(int(duration_s * sample_rate)) / sample_rate
    return AudioBuffer(samples=amp * np.sin(2 * np.pi * freq_hz * t), sample_rate=sample_rate)


def make_noise_buffer(seed: int, duration_s: float, sample_rate: int, amp: float = 0.3) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate)
    return AudioBuffer(samples=amp * rng.standard_normal(n), sample_rate=sample_rate)


def rms_db(x: np.ndarray) -> float:
    return 10.0 * np.log10(np.mean(np.square(x)) + 1e-30)
