import numpy as np
import pytest
import torch

RATE = 44100


def sine(freq, seconds, amplitude=0.7, rate=RATE, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return (amplitude * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32)


def stereo(mono):
    mono = np.asarray(mono, dtype=np.float32)
    return np.stack([mono, mono], axis=1)


@pytest.fixture(autouse=True)
def _single_thread():
    # the sandbox has 2 cores; heavy tests set their own thread count
    torch.set_num_threads(2)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
