import wave

import numpy as np
import pytest
import torch

from fssr.datasets import EpisodePool, SpeakerLabel

torch.set_num_threads(1)


def write_pcm(path, data, rate, sampwidth=2):
    """Write integer PCM with the stdlib writer (supports 24-bit)."""
    data = np.asarray(data)
    channels = 1 if data.ndim == 1 else data.shape[1]
    frames = data.reshape(-1).astype("<i4")
    if sampwidth == 2:
        raw = frames.astype("<i2").tobytes()
    elif sampwidth == 3:
        b = frames.view(np.uint8).reshape(-1, 4)[:, :3]
        raw = b.tobytes()
    else:
        raw = frames.tobytes()
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(sampwidth)
        w.setframerate(rate)
        w.writeframes(raw)


def sine(freq, seconds, rate, amp=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def label_pool(n_speakers, n_items):
    """Pool whose items load as their own speaker index."""
    labels = [SpeakerLabel(i, f"s{i:02d}") for i in range(n_speakers)]
    items = {i: [(i, j) for j in range(n_items)] for i in range(n_speakers)}
    return EpisodePool(labels, items, lambda item: item[0])


@pytest.fixture(scope="session")
def synth_pool():
    from fssr.synthetic import synthetic_pool

    return synthetic_pool(20, 10, seed=0)


# one summary line per acceptance criterion, printed after the run
_CRITERIA = {}


@pytest.fixture
def criterion(request):
    number = request.node.get_closest_marker("criterion").args[0]
    _CRITERIA[number] = ("(crashed before recording a result)", False, "")

    def record(title, passed, detail=""):
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n not in _CRITERIA:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
            continue
        title, passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}  {detail}")
