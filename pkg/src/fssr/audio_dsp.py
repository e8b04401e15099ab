"""Audio loading and spectrogram extraction.

Every clip is brought to 16 kHz mono, cut into 25 ms Hamming-windowed frames
with a 10 ms hop, and turned into a 128-bin magnitude spectrogram whose rows
are then z-scored independently.  A 3 s clip gives a (128, 300) matrix.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import AlreadyNormalized, ClipTooShort, EmptyAudio, UnreadableFile

TARGET_SAMPLE_RATE = 16000
N_BINS = 128

SPECTROGRAM_MAGIC = b"FSSR"
SPECTROGRAM_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# rows with variance below this are treated as constant
_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


class BinReduction(str, enum.Enum):
    TRUNCATE_LOW_128 = "truncate_low_128"
    AVERAGE_PAIRS = "average_pairs"


@dataclass(frozen=True)
class StftConfig:
    """STFT settings. Window and hop lengths are fixed by the pipeline."""

    window_ms: float = 25.0
    hop_ms: float = 10.0
    window_kind: str = "hamming"
    fft_length: int = 512
    bin_reduction: BinReduction = BinReduction.TRUNCATE_LOW_128
    log_magnitude: bool = False
    sample_rate_hz: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "bin_reduction", BinReduction(self.bin_reduction))
        if self.window_ms != 25.0 or self.hop_ms != 10.0:
            raise ValueError("window_ms must be 25 and hop_ms must be 10")
        if self.window_kind != "hamming":
            raise ValueError(f"unsupported window {self.window_kind!r}")
        if self.fft_length < self.window_samples:
            raise ValueError("fft_length must cover the window")
        if self.bin_reduction is BinReduction.TRUNCATE_LOW_128 and self.fft_length // 2 < N_BINS:
            raise ValueError("fft_length too small for 128 bins")
        if self.bin_reduction is BinReduction.AVERAGE_PAIRS and self.fft_length // 2 < 2 * N_BINS:
            raise ValueError("fft_length too small for 128 averaged bin pairs")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    @property
    def pad_samples(self) -> int:
        # (window - hop) / 2 each side makes the frame count n_samples // hop
        return (self.window_samples - self.hop_samples) // 2

    def fft_bin_indices(self) -> np.ndarray:
        """Index into the one-sided FFT for each of the 128 output rows.

        For ``average_pairs`` the result has shape (128, 2).
        """
        if self.bin_reduction is BinReduction.TRUNCATE_LOW_128:
            return np.arange(1, N_BINS + 1)
        return np.arange(1, 2 * N_BINS + 1).reshape(N_BINS, 2)


@dataclass
class Spectrogram:
    values: np.ndarray
    normalized: bool = False

    @property
    def bins(self) -> int:
        return int(self.values.shape[0])

    @property
    def frames(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)


# ---------------------------------------------------------------------------
# loading


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        # scipy returns left-justified integers, so the container width sets the scale
        scale = float(2 ** (8 * data.dtype.itemsize - 1))
        return data.astype(np.float64) / scale
    return np.clip(data.astype(np.float64), -1.0, 1.0)


def resample(samples: np.ndarray, orig_hz: int, target_hz: int = TARGET_SAMPLE_RATE) -> np.ndarray:
    """Polyphase resampling with scipy's Kaiser-windowed (beta=5) FIR."""
    if orig_hz == target_hz:
        return samples
    g = math.gcd(int(orig_hz), int(target_hz))
    out = signal.resample_poly(samples, target_hz // g, orig_hz // g, window=("kaiser", 5.0))
    return np.clip(out, -1.0, 1.0)


def standardize(samples: np.ndarray, sample_rate_hz: int) -> AudioClip:
    """Mix down to mono (channel average) and resample to 16 kHz."""
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    elif data.ndim != 1:
        raise ValueError(f"expected 1-D or 2-D samples, got shape {data.shape}")
    if data.size == 0:
        raise EmptyAudio("clip has no samples")
    data = resample(data, int(sample_rate_hz))
    return AudioClip(samples=data, sample_rate_hz=TARGET_SAMPLE_RATE)


def load_and_standardize(
    path: os.PathLike | str,
    decoder: Optional[Callable[[str], tuple]] = None,
) -> AudioClip:
    """Read an audio file as a 16 kHz mono clip with amplitudes in [-1, 1].

    WAV files (PCM 8/16/24/32-bit or IEEE float) are read natively.  For other
    containers pass ``decoder``, a callable returning ``(samples, sample_rate)``
    with samples shaped (n,) or (n, channels).
    """
    path = os.fspath(path)
    try:
        if decoder is not None:
            data, rate = decoder(path)
            data = np.asarray(data)
        else:
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if data.size == 0 or data.shape[0] == 0:
        raise EmptyAudio(f"{path}: no samples after decoding")
    return standardize(_to_float(data), int(rate))


def audio_duration(path: os.PathLike | str) -> float:
    """Duration in seconds, read from the header when possible."""
    import wave

    path = os.fspath(path)
    try:
        with wave.open(path, "rb") as w:
            return w.getnframes() / float(w.getframerate())
    except (wave.Error, EOFError):
        # e.g. IEEE float wav, which the stdlib reader rejects
        try:
            rate, data = wavfile.read(path, mmap=True)
        except Exception as exc:
            raise UnreadableFile(f"{path}: {exc}") from exc
        return data.shape[0] / float(rate)


def write_wav(path: os.PathLike | str, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(os.fspath(path), clip.sample_rate_hz, pcm)


# ---------------------------------------------------------------------------
# cropping


def random_crop(
    clip: AudioClip,
    duration_s: float,
    rng: np.random.Generator,
    pad_with_repeat: bool = False,
) -> AudioClip:
    """Cut a contiguous ``duration_s`` segment at a uniformly drawn offset.

    Clips that are too short raise :class:`ClipTooShort` unless
    ``pad_with_repeat`` is set, in which case the clip is looped to length
    and the segment starts at offset 0.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    need = int(round(duration_s * clip.sample_rate_hz))
    n = clip.n_samples
    if n < need:
        if not pad_with_repeat:
            raise ClipTooShort(f"clip has {n} samples, {need} required")
        if n == 0:
            raise EmptyAudio("cannot loop an empty clip")
        reps = -(-need // n)
        return replace(clip, samples=np.tile(clip.samples, reps)[:need])
    offset = int(rng.integers(0, n - need + 1))
    return crop_at(clip, offset / clip.sample_rate_hz, duration_s)


def crop_at(clip: AudioClip, offset_s: float, duration_s: float, pad_with_repeat: bool = False) -> AudioClip:
    """Deterministic crop starting at ``offset_s``."""
    need = int(round(duration_s * clip.sample_rate_hz))
    start = int(round(offset_s * clip.sample_rate_hz))
    seg = clip.samples[start:start + need]
    if seg.shape[0] < need:
        if not pad_with_repeat:
            raise ClipTooShort(f"segment at {offset_s}s has {seg.shape[0]} samples, {need} required")
        if clip.n_samples == 0:
            raise EmptyAudio("cannot loop an empty clip")
        looped = np.tile(clip.samples, -(-(start + need) // clip.n_samples) + 1)
        seg = looped[start:start + need]
    return replace(clip, samples=np.array(seg, copy=True))


# ---------------------------------------------------------------------------
# spectrograms


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Reflect-pad and slice into overlapping frames, shape (frames, window)."""
    win, hop, pad = cfg.window_samples, cfg.hop_samples, cfg.pad_samples
    if samples.shape[0] < win:
        raise ClipTooShort(f"{samples.shape[0]} samples is shorter than one {win}-sample window")
    padded = np.pad(samples, (pad, pad), mode="reflect")
    n_frames = (padded.shape[0] - win) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(padded, win)
    return view[::hop][:n_frames]


def compute_spectrogram(clip: AudioClip, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Magnitude spectrogram with 128 rows and ``n_samples // hop`` columns."""
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"clip must be {cfg.sample_rate_hz} Hz, got {clip.sample_rate_hz}")
    frames = frame_signal(np.asarray(clip.samples, dtype=np.float64), cfg)
    window = signal.get_window("hamming", cfg.window_samples, fftbins=False)
    mag = np.abs(np.fft.rfft(frames * window, n=cfg.fft_length, axis=1)).T
    idx = cfg.fft_bin_indices()
    if cfg.bin_reduction is BinReduction.TRUNCATE_LOW_128:
        values = mag[idx]
    else:
        values = mag[idx].mean(axis=1)
    if cfg.log_magnitude:
        values = np.log1p(values)
    return Spectrogram(values=np.ascontiguousarray(values), normalized=False)


def normalize_bins(spec: Spectrogram) -> Spectrogram:
    """Z-score each frequency row over time (population std).

    Rows whose variance is below 1e-12 become all-zero.
    """
    if spec.normalized:
        raise AlreadyNormalized("spectrogram is already normalized")
    v = np.asarray(spec.values, dtype=np.float64)
    mean = v.mean(axis=1, keepdims=True)
    centered = v - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    flat = var < _VARIANCE_FLOOR
    out = np.where(flat, 0.0, centered / np.sqrt(np.where(flat, 1.0, var)))
    return Spectrogram(values=out, normalized=True)


def spectrogram_from_file(
    path: os.PathLike | str,
    offset_s: Optional[float] = None,
    duration_s: float = 3.0,
    rng: Optional[np.random.Generator] = None,
    cfg: StftConfig = StftConfig(),
    pad_with_repeat: bool = False,
) -> Spectrogram:
    """Load, crop (fixed offset, or random when ``offset_s`` is None) and normalize."""
    clip = load_and_standardize(path)
    if offset_s is None:
        clip = random_crop(clip, duration_s, rng if rng is not None else np.random.default_rng(),
                           pad_with_repeat=pad_with_repeat)
    else:
        clip = crop_at(clip, offset_s, duration_s, pad_with_repeat=pad_with_repeat)
    return normalize_bins(compute_spectrogram(clip, cfg))


# ---------------------------------------------------------------------------
# binary tensor files


def save_spectrogram(path: os.PathLike | str, spec: Spectrogram) -> None:
    """Write ``FSSR`` header + row-major little-endian float32 values.

    The file is written to a temporary name and renamed into place, so
    concurrent readers never see a partial file.
    """
    path = os.fspath(path)
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(SPECTROGRAM_MAGIC, SPECTROGRAM_VERSION, values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))
    os.replace(tmp, path)


def load_spectrogram(path: os.PathLike | str, normalized: bool = True) -> Spectrogram:
    """Read a file written by :func:`save_spectrogram`.

    The header carries no normalization flag; ``normalized`` supplies it.
    """
    with open(os.fspath(path), "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise UnreadableFile(f"{path}: truncated header")
        magic, version, bins, frames = _HEADER.unpack(head)
        if magic != SPECTROGRAM_MAGIC:
            raise UnreadableFile(f"{path}: bad magic {magic!r}")
        if version != SPECTROGRAM_VERSION:
            raise UnreadableFile(f"{path}: unsupported version {version}")
        body = fh.read()
    if len(body) != 4 * bins * frames:
        raise UnreadableFile(f"{path}: expected {bins}x{frames} float32 values")
    values = np.frombuffer(body, dtype="<f4").reshape(bins, frames).astype(np.float32)
    return Spectrogram(values=values, normalized=normalized)
