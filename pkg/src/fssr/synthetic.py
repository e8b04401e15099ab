"""Synthetic multi-speaker tone corpus for CI and smoke runs.

Each "speaker" is a fundamental frequency plus a formant pattern.  An
utterance is a train of voiced syllables separated by short pauses, with
per-syllable pitch jitter, vibrato and a noise floor.  The on/off syllable
structure matters: per-bin normalization removes anything stationary, so
speaker identity has to show up in how each bin follows the syllable envelope.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .audio_dsp import TARGET_SAMPLE_RATE, AudioClip, StftConfig, compute_spectrogram, normalize_bins, write_wav
from .datasets import EpisodePool, SpeakerLabel

_BANDLIMIT_HZ = 4000.0


@dataclass(frozen=True)
class SyntheticSpeaker:
    name: str
    f0_hz: float
    formants_hz: Tuple[float, ...]
    formant_bw_hz: float = 180.0


def make_speakers(n_speakers: int, seed: int = 0) -> List[SyntheticSpeaker]:
    rng = np.random.default_rng(seed)
    # log-spaced pitches, shuffled so pitch and formants are not correlated
    f0 = np.geomspace(85.0, 290.0, n_speakers) * rng.uniform(0.98, 1.02, n_speakers)
    f0 = f0[rng.permutation(n_speakers)]
    speakers = []
    for i in range(n_speakers):
        formants = (rng.uniform(300, 900), rng.uniform(900, 2200), rng.uniform(2200, 3600))
        speakers.append(SyntheticSpeaker(name=f"spk{i:03d}", f0_hz=float(f0[i]),
                                         formants_hz=tuple(float(f) for f in formants)))
    return speakers


def _syllable(speaker: SyntheticSpeaker, n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    base = speaker.f0_hz * (1.0 + 0.03 * rng.standard_normal())
    vib_rate, vib_depth = rng.uniform(4.0, 6.0), rng.uniform(0.005, 0.02)
    glide = rng.uniform(-0.04, 0.04)
    f0 = base * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t)) * (1.0 + glide * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(n)
    for h in range(1, int(_BANDLIMIT_HZ // base) + 1):
        f = h * base
        amp = sum(np.exp(-0.5 * ((f - F) / speaker.formant_bw_hz) ** 2) for F in speaker.formants_hz)
        amp = 0.15 / h + amp
        out += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 4, int(0.02 * sr))
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return out * env


def synthesize_utterance(speaker: SyntheticSpeaker, duration_s: float, rng: np.random.Generator,
                         sample_rate: int = TARGET_SAMPLE_RATE, noise_db: float = -30.0) -> AudioClip:
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.12, 0.40) * sample_rate)
        length = min(length, n - pos)
        if length > 16:
            out[pos:pos + length] = _syllable(speaker, length, rng, sample_rate) * rng.uniform(0.6, 1.0)
        pos += length + int(rng.uniform(0.05, 0.20) * sample_rate)
    peak = np.max(np.abs(out)) or 1.0
    out = 0.5 * out / peak
    out += 10 ** (noise_db / 20) * 0.5 * rng.standard_normal(n)
    return AudioClip(samples=np.clip(out, -1.0, 1.0), sample_rate_hz=sample_rate)


def synthetic_pool(n_speakers: int = 20, n_utterances: int = 10, seed: int = 0,
                   duration_s: float = 3.0, cfg: StftConfig = StftConfig()) -> EpisodePool:
    """In-memory pool of normalized float32 spectrograms."""
    speakers = make_speakers(n_speakers, seed)
    rng = np.random.default_rng(seed + 1)
    data = {}
    for i, spk in enumerate(speakers):
        specs = []
        for _ in range(n_utterances):
            clip = synthesize_utterance(spk, duration_s, rng)
            specs.append(normalize_bins(compute_spectrogram(clip, cfg)).values.astype(np.float32))
        data[SpeakerLabel(index=i, name=spk.name)] = specs
    return EpisodePool.from_arrays(data)


def write_synthetic_corpus(root: Union[str, os.PathLike], n_speakers: int = 20, n_utterances: int = 10,
                           seed: int = 0, duration_s: float = 4.0, layout: str = "vctk") -> Path:
    """Write the corpus as wav files.

    ``layout="vctk"`` gives ``root/<speaker>/<speaker>_<nnn>.wav``;
    ``layout="voxceleb"`` gives ``root/wav/<speaker>/synth/<nnnnn>.wav`` plus an
    ``iden_split.txt`` marking the last third of each speaker's files as test.
    """
    root = Path(root)
    speakers = make_speakers(n_speakers, seed)
    rng = np.random.default_rng(seed + 1)
    split_lines = []
    for spk in speakers:
        for j in range(n_utterances):
            clip = synthesize_utterance(spk, duration_s, rng)
            if layout == "vctk":
                target = root / spk.name / f"{spk.name}_{j:03d}.wav"
            elif layout == "voxceleb":
                rel = f"{spk.name}/synth/{j:05d}.wav"
                target = root / "wav" / rel
                split_lines.append(f"{3 if j >= n_utterances - n_utterances // 3 else 1} {rel}")
            else:
                raise ValueError(f"unknown layout {layout!r}")
            target.parent.mkdir(parents=True, exist_ok=True)
            write_wav(target, clip)
    if layout == "voxceleb":
        (root / "iden_split.txt").write_text("\n".join(split_lines) + "\n")
    return root


def synthetic_splits(n_speakers: int = 20, n_utterances: int = 10, seed: int = 0,
                     duration_s: float = 3.0) -> Tuple[EpisodePool, EpisodePool]:
    """(train, test) pools over the same speakers; the last third of each speaker's items is test."""
    pool = synthetic_pool(n_speakers, n_utterances, seed, duration_s)
    cut = n_utterances - max(1, n_utterances // 3)
    train = EpisodePool(pool.labels, {k: v[:cut] for k, v in pool.items.items()}, pool.load)
    test = EpisodePool(pool.labels, {k: v[cut:] for k, v in pool.items.items()}, pool.load)
    return train, test
