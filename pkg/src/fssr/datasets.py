"""Train/test manifests, the spectrogram cache, and few-shot episode sampling."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .audio_dsp import Spectrogram, StftConfig, audio_duration, load_spectrogram, save_spectrogram, spectrogram_from_file
from .errors import InsufficientData, MissingRoot, PoolTooSmall

CROP_SECONDS = 3.0
MANIFEST_MAGIC = "#fssr-manifest v1"
RANDOM_OFFSET = "random"
SPLITS = ("train", "test")

Offset = Union[float, str]


@dataclass(frozen=True, order=True)
class SpeakerLabel:
    index: int
    name: str


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: SpeakerLabel
    path: str
    # not serialized; None after reading a manifest back
    duration_s: Optional[float] = field(default=None, compare=False)


@dataclass(frozen=True)
class ManifestEntry:
    utterance: Utterance
    split: str
    crop_offset_s: Offset

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.crop_offset_s != RANDOM_OFFSET and not isinstance(self.crop_offset_s, float):
            raise TypeError("crop_offset_s must be a float or 'random'")


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    seed: int
    protocol_tag: str

    def speakers(self) -> List[SpeakerLabel]:
        return sorted({e.utterance.speaker for e in self.entries})

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def check(self) -> None:
        """Raise ValueError when a manifest invariant is broken."""
        train = {e.utterance.id for e in self.split("train")}
        test = {e.utterance.id for e in self.split("test")}
        both = train & test
        if both:
            raise ValueError(f"utterances in both splits: {sorted(both)[:5]}")
        seen = set()
        for e in self.entries:
            key = (e.utterance.speaker, e.utterance.id, e.split)
            if key in seen:
                raise ValueError(f"duplicate entry {key}")
            seen.add(key)
        indices = sorted({s.index for s in self.speakers()})
        if indices != list(range(len(indices))):
            raise ValueError("speaker indices are not contiguous from 0")


def _format_offset(offset: Offset) -> str:
    return RANDOM_OFFSET if offset == RANDOM_OFFSET else f"{offset:.3f}"


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value:
        raise ValueError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def write_manifest(manifest: Manifest, path: Union[str, os.PathLike]) -> None:
    if re.search(r"\s", manifest.protocol_tag):
        raise ValueError("protocol_tag may not contain whitespace")
    lines = [f"{MANIFEST_MAGIC} seed={manifest.seed} protocol={manifest.protocol_tag}"]
    for e in manifest.entries:
        u = e.utterance
        lines.append("\t".join([
            _check_field(u.id, "utterance id"),
            _check_field(u.speaker.name, "speaker name"),
            str(u.speaker.index),
            _check_field(u.path, "path"),
            e.split,
            _format_offset(e.crop_offset_s),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Union[str, os.PathLike]) -> Manifest:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(MANIFEST_MAGIC):
        raise ValueError(f"{path}: not an fssr manifest")
    header = dict(tok.split("=", 1) for tok in text[0][len(MANIFEST_MAGIC):].split())
    entries = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
        uid, name, index, upath, split, offset = cols
        speaker = SpeakerLabel(index=int(index), name=name)
        entries.append(ManifestEntry(
            utterance=Utterance(id=uid, speaker=speaker, path=upath),
            split=split,
            crop_offset_s=RANDOM_OFFSET if offset == RANDOM_OFFSET else float(offset),
        ))
    return Manifest(entries=entries, seed=int(header["seed"]), protocol_tag=header["protocol"])


def _draw_offset(rng: np.random.Generator, duration: float) -> float:
    if duration <= CROP_SECONDS:
        return 0.0
    # millisecond resolution keeps the text round trip exact
    return round(float(rng.uniform(0.0, duration - CROP_SECONDS)), 3)


# ---------------------------------------------------------------------------
# VoxCeleb1


def _voxceleb_layout(root: Path) -> Tuple[Path, Path]:
    if not root.is_dir():
        raise MissingRoot(f"{root} is not a directory")
    split_file = root / "iden_split.txt"
    if not split_file.is_file():
        raise MissingRoot(f"{root} has no iden_split.txt")
    audio = root / "wav" if (root / "wav").is_dir() else root
    return split_file, audio


def build_voxceleb_split(
    root: Union[str, os.PathLike],
    n_classes: int,
    k_per_class: Optional[int],
    seed: int,
    freeze_offsets: bool = True,
) -> Manifest:
    """Few-shot manifest over the first ``n_classes`` VoxCeleb1 speakers.

    ``root`` holds ``iden_split.txt`` (lines ``<set> <speaker>/<video>/<file>.wav``
    where set 1 is train, 2 validation, 3 test) and the audio, either directly
    or under ``root/wav``.  Speakers are ordered lexicographically by id.  For
    each speaker, ``k_per_class`` distinct training files of at least 3 s are
    drawn (all of them when None), and every test file of at least 3 s is kept.
    Validation files are not used.  Each entry carries one 3 s crop offset;
    with ``freeze_offsets=False`` training offsets are left as ``random``.
    """
    root = Path(root)
    split_file, audio = _voxceleb_layout(root)
    files: Dict[str, Dict[str, List[str]]] = {}
    for line in split_file.read_text().splitlines():
        parts = line.split()
        if len(parts) != 2:
            continue
        kind, rel = parts
        speaker = rel.split("/", 1)[0]
        bucket = {"1": "train", "3": "test"}.get(kind)
        if bucket is None:
            continue
        files.setdefault(speaker, {"train": [], "test": []})[bucket].append(rel)

    names = sorted(files)
    if n_classes > len(names):
        raise InsufficientData(f"requested {n_classes} speakers, {root} has {len(names)}")
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    for index, name in enumerate(names[:n_classes]):
        speaker = SpeakerLabel(index=index, name=name)
        train_files = sorted(files[name]["train"])
        order = rng.permutation(len(train_files))
        wanted = len(train_files) if k_per_class is None else k_per_class
        chosen = []
        for i in order:
            if len(chosen) == wanted:
                break
            rel = train_files[i]
            dur = audio_duration(audio / rel)
            if dur >= CROP_SECONDS:
                chosen.append((rel, dur))
        if len(chosen) < wanted or not chosen:
            raise InsufficientData(
                f"speaker {name} has {len(chosen)} usable training files, {wanted} required")
        for rel, dur in chosen:
            offset: Offset = _draw_offset(rng, dur) if freeze_offsets else RANDOM_OFFSET
            entries.append(_entry(rel, speaker, audio, dur, "train", offset))
        n_test = 0
        for rel in sorted(files[name]["test"]):
            dur = audio_duration(audio / rel)
            if dur < CROP_SECONDS:
                continue
            entries.append(_entry(rel, speaker, audio, dur, "test", _draw_offset(rng, dur)))
            n_test += 1
        if n_test == 0:
            raise InsufficientData(f"speaker {name} has no usable test file")
    k_tag = "all" if k_per_class is None else str(k_per_class)
    tag = f"voxceleb1-n{n_classes}-k{k_tag}-lexicographic"
    manifest = Manifest(entries=entries, seed=seed, protocol_tag=tag)
    manifest.check()
    return manifest


def _entry(rel: str, speaker: SpeakerLabel, audio: Path, dur: float, split: str, offset: Offset) -> ManifestEntry:
    uid = rel.rsplit(".", 1)[0]
    utt = Utterance(id=uid, speaker=speaker, path=str((audio / rel).resolve()), duration_s=dur)
    return ManifestEntry(utterance=utt, split=split, crop_offset_s=offset)


# ---------------------------------------------------------------------------
# VCTK


def _vctk_audio_dir(root: Path) -> Path:
    if not root.is_dir():
        raise MissingRoot(f"{root} is not a directory")
    for sub in ("wav48", "wav48_silence_trimmed", "wav"):
        if (root / sub).is_dir():
            return root / sub
    return root


def build_vctk_split(
    root: Union[str, os.PathLike],
    train_fraction: float,
    seed: int,
    n_classes: Optional[int] = None,
) -> Manifest:
    """Per-speaker utterance-level train/test split of a VCTK-style tree.

    ``root`` (or ``root/wav48``) contains one directory per speaker holding wav
    files.  Each speaker's utterances are shuffled and ``floor(n * fraction)``
    go to train, clamped so both sides keep at least one.  Utterances shorter
    than 3 s get offset 0 and are loop-padded when loaded.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    root = Path(root)
    audio = _vctk_audio_dir(root)
    names = sorted(p.name for p in audio.iterdir() if p.is_dir())
    if n_classes is not None:
        if n_classes > len(names):
            raise InsufficientData(f"requested {n_classes} speakers, {root} has {len(names)}")
        names = names[:n_classes]
    if not names:
        raise InsufficientData(f"{root} has no speaker directories")
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    for index, name in enumerate(names):
        speaker = SpeakerLabel(index=index, name=name)
        wavs = sorted(p.relative_to(audio).as_posix() for p in (audio / name).glob("*.wav"))
        if len(wavs) < 2:
            raise InsufficientData(f"speaker {name} has {len(wavs)} utterances, at least 2 required")
        order = rng.permutation(len(wavs))
        n_train = min(max(math.floor(len(wavs) * train_fraction), 1), len(wavs) - 1)
        train_idx = set(order[:n_train].tolist())
        for i, rel in enumerate(wavs):
            dur = audio_duration(audio / rel)
            split = "train" if i in train_idx else "test"
            entries.append(_entry(rel, speaker, audio, dur, split, _draw_offset(rng, dur)))
    n_tag = "" if n_classes is None else f"-n{n_classes}"
    manifest = Manifest(entries=entries, seed=seed, protocol_tag=f"vctk-train{train_fraction:.2f}{n_tag}-lexicographic")
    manifest.check()
    return manifest


# ---------------------------------------------------------------------------
# spectrogram cache


def default_cache_dir() -> Path:
    return Path(os.environ.get("FSSR_CACHE_DIR", Path.home() / ".cache" / "fssr"))


class SpectrogramCache:
    """Directory of binary spectrogram files keyed by utterance id and offset.

    Writes go through an atomic rename, so any number of readers may share
    the directory with one writer.
    """

    def __init__(self, directory: Union[str, os.PathLike, None] = None, cfg: StftConfig = StftConfig()):
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self.cfg = cfg

    def key(self, entry: ManifestEntry) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "__", entry.utterance.id)
        return self.directory / f"{safe}@{float(entry.crop_offset_s):.3f}.fssr"

    def get(self, entry: ManifestEntry, rng: Optional[np.random.Generator] = None) -> Spectrogram:
        if entry.crop_offset_s == RANDOM_OFFSET:
            return spectrogram_from_file(entry.utterance.path, None, CROP_SECONDS, rng, self.cfg)
        target = self.key(entry)
        if target.is_file():
            return load_spectrogram(target)
        spec = spectrogram_from_file(entry.utterance.path, float(entry.crop_offset_s), CROP_SECONDS,
                                     cfg=self.cfg, pad_with_repeat=True)
        self.directory.mkdir(parents=True, exist_ok=True)
        save_spectrogram(target, spec)
        return spec


# ---------------------------------------------------------------------------
# episodes


class EpisodePool:
    """Items grouped by speaker, plus a loader turning an item id into data.

    Item ids are opaque hashables; ``load`` maps one to whatever the embedder
    consumes (normally a normalized spectrogram matrix).
    """

    def __init__(self, labels: Sequence[SpeakerLabel], items: Dict[int, Sequence[Hashable]],
                 load: Callable[[Hashable], Any]):
        self.labels = list(labels)
        self.items = {k: list(v) for k, v in items.items()}
        self.load = load
        self._by_index = {lab.index: lab for lab in self.labels}

    def label(self, index: int) -> SpeakerLabel:
        return self._by_index[index]

    @property
    def n_items(self) -> int:
        return sum(len(v) for v in self.items.values())

    def all_items(self) -> List[Tuple[Hashable, int]]:
        return [(item, k) for k in sorted(self.items) for item in self.items[k]]

    def subset(self, speakers: Sequence[int] = None, per_speaker: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> "EpisodePool":
        """Restrict to some speakers and/or draw ``per_speaker`` items each."""
        keep = sorted(self.items) if speakers is None else sorted(speakers)
        items = {}
        for k in keep:
            its = self.items[k]
            if per_speaker is not None:
                if len(its) < per_speaker:
                    raise InsufficientData(
                        f"speaker {self._by_index[k].name} has {len(its)} items, {per_speaker} required")
                pick = np.sort(rng.choice(len(its), per_speaker, replace=False))
                its = [its[i] for i in pick]
            items[k] = its
        return EpisodePool([self._by_index[k] for k in keep], items, self.load)

    @classmethod
    def from_manifest(cls, manifest: Manifest, split: str, cache: SpectrogramCache,
                      rng: Optional[np.random.Generator] = None) -> "EpisodePool":
        entries = {e.utterance.id: e for e in manifest.split(split)}
        items: Dict[int, List[str]] = {}
        for uid, e in entries.items():
            items.setdefault(e.utterance.speaker.index, []).append(uid)
        labels = [s for s in manifest.speakers() if s.index in items]

        def load(uid):
            return cache.get(entries[uid], rng).values

        return cls(labels, items, load)

    @classmethod
    def from_arrays(cls, data: Dict[SpeakerLabel, Sequence[Any]]) -> "EpisodePool":
        """In-memory pool; item ids are ``(speaker_index, position)``."""
        table = {}
        items = {}
        for lab, arrays in data.items():
            items[lab.index] = [(lab.index, i) for i in range(len(arrays))]
            for i, a in enumerate(arrays):
                table[(lab.index, i)] = a
        return cls(sorted(data), items, table.__getitem__)


@dataclass
class Episode:
    n_way: int
    k_shot: int
    n_query: int
    classes: List[SpeakerLabel]
    support: List[Tuple[Any, SpeakerLabel]]
    query: List[Tuple[Any, SpeakerLabel]]
    support_ids: List[Hashable]
    query_ids: List[Hashable]

    def support_targets(self) -> np.ndarray:
        """Episode-local class index (position in ``classes``) of each support item."""
        return np.repeat(np.arange(self.n_way), self.k_shot)

    def query_targets(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.n_query)


def sample_episode_ids(pool: EpisodePool, n_way: int, k_shot: int, n_query: int,
                       rng: np.random.Generator):
    """Draw speakers and item ids for one episode without loading any data.

    Returns ``(speaker_indices, support_ids, query_ids)``; ids are grouped by
    speaker in the order of ``speaker_indices``.
    """
    if n_way < 2:
        raise ValueError("n_way must be at least 2")
    if k_shot < 1 or n_query < 1:
        raise ValueError("k_shot and n_query must be at least 1")
    need = k_shot + n_query
    eligible = [k for k in sorted(pool.items) if len(pool.items[k]) >= need]
    if len(eligible) < n_way:
        raise PoolTooSmall(
            f"n_way={n_way} needs {n_way} speakers with at least k_shot+n_query={need} items; "
            f"pool has {len(eligible)} (of {len(pool.items)} speakers)")
    speakers = [eligible[i] for i in rng.choice(len(eligible), n_way, replace=False)]
    support, query = [], []
    for k in speakers:
        its = pool.items[k]
        pick = rng.choice(len(its), need, replace=False)
        support.extend(its[i] for i in pick[:k_shot])
        query.extend(its[i] for i in pick[k_shot:])
    return speakers, support, query


def sample_episode(pool: EpisodePool, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    """One N-way K-shot episode: speakers and items drawn uniformly without replacement."""
    speakers, support_ids, query_ids = sample_episode_ids(pool, n_way, k_shot, n_query, rng)
    labels = [pool.label(k) for k in speakers]
    sup_labels = [lab for lab in labels for _ in range(k_shot)]
    qry_labels = [lab for lab in labels for _ in range(n_query)]
    return Episode(
        n_way=n_way, k_shot=k_shot, n_query=n_query, classes=labels,
        support=[(pool.load(i), lab) for i, lab in zip(support_ids, sup_labels)],
        query=[(pool.load(i), lab) for i, lab in zip(query_ids, qry_labels)],
        support_ids=support_ids, query_ids=query_ids,
    )
