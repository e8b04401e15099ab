import numpy as np
import pytest
from scipy import stats

from fssr.audio_dsp import load_spectrogram
from fssr.datasets import (
    EpisodePool,
    Manifest,
    ManifestEntry,
    SpeakerLabel,
    SpectrogramCache,
    Utterance,
    build_vctk_split,
    build_voxceleb_split,
    read_manifest,
    sample_episode,
    write_manifest,
)
from fssr.errors import InsufficientData, MissingRoot, PoolTooSmall

from conftest import label_pool, write_pcm


def _noise_wav(path, seconds, seed):
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    write_pcm(path, rng.integers(-3000, 3000, int(seconds * 16000)), 16000)


@pytest.fixture(scope="module")
def voxceleb_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("vox")
    lines = []
    seed = 0
    for s in range(52):
        spk = f"id1{s:04d}"
        n_train = 3 if s == 51 else 6
        for j in range(n_train + 2):
            rel = f"{spk}/vid{j % 2}/{j:05d}.wav"
            kind = 1 if j < n_train else (2 if j == n_train else 3)
            _noise_wav(root / "wav" / rel, 3.5 + 0.1 * j, seed)
            seed += 1
            lines.append(f"{kind} {rel}")
    # one speaker (id10051) has only 3 training files; keep it last lexicographically
    (root / "iden_split.txt").write_text("\n".join(reversed(lines)) + "\n")
    return root


@pytest.fixture(scope="module")
def vctk_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("vctk")
    for s in range(6):
        for j in range(10):
            _noise_wav(root / "wav48" / f"p{225 + s}" / f"p{225 + s}_{j:03d}.wav", 2.5 + 0.2 * j, 100 * s + j)
    return root


class TestVoxCeleb:
    def test_fifty_speakers_five_shots(self, voxceleb_root):
        m = build_voxceleb_split(voxceleb_root, 50, 5, seed=1)
        train = m.split("train")
        assert len(train) == 250
        assert [s.index for s in m.speakers()] == list(range(50))
        assert m.speakers()[0].name == "id10000"
        counts = np.bincount([e.utterance.speaker.index for e in train])
        assert (counts == 5).all()
        assert all(isinstance(e.crop_offset_s, float) for e in train)
        for e in m.entries:
            assert 0.0 <= e.crop_offset_s <= e.utterance.duration_s - 3.0 + 1e-9
        m.check()

    def test_train_files_only_from_train_list(self, voxceleb_root):
        m = build_voxceleb_split(voxceleb_root, 50, 5, seed=1)
        listed = dict(reversed(l.split()) for l in (voxceleb_root / "iden_split.txt").read_text().split("\n") if l)
        for e in m.entries:
            rel = e.utterance.path.split("/wav/", 1)[1]
            assert listed[rel] == ("1" if e.split == "train" else "3")

    def test_byte_identical_under_seed(self, voxceleb_root, tmp_path):
        write_manifest(build_voxceleb_split(voxceleb_root, 50, 5, seed=1), tmp_path / "a.tsv")
        write_manifest(build_voxceleb_split(voxceleb_root, 50, 5, seed=1), tmp_path / "b.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
        write_manifest(build_voxceleb_split(voxceleb_root, 50, 5, seed=2), tmp_path / "c.tsv")
        assert (tmp_path / "a.tsv").read_bytes() != (tmp_path / "c.tsv").read_bytes()

    def test_insufficient_names_speaker(self, voxceleb_root):
        with pytest.raises(InsufficientData, match="id10051"):
            build_voxceleb_split(voxceleb_root, 52, 5, seed=1)

    def test_missing_root(self, tmp_path):
        with pytest.raises(MissingRoot):
            build_voxceleb_split(tmp_path / "nope", 5, 5, 0)
        with pytest.raises(MissingRoot):
            build_voxceleb_split(tmp_path, 5, 5, 0)

    def test_unfrozen_offsets(self, voxceleb_root):
        m = build_voxceleb_split(voxceleb_root, 3, None, seed=0, freeze_offsets=False)
        assert all(e.crop_offset_s == "random" for e in m.split("train"))
        assert len(m.split("train")) == 18


class TestVctk:
    def test_seventy_thirty(self, vctk_root):
        m = build_vctk_split(vctk_root, 0.7, seed=3)
        for s in m.speakers():
            train = [e for e in m.split("train") if e.utterance.speaker == s]
            test = [e for e in m.split("test") if e.utterance.speaker == s]
            assert (len(train), len(test)) == (7, 3)
        m.check()

    def test_short_clips_get_offset_zero(self, vctk_root):
        m = build_vctk_split(vctk_root, 0.7, seed=3)
        for e in m.entries:
            if e.utterance.duration_s <= 3.0:
                assert e.crop_offset_s == 0.0

    def test_deterministic(self, vctk_root):
        assert build_vctk_split(vctk_root, 0.7, 3) == build_vctk_split(vctk_root, 0.7, 3)

    def test_first_n_speakers(self, vctk_root):
        m = build_vctk_split(vctk_root, 0.7, 3, n_classes=4)
        assert [s.name for s in m.speakers()] == ["p225", "p226", "p227", "p228"]

    def test_single_utterance_speaker(self, tmp_path):
        _noise_wav(tmp_path / "p1" / "a.wav", 3.5, 0)
        _noise_wav(tmp_path / "p2" / "a.wav", 3.5, 1)
        _noise_wav(tmp_path / "p2" / "b.wav", 3.5, 2)
        with pytest.raises(InsufficientData, match="p1"):
            build_vctk_split(tmp_path, 0.7, 0)

    def test_bad_fraction(self, vctk_root):
        with pytest.raises(ValueError):
            build_vctk_split(vctk_root, 1.0, 0)


class TestManifestFile:
    def test_round_trip(self, vctk_root, tmp_path):
        m = build_vctk_split(vctk_root, 0.7, seed=3)
        write_manifest(m, tmp_path / "m.tsv")
        back = read_manifest(tmp_path / "m.tsv")
        assert back == m
        write_manifest(back, tmp_path / "m2.tsv")
        assert (tmp_path / "m.tsv").read_bytes() == (tmp_path / "m2.tsv").read_bytes()

    def test_layout(self, tmp_path):
        spk = SpeakerLabel(0, "alice")
        m = Manifest([ManifestEntry(Utterance("u1", spk, "/d/u1.wav", 4.0), "train", 0.25),
                      ManifestEntry(Utterance("u2", spk, "/d/u2.wav", 4.0), "test", "random")], 9, "toy")
        write_manifest(m, tmp_path / "m.tsv")
        assert (tmp_path / "m.tsv").read_text() == (
            "#fssr-manifest v1 seed=9 protocol=toy\n"
            "u1\talice\t0\t/d/u1.wav\ttrain\t0.250\n"
            "u2\talice\t0\t/d/u2.wav\ttest\trandom\n")

    def test_disjointness_check(self):
        spk = SpeakerLabel(0, "a")
        m = Manifest([ManifestEntry(Utterance("u", spk, "p"), "train", 0.0),
                      ManifestEntry(Utterance("u", spk, "p"), "test", 0.0)], 0, "x")
        with pytest.raises(ValueError):
            m.check()


class TestCache:
    def test_cache_writes_binary_files(self, vctk_root, tmp_path):
        m = build_vctk_split(vctk_root, 0.7, seed=3, n_classes=2)
        cache = SpectrogramCache(tmp_path / "cache")
        pool = EpisodePool.from_manifest(m, "train", cache)
        uid = pool.items[0][0]
        first = pool.load(uid)
        assert first.shape == (128, 300)
        files = list((tmp_path / "cache").glob("*.fssr"))
        assert len(files) == 1
        np.testing.assert_array_equal(load_spectrogram(files[0]).values, pool.load(uid))


class TestEpisodes:
    def test_counts(self):
        ep = sample_episode(label_pool(50, 5), 5, 1, 4, np.random.default_rng(0))
        assert len(ep.support) == 5 and len(ep.query) == 20
        assert len({lab for _, lab in ep.support}) == 5
        assert not set(ep.support_ids) & set(ep.query_ids)
        for item, lab in ep.support + ep.query:
            assert item == lab.index
        np.testing.assert_array_equal(ep.query_targets(), np.repeat(np.arange(5), 4))

    def test_pool_too_small(self):
        with pytest.raises(PoolTooSmall, match="n_way=20"):
            sample_episode(label_pool(5, 10), 20, 1, 1, np.random.default_rng(0))
        with pytest.raises(PoolTooSmall, match="k_shot\\+n_query=6"):
            sample_episode(label_pool(10, 5), 5, 1, 5, np.random.default_rng(0))

    def test_speaker_selection_uniform(self):
        pool = label_pool(50, 5)
        rng = np.random.default_rng(123)
        counts = np.zeros(50)
        for _ in range(10000):
            ep = sample_episode(pool, 5, 1, 1, rng)
            for lab in ep.classes:
                counts[lab.index] += 1
        expected = 10000 * 5 / 50
        sigma = np.sqrt(10000 * 0.1 * 0.9)
        assert np.abs(counts - expected).max() < 3 * sigma
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert stats.chi2.sf(chi2, df=49) > 0.001

    def test_never_overlaps(self):
        pool = label_pool(8, 6)
        rng = np.random.default_rng(1)
        for _ in range(500):
            ep = sample_episode(pool, 4, 2, 4, rng)
            assert not set(ep.support_ids) & set(ep.query_ids)
