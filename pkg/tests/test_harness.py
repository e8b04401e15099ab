import json
import math

import numpy as np
import pytest
import torch

from fssr.cli import main
from fssr.errors import ConfigMismatch, DivergenceDetected, EmptyInput, ShapeMismatch
from fssr.datasets import EpisodePool, SpeakerLabel, read_manifest
from fssr.fewshot import evaluate_few_shot
from fssr.harness import (
    EvaluationReport,
    ExperimentRecord,
    TrainConfig,
    episodic_train,
    limited_samples_sweep,
    topk_accuracy,
    train_classifier,
    transfer_finetune,
)
from fssr.harness.config import load_layers, parse_assignments, write_resolved
from fssr.harness.records import append_jsonl, read_jsonl, records_from_csv, records_to_csv
from fssr.harness.report import fewshot_grid_table, records_table, report
from fssr.harness.training import split_speakers
from fssr.models import ModelConfig, build_model, save_checkpoint
from fssr.synthetic import synthetic_splits


def record(**kw):
    base = dict(experiment_tag="t", arch="vgg_m", dataset="toy", metrics={"top1": 0.5, "top5": 0.75},
                parameter_count=100, wall_time_s=1.5, config={"lr": 1e-3}, diagnostics={"steps": 3})
    base.update(kw)
    return ExperimentRecord(**base)


class TestTopK:
    def test_perfect(self):
        logits = torch.eye(4) * 5
        for k in range(1, 5):
            assert topk_accuracy(logits, [0, 1, 2, 3], k) == 1.0

    def test_k_equals_classes(self):
        logits = torch.randn(10, 6)
        assert topk_accuracy(logits, np.random.default_rng(0).integers(0, 6, 10), 6) == 1.0

    def test_crafted_batch(self):
        logits = np.array([[0.9, 0.5, 0.1],
                           [0.1, 0.8, 0.3],
                           [0.6, 0.3, 0.1],
                           [0.2, 0.3, 0.5]])
        labels = [0, 2, 2, 1]
        assert topk_accuracy(logits, labels, 2) == 0.75
        assert topk_accuracy(logits, labels, 1) == 0.25

    def test_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            topk_accuracy(np.zeros((3, 4)), [0, 1], 1)
        with pytest.raises(ShapeMismatch):
            topk_accuracy(np.zeros((2, 4)), [0, 1], 5)


class TestRecords:
    def test_validation(self):
        with pytest.raises(ValueError):
            record(metrics={"top1": 1.2})
        with pytest.raises(ValueError):
            record(parameter_count=0)
        with pytest.raises(ValueError):
            record(metrics={"top1": 0.6, "top5": 0.5})

    def test_jsonl_round_trip(self, tmp_path):
        r = record()
        e = EvaluationReport("capsnet_ma", 5, 1, 100, 0, 0.8, 0.02)
        append_jsonl(tmp_path / "r.jsonl", [r])
        append_jsonl(tmp_path / "r.jsonl", [e])
        assert read_jsonl(tmp_path / "r.jsonl") == [r, e]

    def test_csv_round_trip(self):
        rs = [record(), record(experiment_tag="u", wall_time_s=0.1 + 0.2)]
        assert records_from_csv(records_to_csv(rs)) == rs

    def test_read_skips_blank_lines(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("\n")
        assert read_jsonl(tmp_path / "e.jsonl") == []


class TestReport:
    def test_one_record_one_row(self):
        lines = records_table([record()]).strip().splitlines()
        assert len(lines) == 5  # rule, header, rule, row, rule
        assert "VGG-M" in lines[3] and "50.00" in lines[3]

    def test_grid_layout(self):
        items = [EvaluationReport("resnet34", w, s, 10, 0, acc, 0.0)
                 for (w, s), acc in {(5, 1): 0.8, (5, 5): 0.9, (20, 1): 0.5, (20, 5): 0.7}.items()]
        row = fewshot_grid_table(items).strip().splitlines()[3]
        cells = [c.strip() for c in row.strip("|").split("|")]
        assert cells == ["ResNet-34", "80.00", "90.00", "50.00", "70.00"]

    def test_files(self, tmp_path):
        rs = [record(config={"samples_per_class": n}, metrics={"top1": a, "top5": 1.0})
              for n, a in ((10, 0.4), (20, 0.6))]
        rs.append(record(experiment_tag="fs", metrics={"5way_1shot": 0.7}))
        written = [p.name for fmt in ("table", "csv", "plot") for p in report(rs, fmt, tmp_path)]
        assert written == ["results.txt", "results.csv", "limited_samples.png", "fewshot_grid.png"]
        assert (tmp_path / "limited_samples.png").read_bytes()[:4] == b"\x89PNG"
        assert "5-way 1-shot" in (tmp_path / "results.txt").read_text()

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyInput):
            report([], "table", tmp_path)
        with pytest.raises(EmptyInput):
            report([record()], "plot", tmp_path)


class TestConfig:
    def test_layering(self, tmp_path):
        a = tmp_path / "a.cfg"
        b = tmp_path / "b.cfg"
        a.write_text("train.learning_rate = 0.1\ntrain.batch_size = 8  # comment\nmodel.embedding_dim = 64\n")
        b.write_text("train.learning_rate = 0.01\n")
        tree = load_layers([a, b], ["train.batch_size=4"], {"train.seed": 3})
        assert tree == {"train": {"learning_rate": 0.01, "batch_size": 4, "seed": 3}, "model": {"embedding_dim": 64}}
        write_resolved(tmp_path / "r.txt", tree)
        again = load_layers([tmp_path / "r.txt"])
        assert again == tree

    def test_parse_values(self):
        d = parse_assignments(["a = none", "b = true", "c = adam", "d = [1, 2]", "e = 1e-4"])
        assert d == {"a": None, "b": True, "c": "adam", "d": [1, 2], "e": 1e-4}
        with pytest.raises(ValueError):
            parse_assignments(["no equals sign"])

    def test_train_config(self):
        cfg = TrainConfig.from_dict({"learning_rate": 0.5, "composite_weights": {"recon": 0.2}})
        assert cfg.composite_weights.recon == 0.2 and cfg.composite_weights.proto == 1.0
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"lr": 1})
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")


@pytest.fixture(scope="module")
def two_speakers(synth_pool):
    return synth_pool.subset([0, 1])


class TestClassifierTraining:
    def test_two_speaker_toy_is_learned_and_deterministic(self, two_speakers, tmp_path):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=100, max_steps=50, seed=0)
        first = train_classifier(cfg, build_model(ModelConfig("capsnet_m", 2), seed=0), two_speakers,
                                 out_dir=tmp_path)
        assert first.record.metrics["top1"] >= 0.95
        assert first.record.diagnostics["steps"] == 50
        assert (tmp_path / "model.pt").exists()
        second = train_classifier(cfg, build_model(ModelConfig("capsnet_m", 2), seed=0), two_speakers)
        assert abs(first.record.diagnostics["final_loss"] - second.record.diagnostics["final_loss"]) <= 1e-6
        assert first.record.metrics == second.record.metrics

    def test_top5_not_below_top1(self, synth_pool):
        pool = synth_pool.subset(list(range(6)))
        pool = EpisodePool(pool.labels, {k: v[:2] for k, v in pool.items.items()}, pool.load)
        cfg = TrainConfig(batch_size=4, max_steps=2)
        out = train_classifier(cfg, build_model(ModelConfig("capsnet_m", 6), seed=0), pool)
        assert out.record.metrics["top5"] >= out.record.metrics["top1"]

    def test_config_mismatch(self, two_speakers):
        cfg = TrainConfig(max_steps=1)
        with pytest.raises(ConfigMismatch):
            train_classifier(cfg, build_model(ModelConfig("capsnet_m", 3)), two_speakers)
        with pytest.raises(ConfigMismatch):
            train_classifier(TrainConfig(max_steps=1, loss="margin"), build_model(ModelConfig("vgg_m", 2)),
                             two_speakers)

    def test_divergence_restores_and_saves(self, tmp_path):
        bad = np.full((128, 300), np.nan, dtype=np.float32)
        pool = EpisodePool.from_arrays({SpeakerLabel(0, "a"): [bad, bad], SpeakerLabel(1, "b"): [bad, bad]})
        model = build_model(ModelConfig("vgg_m", 2), seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        with pytest.raises(DivergenceDetected) as info:
            train_classifier(TrainConfig(batch_size=4, max_steps=3), model, pool, out_dir=tmp_path)
        assert info.value.checkpoint == tmp_path / "model.pt" and info.value.checkpoint.exists()
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


class TestSweep:
    def test_bookkeeping_and_identical_subsets(self, synth_pool):
        train = synth_pool.subset([0, 1, 2])
        cfg = TrainConfig(batch_size=4, max_steps=1, seed=5)
        records = limited_samples_sweep(["capsnet_m"], train, train, [2, 4], cfg)
        assert [r.config["samples_per_class"] for r in records] == [2, 4]
        assert all(r.experiment_tag == "limited_samples" for r in records)
        a = train.subset(per_speaker=4, rng=np.random.default_rng(5))
        b = train.subset(per_speaker=4, rng=np.random.default_rng(5))
        assert a.items == b.items

    @pytest.mark.slow
    def test_full_data_not_worse_than_ten(self):
        train, test = synthetic_splits(4, 21, seed=3)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=3, seed=0)
        records = limited_samples_sweep(["vgg_m", "resnet34", "capsnet_m"], train, test, [10, None], cfg,
                                        dataset="synthetic")
        n_test = sum(len(v) for v in test.items.values())
        for arch in ("vgg_m", "resnet34", "capsnet_m"):
            ten, full = [r for r in records if r.arch == arch]
            assert ten.config["samples_per_class"] == 10 and full.config["full"]
            p = full.metrics["top1"]
            ci = 1.96 * math.sqrt(max(p * (1 - p), 1.0 / n_test) / n_test)
            assert full.metrics["top1"] + ci >= ten.metrics["top1"], arch


class TestEpisodic:
    def test_zero_steps_equals_frozen_evaluation(self, synth_pool):
        train, val = synth_pool.subset(list(range(10))), synth_pool.subset(list(range(10, 16)))
        model = build_model(ModelConfig("capsnet_ma", 10, embedding_dim=32), seed=0)
        cfg = TrainConfig(max_steps=0, eval_episodes=20, eval_n_query=2, seed=4)
        out = episodic_train(cfg, model, train, 5, 1, 2, val_pool=val)
        ref = evaluate_few_shot(model, val, 5, 1, 2, 20, seed=4)
        assert out.record.metrics["5way_1shot"] == ref.mean_accuracy
        assert out.record.diagnostics["steps"] == 0

    def test_holds_out_speakers(self, synth_pool):
        train, val = split_speakers(synth_pool, 0.1, 5, seed=0)
        assert len(val.items) == 5 and len(train.items) == 15
        assert not set(train.items) & set(val.items)
        tiny = synth_pool.subset([0, 1, 2, 3, 4, 5])
        assert split_speakers(tiny, 0.1, 5, seed=0)[1] is None

    def test_short_run_records_diagnostics(self, synth_pool, tmp_path):
        train, val = synth_pool.subset(list(range(10))), synth_pool.subset(list(range(10, 16)))
        cfg = TrainConfig(learning_rate=1e-3, max_steps=4, eval_every=2, eval_episodes=10, eval_n_query=2)
        out = episodic_train(cfg, build_model(ModelConfig("capsnet_m", 10), seed=0), train, 5, 1, 1,
                             val_pool=val, out_dir=tmp_path)
        d = out.record.diagnostics
        assert [s for s, _ in d["history"]] == [2, 4]
        assert math.isfinite(d["first_loss"]) and math.isfinite(d["final_loss"])
        assert out.checkpoint.exists()

    def test_composite_needs_capsnet_ma(self, synth_pool):
        cfg = TrainConfig(max_steps=1, loss="capsma_composite")
        with pytest.raises(ConfigMismatch):
            episodic_train(cfg, build_model(ModelConfig("capsnet_m", 10)), synth_pool, 5, 1, 1)


class TestTransfer:
    def test_zero_finetune_is_frozen_evaluation(self, synth_pool, tmp_path):
        model = build_model(ModelConfig("capsnet_m", 4), seed=0)
        save_checkpoint(tmp_path / "src.pt", model)
        target = synth_pool.subset(list(range(10, 20)))
        cfg = TrainConfig(seed=2)
        out = transfer_finetune(tmp_path / "src.pt", target, None, cfg, zero_finetune=True,
                                n_way=5, k_shot=1, n_query=2, n_episodes=20)
        ref = evaluate_few_shot(model, target, 5, 1, 2, 20, seed=2)
        assert out.record.metrics["5way_1shot"] == ref.mean_accuracy
        assert out.record.experiment_tag == "transfer_zero_finetune"

    @pytest.mark.slow
    def test_finetuned_beats_scratch(self, tmp_path):
        src_train, src_test = synthetic_splits(10, 10, seed=0)
        tgt_train, tgt_test = synthetic_splits(5, 12, seed=7)
        pre = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=100, max_steps=60, seed=0)
        train_classifier(pre, build_model(ModelConfig("vgg_m", 10), seed=0), src_train, src_test,
                         out_dir=tmp_path / "src")
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=100, max_steps=8, seed=0)
        tuned = transfer_finetune(tmp_path / "src" / "model.pt", tgt_train, tgt_test, cfg)
        scratch = train_classifier(cfg, build_model(ModelConfig("vgg_m", 5), seed=0), tgt_train, tgt_test)
        assert tuned.record.metrics["top1"] > scratch.record.metrics["top1"]


class TestCli:
    def test_prepare_and_spectrogram(self, tmp_path, capsys):
        root = tmp_path / "corpus"
        assert main(["prepare-splits", "--dataset", "synthetic", "--root", str(root), "--out",
                     str(tmp_path / "m.tsv"), "--n-speakers", "3", "--n-utterances", "3"]) == 0
        manifest = read_manifest(tmp_path / "m.tsv")
        assert len(manifest.speakers()) == 3 and len(manifest.entries) == 9
        wav = manifest.entries[0].utterance.path
        assert main(["spectrogram", str(wav), "--out", str(tmp_path / "s.fssr"), "--offset", "0.5",
                     "--plot", str(tmp_path / "s.png")]) == 0
        assert "128 x 300" in capsys.readouterr().out
        assert (tmp_path / "s.png").exists()

    def test_refuses_to_write_into_dataset_root(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["prepare-splits", "--dataset", "synthetic", "--root", str(tmp_path), "--out",
                  str(tmp_path / "m.tsv"), "--n-speakers", "2", "--n-utterances", "1"])

    def test_train_eval_report_pipeline(self, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["episodic-train", "--arch", "capsnet_m", "--synthetic", "6,6", "--out", str(run),
                     "--n-query", "1", "--validate-on-test", "--set", "train.max_steps=2",
                     "--set", "train.eval_every=1", "--set", "train.eval_episodes=5",
                     "--set", "train.eval_n_query=1"]) == 0
        resolved = (run / "config.resolved.txt").read_text()
        assert "train.max_steps = 2" in resolved and "train.learning_rate = 0.001" in resolved
        assert read_jsonl(run / "records.jsonl")[0].metrics["5way_1shot"] >= 0
        evals = tmp_path / "evals.jsonl"
        assert main(["fewshot-eval", "--checkpoint", str(run / "model.pt"), "--synthetic", "6,6",
                     "--n-query", "1", "--episodes", "5", "--out", str(evals)]) == 0
        line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert line["n_way"] == 5 and line["n_episodes"] == 5
        out = tmp_path / "report"
        assert main(["report", str(run / "records.jsonl"), str(evals), "--format", "table",
                     "--format", "plot", "--out", str(out)]) == 0
        assert (out / "results.txt").exists() and (out / "fewshot_grid.png").exists()

    def test_train_subcommand(self, tmp_path, capsys):
        assert main(["train", "--arch", "capsnet_m", "--synthetic", "3,3", "--out", str(tmp_path),
                     "--set", "train.max_steps=1", "--set", "train.batch_size=2"]) == 0
        assert "NP" in capsys.readouterr().out
        assert read_jsonl(tmp_path / "records.jsonl")[0].config["train"]["max_steps"] == 1

    def test_library_errors_exit_with_two(self, tmp_path):
        (tmp_path / "empty.jsonl").write_text("")
        assert main(["report", str(tmp_path / "empty.jsonl"), "--format", "table", "--out", str(tmp_path)]) == 2

    def test_selftest_quick(self, capsys):
        assert main(["selftest", "--quick"]) == 0
        assert "checks passed" in capsys.readouterr().out


def test_episodic_divergence_restores_initial_weights(tmp_path):
    bad = np.full((128, 300), np.nan, dtype=np.float32)
    pool = EpisodePool.from_arrays({SpeakerLabel(i, f"s{i}"): [bad, bad] for i in range(2)})
    model = build_model(ModelConfig("vgg_m", 2), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with pytest.raises(DivergenceDetected):
        episodic_train(TrainConfig(max_steps=2), model, pool, 2, 1, 1, out_dir=tmp_path)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert (tmp_path / "model.pt").exists()
