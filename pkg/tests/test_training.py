"""Training-harness tests: config parsing, manifest hashing, loss trends,
determinism, checkpoint layout, ablation."""

import json
import os

import numpy as np
import pytest
import torch

from conftest import toy_config
from eendrc.errors import ConfigError, ParseError
from eendrc.pipeline import infer_recording, load_checkpoint
from eendrc.scoring import der
from eendrc.training import (
    RunManifest,
    TrainConfig,
    _cut_windows,
    _noam_lr,
    ablate,
    load_dataset,
    parse_config_file,
    train_clustering,
    train_predictor,
)
from eendrc.clustering import run_training_pass


class TestParseConfigFile:
    def test_key_value_and_equals_forms(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# a comment\n"
            "epochs 3\n"
            "hidden_dim = 32\n"
            "lr 0.01  # trailing comment\n"
            "use_global_loss true\n"
            "schedule noam\n"
            "out_dir runs/x\n"
        )
        config = parse_config_file(path)
        assert config.epochs == 3
        assert config.hidden_dim == 32
        assert config.lr == pytest.approx(0.01)
        assert config.use_global_loss is True
        assert config.schedule == "noam"
        assert config.out_dir == "runs/x"

    def test_unknown_key_line_number(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs 3\nbanana 7\n")
        with pytest.raises(ParseError, match="line 2"):
            parse_config_file(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs three\n")
        with pytest.raises(ParseError, match="line 1"):
            parse_config_file(path)

    def test_bad_bool(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("use_global_loss maybe\n")
        with pytest.raises(ParseError):
            parse_config_file(path)

    def test_schedule_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(schedule="cosine")

    def test_paper_scale_flag(self):
        config = TrainConfig(paper_scale=True)
        assert (config.num_layers, config.hidden_dim, config.num_heads) == (4, 256, 4)
        assert config.chunk_size == 50


class TestRunManifest:
    def test_hash_changes_iff_config_or_data_change(self):
        a = RunManifest(config={"lr": 1e-3}, seed=0, data_hash="abc")
        b = RunManifest(config={"lr": 1e-3}, seed=0, data_hash="abc", loss_log=[{"e": 1}])
        assert a.run_hash == b.run_hash  # loss log does not affect identity
        c = RunManifest(config={"lr": 2e-3}, seed=0, data_hash="abc")
        d = RunManifest(config={"lr": 1e-3}, seed=0, data_hash="xyz")
        assert c.run_hash != a.run_hash
        assert d.run_hash != a.run_hash

    def test_save_load(self, tmp_path):
        manifest = RunManifest(config={"x": 1}, seed=3, data_hash="h", loss_log=[])
        path = tmp_path / "manifest.json"
        manifest.save(path)
        back = RunManifest.load(path)
        assert back == manifest
        assert json.loads(path.read_text())["run_hash"] == manifest.run_hash


class TestNoamSchedule:
    def test_warmup_then_decay(self):
        warm = 100
        lrs = [_noam_lr(s, 64, warm, 1.0) for s in (1, 50, 100, 200, 400)]
        assert lrs[0] < lrs[1] < lrs[2]
        assert lrs[2] > lrs[3] > lrs[4]
        assert lrs[2] == pytest.approx(64**-0.5 * 100**-0.5)


class TestCutWindows:
    def test_window_partition(self):
        frames = torch.zeros(45, 3, dtype=torch.float64)
        labels = np.zeros((45, 2))
        windows = _cut_windows([(frames, labels, [])], window=20)
        assert [w[0].shape[0] for w in windows] == [20, 20, 5]


class TestTraining:
    def test_stage1_loss_decreases(self, toy_data_manifest, tmp_path):
        config = toy_config(toy_data_manifest, tmp_path / "run", epochs=3)
        _, manifest = train_predictor(config)
        log = manifest.loss_log
        first = log[0]["l_diar"] + log[0]["l_attr"]
        last = log[-1]["l_diar"] + log[-1]["l_attr"]
        assert last < first

    def test_outputs_on_disk(self, toy_data_manifest, tmp_path):
        out = tmp_path / "run"
        config = toy_config(toy_data_manifest, out, epochs=2)
        train_predictor(config)
        names = sorted(os.listdir(out))
        assert "epoch_001.pt" in names and "epoch_002.pt" in names
        assert "final.pt" in names and "averaged.pt" in names
        assert "manifest.json" in names
        model, extra = load_checkpoint(out / "final.pt")
        assert extra["n_train_speakers"] == 3
        manifest = RunManifest.load(out / "manifest.json")
        assert len(manifest.loss_log) == 2

    def test_identical_batch_same_loss(self, toy_data_manifest):
        dataset = load_dataset(toy_data_manifest)
        frames, labels, _ = dataset[0]
        torch.manual_seed(0)
        from eendrc.modelcore import ChunkPredictor, EncoderConfig
        from eendrc.clustering import RecurrentClusterer

        cfg = EncoderConfig(
            input_dim=345, num_layers=1, hidden_dim=16, num_heads=2, dropout=0.0,
            chunk_size=10,
        )
        predictor = ChunkPredictor(cfg).eval()
        clusterer = RecurrentClusterer(16)
        one = run_training_pass(predictor, clusterer, [(frames, labels)], 10)
        two = run_training_pass(
            predictor, clusterer, [(frames, labels), (frames, labels)], 10
        )
        for key in ("l_diar", "l_attr", "l_post"):
            assert float(one[key].detach()) == pytest.approx(
                float(two[key].detach()), abs=1e-12
            )

    def test_rerun_reproduces_loss_trajectory(self, toy_data_manifest, tmp_path):
        c1 = toy_config(toy_data_manifest, tmp_path / "r1", epochs=2)
        c2 = toy_config(toy_data_manifest, tmp_path / "r2", epochs=2)
        _, m1 = train_predictor(c1)
        _, m2 = train_predictor(c2)
        assert m1.loss_log == m2.loss_log

    def test_stage2_from_checkpoint(self, toy_data_manifest, toy_checkpoint, tmp_path):
        config = toy_config(
            toy_data_manifest, tmp_path / "s2", epochs=3, lr=5e-4
        )
        _, manifest = train_clustering(config, toy_checkpoint)
        log = manifest.loss_log
        assert log[-1]["l_post"] < log[0]["l_post"]

    def test_stage2_config_must_match(self, toy_data_manifest, toy_checkpoint, tmp_path):
        config = toy_config(
            toy_data_manifest, tmp_path / "bad", hidden_dim=32, num_heads=2
        )
        with pytest.raises(ConfigError, match="architecture"):
            train_clustering(config, toy_checkpoint)

    def test_global_loss_logged(self, toy_data_manifest, toy_checkpoint, tmp_path):
        config = toy_config(
            toy_data_manifest, tmp_path / "g", epochs=1, use_global_loss=True
        )
        _, manifest = train_clustering(config, toy_checkpoint)
        assert "l_global" in manifest.loss_log[0]


class TestAblate:
    def test_zero_shuffle_matches_plain_infer(self, toy_data_manifest, toy_checkpoint):
        model, _ = load_checkpoint(toy_checkpoint)
        dataset = load_dataset(toy_data_manifest)[:2]
        row = ablate(model, dataset, shuffled_ratio=0.0, beam_size=2)
        from eendrc.features import FeatureSequence

        ders = []
        for frames, _, segments in dataset:
            feats = FeatureSequence(frames=frames.numpy(), frame_shift_s=0.1)
            hyp = infer_recording(model, feats, mode="eda-rc", beam_width=2)
            ders.append(der(segments, hyp.to_segments(), 0.25).der)
        assert row["mean_der"] == pytest.approx(float(np.mean(ders)), abs=1e-9)

    def test_full_shuffle_deterministic(self, toy_data_manifest, toy_checkpoint):
        model, _ = load_checkpoint(toy_checkpoint)
        dataset = load_dataset(toy_data_manifest)[:2]
        a = ablate(model, dataset, shuffled_ratio=100.0, beam_size=1, seed=5)
        b = ablate(model, dataset, shuffled_ratio=100.0, beam_size=1, seed=5)
        assert a == b
