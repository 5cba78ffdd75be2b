"""Session fixtures: a tiny on-disk simulated dataset and a toy checkpoint."""

import os

import pytest
import torch

from eendrc.datasim import MixtureRecipe, SyntheticVoiceCorpus, simulate_mixture
from eendrc.features import write_wav
from eendrc.scoring import write_rttm
from eendrc.training import TrainConfig, train_predictor


def write_toy_mixtures(out_dir, count=6, n_speakers=3, seed=100):
    corpus = SyntheticVoiceCorpus(utterance_duration_range=(0.4, 0.8))
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        recipe = MixtureRecipe(n_speakers, mean_silence_s=0.8, seed=seed + i)
        wave, segments = simulate_mixture(corpus, recipe)
        write_wav(os.path.join(out_dir, f"mix_{i:04d}.wav"), wave)
        write_rttm(
            segments, os.path.join(out_dir, f"mix_{i:04d}.rttm"), rec_id=f"mix{i}"
        )
        rows.append(f"mix_{i:04d}.wav\tmix_{i:04d}.rttm")
    manifest = os.path.join(out_dir, "mixtures.tsv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest


def toy_config(data_manifest, out_dir, **over):
    base = dict(
        data_manifest=str(data_manifest),
        out_dir=str(out_dir),
        seed=0,
        num_layers=1,
        hidden_dim=16,
        num_heads=2,
        dropout=0.0,
        chunk_size=10,
        max_local_speakers=5,
        epochs=2,
        batch_size=4,
        lr=1e-3,
        train_window=200,
    )
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_data_manifest(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("toydata")
    return write_toy_mixtures(out_dir)


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory, toy_data_manifest):
    """A small stage-one checkpoint shared by CLI/service/infer tests."""
    out_dir = tmp_path_factory.mktemp("toyrun")
    torch.manual_seed(0)
    config = toy_config(toy_data_manifest, out_dir, epochs=2)
    train_predictor(config)
    return os.path.join(str(out_dir), "final.pt")
