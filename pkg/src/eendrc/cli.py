"""Command-line surface.

Commands mirror the pipeline: simulate, train-predictor, train-clustering,
infer, score, ablate, plus serve for the HTTP service. Every command exits
nonzero on error with a single machine-parseable line on stderr:
``error <kind>: <message>``. The ``EENDRC_SEED`` environment variable
overrides any configured or passed seed.
"""

from __future__ import annotations

import functools
import os
import sys

import click
import numpy as np

from . import training as tr
from .datasim import (
    ManifestCorpus,
    MixtureRecipe,
    SyntheticVoiceCorpus,
    overlap_ratio,
    simulate_mixture,
)
from .errors import DiarizationError
from .features import read_wav, write_wav
from .pipeline import INFERENCE_MODES, infer_recording, load_checkpoint
from .scoring import der, read_rttm, write_rttm


def env_seed(default: int) -> int:
    value = os.environ.get("EENDRC_SEED")
    return int(value) if value else default


def report_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DiarizationError as exc:
            message = " ".join(str(exc).split())
            click.echo(f"error {exc.kind}: {message}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Two-stage speaker diarization toolkit."""


@main.command()
@click.option("--corpus", "corpus_spec", default="synthetic", show_default=True,
              help="'synthetic' or a speaker_id<TAB>wav_path manifest file.")
@click.option("--n-speakers", type=int, required=True)
@click.option("--count", type=int, default=1, show_default=True,
              help="Number of mixtures to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mean-silence", type=float, default=2.0, show_default=True)
@click.option("--synthetic-speakers", type=int, default=24, show_default=True,
              help="Corpus size when --corpus synthetic.")
@report_errors
def simulate(corpus_spec, n_speakers, count, seed, out_dir, mean_silence,
             synthetic_speakers):
    """Generate simulated mixtures plus reference RTTMs and a manifest."""
    seed = env_seed(seed)
    if corpus_spec == "synthetic":
        corpus = SyntheticVoiceCorpus(num_speakers=synthetic_speakers)
    else:
        corpus = ManifestCorpus(corpus_spec)
    os.makedirs(out_dir, exist_ok=True)
    rows, overlaps = [], []
    for i in range(count):
        recipe = MixtureRecipe(
            n_speakers=n_speakers, mean_silence_s=mean_silence, seed=seed + i
        )
        wave, segments = simulate_mixture(corpus, recipe)
        wav_path = os.path.join(out_dir, f"mix_{i:04d}.wav")
        rttm_path = os.path.join(out_dir, f"mix_{i:04d}.rttm")
        write_wav(wav_path, wave)
        write_rttm(segments, rttm_path, rec_id=f"mix_{i:04d}")
        rows.append(f"mix_{i:04d}.wav\tmix_{i:04d}.rttm")
        overlaps.append(overlap_ratio(segments))
    manifest = os.path.join(out_dir, "mixtures.tsv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    click.echo(
        f"wrote {count} mixtures to {out_dir} "
        f"(mean overlap {np.mean(overlaps):.1f}%), manifest {manifest}"
    )


@main.command("train-predictor")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@report_errors
def train_predictor_cmd(config_path):
    """Stage-one training of the chunk-level predictor."""
    config = tr.parse_config_file(config_path)
    config.seed = env_seed(config.seed)
    _, manifest = tr.train_predictor(config)
    last = manifest.loss_log[-1]
    click.echo(
        f"trained {config.epochs} epochs; final l_diar={last['l_diar']:.4f} "
        f"l_attr={last['l_attr']:.4f}; run {manifest.run_hash[:12]} "
        f"in {config.out_dir}"
    )


@main.command("train-clustering")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--init", "init_ckpt", type=click.Path(exists=True), required=True)
@report_errors
def train_clustering_cmd(config_path, init_ckpt):
    """Stage-two finetuning with the clustering loss."""
    config = tr.parse_config_file(config_path)
    config.seed = env_seed(config.seed)
    _, manifest = tr.train_clustering(config, init_ckpt)
    last = manifest.loss_log[-1]
    click.echo(
        f"trained {config.epochs} epochs; final l_post={last['l_post']:.4f}; "
        f"run {manifest.run_hash[:12]} in {config.out_dir}"
    )


@main.command()
@click.option("--mode", type=click.Choice(INFERENCE_MODES), default="eda-rc",
              show_default=True)
@click.option("--beam", type=int, default=3, show_default=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--wav", type=click.Path(exists=True), required=True)
@click.option("--out", "out_rttm", type=click.Path(), required=True)
@click.option("--ref", "ref_rttm", type=click.Path(exists=True), default=None,
              help="Reference RTTM (required for --mode oracle).")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@report_errors
def infer(mode, beam, ckpt, wav, out_rttm, ref_rttm, threshold):
    """Diarize one recording and write the hypothesis RTTM."""
    model, extra = load_checkpoint(ckpt)
    wave = read_wav(wav)
    ref = read_rttm(ref_rttm) if ref_rttm else None
    hyp = infer_recording(
        model,
        wave,
        mode=mode,
        beam_width=beam,
        ref_segments=ref,
        n_train_speakers=int(extra.get("n_train_speakers", 3)),
    )
    write_rttm(hyp.to_segments(threshold), out_rttm)
    click.echo(
        f"mode {mode}: {hyp.num_speakers} speakers over {hyp.num_frames} "
        f"frames -> {out_rttm}"
    )


@main.command()
@click.option("--ref", type=click.Path(exists=True), required=True)
@click.option("--hyp", type=click.Path(exists=True), required=True)
@click.option("--collar", type=float, default=0.25, show_default=True)
@report_errors
def score(ref, hyp, collar):
    """Score a hypothesis RTTM against a reference RTTM."""
    result = der(read_rttm(ref), read_rttm(hyp), collar)
    click.echo(str(result))


@main.command()
@click.option("--shuffle", "shuffled_ratio", type=float, default=0.0,
              show_default=True, help="Percent of chunk positions to permute.")
@click.option("--beam", type=int, default=3, show_default=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_manifest", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@report_errors
def ablate(shuffled_ratio, beam, ckpt, data_manifest, seed):
    """Decode a test set under ablation settings and print a report row."""
    model, _ = load_checkpoint(ckpt)
    dataset = tr.load_dataset(data_manifest)
    row = tr.ablate(
        model, dataset, shuffled_ratio=shuffled_ratio, beam_size=beam,
        seed=env_seed(seed),
    )
    click.echo(f"{'shuffled%':>10} {'beam':>5} {'recs':>5} {'mean DER%':>10}")
    click.echo(
        f"{row['shuffled_ratio']:>10.0f} {row['beam_size']:>5d} "
        f"{row['recordings']:>5d} {row['mean_der']:>10.2f}"
    )


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@report_errors
def serve(ckpt, host, port):
    """Run the HTTP service wrapping inference, scoring, and simulation."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(ckpt), host=host, port=port)


if __name__ == "__main__":
    main()
