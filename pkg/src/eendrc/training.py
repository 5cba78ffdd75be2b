"""Training loops, optimizer schedule, run manifests, and the ablation runner.

Stage one trains the chunk-level predictor globally (whole training windows,
attractor + diarization losses). Stage two finetunes everything with the
chunked losses plus the clustering cross-entropy, optionally adding the
global attractor loss used by the switching strategy. Config files are flat
``key value`` text; every run writes a manifest with a content hash so a run
is reproducible from its manifest alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .clustering import run_training_pass
from .errors import (
    ConfigError,
    DataError,
    InvalidInputError,
    ParseError,
    TrainingDivergenceError,
)
from .features import read_wav
from .losses import total_loss
from .modelcore import EncoderConfig
from .pipeline import (
    DiarizationModel,
    average_checkpoints,
    extract_features,
    infer_recording,
    last_fraction,
    load_checkpoint,
    save_checkpoint,
)
from .scoring import der, read_rttm
from .datasim import labels_from_segments

__all__ = [
    "TrainConfig",
    "RunManifest",
    "parse_config_file",
    "load_dataset",
    "train_predictor",
    "train_clustering",
    "ablate",
]


@dataclass
class TrainConfig:
    """Flat training configuration (model + optimizer + data)."""

    # data / bookkeeping
    data_manifest: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    # model (desk-scale defaults; paper scale: 4 layers, 256 units, 4 heads,
    # chunk 50)
    input_dim: int = 345
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 2
    dropout: float = 0.1
    chunk_size: int = 25
    max_local_speakers: int = 5
    existence_threshold: float = 0.5
    # optimization
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    schedule: str = "fixed"  # "fixed" or "noam"
    warmup_steps: int = 4000
    grad_clip: float = 5.0
    train_window: int = 500
    use_global_loss: bool = False
    paper_scale: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule not in ("fixed", "noam"):
            raise ConfigError(f"schedule must be fixed or noam, got {self.schedule}")
        if self.paper_scale:
            self.num_layers = 4
            self.hidden_dim = 256
            self.num_heads = 4
            self.chunk_size = 50

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.input_dim,
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            dropout=self.dropout,
            chunk_size=self.chunk_size,
            max_local_speakers=self.max_local_speakers,
            existence_threshold=self.existence_threshold,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_file(path) -> TrainConfig:
    """Parse flat ``key value`` (or ``key = value``) lines; '#' comments."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, value = line.partition("=")
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise ParseError(f"expected 'key value', got {line!r}", line_no)
                key, value = parts
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ParseError(f"unknown config key {key!r}", line_no)
            ftype = fields[key].type
            try:
                if ftype in ("bool", bool):
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(f"bad boolean {value!r}")
                    values[key] = value.lower() in ("true", "1")
                elif ftype in ("int", int):
                    values[key] = int(value)
                elif ftype in ("float", float):
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ParseError(f"bad value for {key}: {exc}", line_no) from exc
    return TrainConfig(**values)


@dataclass
class RunManifest:
    """Reproducibility record: config snapshot, seed, data hash, loss log."""

    config: dict
    seed: int
    data_hash: str
    loss_log: list = field(default_factory=list)

    @property
    def run_hash(self) -> str:
        blob = json.dumps(
            {"config": self.config, "data_hash": self.data_hash}, sort_keys=True
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        payload = dataclasses.asdict(self)
        payload["run_hash"] = self.run_hash
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    @staticmethod
    def load(path) -> "RunManifest":
        with open(path) as fh:
            payload = json.load(fh)
        return RunManifest(
            config=payload["config"],
            seed=payload["seed"],
            data_hash=payload["data_hash"],
            loss_log=payload["loss_log"],
        )


def hash_data_manifest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_dataset(manifest_path) -> list[tuple[torch.Tensor, np.ndarray, list]]:
    """Load ``wav<TAB>rttm`` pairs into (frames, labels, segments) triples.

    Features are extracted once and cached in memory; labels are binary
    frame matrices with first-activity column ordering.
    """
    triples = []
    with open(manifest_path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    base = os.path.dirname(os.path.abspath(manifest_path))
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 'wav<TAB>rttm', got {line!r}", line_no)
        wav_path, rttm_path = (
            p if os.path.isabs(p) else os.path.join(base, p) for p in parts
        )
        feats = extract_features(read_wav(wav_path))
        segments = read_rttm(rttm_path)
        labels, _ = labels_from_segments(
            segments, feats.num_frames, feats.frame_shift_s
        )
        triples.append(
            (torch.as_tensor(feats.frames, dtype=torch.float64), labels, segments)
        )
    if not triples:
        raise DataError(f"dataset manifest {manifest_path} is empty")
    return triples


def _cut_windows(
    triples, window: int
) -> list[tuple[torch.Tensor, np.ndarray]]:
    """Cut recordings into fixed training windows (last partial kept)."""
    samples = []
    for frames, labels, _ in triples:
        total = frames.shape[0]
        for start in range(0, total, window):
            end = min(start + window, total)
            if end - start < 2:
                continue
            samples.append((frames[start:end], labels[start:end]))
    if not samples:
        raise DataError("dataset produced no training windows")
    return samples


def _noam_lr(step: int, hidden_dim: int, warmup: int, factor: float) -> float:
    step = max(step, 1)
    return factor * hidden_dim**-0.5 * min(step**-0.5, step * warmup**-1.5)


def _run_stage(
    config: TrainConfig,
    model: DiarizationModel,
    with_clustering: bool,
    dataset=None,
    n_train_speakers: int | None = None,
):
    """Shared epoch loop for both stages; returns (model, manifest)."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if dataset is None:
        dataset = load_dataset(config.data_manifest)
    windows = _cut_windows(dataset, config.train_window)
    if n_train_speakers is None:
        n_train_speakers = max(labels.shape[1] for _, labels, _ in dataset)

    os.makedirs(config.out_dir, exist_ok=True)
    manifest = RunManifest(
        config=config.to_dict(),
        seed=config.seed,
        data_hash=hash_data_manifest(config.data_manifest),
    )
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    chunk_size = config.chunk_size if with_clustering else None
    step = 0
    epoch_paths = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(windows))
        sums = {"l_diar": 0.0, "l_attr": 0.0, "l_post": 0.0, "l_global": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [windows[i] for i in order[start : start + config.batch_size]]
            step += 1
            if config.schedule == "noam":
                lr = _noam_lr(step, config.hidden_dim, config.warmup_steps, config.lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
            losses = run_training_pass(
                model.predictor,
                model.clusterer if with_clustering else None,
                batch,
                chunk_size=chunk_size,
                with_global_loss=config.use_global_loss and with_clustering,
            )
            loss = total_loss(
                losses["l_diar"],
                losses["l_attr"],
                losses["l_post"],
                use_global=config.use_global_loss and with_clustering,
                l_global=losses.get("l_global"),
            )
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            for key in sums:
                if key in losses:
                    sums[key] += float(losses[key].detach())
            n_batches += 1
        record = {"epoch": epoch}
        for key in ("l_diar", "l_attr", "l_post"):
            record[key] = sums[key] / n_batches
        if config.use_global_loss and with_clustering:
            record["l_global"] = sums["l_global"] / n_batches
        manifest.loss_log.append(record)
        path = os.path.join(config.out_dir, f"epoch_{epoch:03d}.pt")
        save_checkpoint(
            model, path, extra={"epoch": epoch, "n_train_speakers": n_train_speakers}
        )
        epoch_paths.append(path)
    model.eval()
    manifest.save(os.path.join(config.out_dir, "manifest.json"))
    save_checkpoint(
        model,
        os.path.join(config.out_dir, "final.pt"),
        extra={"epoch": config.epochs, "n_train_speakers": n_train_speakers},
    )
    average_checkpoints(
        last_fraction(epoch_paths, 0.1),
        out_path=os.path.join(config.out_dir, "averaged.pt"),
    )
    return model, manifest


def train_predictor(config: TrainConfig, dataset=None):
    """Stage one: global attractor + diarization training of the predictor.

    Returns (model, manifest); checkpoints land in ``config.out_dir``
    (per-epoch, ``final.pt``, and ``averaged.pt`` over the last tenth).
    """
    torch.manual_seed(config.seed)
    model = DiarizationModel(config.encoder_config())
    try:
        return _run_stage(config, model, with_clustering=False, dataset=dataset)
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"stage-1 training diverged: {exc}") from exc


def train_clustering(config: TrainConfig, init_checkpoint, dataset=None):
    """Stage two: chunked losses plus clustering CE, from a stage-one model."""
    model, _ = load_checkpoint(init_checkpoint)
    if model.cfg != config.encoder_config():
        raise ConfigError(
            "stage-2 config must match the initial checkpoint architecture: "
            f"{model.cfg} vs {config.encoder_config()}"
        )
    try:
        return _run_stage(config, model, with_clustering=True, dataset=dataset)
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"stage-2 training diverged: {exc}") from exc


def _shuffled_order(n: int, ratio: float, rng: np.random.Generator) -> list[int]:
    """Chunk processing order with a fraction of positions permuted."""
    count = int(round(ratio / 100.0 * n))
    order = list(range(n))
    if count < 2:
        return order
    idx = np.sort(rng.choice(n, size=count, replace=False))
    permuted = rng.permutation(idx)
    for src, dst in zip(idx, permuted):
        order[int(dst)] = int(src)
    return order


def ablate(
    model: DiarizationModel,
    dataset,
    shuffled_ratio: float = 0.0,
    beam_size: int = 3,
    seed: int = 0,
    collar_s: float = 0.25,
) -> dict:
    """Decode a test set with shuffled chunk order and report mean DER.

    ``dataset`` holds (frames, labels, segments) triples as produced by
    :func:`load_dataset`. Returns one report row.
    """
    if not 0.0 <= shuffled_ratio <= 100.0:
        raise InvalidInputError("shuffled_ratio is a percentage in [0, 100]")
    from .clustering import decode_recording
    from .features import FeatureSequence

    rng = np.random.default_rng(seed)
    ders = []
    model.eval()
    with torch.no_grad():
        for frames, _, segments in dataset:
            feats = FeatureSequence(frames=frames.numpy(), frame_shift_s=0.1)
            embeddings = model.predictor.encode(feats)
            chunk_results = model.predictor.infer_chunks(embeddings)
            order = _shuffled_order(len(chunk_results), shuffled_ratio, rng)
            hyp, _ = decode_recording(
                model.clusterer, chunk_results, beam_size, order=order
            )
            ders.append(der(segments, hyp.to_segments(), collar_s).der)
    return {
        "shuffled_ratio": shuffled_ratio,
        "beam_size": beam_size,
        "mean_der": float(np.mean(ders)),
        "recordings": len(ders),
    }
