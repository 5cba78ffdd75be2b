"""End-to-end inference pipeline and checkpoint management.

A DiarizationModel bundles the chunk-level predictor with the recurrent
clusterer. Checkpoints are versioned containers mapping parameter names to
arrays plus the architecture config; loading validates shape compatibility.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np
import torch
from torch import nn

from .baseline import baseline_decode
from .clustering import (
    RecurrentClusterer,
    decode_recording,
    oracle_decode,
    refine_decode,
)
from .errors import ConfigError, InvalidInputError
from .features import (
    FeatureSequence,
    Waveform,
    compute_logmel,
    splice_and_subsample,
)
from .losses import ChunkLabels
from .modelcore import ChunkPredictor, EncoderConfig
from .scoring import DiarizationHypothesis, Segment
from .datasim import labels_from_segments

__all__ = [
    "DiarizationModel",
    "INFERENCE_MODES",
    "save_checkpoint",
    "load_checkpoint",
    "average_checkpoints",
    "extract_features",
    "infer_recording",
]

CHECKPOINT_VERSION = 1

INFERENCE_MODES = (
    "eda-global",
    "eda-rc",
    "eda-rc-refine",
    "cop-kmeans",
    "oracle",
    "switch",
)


class DiarizationModel(nn.Module):
    """Chunk predictor plus clustering module, checkpointed as a unit."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.predictor = ChunkPredictor(cfg)
        self.clusterer = RecurrentClusterer(cfg.hidden_dim)


def _atomic_torch_save(payload: dict, path) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: DiarizationModel, path, extra: dict | None = None) -> None:
    """Write a versioned checkpoint atomically (write-temp-then-rename)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    _atomic_torch_save(payload, path)


def _read_payload(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "params" not in payload:
        raise ConfigError(f"checkpoint {path} has no parameter table")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path) -> tuple[DiarizationModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    payload = _read_payload(path)
    cfg = EncoderConfig(**payload["config"])
    model = DiarizationModel(cfg)
    expected = model.state_dict()
    params = payload["params"]
    if set(expected) != set(params):
        missing = set(expected) ^ set(params)
        raise ConfigError(f"checkpoint {path} parameter names mismatch: {missing}")
    for name, tensor in params.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise ConfigError(
                f"checkpoint {path} shape mismatch for {name}: "
                f"{tuple(tensor.shape)} vs {tuple(expected[name].shape)}"
            )
    model.load_state_dict(params)
    model.eval()
    return model, payload.get("extra", {})


def average_checkpoints(paths: list, out_path=None) -> dict:
    """Parameter-wise arithmetic mean of the given checkpoints.

    All checkpoints must share config and parameter shapes. Returns the
    averaged payload; writes it when ``out_path`` is given.
    """
    if not paths:
        raise InvalidInputError("need at least one checkpoint to average")
    base = _read_payload(paths[0])
    sums = {k: v.to(torch.float64).clone() for k, v in base["params"].items()}
    for path in paths[1:]:
        payload = _read_payload(path)
        if payload["config"] != base["config"]:
            raise ConfigError(f"checkpoint {path} config differs from {paths[0]}")
        if set(payload["params"]) != set(sums):
            raise ConfigError(f"checkpoint {path} parameter names differ")
        for name, tensor in payload["params"].items():
            if tuple(tensor.shape) != tuple(sums[name].shape):
                raise ConfigError(
                    f"checkpoint {path} shape mismatch for {name}"
                )
            sums[name] += tensor.to(torch.float64)
    averaged = {
        "version": base["version"],
        "config": base["config"],
        "params": {k: v / len(paths) for k, v in sums.items()},
        "extra": dict(base.get("extra", {}), averaged_over=len(paths)),
    }
    if out_path is not None:
        _atomic_torch_save(averaged, out_path)
    return averaged


def last_fraction(paths: list, fraction: float = 0.1) -> list:
    """The last ceil(fraction * len) paths (at least one)."""
    if not paths:
        raise InvalidInputError("no checkpoints given")
    window = max(1, math.ceil(fraction * len(paths)))
    return list(paths[-window:])


def extract_features(wave: Waveform) -> FeatureSequence:
    """Waveform -> spliced, subsampled model input (T, 345) at 100 ms."""
    return splice_and_subsample(compute_logmel(wave))


def _chunk_labels(
    labels: np.ndarray, chunk_sizes: list[int]
) -> list[ChunkLabels]:
    out, offset = [], 0
    for size in chunk_sizes:
        block = labels[offset : offset + size]
        offset += size
        cols = [int(c) for c in np.flatnonzero(block.any(axis=0))]
        out.append(ChunkLabels(block[:, cols], cols))
    return out


def infer_recording(
    model: DiarizationModel,
    source: Waveform | FeatureSequence,
    mode: str = "eda-rc",
    beam_width: int = 3,
    chunk_size: int | None = None,
    ref_segments: list[Segment] | None = None,
    n_train_speakers: int = 3,
) -> DiarizationHypothesis:
    """Full pipeline: features -> encoder -> mode-specific decode.

    Modes:
        eda-global     one unchunked attractor pass over the recording.
        eda-rc         chunk predictor + recurrent-clustering beam decode.
        eda-rc-refine  eda-rc plus a second pass seeded with the first
                       pass's final hidden states.
        cop-kmeans     chunk predictor + constrained K-means baseline.
        oracle         chunk predictor + reference-derived permutations
                       (requires ``ref_segments``).
        switch         eda-global when its accepted speaker count is within
                       the trained maximum, else eda-rc.
    """
    if mode not in INFERENCE_MODES:
        raise InvalidInputError(
            f"unknown mode {mode!r}; choose one of {', '.join(INFERENCE_MODES)}"
        )
    if beam_width < 1:
        raise InvalidInputError(f"beam width must be >= 1, got {beam_width}")
    feats = source if isinstance(source, FeatureSequence) else extract_features(source)
    model.eval()
    with torch.no_grad():
        embeddings = model.predictor.encode(feats)
        shift = feats.frame_shift_s

        if mode in ("eda-global", "switch"):
            global_result = model.predictor.infer_global(embeddings)
            if mode == "eda-global" or global_result.num_speakers <= n_train_speakers:
                return DiarizationHypothesis(
                    activities=global_result.activities.numpy(),
                    frame_shift_s=shift,
                )

        chunk_results = model.predictor.infer_chunks(embeddings, chunk_size)
        if mode == "cop-kmeans":
            return baseline_decode(chunk_results, frame_shift_s=shift)
        if mode == "oracle":
            if ref_segments is None:
                raise InvalidInputError("oracle mode requires reference segments")
            labels, _ = labels_from_segments(
                ref_segments, embeddings.shape[0], shift
            )
            per_chunk = _chunk_labels(labels, [c.num_frames for c in chunk_results])
            return oracle_decode(
                chunk_results, per_chunk, shift, ref_segments=ref_segments
            )

        hypothesis, final_state = decode_recording(
            model.clusterer, chunk_results, beam_width, frame_shift_s=shift
        )
        if mode == "eda-rc-refine":
            return refine_decode(
                model.clusterer,
                chunk_results,
                final_state,
                beam_width,
                frame_shift_s=shift,
            )
        return hypothesis
