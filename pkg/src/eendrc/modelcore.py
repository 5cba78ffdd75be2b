"""Chunk-level predictor: Transformer encoder, chunk splitting, the
encoder-decoder attractor calculator, per-chunk activity computation, and
the attractor conversion decoder.

The encoder carries no positional encoding (frame-level diarization is
order-insensitive). The attractor calculator is a single-layer LSTM
sequence-to-sequence model whose decoder consumes zero vectors, one per
attractor slot; chunk frames are time-shuffled before its encoder. The
conversion decoder cross-attends over the full recording's embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError
from .features import FeatureSequence

__all__ = [
    "EncoderConfig",
    "ChunkResult",
    "TransformerEncoder",
    "AttractorCalculator",
    "AttractorConverter",
    "ChunkPredictor",
    "split_chunks",
    "chunk_activities",
    "count_accepted",
]

INPUT_DIM = 345


@dataclass
class EncoderConfig:
    """Architecture and inference knobs for the chunk-level predictor."""

    input_dim: int = INPUT_DIM
    num_layers: int = 4
    hidden_dim: int = 256
    num_heads: int = 4
    dropout: float = 0.1
    chunk_size: int = 50
    max_local_speakers: int = 5
    existence_threshold: float = 0.5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if not 0.0 < self.existence_threshold < 1.0:
            raise ConfigError(
                f"existence_threshold must be in (0, 1), got "
                f"{self.existence_threshold}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_dim < 1 or self.num_layers < 1 or self.max_local_speakers < 1:
            raise ConfigError("input_dim, num_layers, max_local_speakers must be >= 1")

    @staticmethod
    def desk_scale(**overrides) -> "EncoderConfig":
        """Small config for laptop-class training runs."""
        base = dict(num_layers=2, hidden_dim=64, num_heads=2, chunk_size=25)
        base.update(overrides)
        return EncoderConfig(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChunkResult:
    """Per-chunk predictor outputs.

    ``existence_probs`` has one entry per accepted attractor at inference
    and one extra terminating entry in training mode.
    """

    raw_attractors: torch.Tensor
    existence_probs: torch.Tensor
    activities: torch.Tensor
    converted_attractors: torch.Tensor
    num_frames: int
    start_frame: int = 0

    def __post_init__(self):
        if self.activities.shape[0] != self.num_frames:
            raise InvalidInputError("one activity row per chunk frame required")
        if self.activities.shape[1] != self.raw_attractors.shape[0]:
            raise InvalidInputError("one activity column per attractor required")
        probs = self.existence_probs.detach()
        if probs.numel() and not bool(((probs > 0) & (probs <= 1)).all()):
            raise InvalidInputError("existence probabilities must lie in (0, 1]")

    @property
    def num_speakers(self) -> int:
        return self.raw_attractors.shape[0]


def split_chunks(embeddings: torch.Tensor, chunk_size: int) -> list[torch.Tensor]:
    """Split (T, D) into consecutive chunks of chunk_size (last may be short)."""
    if chunk_size < 1:
        raise InvalidInputError(f"chunk_size must be >= 1, got {chunk_size}")
    return list(torch.split(embeddings, chunk_size, dim=0))


def chunk_activities(
    embeddings: torch.Tensor, attractors: torch.Tensor
) -> torch.Tensor:
    """sigmoid(E_n . a^T): frame-by-attractor activity probabilities."""
    if embeddings.shape[-1] != attractors.shape[-1]:
        raise InvalidInputError(
            f"embedding dim {embeddings.shape[-1]} != attractor dim "
            f"{attractors.shape[-1]}"
        )
    return torch.sigmoid(embeddings @ attractors.T)


def count_accepted(probs, threshold: float, max_speakers: int) -> int:
    """Inference stopping rule: accept until prob < threshold or the cap."""
    accepted = 0
    for p in np.asarray([float(p) for p in probs]):
        if p < threshold:
            break
        accepted += 1
        if accepted >= max_speakers:
            break
    return accepted


class TransformerEncoder(nn.Module):
    """Linear input projection followed by position-free Transformer layers."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.input_dim, cfg.hidden_dim)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.hidden_dim,
                nhead=cfg.num_heads,
                dim_feedforward=4 * cfg.hidden_dim,
                dropout=cfg.dropout,
                batch_first=True,
            )
            for _ in range(cfg.num_layers)
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 2 or frames.shape[1] != self.cfg.input_dim:
            raise ConfigError(
                f"expected (T, {self.cfg.input_dim}) input, got "
                f"{tuple(frames.shape)}"
            )
        h = self.proj(frames).unsqueeze(0)
        for layer in self.layers:
            h = layer(h)
        return h.squeeze(0)


class AttractorCalculator(nn.Module):
    """LSTM encoder-decoder emitting one attractor per zero-vector step."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.encoder = nn.LSTM(hidden_dim, hidden_dim, batch_first=True)
        self.decoder = nn.LSTM(hidden_dim, hidden_dim, batch_first=True)
        self.existence = nn.Linear(hidden_dim, 1)

    def _encode(self, embeddings: torch.Tensor):
        if embeddings.numel() == 0:
            raise InvalidInputError("cannot run the attractor calculator on 0 frames")
        _, state = self.encoder(embeddings.unsqueeze(0))
        return state

    def forward(
        self, embeddings: torch.Tensor, n_attractors: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Training mode: emit exactly ``n_attractors`` + 1 slots.

        Returns (attractors, existence_probs) of shapes
        (n_attractors, D) and (n_attractors + 1,); the terminating slot
        yields only its existence probability.
        """
        state = self._encode(embeddings)
        zeros = torch.zeros(
            1, n_attractors + 1, self.hidden_dim, dtype=embeddings.dtype
        )
        decoded, _ = self.decoder(zeros, state)
        decoded = decoded.squeeze(0)
        probs = torch.sigmoid(self.existence(decoded)).squeeze(-1)
        return decoded[:n_attractors], probs

    @torch.no_grad()
    def infer(
        self, embeddings: torch.Tensor, threshold: float, max_speakers: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode until an existence probability falls below the threshold.

        Returns only the accepted attractors and their probabilities.
        """
        state = self._encode(embeddings)
        zero = torch.zeros(1, 1, self.hidden_dim, dtype=embeddings.dtype)
        attractors, probs = [], []
        while len(attractors) < max_speakers:
            decoded, state = self.decoder(zero, state)
            prob = torch.sigmoid(self.existence(decoded.squeeze(0)))[0, 0]
            if float(prob) < threshold:
                break
            attractors.append(decoded[0, 0])
            probs.append(prob)
        if not attractors:
            empty = torch.zeros(0, self.hidden_dim, dtype=embeddings.dtype)
            return empty, torch.zeros(0, dtype=embeddings.dtype)
        return torch.stack(attractors), torch.stack(probs)


class AttractorConverter(nn.Module):
    """One Transformer-decoder layer mapping chunk attractors into the
    clustering space, cross-attending over the full recording."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.layer = nn.TransformerDecoderLayer(
            d_model=cfg.hidden_dim,
            nhead=cfg.num_heads,
            dim_feedforward=4 * cfg.hidden_dim,
            dropout=cfg.dropout,
            batch_first=True,
        )

    def forward(
        self, attractors: torch.Tensor, embeddings: torch.Tensor
    ) -> torch.Tensor:
        if attractors.shape[0] == 0:
            return attractors
        out = self.layer(attractors.unsqueeze(0), embeddings.unsqueeze(0))
        return out.squeeze(0)


class ChunkPredictor(nn.Module):
    """Encoder + attractor calculator + conversion decoder, double precision.

    Frame shuffling before the attractor calculator uses the global torch
    RNG while training; in eval mode the permutation comes from a generator
    with a fixed seed, keeping inference a pure function of the weights and
    the input.
    """

    EVAL_SHUFFLE_SEED = 0

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TransformerEncoder(cfg)
        self.eda = AttractorCalculator(cfg.hidden_dim)
        self.converter = AttractorConverter(cfg)
        self.double()

    def encode(self, feats: FeatureSequence | torch.Tensor) -> torch.Tensor:
        """Full-recording embeddings, (T, hidden_dim)."""
        frames = feats.frames if isinstance(feats, FeatureSequence) else feats
        frames = torch.as_tensor(np.asarray(frames), dtype=torch.float64)
        return self.encoder(frames)

    def _shuffled(self, embeddings: torch.Tensor) -> torch.Tensor:
        n = embeddings.shape[0]
        if n <= 1:
            return embeddings
        if self.training:
            perm = torch.randperm(n)
        else:
            gen = torch.Generator().manual_seed(self.EVAL_SHUFFLE_SEED)
            perm = torch.randperm(n, generator=gen)
        return embeddings[perm]

    def eda_attractors(
        self, embeddings: torch.Tensor, n_speakers: int | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attractors for one chunk (or the whole recording).

        With ``n_speakers`` set (training) the calculator emits exactly
        n_speakers + 1 slots; otherwise it decodes until the existence
        probability drops below the configured threshold or the local
        speaker cap is hit.
        """
        shuffled = self._shuffled(embeddings)
        if n_speakers is not None:
            return self.eda(shuffled, n_speakers)
        return self.eda.infer(
            shuffled, self.cfg.existence_threshold, self.cfg.max_local_speakers
        )

    def convert_attractors(
        self, raw_attractors: torch.Tensor, embeddings: torch.Tensor
    ) -> torch.Tensor:
        """Clustering-space attractors; cross-attention context is global."""
        return self.converter(raw_attractors, embeddings)

    @torch.no_grad()
    def infer_chunks(
        self, embeddings: torch.Tensor, chunk_size: int | None = None
    ) -> list[ChunkResult]:
        """Run the chunk-level predictor over a full recording."""
        chunk_size = chunk_size or self.cfg.chunk_size
        results = []
        start = 0
        for chunk in split_chunks(embeddings, chunk_size):
            raw, probs = self.eda_attractors(chunk)
            results.append(
                ChunkResult(
                    raw_attractors=raw,
                    existence_probs=probs,
                    activities=chunk_activities(chunk, raw),
                    converted_attractors=self.convert_attractors(raw, embeddings),
                    num_frames=chunk.shape[0],
                    start_frame=start,
                )
            )
            start += chunk.shape[0]
        return results

    @torch.no_grad()
    def infer_global(self, embeddings: torch.Tensor) -> ChunkResult:
        """Whole-recording attractor decode (single unchunked pass)."""
        raw, probs = self.eda_attractors(embeddings)
        return ChunkResult(
            raw_attractors=raw,
            existence_probs=probs,
            activities=chunk_activities(embeddings, raw),
            converted_attractors=self.convert_attractors(raw, embeddings),
            num_frames=embeddings.shape[0],
            start_frame=0,
        )
