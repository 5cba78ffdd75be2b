"""Simulated multi-speaker conversations from a single-speaker corpus.

Each selected speaker gets an independent timeline: utterances separated by
exponential silence gaps, all timelines summed into one mixture. Speaker
count n draws between ceil(30/n) and floor(60/n) utterances per speaker.
Two corpus backends exist: a synthetic one whose "voices" are distinct
spectral signatures (so tests run without any licensed data), and a
directory-of-WAVs backend driven by a ``speaker_id<TAB>wav_path`` manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvalidInputError, ParseError
from .features import SAMPLE_RATE, Waveform, read_wav
from .scoring import Segment

__all__ = [
    "MixtureRecipe",
    "SyntheticVoiceCorpus",
    "ManifestCorpus",
    "utterance_count_bounds",
    "simulate_mixture",
    "overlap_ratio",
    "labels_from_segments",
]


@dataclass
class MixtureRecipe:
    """Seedable specification of one simulated conversation."""

    n_speakers: int
    mean_silence_s: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1:
            raise InvalidInputError(f"n_speakers must be >= 1, got {self.n_speakers}")
        if self.mean_silence_s <= 0:
            raise InvalidInputError(
                f"mean_silence_s must be > 0, got {self.mean_silence_s}"
            )
        lo, hi = utterance_count_bounds(self.n_speakers)
        if lo < 1 or lo > hi:
            raise InvalidInputError(
                f"utterance count bounds [{lo}, {hi}] are empty for "
                f"n={self.n_speakers}"
            )


def utterance_count_bounds(n_speakers: int) -> tuple[int, int]:
    """Integer [30/n, 60/n] bounds: ceil on the low edge, floor on the high."""
    return math.ceil(30 / n_speakers), math.floor(60 / n_speakers)


class SyntheticVoiceCorpus:
    """Deterministic synthetic voices with distinct spectral signatures.

    Speaker ``synthNN`` is a fixed pair of tone frequencies drawn from a
    log-spaced grid (plus a little noise and an attack/release envelope), so
    mel-band energy identifies the speaker and mixtures stay separable.
    """

    def __init__(
        self,
        num_speakers: int = 24,
        utterance_duration_range: tuple[float, float] = (0.8, 1.6),
        seed: int = 7,
    ):
        if num_speakers < 1:
            raise InvalidInputError("num_speakers must be >= 1")
        lo, hi = utterance_duration_range
        if not 0.1 <= lo <= hi:
            raise InvalidInputError(
                f"bad utterance duration range {utterance_duration_range}"
            )
        self.duration_range = utterance_duration_range
        grid = np.geomspace(300.0, 3400.0, 12)
        pairs = [(a, b) for ai, a in enumerate(grid) for b in grid[ai + 1:]]
        order = np.random.default_rng(seed).permutation(len(pairs))
        if num_speakers > len(pairs):
            raise InvalidInputError(
                f"at most {len(pairs)} synthetic speakers supported"
            )
        self._signatures = {
            f"synth{i:02d}": pairs[order[i]] for i in range(num_speakers)
        }

    def speakers(self) -> list[str]:
        return sorted(self._signatures)

    def utterance(self, speaker_id: str, rng: np.random.Generator) -> np.ndarray:
        if speaker_id not in self._signatures:
            raise DataError(f"unknown synthetic speaker {speaker_id!r}")
        duration = rng.uniform(*self.duration_range)
        n = max(int(round(duration * SAMPLE_RATE)), SAMPLE_RATE // 10)
        t = np.arange(n) / SAMPLE_RATE
        amp = rng.uniform(0.7, 1.0)
        signal = np.zeros(n)
        for freq in self._signatures[speaker_id]:
            signal += 0.3 * amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        signal += 0.01 * rng.standard_normal(n)
        fade = min(int(0.010 * SAMPLE_RATE), n // 2)
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        signal[:fade] *= ramp
        signal[n - fade:] *= ramp[::-1]
        return signal


class ManifestCorpus:
    """Per-speaker WAV files indexed by a ``speaker_id<TAB>wav_path`` manifest."""

    def __init__(self, manifest_path):
        self._files: dict[str, list[str]] = {}
        with open(manifest_path) as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(
                        f"expected 'speaker_id<TAB>wav_path', got {line!r}", line_no
                    )
                self._files.setdefault(parts[0], []).append(parts[1])
        if not self._files:
            raise DataError(f"manifest {manifest_path} lists no utterances")

    def speakers(self) -> list[str]:
        return sorted(self._files)

    def utterance(self, speaker_id: str, rng: np.random.Generator) -> np.ndarray:
        files = self._files.get(speaker_id)
        if not files:
            raise DataError(f"no utterances for speaker {speaker_id!r}")
        path = files[int(rng.integers(len(files)))]
        return read_wav(path).samples


def simulate_mixture(corpus, recipe: MixtureRecipe) -> tuple[Waveform, list[Segment]]:
    """Lay per-speaker timelines with exponential gaps and sum them.

    Deterministic given the recipe seed. Reference segments record true
    utterance extents; the mixture is peak-scaled to 0.99 only if summing
    would clip.
    """
    rng = np.random.default_rng(recipe.seed)
    speakers = corpus.speakers()
    if len(speakers) < recipe.n_speakers:
        raise DataError(
            f"corpus has {len(speakers)} speakers, need {recipe.n_speakers}"
        )
    chosen_idx = rng.choice(len(speakers), size=recipe.n_speakers, replace=False)
    chosen = [speakers[int(i)] for i in chosen_idx]
    lo, hi = utterance_count_bounds(recipe.n_speakers)

    placements: list[tuple[int, np.ndarray]] = []
    segments: list[Segment] = []
    for speaker in chosen:
        count = int(rng.integers(lo, hi + 1))
        t = 0.0
        for _ in range(count):
            t += rng.exponential(recipe.mean_silence_s)
            samples = corpus.utterance(speaker, rng)
            duration = samples.size / SAMPLE_RATE
            segments.append(Segment(speaker=speaker, onset=t, duration=duration))
            placements.append((int(round(t * SAMPLE_RATE)), samples))
            t += duration
    total = max(offset + s.size for offset, s in placements)
    mix = np.zeros(total)
    for offset, samples in placements:
        mix[offset : offset + samples.size] += samples
    peak = np.abs(mix).max()
    if peak > 0.99:
        mix *= 0.99 / peak
    segments.sort(key=lambda s: (s.onset, s.speaker))
    return Waveform(samples=mix), segments


def overlap_ratio(segments: list[Segment]) -> float:
    """Percent of speech time covered by two or more simultaneous speakers."""
    if not segments:
        raise InvalidInputError("need at least one segment")
    events = []
    for seg in segments:
        events.append((seg.onset, 1))
        events.append((seg.offset, -1))
    events.sort()
    speech = overlapped = 0.0
    active = 0
    prev = events[0][0]
    for time, delta in events:
        span = time - prev
        if active >= 1:
            speech += span
        if active >= 2:
            overlapped += span
        active += delta
        prev = time
    return 100.0 * overlapped / speech if speech > 0 else 0.0


def labels_from_segments(
    segments: list[Segment], num_frames: int, frame_shift_s: float
) -> tuple[np.ndarray, list[str]]:
    """Rasterize segments into a binary (num_frames, S) matrix.

    Frame t is active for a speaker iff the frame center (t + 0.5) * shift
    falls inside one of that speaker's segments. Columns are ordered by
    first activity so column index doubles as the global speaker index.
    """
    if frame_shift_s <= 0:
        raise InvalidInputError("frame_shift_s must be > 0")
    names = sorted({seg.speaker for seg in segments})
    matrix = np.zeros((num_frames, len(names)))
    col = {name: j for j, name in enumerate(names)}
    centers = (np.arange(num_frames) + 0.5) * frame_shift_s
    for seg in segments:
        active = (centers >= seg.onset) & (centers < seg.offset)
        matrix[active, col[seg.speaker]] = 1.0
    first = []
    for j in range(len(names)):
        hits = np.flatnonzero(matrix[:, j])
        first.append(hits[0] if hits.size else num_frames + j)
    order = np.argsort(np.asarray(first), kind="stable")
    return matrix[:, order], [names[int(j)] for j in order]
