"""Collar-aware diarization error rate scoring and RTTM segment I/O.

The scorer follows the standard speaker-time convention: the timeline is cut
at every segment boundary, regions within ``collar_s`` of a *reference*
boundary are excluded, one globally optimal reference-to-hypothesis speaker
mapping is computed per recording, and miss / false alarm / confusion are
accumulated as speaker-seconds. Overlapped speech is fully scored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError, ParseError

__all__ = [
    "Segment",
    "DiarizationHypothesis",
    "DERBreakdown",
    "probs_to_segments",
    "der",
    "format_rttm",
    "parse_rttm",
    "read_rttm",
    "write_rttm",
]


@dataclass(frozen=True)
class Segment:
    """One speaker-homogeneous speech interval: [onset, onset + duration)."""

    speaker: str
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class DiarizationHypothesis:
    """Global per-speaker activity matrix plus its segment rendering.

    ``activities`` is T x S with values in [0, 1]; column j is global
    speaker j. ``frame_shift_s`` converts frame indices to seconds.
    """

    activities: np.ndarray
    frame_shift_s: float
    speaker_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.activities = np.asarray(self.activities, dtype=np.float64)
        if self.activities.ndim != 2:
            self.activities = self.activities.reshape(len(self.activities), -1)
        if not np.all(np.isfinite(self.activities)):
            raise InvalidInputError("hypothesis activities must be finite")
        if not self.speaker_names:
            self.speaker_names = [f"spk{j}" for j in range(self.num_speakers)]

    @property
    def num_speakers(self) -> int:
        return self.activities.shape[1]

    @property
    def num_frames(self) -> int:
        return self.activities.shape[0]

    def to_segments(self, threshold: float = 0.5) -> list[Segment]:
        return probs_to_segments(
            self.activities, self.frame_shift_s, threshold, self.speaker_names
        )

    @staticmethod
    def empty(frame_shift_s: float = 0.1) -> "DiarizationHypothesis":
        return DiarizationHypothesis(np.zeros((0, 0)), frame_shift_s)


@dataclass
class DERBreakdown:
    """DER components in seconds plus the percentage rate."""

    miss_s: float
    false_alarm_s: float
    speaker_confusion_s: float
    scored_speech_s: float

    @property
    def error_s(self) -> float:
        return self.miss_s + self.false_alarm_s + self.speaker_confusion_s

    @property
    def der(self) -> float:
        """Percent DER; 0 for an empty-but-error-free scoring region."""
        if self.scored_speech_s > 0.0:
            return 100.0 * self.error_s / self.scored_speech_s
        return 0.0 if self.error_s == 0.0 else math.inf

    def __str__(self) -> str:
        return (
            f"DER {self.der:.2f}% "
            f"(miss {self.miss_s:.3f}s, fa {self.false_alarm_s:.3f}s, "
            f"conf {self.speaker_confusion_s:.3f}s, "
            f"scored {self.scored_speech_s:.3f}s)"
        )


def probs_to_segments(
    activities: np.ndarray,
    frame_shift_s: float,
    threshold: float = 0.5,
    speaker_names: list[str] | None = None,
) -> list[Segment]:
    """Binarize a T x S activity matrix into per-speaker segments.

    Frame t covers [t * shift, (t+1) * shift); maximal runs of frames with
    activity >= threshold become one segment each.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must be in (0, 1), got {threshold}")
    activities = np.asarray(activities, dtype=np.float64)
    if activities.ndim != 2:
        raise InvalidInputError("activities must be a 2-D matrix")
    n_frames, n_speakers = activities.shape
    if speaker_names is None:
        speaker_names = [f"spk{j}" for j in range(n_speakers)]
    segments: list[Segment] = []
    for j in range(n_speakers):
        active = activities[:, j] >= threshold
        t = 0
        while t < n_frames:
            if active[t]:
                start = t
                while t < n_frames and active[t]:
                    t += 1
                segments.append(
                    Segment(
                        speaker=speaker_names[j],
                        onset=start * frame_shift_s,
                        duration=(t - start) * frame_shift_s,
                    )
                )
            else:
                t += 1
    return segments


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of possibly overlapping [start, end) intervals."""
    merged: list[tuple[float, float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _by_speaker(segments: list[Segment]) -> dict[str, list[tuple[float, float]]]:
    spk: dict[str, list[tuple[float, float]]] = {}
    for seg in segments:
        if seg.duration <= 0:
            raise InvalidInputError(f"segment duration must be > 0: {seg}")
        spk.setdefault(seg.speaker, []).append((seg.onset, seg.offset))
    return {k: _merge_intervals(v) for k, v in spk.items()}


def _covers(intervals: list[tuple[float, float]], point: float) -> bool:
    for start, end in intervals:
        if start <= point < end:
            return True
        if start > point:
            break
    return False


_TINY = 1e-12


def der(
    ref: list[Segment],
    hyp: list[Segment],
    collar_s: float = 0.25,
) -> DERBreakdown:
    """Score a hypothesis against a reference with a boundary collar.

    Args:
        ref: reference segments (may overlap across speakers).
        hyp: hypothesis segments.
        collar_s: half-width of the no-score zone placed around every
            reference segment boundary (both sides).

    Returns:
        DERBreakdown with miss / false alarm / confusion speaker-seconds,
        scored reference speech, and the percentage rate.
    """
    if collar_s < 0:
        raise InvalidInputError(f"collar must be >= 0, got {collar_s}")
    ref_spk = _by_speaker(ref)
    hyp_spk = _by_speaker(hyp)
    ref_names = sorted(ref_spk)
    hyp_names = sorted(hyp_spk)

    # No-score zones surround reference boundaries only.
    exclusions = _merge_intervals(
        [(s.onset - collar_s, s.onset + collar_s) for s in ref]
        + [(s.offset - collar_s, s.offset + collar_s) for s in ref]
    ) if collar_s > 0 else []

    cuts: set[float] = set()
    for intervals in list(ref_spk.values()) + list(hyp_spk.values()):
        for start, end in intervals:
            cuts.update((start, end))
    for start, end in exclusions:
        cuts.update((start, end))
    points = sorted(cuts)

    # Elementary scored regions: constant activity, outside every exclusion.
    regions: list[tuple[float, float]] = []
    for left, right in zip(points[:-1], points[1:]):
        if right - left <= _TINY:
            continue
        mid = 0.5 * (left + right)
        if _covers(exclusions, mid):
            continue
        regions.append((left, right))

    def active(intervals_map, names, mid):
        return [name for name in names if _covers(intervals_map[name], mid)]

    # One global speaker mapping per recording, maximizing matched time.
    overlap = np.zeros((len(ref_names), len(hyp_names)))
    for left, right in regions:
        mid = 0.5 * (left + right)
        dur = right - left
        for i, r in enumerate(ref_names):
            if _covers(ref_spk[r], mid):
                for j, h in enumerate(hyp_names):
                    if _covers(hyp_spk[h], mid):
                        overlap[i, j] += dur
    mapping: dict[str, str] = {}
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        for i, j in zip(rows, cols):
            if overlap[i, j] > 0:
                mapping[ref_names[i]] = hyp_names[j]

    miss = fa = conf = scored = 0.0
    for left, right in regions:
        mid = 0.5 * (left + right)
        dur = right - left
        ref_active = active(ref_spk, ref_names, mid)
        hyp_active = active(hyp_spk, hyp_names, mid)
        n_ref, n_hyp = len(ref_active), len(hyp_active)
        n_correct = sum(1 for r in ref_active if mapping.get(r) in hyp_active)
        scored += dur * n_ref
        miss += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        conf += dur * (min(n_ref, n_hyp) - n_correct)
    return DERBreakdown(
        miss_s=miss,
        false_alarm_s=fa,
        speaker_confusion_s=conf,
        scored_speech_s=scored,
    )


# RTTM line grammar (fields are space separated, one segment per line):
#   SPEAKER <rec-id> 1 <onset.2f> <dur.2f> <NA> <NA> <spk> <NA> <NA>
_RTTM_FIELDS = 10


def format_rttm(segments: list[Segment], rec_id: str = "rec") -> str:
    """Render segments as RTTM text at centisecond resolution.

    Lines are sorted by (onset, speaker); round-tripping is exact for times
    already aligned to the centisecond grid (our 100 ms frame shift is).
    """
    lines = [
        f"SPEAKER {rec_id} 1 {seg.onset:.2f} {seg.duration:.2f} "
        f"<NA> <NA> {seg.speaker} <NA> <NA>"
        for seg in sorted(segments, key=lambda s: (s.onset, s.speaker))
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_rttm(text: str) -> list[Segment]:
    """Parse RTTM text; raises ParseError with the offending line number."""
    segments: list[Segment] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != _RTTM_FIELDS:
            raise ParseError(
                f"expected {_RTTM_FIELDS} fields, got {len(fields)}", line_no
            )
        if fields[0] != "SPEAKER":
            raise ParseError(f"expected SPEAKER record, got {fields[0]!r}", line_no)
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise ParseError(f"bad onset/duration: {exc}", line_no) from exc
        if duration <= 0:
            raise ParseError(f"duration must be > 0, got {duration}", line_no)
        segments.append(Segment(speaker=fields[7], onset=onset, duration=duration))
    return segments


def write_rttm(segments: list[Segment], path, rec_id: str = "rec") -> None:
    with open(path, "w") as fh:
        fh.write(format_rttm(segments, rec_id))


def read_rttm(path) -> list[Segment]:
    with open(path) as fh:
        return parse_rttm(fh.read())
