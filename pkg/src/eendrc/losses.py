"""Training objectives: permutation-invariant diarization loss, attractor
existence loss, clustering cross-entropy, and their unweighted total.

The PIT minimum over speaker permutations is solved exactly with an
assignment solver on the pairwise per-column BCE cost matrix; the total BCE
of a permutation decomposes as the sum of matched-pair costs, so the
assignment optimum equals the brute-force optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError, TrainingDivergenceError

__all__ = [
    "PROB_CLIP",
    "Permutation",
    "ChunkLabels",
    "bce",
    "pit_diarization_loss",
    "attractor_existence_loss",
    "clustering_ce_loss",
    "total_loss",
]

# Probabilities are clipped here before every log to avoid log(0).
PROB_CLIP = 1e-7


@dataclass(frozen=True)
class Permutation:
    """mapping[i] = column assigned to local speaker/output i."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(i) for i in self.mapping))
        if len(set(self.mapping)) != len(self.mapping):
            raise InvalidInputError(f"permutation is not injective: {self.mapping}")

    def __len__(self) -> int:
        return len(self.mapping)

    def __getitem__(self, i: int) -> int:
        return self.mapping[i]

    def __iter__(self):
        return iter(self.mapping)


@dataclass
class ChunkLabels:
    """Binary frame-by-speaker labels for one chunk.

    Column i belongs to the recording-global speaker
    ``global_speaker_ids[i]``.
    """

    matrix: np.ndarray
    global_speaker_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InvalidInputError("labels must be an L x S matrix")
        if not np.all((self.matrix == 0.0) | (self.matrix == 1.0)):
            raise InvalidInputError("labels must be binary")
        if not self.global_speaker_ids:
            self.global_speaker_ids = list(range(self.matrix.shape[1]))
        if len(self.global_speaker_ids) != self.matrix.shape[1]:
            raise InvalidInputError("one global id per label column is required")

    @property
    def num_speakers(self) -> int:
        return self.matrix.shape[1]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def bce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy on probabilities, mean-reduced."""
    probs = _as_tensor(probs).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    targets = _as_tensor(targets)
    return -(targets * probs.log() + (1.0 - targets) * (1.0 - probs).log()).mean()


def pit_diarization_loss(
    activities: torch.Tensor, labels: ChunkLabels
) -> tuple[torch.Tensor, Permutation]:
    """Minimum-over-permutations mean BCE between activities and labels.

    When the activity and label column counts differ, the smaller side is
    padded with silent (all-zero) columns so the assignment stays square.

    Returns:
        (loss, best_perm) where best_perm.mapping[i] is the (padded) label
        column matched to activity column i, for the real activity columns
        only; mapping values >= labels.num_speakers denote silence padding.
    """
    acts = _as_tensor(activities)
    lab = torch.as_tensor(labels.matrix, dtype=torch.float64)
    if acts.ndim != 2 or acts.shape[0] != lab.shape[0]:
        raise InvalidInputError(
            f"activities {tuple(acts.shape)} and labels {tuple(lab.shape)} "
            "must share the frame count"
        )
    n_out, n_lab = acts.shape[1], lab.shape[1]
    size = max(n_out, n_lab, 1)
    if n_out < size:
        acts = torch.cat(
            [acts, torch.zeros(acts.shape[0], size - n_out, dtype=acts.dtype)], dim=1
        )
    if n_lab < size:
        lab = torch.cat(
            [lab, torch.zeros(lab.shape[0], size - n_lab, dtype=lab.dtype)], dim=1
        )

    clipped = acts.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    logp, lognotp = clipped.log(), (1.0 - clipped).log()
    # cost[i, j] = mean_t BCE(activities[:, i], labels[:, j])
    cost = -(logp.T @ lab + lognotp.T @ (1.0 - lab)) / acts.shape[0]
    _, cols = linear_sum_assignment(cost.detach().numpy())
    loss = cost[np.arange(size), cols].mean()
    return loss, Permutation(tuple(int(c) for c in cols[:n_out]))


def attractor_existence_loss(
    existence_probs: torch.Tensor, n_speakers: int
) -> torch.Tensor:
    """Mean BCE of the existence probabilities against [1, ..., 1, 0].

    Training emits one probability per true speaker plus the terminating
    slot, so ``existence_probs`` must have ``n_speakers + 1`` entries.
    """
    probs = _as_tensor(existence_probs).reshape(-1)
    if probs.numel() != n_speakers + 1:
        raise InvalidInputError(
            f"expected {n_speakers + 1} existence probabilities, got {probs.numel()}"
        )
    target = torch.zeros(n_speakers + 1, dtype=torch.float64)
    target[:n_speakers] = 1.0
    return bce(probs, target)


def clustering_ce_loss(assignment_probs, targets) -> torch.Tensor:
    """Cross-entropy of chunk-wise assignment probabilities.

    Args:
        assignment_probs: per chunk, an S_n x C matrix of probabilities whose
            rows sum to 1 (empty chunks may pass shape (0, C) or None).
        targets: per chunk, an S_n x C one-hot matrix.

    Returns:
        Mean over chunks of (1/S_n) * sum_ij -r_ij * log(p_ij); chunks with
        no attractors contribute 0.
    """
    if len(assignment_probs) != len(targets):
        raise InvalidInputError("one target matrix per probability matrix required")
    if not assignment_probs:
        return torch.zeros((), dtype=torch.float64)
    terms = []
    for probs, r in zip(assignment_probs, targets):
        if probs is None or r is None or len(r) == 0:
            terms.append(torch.zeros((), dtype=torch.float64))
            continue
        p = _as_tensor(probs)
        r = _as_tensor(r)
        if p.shape != r.shape:
            raise InvalidInputError(
                f"probs {tuple(p.shape)} and targets {tuple(r.shape)} differ"
            )
        r_np = r.detach().numpy()
        if not np.all((r_np == 0.0) | (r_np == 1.0)) or not np.all(
            r_np.sum(axis=1) == 1.0
        ):
            raise InvalidInputError("targets must be one-hot rows")
        ce = -(r * p.clamp(PROB_CLIP, 1.0).log()).sum()
        terms.append(ce / r.shape[0])
    return torch.stack(terms).mean()


def total_loss(
    l_diar: torch.Tensor,
    l_attr: torch.Tensor,
    l_post: torch.Tensor,
    use_global: bool = False,
    l_global: torch.Tensor | None = None,
) -> torch.Tensor:
    """Unweighted sum of the objectives; the global term only if enabled."""
    parts = [_as_tensor(l_diar), _as_tensor(l_attr), _as_tensor(l_post)]
    if use_global:
        if l_global is None:
            raise InvalidInputError("use_global requires l_global")
        parts.append(_as_tensor(l_global))
    for part in parts:
        if not torch.isfinite(part).all():
            raise TrainingDivergenceError(f"non-finite loss component: {parts}")
    return sum(parts[1:], parts[0])
