"""Constrained K-means baseline over converted attractors.

Cannot-link constraints connect every pair of attractors from the same
chunk. Assignment is greedy nearest-feasible-centroid; when every cluster is
blocked for some point the algorithm raises ConstraintViolationError rather
than relaxing the constraint - that failure mode is part of the contract and
is exercised by tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .clustering import stitch
from .errors import ConstraintViolationError, InvalidInputError
from .losses import Permutation
from .modelcore import ChunkResult
from .scoring import DiarizationHypothesis

__all__ = [
    "CannotLinkSet",
    "cop_kmeans",
    "estimate_global_k",
    "baseline_decode",
]


@dataclass(frozen=True)
class CannotLinkSet:
    """Unordered index pairs that must land in different clusters."""

    pairs: frozenset

    @staticmethod
    def from_pairs(pairs) -> "CannotLinkSet":
        normalized = set()
        for a, b in pairs:
            a, b = int(a), int(b)
            if a == b:
                raise InvalidInputError(f"self cannot-link on point {a}")
            normalized.add((min(a, b), max(a, b)))
        return CannotLinkSet(frozenset(normalized))

    def validate_range(self, n_points: int) -> None:
        for a, b in self.pairs:
            if not (0 <= a < n_points and 0 <= b < n_points):
                raise InvalidInputError(
                    f"cannot-link ({a}, {b}) out of range for {n_points} points"
                )

    def neighbors(self, n_points: int) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(n_points)]
        for a, b in self.pairs:
            adj[a].append(b)
            adj[b].append(a)
        return adj


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding; deterministic given the generator state."""
    n = points.shape[0]
    centroids = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        dist2 = np.min(
            [((points - c) ** 2).sum(axis=1) for c in centroids], axis=0
        )
        total = dist2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist2 / total))
        centroids.append(points[idx])
    return np.stack(centroids)


def cop_kmeans(
    points: np.ndarray,
    k: int,
    cannot_links: CannotLinkSet | None = None,
    max_iters: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Constrained K-means assignment of points to ``k`` clusters.

    Points are assigned in index order to the nearest centroid whose
    cluster does not already hold a cannot-link partner; centroids are then
    re-estimated, iterating to convergence or ``max_iters``.

    Raises:
        ConstraintViolationError: some point has no feasible cluster (the
            exception carries ``point_index``).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise InvalidInputError("points must be a non-empty (N, D) matrix")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= {n} points, got k={k}")
    links = cannot_links or CannotLinkSet(frozenset())
    links.validate_range(n)
    adj = links.neighbors(n)

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        new_assignments = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            order = np.argsort(((centroids - points[i]) ** 2).sum(axis=1), kind="stable")
            blocked = {int(new_assignments[j]) for j in adj[i] if new_assignments[j] >= 0}
            choice = next((int(c) for c in order if int(c) not in blocked), None)
            if choice is None:
                err = ConstraintViolationError(
                    f"point {i} has no feasible cluster (k={k}, "
                    f"{len(adj[i])} cannot-links)"
                )
                err.point_index = i
                raise err
            new_assignments[i] = choice
        for c in range(k):
            members = points[new_assignments == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    return assignments


def estimate_global_k(chunk_speaker_counts) -> int:
    """Cluster-count policy for the baseline: the max per-chunk count."""
    counts = list(chunk_speaker_counts)
    if not counts:
        raise InvalidInputError("need at least one chunk")
    return int(max(counts))


def baseline_decode(
    chunk_results: list[ChunkResult],
    k: int | None = None,
    seed: int = 0,
    max_iters: int = 100,
    frame_shift_s: float = 0.1,
) -> DiarizationHypothesis:
    """Cluster all converted attractors with COP-K-means and stitch.

    Cannot-links are added between every attractor pair within a chunk.
    ``k`` defaults to the max per-chunk attractor count; passing a smaller
    value reproduces the underestimated-cluster-count failure mode.
    """
    if not chunk_results:
        return DiarizationHypothesis.empty(frame_shift_s)
    counts = [c.num_speakers for c in chunk_results]
    if k is None:
        k = estimate_global_k(counts)
    total_frames = sum(c.num_frames for c in chunk_results)
    if k == 0 or sum(counts) == 0:
        return DiarizationHypothesis(
            np.zeros((total_frames, 0)), frame_shift_s
        )

    points, owner_chunk, pairs = [], [], []
    for n_chunk, chunk in enumerate(chunk_results):
        first = len(points)
        conv = chunk.converted_attractors
        conv = conv.detach().numpy() if isinstance(conv, torch.Tensor) else conv
        for i in range(chunk.num_speakers):
            points.append(np.asarray(conv[i], dtype=np.float64))
            owner_chunk.append(n_chunk)
        for a in range(first, len(points)):
            for b in range(a + 1, len(points)):
                pairs.append((a, b))
    try:
        assignments = cop_kmeans(
            np.stack(points),
            k,
            CannotLinkSet.from_pairs(pairs),
            max_iters=max_iters,
            seed=seed,
        )
    except ConstraintViolationError as exc:
        chunk_no = owner_chunk[exc.point_index] if hasattr(exc, "point_index") else "?"
        raise ConstraintViolationError(
            f"chunk {chunk_no}: {exc} - cluster count k={k} cannot absorb the "
            "within-chunk cannot-links"
        ) from exc

    perms, cursor = [], 0
    for chunk in chunk_results:
        cols = assignments[cursor : cursor + chunk.num_speakers]
        cursor += chunk.num_speakers
        perms.append(Permutation(tuple(int(c) for c in cols)))
    return stitch(
        [c.activities for c in chunk_results], perms, k, frame_shift_s
    )
