"""GRU-based sequential clustering of chunk-level attractors.

Global speakers live as GRU hidden-state vectors. Per chunk, each attractor
is scored against every exposed state (the spawned/allocated ones plus one
appended new-speaker slot) with a dot-product softmax; chosen states are
updated by one GRU step with the attractor as input. Training teacher-forces
the updates from PIT-matched labels; inference enumerates cannot-link
respecting assignments and beam-searches across chunks.

Assignment mappings are recorded with spawns resolved: value v < K refers to
existing state v, values K, K+1, ... are fresh speakers in spawn order, so a
mapping is always injective and doubles as the global column index for
stitching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from .errors import (
    ConstraintViolationError,
    InternalInvariantError,
    InvalidInputError,
)
from .losses import (
    PROB_CLIP,
    ChunkLabels,
    Permutation,
    attractor_existence_loss,
    clustering_ce_loss,
    pit_diarization_loss,
)
from .modelcore import ChunkResult, chunk_activities, split_chunks
from .scoring import DiarizationHypothesis

__all__ = [
    "ClusterState",
    "AssignmentTargets",
    "BeamHypothesis",
    "RecurrentClusterer",
    "predict_assignment_probs",
    "build_targets",
    "update_states",
    "resolve_spawns",
    "infer_permutation",
    "decode_recording",
    "refine_decode",
    "stitch",
    "oracle_decode",
    "run_training_pass",
]


@dataclass
class ClusterState:
    """Global speaker hidden states plus the shared new-speaker vector.

    ``states`` holds one row per discovered (or pre-allocated) speaker; the
    learned ``new_speaker_init`` vector is appended as the final candidate
    at prediction time, so ``count`` = len(states) + 1.
    """

    states: torch.Tensor
    new_speaker_init: torch.Tensor

    def __post_init__(self):
        if self.states.ndim != 2:
            raise InvalidInputError("states must be (K, D)")
        if self.new_speaker_init.ndim != 1:
            raise InvalidInputError("new_speaker_init must be a vector")
        if self.states.shape[0] and self.states.shape[1] != self.dim:
            raise InvalidInputError("state rows must match new_speaker_init dim")
        if not bool(torch.isfinite(self.states).all()) or not bool(
            torch.isfinite(self.new_speaker_init).all()
        ):
            raise InvalidInputError("cluster state must be finite")

    @property
    def num_states(self) -> int:
        return self.states.shape[0]

    @property
    def count(self) -> int:
        """C: states exposed to prediction, including the new-speaker slot."""
        return self.num_states + 1

    @property
    def dim(self) -> int:
        return self.new_speaker_init.shape[0]

    def exposed(self) -> torch.Tensor:
        return torch.cat([self.states, self.new_speaker_init.unsqueeze(0)], dim=0)


@dataclass
class AssignmentTargets:
    """One-hot attractor-to-state assignment matrix (S_n x C).

    Distinct rows must select distinct columns, except the final
    (new-speaker) column which may absorb several attractors.
    """

    r: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.ndim != 2:
            raise InvalidInputError("targets must be S_n x C")
        if self.r.size:
            if not np.all((self.r == 0.0) | (self.r == 1.0)):
                raise InvalidInputError("targets must be binary")
            if not np.all(self.r.sum(axis=1) == 1.0):
                raise InvalidInputError("target rows must be one-hot")
            cols = self.r[:, :-1].argmax(axis=1)[self.r[:, :-1].sum(axis=1) > 0]
            if len(set(cols.tolist())) != len(cols):
                raise ConstraintViolationError(
                    "two attractors target the same existing state "
                    "(cannot-link within a chunk)"
                )

    @property
    def num_attractors(self) -> int:
        return self.r.shape[0]

    def column_of(self, i: int) -> int:
        return int(self.r[i].argmax())


@dataclass
class BeamHypothesis:
    """Beam-search container: state, accumulated log-prob, chunk mappings."""

    state: ClusterState
    score: float = 0.0
    perms_so_far: list[Permutation] = field(default_factory=list)

    def sort_key(self):
        return (-self.score, tuple(tuple(p.mapping) for p in self.perms_so_far))


class RecurrentClusterer(nn.Module):
    """GRU cell plus the learned shared initial/new-speaker state vector."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.cell = nn.GRUCell(hidden_dim, hidden_dim)
        self.h_init = nn.Parameter(torch.empty(hidden_dim))
        nn.init.normal_(self.h_init, std=hidden_dim**-0.5)
        self.double()

    def initial_state(self, n_slots: int = 0) -> ClusterState:
        """Training pre-allocates one slot per true speaker (all sharing the
        learned initial vector); inference starts with zero slots."""
        states = self.h_init.unsqueeze(0).expand(n_slots, self.hidden_dim)
        return ClusterState(states=states, new_speaker_init=self.h_init)

    def step(self, attractor: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
        return self.cell(attractor.unsqueeze(0), hidden.unsqueeze(0)).squeeze(0)


def predict_assignment_probs(
    attractor: torch.Tensor, state: ClusterState
) -> torch.Tensor:
    """softmax(a . h_j) over every exposed state, new-speaker slot last."""
    if attractor.shape != (state.dim,):
        raise InvalidInputError(
            f"attractor shape {tuple(attractor.shape)} != ({state.dim},)"
        )
    return torch.softmax(state.exposed() @ attractor, dim=0)


def build_targets(
    best_perm: Permutation, local_to_global: list[int], count: int
) -> AssignmentTargets:
    """Teacher-forcing targets: attractor i points at the global state of the
    label column PIT matched to it.

    Args:
        best_perm: PIT permutation (attractor i -> label column).
        local_to_global: label column -> global speaker index.
        count: C, the number of exposed states.
    """
    r = np.zeros((len(best_perm), count))
    for i, label_col in enumerate(best_perm):
        if label_col >= len(local_to_global):
            raise InvalidInputError(
                f"attractor {i} matched to silent padding column {label_col}"
            )
        j = local_to_global[label_col]
        if j >= count:
            raise InvalidInputError(f"global speaker {j} out of range (C={count})")
        r[i, j] = 1.0
    return AssignmentTargets(r=r)


def resolve_spawns(targets: AssignmentTargets, num_states: int) -> list[int]:
    """Final column of each attractor once new-speaker rows spawn in order."""
    cols, spawned = [], 0
    for i in range(targets.num_attractors):
        j = targets.column_of(i)
        if j == targets.r.shape[1] - 1 and j >= num_states:
            cols.append(num_states + spawned)
            spawned += 1
        else:
            cols.append(j)
    return cols


def update_states(
    clusterer: RecurrentClusterer,
    state: ClusterState,
    attractors: torch.Tensor,
    targets: AssignmentTargets,
) -> ClusterState:
    """One teacher-forced update step.

    Columns no attractor targets are returned bitwise unchanged; a targeted
    column is replaced by one GRU step with its attractor as input. Rows
    selecting the new-speaker column spawn fresh states sequentially in
    attractor order, each seeded from the learned initial vector.
    """
    if targets.num_attractors != attractors.shape[0]:
        raise InvalidInputError("one target row per attractor required")
    if targets.r.size and targets.r.shape[1] != state.count:
        raise InvalidInputError(
            f"targets have {targets.r.shape[1]} columns, state exposes {state.count}"
        )
    rows = list(state.states.unbind(0))
    taken: set[int] = set()
    appended: list[torch.Tensor] = []
    for i in range(targets.num_attractors):
        j = targets.column_of(i)
        if j < state.num_states:
            if j in taken:
                raise ConstraintViolationError(
                    f"attractors {i} and an earlier one both target state {j} "
                    "(cannot-link within a chunk)"
                )
            taken.add(j)
            rows[j] = clusterer.step(attractors[i], rows[j])
        else:
            appended.append(clusterer.step(attractors[i], state.new_speaker_init))
    new_states = (
        torch.stack(rows + appended)
        if rows or appended
        else state.states
    )
    return ClusterState(states=new_states, new_speaker_init=state.new_speaker_init)


def infer_permutation(
    state: ClusterState, attractors: torch.Tensor, beam_width: int
) -> list[tuple[Permutation, float]]:
    """Best cannot-link respecting assignments of a chunk's attractors.

    Enumerates every mapping where each existing state absorbs at most one
    attractor while the new-speaker slot may be chosen repeatedly (each
    choice spawning the next fresh index), scores each by its joint
    log-probability, and returns the ``beam_width`` best. Ties break toward
    the lexicographically smallest mapping.
    """
    if beam_width < 1:
        raise InvalidInputError(f"beam_width must be >= 1, got {beam_width}")
    n = attractors.shape[0]
    if n == 0:
        return [(Permutation(()), 0.0)]
    probs = torch.stack(
        [predict_assignment_probs(attractors[i], state) for i in range(n)]
    )
    logp = probs.detach().clamp_min(1e-300).log().numpy()
    k = state.num_states
    results: list[tuple[float, tuple[int, ...]]] = []

    def extend(i: int, used: set[int], spawned: int, score: float, mapping: tuple):
        if i == n:
            results.append((score, mapping))
            return
        for j in range(k):
            if j not in used:
                extend(i + 1, used | {j}, spawned, score + logp[i, j], mapping + (j,))
        # new-speaker slot: probability of column k, spawn index k + spawned
        extend(i + 1, used, spawned + 1, score + logp[i, k], mapping + (k + spawned,))

    extend(0, set(), 0, 0.0, ())
    results.sort(key=lambda item: (-item[0], item[1]))
    return [(Permutation(m), s) for s, m in results[:beam_width]]


def _apply_assignment(
    clusterer: RecurrentClusterer,
    state: ClusterState,
    attractors: torch.Tensor,
    mapping: Permutation,
) -> ClusterState:
    """Inference-time state update for a resolved assignment mapping."""
    rows = list(state.states.unbind(0))
    for i, j in enumerate(mapping):
        if j < state.num_states:
            rows[j] = clusterer.step(attractors[i], rows[j])
        else:
            if j != len(rows):
                raise InternalInvariantError(
                    f"spawn index {j} out of order (have {len(rows)} states)"
                )
            rows.append(clusterer.step(attractors[i], state.new_speaker_init))
    new_states = torch.stack(rows) if rows else state.states
    return ClusterState(states=new_states, new_speaker_init=state.new_speaker_init)


def stitch(
    chunk_activities_list: list[torch.Tensor],
    permutations: list[Permutation],
    global_speaker_count: int,
    frame_shift_s: float = 0.1,
) -> DiarizationHypothesis:
    """Assemble per-chunk activities into the global T x S matrix.

    Within chunk n, global column perm[i] receives local column i; columns
    no local speaker maps to stay zero over that chunk.
    """
    if len(chunk_activities_list) != len(permutations):
        raise InvalidInputError("one permutation per chunk required")
    total = sum(int(a.shape[0]) for a in chunk_activities_list)
    out = np.zeros((total, global_speaker_count))
    offset = 0
    for acts, perm in zip(chunk_activities_list, permutations):
        acts = np.asarray(acts.detach() if isinstance(acts, torch.Tensor) else acts)
        if len(perm) != acts.shape[1]:
            raise InternalInvariantError(
                f"permutation length {len(perm)} != local speakers {acts.shape[1]}"
            )
        for i, j in enumerate(perm):
            if j >= global_speaker_count:
                raise InternalInvariantError(
                    f"global column {j} >= speaker count {global_speaker_count}"
                )
            out[offset : offset + acts.shape[0], j] = acts[:, i]
        offset += acts.shape[0]
    return DiarizationHypothesis(activities=out, frame_shift_s=frame_shift_s)


def decode_recording(
    clusterer: RecurrentClusterer,
    chunk_results: list[ChunkResult],
    beam_width: int = 3,
    initial_state: ClusterState | None = None,
    frame_shift_s: float = 0.1,
    order: list[int] | None = None,
) -> tuple[DiarizationHypothesis, ClusterState]:
    """Beam search over chunk assignment choices.

    Every hypothesis extends with the top per-chunk assignments, updates its
    states through the GRU (spawning fresh speakers for new-speaker picks),
    and accumulates the joint log-probability; hypotheses with different
    speaker counts compete directly. Returns the best hypothesis stitched
    into a global activity matrix plus its final state.

    ``order`` feeds the chunks to the clusterer in a different sequence
    (the shuffled-ratio ablation); the output is always stitched in
    original time order.
    """
    start = initial_state if initial_state is not None else clusterer.initial_state(0)
    if not chunk_results:
        n0 = start.num_states
        return (
            DiarizationHypothesis(np.zeros((0, n0)), frame_shift_s),
            start,
        )
    if order is None:
        order = list(range(len(chunk_results)))
    if sorted(order) != list(range(len(chunk_results))):
        raise InvalidInputError("order must be a permutation of the chunk indices")
    with torch.no_grad():
        beam = [BeamHypothesis(state=start)]
        for pos in order:
            attractors = chunk_results[pos].converted_attractors
            candidates: list[BeamHypothesis] = []
            for hyp in beam:
                for perm, logprob in infer_permutation(
                    hyp.state, attractors, beam_width
                ):
                    candidates.append(
                        BeamHypothesis(
                            state=_apply_assignment(
                                clusterer, hyp.state, attractors, perm
                            ),
                            score=hyp.score + logprob,
                            perms_so_far=hyp.perms_so_far + [perm],
                        )
                    )
            candidates.sort(key=BeamHypothesis.sort_key)
            beam = candidates[:beam_width]
        best = beam[0]
    by_original = [Permutation(())] * len(chunk_results)
    for processed, original in enumerate(order):
        by_original[original] = best.perms_so_far[processed]
    hypothesis = stitch(
        [c.activities for c in chunk_results],
        by_original,
        best.state.num_states,
        frame_shift_s,
    )
    return hypothesis, best.state


def refine_decode(
    clusterer: RecurrentClusterer,
    chunk_results: list[ChunkResult],
    first_pass_final_state: ClusterState,
    beam_width: int = 3,
    frame_shift_s: float = 0.1,
) -> DiarizationHypothesis:
    """Second decoding pass starting from the first pass's final states.

    Speaker identities inherit the first-pass ordering; the appended
    new-speaker slot remains available.
    """
    hypothesis, _ = decode_recording(
        clusterer,
        chunk_results,
        beam_width=beam_width,
        initial_state=first_pass_final_state,
        frame_shift_s=frame_shift_s,
    )
    return hypothesis


def _frame_scored_durations(
    num_frames: int,
    frame_shift_s: float,
    boundaries: list[float],
    collar_s: float,
) -> np.ndarray:
    """Seconds of each frame interval left after collar exclusion.

    Frame t covers [t * shift, (t+1) * shift); the exclusion set is the
    union of [b - collar, b + collar] over the reference boundaries.
    """
    from .scoring import _merge_intervals

    if collar_s <= 0 or not boundaries:
        return np.full(num_frames, frame_shift_s)
    exclusions = _merge_intervals(
        [(b - collar_s, b + collar_s) for b in boundaries]
    )
    durations = np.full(num_frames, frame_shift_s)
    for lo, hi in exclusions:
        first = max(int(math.floor(lo / frame_shift_s)), 0)
        last = min(int(math.ceil(hi / frame_shift_s)), num_frames)
        for t in range(first, last):
            start, end = t * frame_shift_s, (t + 1) * frame_shift_s
            durations[t] -= max(0.0, min(end, hi) - max(start, lo))
    return np.clip(durations, 0.0, frame_shift_s)


def oracle_decode(
    chunk_results: list[ChunkResult],
    labels: list[ChunkLabels],
    frame_shift_s: float = 0.1,
    collar_s: float = 0.25,
    threshold: float = 0.5,
    ref_segments: list | None = None,
) -> DiarizationHypothesis:
    """Reorder each chunk with the reference-derived assignment instead of
    the predicted one; upper-bounds clustering quality.

    Attractors are matched to the chunk's active reference speakers by an
    exact assignment whose cost is the binarized-activity disagreement
    weighted by each frame's collar-scored duration, so the matching
    minimizes exactly what the collar-aware metric charges; a small BCE
    term breaks ties on fully collar-excluded chunks. When ``ref_segments``
    is given, exclusion zones use the true segment boundaries; otherwise
    they are approximated from label transitions. Attractors matched to
    silence padding (predictor over-count) get fresh columns appended
    after the reference speakers.
    """
    if len(chunk_results) != len(labels):
        raise InvalidInputError("one label matrix per chunk required")
    n_ref = 0
    for lab in labels:
        n_ref = max(n_ref, max(lab.global_speaker_ids, default=-1) + 1)
    total_frames = sum(c.num_frames for c in chunk_results)
    if ref_segments is not None:
        boundaries = [s.onset for s in ref_segments]
        boundaries += [s.offset for s in ref_segments]
    else:
        full = np.concatenate(
            [
                _expand_labels(lab, chunk.num_frames, n_ref)
                for chunk, lab in zip(chunk_results, labels)
            ],
            axis=0,
        ) if chunk_results else np.zeros((0, n_ref))
        boundaries = []
        if full.shape[1]:
            changed = (np.diff(full, axis=0) != 0).any(axis=1)
            boundaries = [float(t + 1) * frame_shift_s for t in np.flatnonzero(changed)]
    scored = _frame_scored_durations(
        total_frames, frame_shift_s, boundaries, collar_s
    )

    perms: list[Permutation] = []
    extra = 0
    offset = 0
    for chunk, lab in zip(chunk_results, labels):
        weights = scored[offset : offset + chunk.num_frames]
        offset += chunk.num_frames
        if chunk.num_speakers == 0:
            perms.append(Permutation(()))
            continue
        acts = chunk.activities
        acts = acts.detach().numpy() if isinstance(acts, torch.Tensor) else acts
        acts = np.asarray(acts, dtype=np.float64)
        binary = (acts >= threshold).astype(float)
        size = max(chunk.num_speakers, lab.num_speakers)
        block = np.zeros((chunk.num_frames, size))
        block[:, : lab.num_speakers] = lab.matrix
        padded = np.zeros((chunk.num_frames, size))
        padded[:, : chunk.num_speakers] = binary
        # primary cost: scored-duration-weighted binarized disagreement;
        # tiny BCE tie-breaker decides fully collar-excluded chunks
        disagreement = np.einsum(
            "t,tij->ij",
            weights,
            np.abs(padded[:, :, None] - block[:, None, :]),
        )
        probs = np.full((chunk.num_frames, size), PROB_CLIP)
        probs[:, : chunk.num_speakers] = np.clip(
            acts, PROB_CLIP, 1.0 - PROB_CLIP
        )
        bce_cost = -(
            np.log(probs).T @ block + np.log(1.0 - probs).T @ (1.0 - block)
        ) / max(chunk.num_frames, 1)
        cost = disagreement + 1e-9 * bce_cost / max(-math.log(PROB_CLIP), 1.0)
        _, cols = linear_sum_assignment(cost)
        mapped = []
        for i in range(chunk.num_speakers):
            label_col = int(cols[i])
            if label_col < lab.num_speakers:
                mapped.append(lab.global_speaker_ids[label_col])
            else:
                mapped.append(n_ref + extra)
                extra += 1
        perms.append(Permutation(tuple(mapped)))
    return stitch(
        [c.activities for c in chunk_results], perms, n_ref + extra, frame_shift_s
    )


def _expand_labels(lab: ChunkLabels, num_frames: int, n_ref: int) -> np.ndarray:
    out = np.zeros((num_frames, n_ref))
    for col, gid in enumerate(lab.global_speaker_ids):
        out[:, gid] = lab.matrix[:, col]
    return out


def _order_by_first_activity(labels: np.ndarray) -> np.ndarray:
    """Global speaker index := order of first frame-level activity."""
    firsts = []
    for j in range(labels.shape[1]):
        active = np.flatnonzero(labels[:, j] > 0)
        firsts.append(active[0] if active.size else labels.shape[0] + j)
    return np.argsort(np.asarray(firsts), kind="stable")


def run_training_pass(
    predictor,
    clusterer: RecurrentClusterer | None,
    recordings: list[tuple[torch.Tensor, np.ndarray]],
    chunk_size: int | None = None,
    with_global_loss: bool = False,
):
    """Teacher-forced forward pass over a batch of recordings.

    Args:
        predictor: ChunkPredictor (gradients flow).
        clusterer: RecurrentClusterer, or None to skip the clustering loss
            (first-stage training).
        recordings: (frames, labels) pairs; frames is (T, input_dim),
            labels is a binary (T, S) matrix.
        chunk_size: frames per chunk; None processes each recording as a
            single chunk (global attractor training).
        with_global_loss: additionally compute the unchunked attractor loss.

    Returns:
        dict with torch scalars ``l_diar``, ``l_attr``, ``l_post`` (and
        ``l_global`` when requested), each averaged over the batch.
    """
    if not recordings:
        raise InvalidInputError("empty batch")
    diar_terms, attr_terms, post_terms, global_terms = [], [], [], []
    for frames, labels in recordings:
        labels = np.asarray(labels, dtype=np.float64)
        order = _order_by_first_activity(labels)
        labels = labels[:, order]
        labels = labels[:, labels.any(axis=0)]
        n_speakers = labels.shape[1]
        embeddings = predictor.encode(frames)
        size = chunk_size or embeddings.shape[0]
        chunks = split_chunks(embeddings, size)
        state = clusterer.initial_state(n_speakers) if clusterer else None
        chunk_diar, chunk_attr, probs_list, targets_list = [], [], [], []
        offset = 0
        for chunk in chunks:
            block = labels[offset : offset + chunk.shape[0]]
            offset += chunk.shape[0]
            local_cols = [int(c) for c in np.flatnonzero(block.any(axis=0))]
            s_n = len(local_cols)
            raw, eprobs = predictor.eda_attractors(chunk, n_speakers=s_n)
            chunk_attr.append(attractor_existence_loss(eprobs, s_n))
            if s_n == 0:
                chunk_diar.append(torch.zeros((), dtype=torch.float64))
                probs_list.append(None)
                targets_list.append(None)
                continue
            acts = chunk_activities(chunk, raw)
            chunk_lab = ChunkLabels(block[:, local_cols], local_cols)
            l_diar_n, best_perm = pit_diarization_loss(acts, chunk_lab)
            chunk_diar.append(l_diar_n)
            if clusterer is not None:
                converted = predictor.convert_attractors(raw, embeddings)
                probs = torch.stack(
                    [
                        predict_assignment_probs(converted[i], state)
                        for i in range(s_n)
                    ]
                )
                targets = build_targets(best_perm, local_cols, state.count)
                probs_list.append(probs)
                targets_list.append(torch.as_tensor(targets.r))
                state = update_states(clusterer, state, converted, targets)
        diar_terms.append(torch.stack(chunk_diar).mean())
        attr_terms.append(torch.stack(chunk_attr).mean())
        if clusterer is not None:
            post_terms.append(clustering_ce_loss(probs_list, targets_list))
        if with_global_loss:
            raw_g, eprobs_g = predictor.eda_attractors(
                embeddings, n_speakers=n_speakers
            )
            attr_g = attractor_existence_loss(eprobs_g, n_speakers)
            if n_speakers:
                acts_g = chunk_activities(embeddings, raw_g)
                diar_g, _ = pit_diarization_loss(acts_g, ChunkLabels(labels))
            else:
                diar_g = torch.zeros((), dtype=torch.float64)
            global_terms.append(diar_g + attr_g)
    out = {
        "l_diar": torch.stack(diar_terms).mean(),
        "l_attr": torch.stack(attr_terms).mean(),
        "l_post": (
            torch.stack(post_terms).mean()
            if post_terms
            else torch.zeros((), dtype=torch.float64)
        ),
    }
    if with_global_loss:
        out["l_global"] = torch.stack(global_terms).mean()
    return out
