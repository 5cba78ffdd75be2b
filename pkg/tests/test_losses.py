"""Loss tests: brute-force PIT oracle, hand-computed BCE/CE values,
finite-difference differentiability."""

import math

import numpy as np
import pytest
import torch

from eendrc.errors import InvalidInputError, TrainingDivergenceError
from eendrc.losses import (
    ChunkLabels,
    Permutation,
    attractor_existence_loss,
    bce,
    clustering_ce_loss,
    pit_diarization_loss,
    total_loss,
)
from util import brute_force_pit, finite_difference_check


def rand_instance(rng, frames=12, n_out=None, n_lab=None):
    n_out = n_out or int(rng.integers(1, 5))
    n_lab = n_lab if n_lab is not None else n_out
    acts = rng.uniform(0.02, 0.98, size=(frames, n_out))
    labels = (rng.random((frames, n_lab)) < 0.4).astype(float)
    return torch.as_tensor(acts), ChunkLabels(labels)


class TestPermutation:
    def test_injective_required(self):
        with pytest.raises(InvalidInputError):
            Permutation((0, 0))

    def test_iteration(self):
        p = Permutation((2, 0, 1))
        assert list(p) == [2, 0, 1] and p[0] == 2 and len(p) == 3


class TestPITDiarizationLoss:
    def test_self_match_identity_perm(self):
        rng = np.random.default_rng(0)
        labels = (rng.random((20, 3)) < 0.5).astype(float)
        loss, perm = pit_diarization_loss(torch.as_tensor(labels), ChunkLabels(labels))
        assert tuple(perm) == (0, 1, 2)
        # BCE(labels, labels) with clipping is tiny but nonzero
        assert 0 < float(loss) < 1e-5

    def test_swapped_columns_recovers_swap(self):
        rng = np.random.default_rng(1)
        labels = (rng.random((30, 2)) < 0.5).astype(float)
        swapped = labels[:, [1, 0]]
        loss_sw, perm = pit_diarization_loss(torch.as_tensor(swapped), ChunkLabels(labels))
        loss_id, _ = pit_diarization_loss(torch.as_tensor(labels), ChunkLabels(labels))
        assert tuple(perm) == (1, 0)
        assert float(loss_sw) == pytest.approx(float(loss_id), abs=1e-12)

    def test_three_speaker_brute_force(self):
        rng = np.random.default_rng(2)
        acts, labels = rand_instance(rng, n_out=3)
        loss, perm = pit_diarization_loss(acts, labels)
        want_loss, want_perm = brute_force_pit(acts.numpy(), labels.matrix)
        assert tuple(perm) == want_perm
        assert float(loss) == pytest.approx(want_loss, abs=1e-9)

    def test_many_random_instances_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            acts, labels = rand_instance(rng)
            loss, perm = pit_diarization_loss(acts, labels)
            want_loss, want_perm = brute_force_pit(acts.numpy(), labels.matrix)
            assert tuple(perm) == want_perm
            assert float(loss) == pytest.approx(want_loss, abs=1e-9)

    def test_label_column_permutation_invariance(self):
        rng = np.random.default_rng(4)
        acts, labels = rand_instance(rng, n_out=4)
        base, _ = pit_diarization_loss(acts, labels)
        for _ in range(5):
            perm = rng.permutation(4)
            shuffled = ChunkLabels(labels.matrix[:, perm])
            loss, _ = pit_diarization_loss(acts, shuffled)
            assert float(loss) == pytest.approx(float(base), abs=1e-12)

    def test_column_count_mismatch_pads(self):
        rng = np.random.default_rng(5)
        acts, labels = rand_instance(rng, n_out=2, n_lab=3)
        loss, perm = pit_diarization_loss(acts, labels)
        want_loss, want_perm = brute_force_pit(acts.numpy(), labels.matrix)
        assert len(perm) == 2
        assert tuple(perm) == want_perm
        assert float(loss) == pytest.approx(want_loss, abs=1e-9)
        acts2, labels2 = rand_instance(rng, n_out=3, n_lab=1)
        loss2, perm2 = pit_diarization_loss(acts2, labels2)
        want2, wperm2 = brute_force_pit(acts2.numpy(), labels2.matrix)
        assert tuple(perm2) == wperm2 and len(perm2) == 3
        assert float(loss2) == pytest.approx(want2, abs=1e-9)

    def test_row_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            pit_diarization_loss(torch.rand(5, 2), ChunkLabels(np.zeros((6, 2))))

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(6)
        labels = ChunkLabels((rng.random((8, 3)) < 0.5).astype(float))
        logits = torch.tensor(rng.normal(size=(8, 3)), requires_grad=True)

        def build():
            return pit_diarization_loss(torch.sigmoid(logits), labels)[0]

        finite_difference_check(build, [logits], n_coords=20)


class TestAttractorExistenceLoss:
    def test_near_perfect(self):
        eps = 1e-6
        loss = attractor_existence_loss(torch.tensor([1 - eps, eps], dtype=torch.float64), 1)
        assert float(loss) < 1e-5

    def test_uniform_is_ln2(self):
        loss = attractor_existence_loss(torch.tensor([0.5, 0.5], dtype=torch.float64), 1)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_computed(self):
        loss = attractor_existence_loss(torch.tensor([0.9, 0.8, 0.1], dtype=torch.float64), 2)
        want = (-math.log(0.9) - math.log(0.8) - math.log(0.9)) / 3
        assert float(loss) == pytest.approx(want, abs=1e-12)

    def test_zero_speaker_target(self):
        loss = attractor_existence_loss(torch.tensor([0.25], dtype=torch.float64), 0)
        assert float(loss) == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            attractor_existence_loss(torch.tensor([0.9, 0.8]), 2)

    def test_gradient_finite_difference(self):
        logits = torch.tensor([0.3, -0.2, 0.7], requires_grad=True, dtype=torch.float64)

        def build():
            return attractor_existence_loss(torch.sigmoid(logits), 2)

        finite_difference_check(build, [logits], n_coords=3)


class TestClusteringCELoss:
    def test_near_perfect(self):
        probs = [torch.tensor([[0.999, 0.0005, 0.0005]])]
        targets = [torch.tensor([[1.0, 0.0, 0.0]])]
        assert float(clustering_ce_loss(probs, targets)) < 1e-2

    def test_uniform_is_ln4(self):
        probs = [torch.full((2, 4), 0.25, dtype=torch.float64)]
        targets = [torch.tensor([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])]
        assert float(clustering_ce_loss(probs, targets)) == pytest.approx(
            math.log(4), abs=1e-12
        )

    def test_hand_computed_two_chunks(self):
        probs = [
            torch.tensor([[0.7, 0.2, 0.1]], dtype=torch.float64),
            torch.tensor([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]], dtype=torch.float64),
        ]
        targets = [
            torch.tensor([[1.0, 0, 0]]),
            torch.tensor([[0, 1.0, 0], [1.0, 0, 0]]),
        ]
        want = (-math.log(0.7) + (-math.log(0.6) - math.log(0.5)) / 2) / 2
        assert float(clustering_ce_loss(probs, targets)) == pytest.approx(
            want, abs=1e-12
        )

    def test_empty_chunks_contribute_zero(self):
        probs = [None, torch.tensor([[0.5, 0.5]], dtype=torch.float64)]
        targets = [None, torch.tensor([[1.0, 0.0]])]
        want = math.log(2) / 2
        assert float(clustering_ce_loss(probs, targets)) == pytest.approx(
            want, abs=1e-12
        )

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            c = int(rng.integers(2, 5))
            s = int(rng.integers(1, 4))
            p = rng.dirichlet(np.ones(c), size=s)
            r = np.zeros((s, c))
            r[np.arange(s), rng.integers(0, c, s)] = 1
            loss = clustering_ce_loss([torch.as_tensor(p)], [torch.as_tensor(r)])
            assert float(loss) >= 0.0

    def test_non_one_hot_rejected(self):
        with pytest.raises(InvalidInputError):
            clustering_ce_loss(
                [torch.tensor([[0.5, 0.5]])], [torch.tensor([[1.0, 1.0]])]
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            clustering_ce_loss(
                [torch.tensor([[0.5, 0.5]])], [torch.tensor([[1.0, 0.0, 0.0]])]
            )

    def test_gradient_finite_difference(self):
        logits = torch.tensor(
            np.random.default_rng(8).normal(size=(3, 4)), requires_grad=True
        )
        targets = [torch.eye(4)[:3]]

        def build():
            return clustering_ce_loss([torch.softmax(logits, dim=1)], targets)

        finite_difference_check(build, [logits], n_coords=12)


class TestTotalLoss:
    def test_plain_sum(self):
        assert float(total_loss(1.0, 0.5, 0.25)) == pytest.approx(1.75)

    def test_zero(self):
        assert float(total_loss(0.0, 0.0, 0.0)) == 0.0

    def test_with_global_term(self):
        got = total_loss(1.0, 0.5, 0.25, use_global=True, l_global=0.5)
        assert float(got) == pytest.approx(2.25)

    def test_global_flag_requires_value(self):
        with pytest.raises(InvalidInputError):
            total_loss(1.0, 0.5, 0.25, use_global=True)

    def test_nonfinite_rejected(self):
        with pytest.raises(TrainingDivergenceError):
            total_loss(float("nan"), 0.0, 0.0)
        with pytest.raises(TrainingDivergenceError):
            total_loss(0.0, float("inf"), 0.0)


class TestBCE:
    def test_matches_formula(self):
        p = torch.tensor([0.9, 0.2], dtype=torch.float64)
        t = torch.tensor([1.0, 0.0], dtype=torch.float64)
        want = (-math.log(0.9) - math.log(0.8)) / 2
        assert float(bce(p, t)) == pytest.approx(want, abs=1e-12)

    def test_clipping_saves_log_zero(self):
        assert math.isfinite(float(bce(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))))
