"""
Tests for GMM-HMM training and forced alignment.
"""
import numpy as np
import pytest

from src.models.hmm import CharacterHMM, GaussianEmission, PositionedState
from src.models.tying import StateTyingMap
from src.services.hmm_service import (
    HmmSet,
    TrainingLine,
    accumulate_positioned_stats,
    align_lines,
    baum_welch_iterate,
    build_cascade,
    flat_start,
    forced_align,
    forward_backward,
    split_mixtures,
    tie_model,
    uniform_segmentation,
    viterbi_iterate,
)
from src.utils.errors import DataMismatchError, EmptyInputError, InfeasibleAlignmentError
from src.utils.validators import validate_stochastic_rows

NUM_STATES = 3


@pytest.fixture(scope="module")
def flat_model(tiny_training_lines, tiny_config):
    model, _ = flat_start(tiny_training_lines, tiny_config.num_classes, NUM_STATES)
    return model


def legal_step(previous: PositionedState, current: PositionedState, num_states: int) -> bool:
    if previous == current:
        return True
    if previous.class_id == current.class_id and current.position == previous.position + 1:
        return True
    return previous.position == num_states - 1 and current.position == 0


class TestFlatStart:
    """Test cases for flat-start initialization."""

    def test_uniform_segmentation(self):
        """Test segment sizes differ by at most one."""
        labels = uniform_segmentation(11, 3)
        sizes = np.bincount(labels)
        assert sizes.sum() == 11
        assert sizes.max() - sizes.min() <= 1
        assert np.all(np.diff(labels) >= 0)

    def test_model_shape(self, flat_model, tiny_config):
        """Test one HMM per class with stochastic rows."""
        assert flat_model.num_classes == tiny_config.num_classes
        assert flat_model.num_states == NUM_STATES
        assert len(flat_model.emissions) == tiny_config.num_classes * NUM_STATES
        for hmm in flat_model.hmms:
            assert validate_stochastic_rows(hmm.transitions)["valid"]

    def test_no_usable_line(self):
        """Test flat start rejects lines shorter than their state chain."""
        line = TrainingLine(0, np.zeros((2, 4)), [0, 1])
        with pytest.raises(EmptyInputError):
            flat_start([line], 2, NUM_STATES)


class TestReestimation:
    """Test cases for Baum-Welch and Viterbi training."""

    def test_baum_welch_monotone(self, flat_model, tiny_training_lines):
        """Test ten Baum-Welch iterations never decrease the log-likelihood."""
        model = flat_model
        history = []
        for _ in range(10):
            model, report = baum_welch_iterate(model, tiny_training_lines)
            history.append(report.log_likelihood)
        for before, after in zip(history, history[1:]):
            assert after >= before - 1e-8 * abs(before)

    def test_viterbi_iteration(self, flat_model, tiny_training_lines):
        """Test Viterbi training keeps stochastic transitions."""
        model, report = viterbi_iterate(flat_model, tiny_training_lines)
        assert report.lines > 0
        for hmm in model.hmms:
            assert validate_stochastic_rows(hmm.transitions)["valid"]

    def test_forward_backward_occupancy(self, flat_model, tiny_training_lines):
        """Test state posteriors sum to one per frame."""
        line = tiny_training_lines[0]
        cascade = build_cascade(flat_model, line.transcript)
        scores = np.stack(
            [flat_model.emissions[e].log_density(line.frames) for e in cascade.emission_ids], axis=1
        )
        gamma, _, _, total = forward_backward(scores, cascade.log_loop, cascade.log_next)
        assert np.isfinite(total)
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-8)

    def test_split_mixtures(self, flat_model):
        """Test splitting doubles components and keeps weights normalized."""
        split = split_mixtures(flat_model, 2)
        for emission in split.emissions:
            assert emission.num_components == 2
            assert emission.weights.sum() == pytest.approx(1.0)


class TestAlignment:
    """Test cases for forced alignment."""

    def test_alignment_is_legal(self, flat_model, tiny_training_lines):
        """Test consecutive labels are legal transitions and cover the transcript."""
        lines = {line.line_id: line for line in tiny_training_lines}
        alignments = align_lines(flat_model, tiny_training_lines)
        assert alignments
        for alignment in alignments:
            line = lines[alignment.line_id]
            assert len(alignment) == len(line.frames)
            assert alignment.labels[0] == PositionedState(line.transcript[0], 0)
            assert alignment.labels[-1] == PositionedState(line.transcript[-1], NUM_STATES - 1)
            for previous, current in zip(alignment.labels, alignment.labels[1:]):
                assert legal_step(previous, current, NUM_STATES)
            assert sorted(set(alignment.char_index)) == list(range(len(line.transcript)))

    def test_infeasible(self, flat_model):
        """Test too few frames for the state chain raise."""
        with pytest.raises(InfeasibleAlignmentError):
            forced_align(flat_model, np.zeros((NUM_STATES * 2 - 1, flat_model.dim)), [0, 1])

    def test_hard_statistics_cover_frames(self, flat_model, tiny_training_lines):
        """Test hard-count statistics account for every aligned frame."""
        alignments = align_lines(flat_model, tiny_training_lines)
        stats = accumulate_positioned_stats(flat_model, tiny_training_lines, alignments)
        total = sum(s.occupancy for s in stats.values())
        assert total == pytest.approx(sum(len(a) for a in alignments))


class TestTiedModel:
    """Test cases for the tied GMM-HMM."""

    def test_tie_model_pools_members(self, flat_model, tiny_training_lines, tiny_config):
        """Test tied emissions follow the tying map."""
        alignments = align_lines(flat_model, tiny_training_lines)
        stats = accumulate_positioned_stats(flat_model, tiny_training_lines, alignments)
        ids = StateTyingMap.untied(tiny_config.num_classes, NUM_STATES).ids.copy()
        ids[1, 0] = ids[0, 0]
        ids = np.unique(ids, return_inverse=True)[1].reshape(ids.shape)
        tied = tie_model(flat_model, StateTyingMap(ids), stats)
        assert len(tied.emissions) == tiny_config.num_classes * NUM_STATES - 1
        model, report = baum_welch_iterate(tied, tiny_training_lines)
        assert np.isfinite(report.log_likelihood)
        assert model.tying.count == len(model.emissions)

    def test_emission_count_mismatch(self):
        """Test a tying map and emission list of different sizes are rejected."""
        emission = GaussianEmission.single(np.zeros(2), np.ones(2))
        with pytest.raises(DataMismatchError):
            HmmSet([CharacterHMM.left_to_right(0, 2)], [emission], StateTyingMap.untied(1, 2))
