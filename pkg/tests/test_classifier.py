"""
Tests for the writer-aware frame classifier.
"""
import math

import numpy as np
import pytest
import torch

from src.models.classifier import ClassifierSpec, LabeledLine, StatePrior
from src.models.hmm import Alignment, PositionedState
from src.models.tying import StateTyingMap
from src.services.classifier_service import (
    adapt_unknown_writer,
    adaptation_loss,
    build_classifier,
    frame_log_posteriors,
    frame_posteriors,
    line_loss,
    output_layer_parameters,
    scaled_likelihood,
    tied_labels,
    train_adaptive,
    train_base,
)
from src.utils.errors import (
    CodeDimensionError,
    ConfigurationError,
    DataMismatchError,
    FrameGeometryError,
    UnknownWriterError,
)


def small_spec(**overrides) -> ClassifierSpec:
    values = dict(input_height=8, input_width=8, channels=(2, 3), kernel_size=3, hidden_units=5,
                  num_outputs=4, adapted_blocks=2, code_dim=3)
    values.update(overrides)
    return ClassifierSpec(**values)


def random_lines(rng, count=4, frames=6, writers=(0, 1), outputs=4, size=8):
    return [
        LabeledLine(i, writers[i % len(writers)], rng.uniform(size=(frames, size, size)),
                    rng.integers(0, outputs, frames))
        for i in range(count)
    ]


def randomize_adaptation(model, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.adaptation_parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype))


def numeric_gradient(loss_fn, param, index, eps=1e-6):
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + eps
        plus = float(loss_fn())
        param[index] = original - eps
        minus = float(loss_fn())
        param[index] = original
    return (plus - minus) / (2 * eps)


class TestArchitecture:
    """Test cases for model construction and inference."""

    def test_seeded_construction(self):
        """Test identical seeds give identical weights."""
        first, second = build_classifier(small_spec(), 3), build_classifier(small_spec(), 3)
        for a, b in zip(first.parameters(), second.parameters()):
            assert torch.equal(a, b)

    def test_new_adaptation_is_zero(self):
        """Test adaptation matrices start at zero with shape (C, G)."""
        model = build_classifier(small_spec(), 0)
        shapes = [tuple(p.shape) for p in model.adaptation_parameters()]
        assert shapes == [(2, 3), (3, 3)]
        assert all(float(p.abs().sum()) == 0.0 for p in model.adaptation_parameters())

    def test_partial_adaptation(self):
        """Test only the first P blocks are adapted."""
        model = build_classifier(small_spec(adapted_blocks=1), 0)
        assert len(model.adaptation_parameters()) == 1

    def test_too_many_adapted_blocks(self):
        """Test P above the block count is rejected."""
        with pytest.raises(ValueError):
            small_spec(adapted_blocks=3)

    def test_posteriors_normalized(self, rng):
        """Test each frame's posterior sums to one."""
        model = build_classifier(small_spec(), 0)
        posteriors = frame_posteriors(model, rng.uniform(size=(7, 8, 8)))
        assert posteriors.shape == (7, 4)
        np.testing.assert_allclose(posteriors.sum(axis=1), 1.0, rtol=1e-5)

    def test_output_layer_size(self):
        """Test the output layer holds (hidden + 1) x outputs parameters."""
        assert output_layer_parameters(build_classifier(small_spec(), 0)) == 6 * 4

    def test_bad_patch_shape(self, rng):
        """Test patches of the wrong size are rejected."""
        with pytest.raises(FrameGeometryError):
            frame_log_posteriors(build_classifier(small_spec(), 0), rng.uniform(size=(2, 8, 9)))

    def test_bad_code_length(self, rng):
        """Test codes of the wrong length are rejected."""
        with pytest.raises(CodeDimensionError):
            frame_log_posteriors(build_classifier(small_spec(), 0), rng.uniform(size=(2, 8, 8)), np.zeros(4))

    def test_scaled_likelihood(self):
        """Test scaled likelihoods subtract the log prior."""
        prior = StatePrior(np.array([0.25, 0.75]))
        scores = scaled_likelihood(np.array([[0.5, 0.5]]), prior)
        np.testing.assert_allclose(scores, [[np.log(2.0), np.log(0.5 / 0.75)]])

    def test_prior_smoothing(self):
        """Test add-k smoothing of label counts."""
        prior = StatePrior.from_counts(np.array([0, 2]), smoothing=1.0)
        np.testing.assert_allclose(prior.probs, [0.25, 0.75])

    def test_tied_labels(self):
        """Test aligned states map to tied ids."""
        tying = StateTyingMap(np.array([[0, 1], [0, 2]]))
        alignment = Alignment(0, [PositionedState(1, 0), PositionedState(1, 1), PositionedState(0, 1)], np.zeros(3))
        np.testing.assert_array_equal(tied_labels(alignment, tying), [0, 2, 1])


class TestZeroCode:
    """Test cases for the writer-independent identity."""

    def test_zero_code_bit_identical(self, rng):
        """Test a zero code reproduces writer-independent scores exactly."""
        model = build_classifier(small_spec(), 5)
        randomize_adaptation(model)
        patches = rng.uniform(size=(1000, 8, 8))
        plain = frame_log_posteriors(model, patches)
        coded = frame_log_posteriors(model, patches, np.zeros(3))
        np.testing.assert_array_equal(plain, coded)

    def test_adaptation_layers_do_not_change_base(self, rng):
        """Test models with and without adaptation layers agree without a code."""
        patches = rng.uniform(size=(50, 8, 8))
        adapted = build_classifier(small_spec(adapted_blocks=2), 9)
        plain = build_classifier(small_spec(adapted_blocks=0), 9)
        np.testing.assert_array_equal(frame_log_posteriors(adapted, patches), frame_log_posteriors(plain, patches))


class TestGradients:
    """Test cases for analytic gradients against finite differences."""

    def test_gradients_match_finite_differences(self, rng):
        """Test gradients of base weights, adaptation matrices and codes."""
        for trial in range(20):
            model = build_classifier(small_spec(), trial).double()
            randomize_adaptation(model, trial)
            model.eval()
            line = random_lines(rng, count=1, frames=3)[0]
            code = torch.as_tensor(rng.normal(size=3), dtype=torch.float64).requires_grad_(True)
            checked = [model.blocks[0].conv.weight, model.dense.weight, model.output.bias] + model.adaptation_parameters()
            params = checked + [code]
            grads = torch.autograd.grad(line_loss(model, line, code), params)
            for param, grad in zip(params, grads):
                flat = int(rng.integers(param.numel()))
                index = tuple(int(i) for i in np.unravel_index(flat, tuple(param.shape)))
                numeric = numeric_gradient(lambda: line_loss(model, line, code), param, index)
                np.testing.assert_allclose(grad[index].item(), numeric, rtol=1e-4, atol=1e-7)


class TestBaseTraining:
    """Test cases for writer-independent training."""

    def test_initial_loss_is_log_states(self, rng):
        """Test the near-zero output layer starts at ln S per frame."""
        model = build_classifier(small_spec(num_outputs=6), 0)
        model.eval()
        line = random_lines(rng, count=1, frames=20, outputs=6)[0]
        with torch.no_grad():
            loss = float(line_loss(model, line, torch.zeros(3))) / len(line)
        assert loss == pytest.approx(math.log(6), abs=0.02)

    def test_training_reduces_loss(self, rng):
        """Test base training fits separable labels."""
        patches = rng.uniform(0.0, 0.2, size=(256, 8, 8))
        labels = rng.integers(0, 4, 256)
        for label in range(4):
            patches[labels == label, :, 2 * label:2 * label + 2] += 0.8
        model = build_classifier(small_spec(), 0)
        prior, report = train_base(model, patches, labels, epochs=8, batch_size=32, learning_rate=0.05)
        assert report.losses[-1] < report.losses[0]
        assert len(prior) == 4
        assert prior.probs.sum() == pytest.approx(1.0)

    def test_label_out_of_range(self, rng):
        """Test labels at or above the output count are rejected."""
        with pytest.raises(DataMismatchError):
            train_base(build_classifier(small_spec(), 0), rng.uniform(size=(4, 8, 8)), np.array([0, 1, 2, 4]))


class TestAdaptation:
    """Test cases for adaptive training and unseen-writer adaptation."""

    def test_adaptive_training_updates_only_adaptation(self, rng):
        """Test base weights stay fixed while matrices and codes move."""
        model = build_classifier(small_spec(), 1)
        base = [p.detach().clone() for p in model.base_parameters()]
        profiles, report = train_adaptive(model, random_lines(rng), epochs=2, learning_rate=0.01)
        for before, after in zip(base, model.base_parameters()):
            assert torch.equal(before, after)
        assert sorted(profiles) == [0, 1]
        assert all(p.code.shape == (3,) for p in profiles.values())
        assert any(float(p.abs().sum()) > 0 for p in model.adaptation_parameters())
        assert len(report.losses) == 2

    def test_code_gradient_needs_running_statistics(self, rng):
        """Test batch statistics of a one-writer line cancel the code, running statistics keep it."""
        model = build_classifier(small_spec(), 2).double()
        randomize_adaptation(model)
        line = random_lines(rng, count=1, frames=6)[0]

        def code_gradient(batch_statistics):
            model.train(batch_statistics)
            code = torch.tensor(rng.normal(size=3), dtype=torch.float64, requires_grad=True)
            (grad,) = torch.autograd.grad(line_loss(model, line, code), [code])
            return grad

        assert float(code_gradient(False).abs().max()) > 1e-7
        assert float(code_gradient(True).abs().max()) < 1e-12

    def test_unknown_writer(self, rng):
        """Test lines of writers outside the known set are rejected."""
        with pytest.raises(UnknownWriterError):
            train_adaptive(build_classifier(small_spec(), 1), random_lines(rng), writer_ids=[0])

    def test_no_adaptation_layers(self, rng):
        """Test adaptation needs at least one adapted block."""
        model = build_classifier(small_spec(adapted_blocks=0), 1)
        with pytest.raises(ConfigurationError):
            train_adaptive(model, random_lines(rng))
        with pytest.raises(ConfigurationError):
            adapt_unknown_writer(model, random_lines(rng))

    def test_unknown_writer_adaptation_never_worsens(self, rng):
        """Test the kept code never has a higher set loss than the initial one."""
        model = build_classifier(small_spec(), 2)
        train_adaptive(model, random_lines(rng), epochs=1, learning_rate=0.01)
        lines = random_lines(rng, count=3, writers=(7,))
        profile = adapt_unknown_writer(model, lines, writer_id=7, epochs=3, learning_rate=0.05, seed=4)
        assert profile.writer_id == 7
        assert len(profile.loss_history) == 4
        final = adaptation_loss(model, lines, torch.as_tensor(profile.code, dtype=torch.float32))
        assert final <= profile.loss_history[0] + 1e-4

    def test_empty_adaptation_set(self):
        """Test an empty adaptation set yields the zero code."""
        profile = adapt_unknown_writer(build_classifier(small_spec(), 0), [], writer_id=3)
        np.testing.assert_array_equal(profile.code, np.zeros(3))

    def test_initial_code_length(self, rng):
        """Test a wrong initial code length is rejected."""
        with pytest.raises(CodeDimensionError):
            adapt_unknown_writer(build_classifier(small_spec(), 0), random_lines(rng), initial_code=np.zeros(5))
