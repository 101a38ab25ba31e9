"""
Tests for multi-pass recognition with writer adaptation.
"""
import numpy as np
import pytest

from src.models.classifier import ClassifierSpec, StatePrior
from src.models.decoding import DecodeConfig
from src.models.hmm import CharacterHMM
from src.models.tying import StateTyingMap
from src.services import pipeline_service
from src.services.classifier_service import build_classifier
from src.services.decoder_service import ClassifierScorer, GmmScorer, decode
from src.services.hmm_service import flat_start
from src.services.pipeline_service import (
    AdaptationSchedule,
    RecognitionSystem,
    group_writers,
    multipass_recognize,
)
from src.utils.errors import ConfigurationError
from tests.conftest import TINY_WINDOW

NUM_STATES = 3


def classifier_system(tiny_config, adapted_blocks=2):
    tying = StateTyingMap.untied(tiny_config.num_classes, NUM_STATES)
    spec = ClassifierSpec(input_height=tiny_config.line_height, input_width=TINY_WINDOW, channels=(2, 3),
                          kernel_size=3, hidden_units=6, num_outputs=tying.count,
                          adapted_blocks=adapted_blocks, code_dim=3)
    model = build_classifier(spec, 4)
    model.eval()
    prior = StatePrior(np.full(tying.count, 1.0 / tying.count))
    hmms = [CharacterHMM.left_to_right(c, NUM_STATES) for c in range(tiny_config.num_classes)]
    return RecognitionSystem(hmms, tying, ClassifierScorer(model, prior), config=DecodeConfig(beam=32))


@pytest.fixture(scope="module")
def writers(tiny_corpus, tiny_frames):
    return group_writers(
        tiny_frames,
        [(line.line_id, line.writer_id, line.transcript) for line in tiny_corpus.partitions["test"]],
        [(line.line_id, line.writer_id) for line in tiny_corpus.partitions["adapt"]],
    )


class TestGrouping:
    """Test cases for per-writer inputs."""

    def test_group_writers(self, writers, tiny_corpus, tiny_config):
        """Test each unseen writer owns its test and adaptation lines."""
        assert [w.writer_id for w in writers] == tiny_corpus.writers("test")
        for writer in writers:
            assert len(writer.test) == tiny_config.test_lines_per_writer
            assert len(writer.adapt) == tiny_config.adapt_lines_per_writer
            assert sorted(writer.references) == sorted(s.line_id for s in writer.test)


class TestMultipass:
    """Test cases for multi-pass recognition."""

    def test_single_pass_is_plain_decoding(self, writers, tiny_config):
        """Test one pass equals writer-independent decoding."""
        system = classifier_system(tiny_config)
        result = multipass_recognize(writers, system, passes=1)
        expected = {
            seq.line_id: decode(seq, system.hmms, system.tying, system.scorer, config=system.config).transcript
            for writer in writers for seq in writer.test
        }
        assert result.hypotheses() == expected
        assert len(result.report.passes) == 1
        assert all(o.profile is None for o in result.outcomes.values())

    def test_adaptation_passes(self, writers, tiny_config):
        """Test later passes estimate a code per writer and report every pass."""
        system = classifier_system(tiny_config)
        schedule = AdaptationSchedule(epochs=1, learning_rate=0.01, seed=2)
        result = multipass_recognize(writers, system, passes=2, schedule=schedule)
        assert [record.index for record in result.report.passes] == [1, 2]
        assert result.report.passes[0].time_ratio == pytest.approx(1.0)
        assert len(result.pass_reports) == 2
        for writer in writers:
            profile = result.outcomes[writer.writer_id].profile
            assert profile.code.shape == (3,)
            assert profile.pass_count == 1
        assert result.report.N == sum(len(ref) for w in writers for ref in w.references.values())

    def test_pass_timing_covers_test_lines(self, writers, tiny_config, monkeypatch):
        """Test pass time counts test-line decoding and adaptation time the rest."""
        system = classifier_system(tiny_config)
        clock = [0.0]
        plain_decode = system.decode

        def ticking_decode(sequence, code=None):
            clock[0] += 1.0
            return plain_decode(sequence, code)

        monkeypatch.setattr(system, "decode", ticking_decode)
        monkeypatch.setattr(pipeline_service.time, "perf_counter", lambda: clock[0])
        schedule = AdaptationSchedule(epochs=1, learning_rate=0.01, seed=2)
        result = multipass_recognize(writers, system, passes=3, schedule=schedule)
        test_lines = sum(len(w.test) for w in writers)
        adapt_lines = sum(len(w.adapt) for w in writers)
        assert [r.seconds for r in result.report.passes] == [test_lines] * 3
        assert [r.time_ratio for r in result.report.passes] == [1.0] * 3
        assert [r.adaptation_seconds for r in result.report.passes] == [adapt_lines, adapt_lines, 0.0]

    def test_zero_code_decodes_like_no_code(self, writers, tiny_config):
        """Test decoding with a zero code matches writer-independent decoding."""
        system = classifier_system(tiny_config)
        sequence = writers[0].test[0]
        assert system.decode(sequence, np.zeros(3)).transcript == system.decode(sequence).transcript

    def test_passes_need_adaptation_layers(self, writers, tiny_config):
        """Test several passes are refused without adaptation layers."""
        with pytest.raises(ConfigurationError):
            multipass_recognize(writers, classifier_system(tiny_config, adapted_blocks=0), passes=2)

    def test_gmm_system_single_pass_only(self, writers, tiny_training_lines, tiny_config):
        """Test a GMM scorer decodes one pass and refuses adaptation."""
        model, _ = flat_start(tiny_training_lines, tiny_config.num_classes, NUM_STATES)
        system = RecognitionSystem(model.hmms, model.tying, GmmScorer(model), config=DecodeConfig(beam=32))
        assert not system.adaptable
        assert multipass_recognize(writers, system, passes=1).report.N > 0
        with pytest.raises(ConfigurationError):
            multipass_recognize(writers, system, passes=2)

    def test_zero_passes(self, writers, tiny_config):
        """Test at least one pass is required."""
        with pytest.raises(ConfigurationError):
            multipass_recognize(writers, classifier_system(tiny_config), passes=0)
