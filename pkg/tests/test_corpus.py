"""
Tests for synthetic corpus generation and frame extraction.
"""
import numpy as np
import pytest

from src.models.corpus import CorpusConfig, WriterStyle
from src.services.corpus_service import (
    apply_style,
    box_columns,
    compose_glyphs,
    generate_corpus,
    identity_render,
    successor_table,
)
from src.services.feature_service import extract_frames, pool_patches
from src.utils.errors import ConfigurationError, FrameGeometryError
from src.utils.validators import validate_stochastic_rows


class TestGlyphs:
    """Test cases for radical composition."""

    def test_paired_classes_share_left_radical(self):
        """Test classes 2j and 2j+1 share their left radical."""
        glyphs = compose_glyphs(10, 6, seed=1)
        for j in range(5):
            assert glyphs[2 * j].radicals[0].radical_id == glyphs[2 * j + 1].radicals[0].radical_id

    def test_compositions_distinct(self):
        """Test every class has its own radical pair."""
        glyphs = compose_glyphs(20, 8, seed=7)
        assert len({g.signature() for g in glyphs}) == 20

    def test_alphabet_too_large(self):
        """Test more classes than radical pairs are rejected."""
        with pytest.raises(ConfigurationError):
            compose_glyphs(10, 3, seed=0)

    def test_shared_radical_shares_pixels(self, tiny_config):
        """Test identity renders of paired classes agree inside the left box."""
        first = identity_render(tiny_config, 3, 0)
        second = identity_render(tiny_config, 3, 1)
        glyph = compose_glyphs(tiny_config.num_classes, tiny_config.num_radicals, 3)[0]
        start, end = box_columns(glyph.radicals[0].box, tiny_config.line_height)
        np.testing.assert_array_equal(first[:, start:end], second[:, start:end])

    def test_identity_style(self):
        """Test the identity style leaves a glyph untouched."""
        glyph = np.random.default_rng(0).uniform(size=(16, 16))
        np.testing.assert_array_equal(apply_style(glyph, WriterStyle.identity()), glyph)


class TestGeneration:
    """Test cases for corpus generation."""

    def test_deterministic(self, tiny_config):
        """Test identical seeds give identical corpora."""
        first = generate_corpus(tiny_config, seed=5)
        second = generate_corpus(tiny_config, seed=5)
        for name in first.partitions:
            for a, b in zip(first.partitions[name], second.partitions[name]):
                assert a.transcript == b.transcript
                np.testing.assert_array_equal(a.image, b.image)

    def test_partitions(self, tiny_corpus, tiny_config):
        """Test writers and line counts per partition."""
        assert tiny_corpus.writers("train") == [0, 1, 2]
        assert tiny_corpus.writers("test") == [3, 4]
        assert tiny_corpus.writers("adapt") == [3, 4]
        assert len(tiny_corpus.partitions["train"]) == 3 * tiny_config.train_lines_per_writer
        ids = [line.line_id for lines in tiny_corpus.partitions.values() for line in lines]
        assert len(ids) == len(set(ids))

    def test_coverage(self, tiny_corpus, tiny_config):
        """Test every class occurs often enough in training."""
        counts = np.bincount(
            [c for line in tiny_corpus.partitions["train"] for c in line.transcript],
            minlength=tiny_config.num_classes,
        )
        assert counts.min() >= tiny_config.min_occurrences

    def test_boundaries(self, tiny_corpus, tiny_config):
        """Test character boundaries are ordered and inside the image."""
        for line in tiny_corpus.partitions["test"]:
            assert line.image.shape[0] == tiny_config.line_height
            assert len(line.char_boundaries) == len(line.transcript)
            for (s0, e0), (s1, _) in zip(line.char_boundaries, line.char_boundaries[1:]):
                assert s0 < e0 <= s1
            assert line.char_boundaries[-1][1] <= line.width

    def test_grammar_rows(self, tiny_config):
        """Test the successor table is row stochastic."""
        assert validate_stochastic_rows(successor_table(tiny_config, 3))["valid"]

    def test_no_writers(self):
        """Test a corpus without writers is rejected."""
        with pytest.raises(ConfigurationError):
            generate_corpus(CorpusConfig(train_writers=0, test_writers=0), seed=1)

    def test_unreachable_coverage(self):
        """Test a coverage minimum beyond the training text is rejected."""
        config = CorpusConfig(num_classes=6, num_radicals=4, train_writers=1, train_lines_per_writer=1,
                              test_writers=0, max_line_length=3, min_occurrences=5)
        with pytest.raises(ConfigurationError):
            generate_corpus(config, seed=1)


class TestFrames:
    """Test cases for sliding-window extraction."""

    def test_frame_count_and_columns(self):
        """Test frame t covers columns [t*shift, t*shift + window)."""
        image = np.tile(np.arange(30, dtype=np.float64) / 30.0, (16, 1))
        sequence = extract_frames(image, window=8, shift=3, grid=4)
        assert len(sequence) == (30 - 8) // 3 + 1
        np.testing.assert_array_equal(sequence.patches[2], image[:, 6:14])
        assert sequence.frame_columns(2) == (6, 14)

    def test_pooling_means(self):
        """Test pooled cells hold mean intensities."""
        patches = np.zeros((1, 8, 8))
        patches[0, :4, :4] = 1.0
        pooled = pool_patches(patches, grid=2)
        np.testing.assert_allclose(pooled[0], [1.0, 0.0, 0.0, 0.0])

    def test_uint8_scaled(self):
        """Test 8-bit images are scaled into [0, 1]."""
        image = np.full((16, 8), 255, dtype=np.uint8)
        sequence = extract_frames(image, window=8, shift=2, grid=4)
        np.testing.assert_allclose(sequence.frames, 1.0)

    def test_narrow_image(self):
        """Test images narrower than the window need padding."""
        image = np.zeros((16, 5))
        with pytest.raises(FrameGeometryError):
            extract_frames(image, window=8, shift=2, grid=4)
        assert len(extract_frames(image, window=8, shift=2, grid=4, pad=True)) == 1

    def test_bad_geometry(self):
        """Test non-positive shifts and wrong heights are rejected."""
        with pytest.raises(ConfigurationError):
            extract_frames(np.zeros((16, 20)), window=8, shift=0)
        with pytest.raises(FrameGeometryError):
            extract_frames(np.zeros((16, 20)), window=8, shift=2, grid=4, line_height=20)
