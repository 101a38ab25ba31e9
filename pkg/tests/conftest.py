"""
Shared fixtures: a tiny deterministic corpus and its frames.
"""
import os

import numpy as np
import pytest

from src.models.corpus import CorpusConfig
from src.services.corpus_service import generate_corpus
from src.services.feature_service import extract_corpus
from src.services.hmm_service import TrainingLine

TINY_WINDOW = 8
TINY_SHIFT = 2
TINY_GRID = 4


def pytest_collection_modifyitems(config, items):
    """Skip slow trend tests unless PHMM_RUN_SLOW=1."""
    if os.environ.get("PHMM_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PHMM_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_config():
    """Six classes, three training and two test writers, 16-pixel lines."""
    return CorpusConfig(
        num_classes=6,
        num_radicals=4,
        train_writers=3,
        test_writers=2,
        train_lines_per_writer=6,
        adapt_lines_per_writer=1,
        test_lines_per_writer=2,
        min_line_length=2,
        max_line_length=4,
        min_occurrences=3,
        line_height=16,
        max_gap=2,
        noise_sigma_range=(0.0, 0.02),
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    return generate_corpus(tiny_config, seed=3)


@pytest.fixture(scope="session")
def tiny_frames(tiny_corpus):
    """Frame sequences of every partition, keyed by line id."""
    frames = {}
    for lines in tiny_corpus.partitions.values():
        frames.update(extract_corpus(lines, TINY_WINDOW, TINY_SHIFT, TINY_GRID))
    return frames


@pytest.fixture(scope="session")
def tiny_training_lines(tiny_corpus, tiny_frames):
    return [
        TrainingLine(line.line_id, tiny_frames[line.line_id].frames, line.transcript)
        for line in tiny_corpus.partitions["train"]
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
