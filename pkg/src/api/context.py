"""
Step Context

Shared plumbing of every subcommand: settings resolution from flags,
workspace paths, loading of upstream artifacts and run manifests.
"""
import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from config.settings import Settings, load_settings
from src import __version__
from src.models.corpus import Corpus, TextLineSample
from src.models.features import FrameSequence
from src.services.hmm_service import TrainingLine
from src.services.storage import Workspace, load_corpus, load_features, write_manifest
from src.utils.errors import DataMismatchError
from src.utils.validators import ensure, validate_transcript

logger = logging.getLogger(__name__)

# Flag destination -> (settings section, key); section None is top level.
FLAG_TARGETS: Dict[str, Tuple[Optional[str], str]] = {
    "workdir": (None, "workdir"),
    "jobs": (None, "jobs"),
    "log_level": (None, "log_level"),
    "passes": (None, "passes"),
    "seed": ("corpus", "seed"),
    "num_classes": ("corpus", "num_classes"),
    "num_radicals": ("corpus", "num_radicals"),
    "train_writers": ("corpus", "train_writers"),
    "test_writers": ("corpus", "test_writers"),
    "window": ("features", "window"),
    "shift": ("features", "shift"),
    "states": ("hmm", "num_states"),
    "training": ("hmm", "training"),
    "mixtures": ("hmm", "mixtures"),
    "avg_states": ("tying", "avg_states"),
    "min_occupancy": ("tying", "min_occupancy"),
    "split_threshold": ("tying", "split_threshold"),
    "depth": ("tying", "question_depth"),
    "nn_seed": ("classifier", "seed"),
    "epochs": ("classifier", "base_epochs"),
    "adapted_blocks": ("classifier", "adapted_blocks"),
    "code_dim": ("classifier", "code_dim"),
    "adapt_epochs": ("classifier", "adapt_epochs"),
    "test_epochs": ("classifier", "test_epochs"),
    "order": ("lm", "order"),
    "rnn_hidden": ("lm", "rnn_hidden"),
    "rnn_epochs": ("lm", "rnn_epochs"),
    "omega": ("lm", "omega"),
    "beam": ("decode", "beam"),
    "lm_scale": ("decode", "lm_scale"),
    "ins_penalty": ("decode", "insertion_penalty"),
    "lm": ("decode", "lm_mode"),
    "nbest": ("decode", "nbest"),
}


def settings_from_args(args: argparse.Namespace) -> Settings:
    """Resolve settings; flags given on the command line win over every other source."""
    overrides: Dict[str, Any] = {}
    for dest, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            overrides[key] = value
        else:
            overrides.setdefault(section, {})[key] = value
    return load_settings(getattr(args, "config", None), **overrides)


@dataclass
class StepContext:
    """Settings and workspace of one subcommand run."""
    step: str
    settings: Settings
    workspace: Workspace

    @classmethod
    def from_args(cls, step: str, args: argparse.Namespace) -> "StepContext":
        settings = settings_from_args(args)
        return cls(step, settings, Workspace(settings.workdir))

    def finish(
        self,
        inputs: Mapping[str, Path],
        outputs: Mapping[str, Path],
        seeds: Optional[Mapping[str, int]] = None,
        notes: Optional[str] = None,
    ) -> None:
        manifest = write_manifest(
            self.workspace,
            self.step,
            __version__,
            inputs,
            outputs,
            seeds,
            self.settings.model_dump(mode="json"),
            notes,
        )
        logger.info("%s finished; %d outputs recorded", self.step, len(manifest.outputs))

    def corpus(self, *partitions: str) -> Corpus:
        self.workspace.require(self.workspace.corpus_dir / "corpus.json", "synth")
        return load_corpus(self.workspace.corpus_dir, partitions)

    def corpus_lines(self, partition: str) -> List[TextLineSample]:
        return self.corpus(partition).partitions[partition]

    @property
    def num_classes(self) -> int:
        """Alphabet size of the generated corpus."""
        return self.corpus().config.num_classes

    def features(self, partition: str) -> Dict[int, FrameSequence]:
        return load_features(self.workspace.require(self.workspace.features_file(partition), "extract"))

    def training_lines(self, partition: str = "train") -> List[TrainingLine]:
        """Feature frames paired with validated transcripts."""
        num_classes = self.num_classes
        sequences = self.features(partition)
        lines = []
        for line in self.corpus_lines(partition):
            ensure(validate_transcript(line.transcript, num_classes), DataMismatchError, f"line {line.line_id}")
            lines.append(TrainingLine(line.line_id, sequences[line.line_id].frames, line.transcript))
        return lines
