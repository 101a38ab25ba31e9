"""
Pipeline Service

Multi-pass recognition of unseen writers: decode writer-independently,
then alternate writer-code estimation on the previous pass's frame
alignments with re-decoding.
"""
import logging
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models.classifier import LabeledLine, WriterProfile
from src.models.decoding import DecodeConfig, DecodeResult
from src.models.features import FrameSequence
from src.models.hmm import CharacterHMM
from src.models.report import CerReport, PassRecord
from src.models.tying import StateTyingMap
from src.services.classifier_service import adapt_unknown_writer
from src.services.decoder_service import ClassifierScorer, Scorer, decode
from src.services.evaluation_service import cer
from src.services.lm_service import HybridLm, NGramModel
from src.utils.errors import ConfigurationError
from src.utils.helpers import parallel_map, sub_rng

logger = logging.getLogger(__name__)


@dataclass
class RecognitionSystem:
    """Everything a decode needs, shared read-only across writers."""
    hmms: List[CharacterHMM]
    tying: StateTyingMap
    scorer: Scorer
    lm: Optional[Union[NGramModel, HybridLm]] = None
    config: DecodeConfig = field(default_factory=DecodeConfig)

    def decode(self, sequence: FrameSequence, code: Optional[np.ndarray] = None) -> DecodeResult:
        scorer = self.scorer.with_code(code) if isinstance(self.scorer, ClassifierScorer) else self.scorer
        return decode(sequence, self.hmms, self.tying, scorer, self.lm, self.config)

    @property
    def adaptable(self) -> bool:
        return isinstance(self.scorer, ClassifierScorer) and bool(self.scorer.model.adaptation_parameters())


@dataclass
class WriterLines:
    """An unseen writer's test lines, references and extra adaptation lines."""
    writer_id: int
    test: List[FrameSequence]
    references: Dict[int, List[int]]
    adapt: List[FrameSequence] = field(default_factory=list)


@dataclass
class AdaptationSchedule:
    epochs: int = 5
    learning_rate: float = 0.001
    seed: int = 0
    code_init_std: float = 0.01


@dataclass
class WriterOutcome:
    """
    Per-pass hypotheses and timing of one writer.

    ``seconds`` covers decoding the test lines; ``adaptation_seconds``
    covers code estimation and decoding the adaptation lines.
    """
    writer_id: int
    hypotheses: List[Dict[int, List[int]]] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    adaptation_seconds: List[float] = field(default_factory=list)
    profile: Optional[WriterProfile] = None


@dataclass
class MultipassResult:
    report: CerReport
    pass_reports: List[CerReport]
    outcomes: Dict[int, WriterOutcome]

    def hypotheses(self, pass_index: Optional[int] = None) -> Dict[int, List[int]]:
        """Hypotheses of a pass (1-based), the last one by default."""
        merged: Dict[int, List[int]] = {}
        for outcome in self.outcomes.values():
            merged.update(outcome.hypotheses[(pass_index or len(outcome.hypotheses)) - 1])
        return merged


def pseudo_labels(sequence: FrameSequence, result: DecodeResult, writer_id: int) -> LabeledLine:
    """Frame labels from a decode alignment."""
    return LabeledLine(sequence.line_id, writer_id, sequence.patches, np.asarray(result.alignment, dtype=np.int64))


def _writer_passes(
    writer: WriterLines,
    system: RecognitionSystem,
    passes: int,
    schedule: AdaptationSchedule,
) -> WriterOutcome:
    outcome = WriterOutcome(writer.writer_id)
    lines = writer.test + writer.adapt
    code: Optional[np.ndarray] = None
    previous: List[DecodeResult] = []
    for index in range(1, passes + 1):
        started = time.perf_counter()
        if index > 1:
            labeled = [pseudo_labels(seq, res, writer.writer_id) for seq, res in zip(lines, previous)]
            seed = int(sub_rng(schedule.seed, writer.writer_id).integers(2**31))
            outcome.profile = adapt_unknown_writer(
                system.scorer.model,
                labeled,
                writer_id=writer.writer_id,
                epochs=schedule.epochs,
                learning_rate=schedule.learning_rate,
                initial_code=code,
                seed=seed,
                code_init_std=schedule.code_init_std,
            )
            outcome.profile.pass_count = index - 1
            code = outcome.profile.code
        adapted = time.perf_counter()
        results = [system.decode(seq, code) for seq in writer.test]
        decoded = time.perf_counter()
        if index < passes:
            previous = results + [system.decode(seq, code) for seq in writer.adapt]
        outcome.seconds.append(decoded - adapted)
        outcome.adaptation_seconds.append(adapted - started + time.perf_counter() - decoded)
        outcome.hypotheses.append({r.line_id: r.transcript for r in results})
    return outcome


def multipass_recognize(
    writers: Sequence[WriterLines],
    system: RecognitionSystem,
    passes: int = 3,
    schedule: Optional[AdaptationSchedule] = None,
    jobs: int = 1,
) -> MultipassResult:
    """
    Recognize every writer's test lines in ``passes`` passes.

    Pass 1 decodes without a writer code. Pass k > 1 estimates the
    writer's code on the frame alignments of pass k-1 (test lines plus the
    writer's adaptation lines), starting from the previous code, then
    re-decodes. CER is measured on test lines only. Per-pass wall-clock
    time of the test-line decode is reported as a ratio to pass 1; code
    estimation and adaptation-line decoding are timed separately.

    Raises:
        ConfigurationError: If passes < 1, or passes > 1 on a system
            without adaptation layers.
    """
    if passes < 1:
        raise ConfigurationError("At least one decoding pass is required")
    if passes > 1 and not system.adaptable:
        raise ConfigurationError("Multi-pass decoding needs a classifier with adaptation layers")
    schedule = schedule or AdaptationSchedule()

    work = partial(_writer_passes, system=system, passes=passes, schedule=schedule)
    outcomes = {o.writer_id: o for o in parallel_map(work, writers, jobs)}

    references: Dict[int, List[int]] = {}
    owners: Dict[int, int] = {}
    for writer in writers:
        references.update(writer.references)
        owners.update({line_id: writer.writer_id for line_id in writer.references})

    pass_reports: List[CerReport] = []
    records: List[PassRecord] = []
    for index in range(1, passes + 1):
        hypotheses: Dict[int, List[int]] = {}
        for outcome in outcomes.values():
            hypotheses.update(outcome.hypotheses[index - 1])
        report = cer(references, hypotheses, owners)
        seconds = sum(o.seconds[index - 1] for o in outcomes.values())
        adaptation = sum(o.adaptation_seconds[index - 1] for o in outcomes.values())
        base = records[0].seconds if records else seconds
        records.append(PassRecord(index=index, CER=report.CER, seconds=seconds, adaptation_seconds=adaptation,
                                  time_ratio=seconds / base if base > 0 else 1.0))
        pass_reports.append(report)
        logger.info("Pass %d: CER %.4f (%.1fs)", index, report.CER, seconds)

    final = pass_reports[-1].model_copy(update={"passes": records})
    return MultipassResult(final, pass_reports, outcomes)


def group_writers(
    sequences: Dict[int, FrameSequence],
    test_lines: Sequence[Tuple[int, int, List[int]]],
    adapt_lines: Sequence[Tuple[int, int]] = (),
) -> List[WriterLines]:
    """
    Build per-writer inputs.

    Args:
        sequences: Frame sequences by line id.
        test_lines: (line_id, writer_id, transcript) of every test line.
        adapt_lines: (line_id, writer_id) of extra adaptation lines.
    """
    writers: Dict[int, WriterLines] = {}
    for line_id, writer_id, transcript in test_lines:
        entry = writers.setdefault(writer_id, WriterLines(writer_id, [], {}))
        entry.test.append(sequences[line_id])
        entry.references[line_id] = list(transcript)
    for line_id, writer_id in adapt_lines:
        if writer_id in writers and line_id in sequences:
            writers[writer_id].adapt.append(sequences[line_id])
    return [writers[w] for w in sorted(writers)]
