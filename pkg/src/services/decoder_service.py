"""
Decoder Service

Frame-synchronous Viterbi beam search over cascaded character HMMs.

A token is keyed by (class, state position, LM history). Within a
character it follows the self-loop or the forward transition; leaving
the last state it may enter any class, paying kappa * log p(c | history)
plus the insertion penalty rho. Emission scores come from a scorer: the
Gaussian log densities of a GMM-HMM or the classifier's scaled
likelihoods.
"""
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models.classifier import StatePrior
from src.models.decoding import DecodeConfig, DecodeResult, Hypothesis
from src.models.features import FrameSequence
from src.models.hmm import CharacterHMM
from src.models.tying import StateTyingMap
from src.services.classifier_service import AdaptiveClassifier, frame_log_posteriors
from src.services.hmm_service import HmmSet
from src.services.lm_service import BOS, EOS, HybridLm, NGramModel, hybrid_score
from src.utils.errors import ConfigurationError, DataMismatchError, EmptyInputError, InfeasibleAlignmentError
from src.utils.helpers import parallel_map

logger = logging.getLogger(__name__)

START = -1

Key = Tuple[int, int, Tuple[int, ...]]
Value = Tuple[float, float, float, int]


class GmmScorer:
    """Gaussian log densities of every tied state."""

    def __init__(self, model: HmmSet):
        self.model = model

    @property
    def num_outputs(self) -> int:
        return len(self.model.emissions)

    def __call__(self, sequence: FrameSequence) -> np.ndarray:
        return self.model.emission_scores(sequence.frames)


class ClassifierScorer:
    """Scaled likelihoods log p(s|x) - log p(s) from the frame classifier."""

    def __init__(self, model: AdaptiveClassifier, prior: StatePrior, code: Optional[np.ndarray] = None):
        if len(prior) != model.num_outputs:
            raise DataMismatchError(f"Prior has {len(prior)} states, classifier {model.num_outputs}")
        self.model = model
        self.prior = prior
        self.code = code

    @property
    def num_outputs(self) -> int:
        return self.model.num_outputs

    def with_code(self, code: Optional[np.ndarray]) -> "ClassifierScorer":
        return ClassifierScorer(self.model, self.prior, code)

    def __call__(self, sequence: FrameSequence) -> np.ndarray:
        return frame_log_posteriors(self.model, sequence.patches, self.code) - self.prior.log_probs[None, :]


Scorer = Union[GmmScorer, ClassifierScorer]


class _LmTable:
    """N-gram lookups over integer histories (START marks line start), cached per history."""

    def __init__(self, lm: NGramModel, num_classes: int):
        self.lm = lm
        self.num_classes = num_classes
        self.cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def initial(self) -> Tuple[int, ...]:
        return (START,) if self.lm.order > 1 else ()

    def extend(self, history: Tuple[int, ...], class_id: int) -> Tuple[int, ...]:
        if self.lm.order <= 1:
            return ()
        return (history + (class_id,))[-(self.lm.order - 1):]

    def row(self, history: Tuple[int, ...]) -> np.ndarray:
        """Log probabilities of every class, then the end marker."""
        cached = self.cache.get(history)
        if cached is None:
            context = tuple(BOS if t == START else t for t in history)
            tokens = list(range(self.num_classes)) + [EOS]
            cached = np.array([self.lm.log_prob(token, context) for token in tokens])
            self.cache[history] = cached
        return cached


@dataclass
class _Path:
    transcript: Tuple[int, ...]
    keys: List[Key]
    entries: List[int]
    value: Value


@dataclass
class _Search:
    """Per-frame backpointers: key -> (previous key, entered a character)."""
    backpointers: List[Dict[Key, Tuple[Optional[Key], bool]]] = field(default_factory=list)

    def traceback(self, key: Key) -> Tuple[List[Key], List[int]]:
        keys, entries = [], []
        for t in range(len(self.backpointers) - 1, -1, -1):
            keys.append(key)
            previous, entered = self.backpointers[t][key]
            if entered:
                entries.append(t)
            if previous is None:
                break
            key = previous
        keys.reverse()
        entries.reverse()
        return keys, entries


def _resolve_lm(lm: Optional[Union[NGramModel, HybridLm]], config: DecodeConfig) -> Optional[NGramModel]:
    if config.lm_mode == "none" or config.lm_scale == 0.0:
        return None
    if lm is None:
        raise ConfigurationError(f"LM mode '{config.lm_mode}' needs a language model")
    if config.lm_mode == "hybrid" and not isinstance(lm, HybridLm):
        raise ConfigurationError("LM mode 'hybrid' needs both an N-gram and a recurrent LM")
    return lm.ngram if isinstance(lm, HybridLm) else lm


def _relax(tokens: Dict[Key, Value], back: Dict, key: Key, value: Value, source: Optional[Key], entered: bool) -> None:
    current = tokens.get(key)
    if current is None or value[0] > current[0]:
        tokens[key] = value
        back[key] = (source, entered)


def _prune(tokens: Dict[Key, Value], back: Dict, beam: Optional[int]) -> Tuple[Dict[Key, Value], Dict]:
    if beam is None or len(tokens) <= beam:
        return tokens, back
    kept = sorted(tokens.items(), key=lambda kv: (-kv[1][0], kv[0]))[:beam]
    return dict(kept), {key: back[key] for key, _ in kept}


def _search(
    scores: np.ndarray,
    hmms: Sequence[CharacterHMM],
    tying: StateTyingMap,
    table: Optional[_LmTable],
    config: DecodeConfig,
) -> Tuple[List[_Path], _Search]:
    num_classes, num_states = tying.num_classes, tying.num_states
    log_loop = np.array([h.log_loop for h in hmms])
    log_next = np.array([h.log_next for h in hmms])
    ids = tying.ids
    kappa = config.lm_scale if table is not None else 0.0
    rho = config.insertion_penalty
    search = _Search()

    def enter(tokens, back, t, history, base: Value, source: Optional[Key]) -> None:
        lm_row = table.row(history) if table is not None else None
        for c in range(num_classes):
            lp = lm_row[c] if lm_row is not None else 0.0
            emission = scores[t, ids[c, 0]]
            key = (c, 0, table.extend(history, c) if table is not None else ())
            value = (
                base[0] + kappa * lp + rho + emission,
                base[1] + emission,
                base[2] + lp,
                base[3] + 1,
            )
            _relax(tokens, back, key, value, source, True)

    tokens: Dict[Key, Value] = {}
    back: Dict = {}
    enter(tokens, back, 0, table.initial() if table is not None else (), (0.0, 0.0, 0.0, 0), None)
    tokens, back = _prune(tokens, back, config.beam)
    search.backpointers.append(back)

    for t in range(1, len(scores)):
        new_tokens: Dict[Key, Value] = {}
        new_back: Dict = {}
        exits: Dict[Tuple[int, ...], Tuple[Value, Key]] = {}
        for key in sorted(tokens):
            c, s, history = key
            total, acoustic, lm_sum, chars = tokens[key]
            loop = log_loop[c, s]
            if loop > -np.inf:
                emission = scores[t, ids[c, s]]
                _relax(new_tokens, new_back, key,
                       (total + loop + emission, acoustic + loop + emission, lm_sum, chars), key, False)
            forward = log_next[c, s]
            if forward == -np.inf:
                continue
            if s < num_states - 1:
                emission = scores[t, ids[c, s + 1]]
                _relax(new_tokens, new_back, (c, s + 1, history),
                       (total + forward + emission, acoustic + forward + emission, lm_sum, chars), key, False)
            else:
                candidate = (total + forward, acoustic + forward, lm_sum, chars)
                best = exits.get(history)
                if best is None or candidate[0] > best[0][0]:
                    exits[history] = (candidate, key)
        for history in sorted(exits):
            base, source = exits[history]
            enter(new_tokens, new_back, t, history, base, source)
        tokens, back = _prune(new_tokens, new_back, config.beam)
        search.backpointers.append(back)

    finals = []
    for key in sorted(tokens):
        c, s, history = key
        if s != num_states - 1 or log_next[c, s] == -np.inf:
            continue
        total, acoustic, lm_sum, chars = tokens[key]
        lp = table.row(history)[-1] if table is not None else 0.0
        value = (total + log_next[c, s] + kappa * lp, acoustic + log_next[c, s], lm_sum + lp, chars)
        finals.append((key, value))
    finals.sort(key=lambda kv: (-kv[1][0], kv[0]))

    paths: List[_Path] = []
    seen = set()
    for key, value in finals:
        keys, entries = search.traceback(key)
        transcript = tuple(keys[t][0] for t in entries)
        if transcript in seen:
            continue
        seen.add(transcript)
        paths.append(_Path(transcript, keys, entries, value))
        if len(paths) >= config.nbest:
            break
    return paths, search


def _result(path: _Path, score: float, tying: StateTyingMap, line_id: int, nbest: List[Hypothesis],
            frame_shift: int, window: int) -> DecodeResult:
    positions = np.array([(k[0], k[1]) for k in path.keys], dtype=np.int64)
    alignment = tying.ids[positions[:, 0], positions[:, 1]]
    ends = path.entries[1:] + [len(path.keys)]
    char_frames = [(start, end) for start, end in zip(path.entries, ends)]
    boundaries = [(start * frame_shift, (end - 1) * frame_shift + window) for start, end in char_frames]
    return DecodeResult(
        line_id=line_id,
        transcript=list(path.transcript),
        score=score,
        alignment=alignment,
        positions=positions,
        char_frames=char_frames,
        boundaries=boundaries,
        nbest=nbest,
    )


def decode_scores(
    scores: np.ndarray,
    hmms: Sequence[CharacterHMM],
    tying: StateTyingMap,
    lm: Optional[Union[NGramModel, HybridLm]] = None,
    config: Optional[DecodeConfig] = None,
    line_id: int = 0,
    frame_shift: int = 1,
    window: int = 1,
) -> DecodeResult:
    """
    Decode a (T, E) matrix of tied-state emission scores.

    With an unlimited beam and no LM the result is the exhaustive best
    path. Ties keep the first candidate reached: sources are visited in
    (class, position, history) order, transitions as self-loop, forward,
    exit, and entries in class order.

    Args:
        scores: Emission log scores per frame and tied state.
        hmms: Character HMMs (transitions).
        tying: Map from positioned states to score columns.
        lm: N-gram model, or a HybridLm for hybrid rescoring.
        config: Beam, LM scale, insertion penalty, LM mode, n-best size.
        line_id: Identifier stored on the result.
        frame_shift: Pixels between frames, for boundary columns.
        window: Window width in pixels, for boundary columns.

    Raises:
        EmptyInputError: If there are no frames.
        DataMismatchError: If the score width differs from the tied-state count.
        InfeasibleAlignmentError: If no character fits into the frames.
    """
    config = config or DecodeConfig()
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or len(scores) == 0:
        raise EmptyInputError(f"Line {line_id} has no frames to decode")
    if scores.shape[1] != tying.count:
        raise DataMismatchError(f"Scorer gives {scores.shape[1]} outputs for {tying.count} tied states")
    if len(hmms) != tying.num_classes:
        raise DataMismatchError(f"{len(hmms)} HMMs for {tying.num_classes} classes in the tying map")

    ngram = _resolve_lm(lm, config)
    table = _LmTable(ngram, tying.num_classes) if ngram is not None else None
    paths, _ = _search(scores, hmms, tying, table, config)
    if not paths:
        raise InfeasibleAlignmentError(len(scores), tying.num_states)

    hypotheses = [Hypothesis(p.transcript, p.value[1], p.value[2]) for p in paths]
    best, score = paths[0], paths[0].value[0]
    if config.lm_mode == "hybrid" and table is not None:
        hypotheses = rescore_nbest(hypotheses, lm, config.lm_scale, config.insertion_penalty)
        by_transcript = {p.transcript: p for p in paths}
        best = by_transcript[hypotheses[0].transcript]
        score = hypotheses[0].total(config.lm_scale, config.insertion_penalty)
    return _result(best, score, tying, line_id, hypotheses, frame_shift, window)


def decode(
    sequence: FrameSequence,
    hmms: Sequence[CharacterHMM],
    tying: StateTyingMap,
    scorer: Scorer,
    lm: Optional[Union[NGramModel, HybridLm]] = None,
    config: Optional[DecodeConfig] = None,
) -> DecodeResult:
    """
    Recognize one line.

    Raises:
        DataMismatchError: If the scorer and the tying map disagree.
        EmptyInputError: If the line has no frames.
    """
    if scorer.num_outputs != tying.count:
        raise DataMismatchError(f"Scorer has {scorer.num_outputs} outputs, tying map {tying.count} states")
    if len(sequence) == 0:
        raise EmptyInputError(f"Line {sequence.line_id} has no frames to decode")
    return decode_scores(
        scorer(sequence), hmms, tying, lm, config,
        line_id=sequence.line_id, frame_shift=sequence.frame_shift, window=sequence.window,
    )


def decode_lines(
    sequences: Sequence[FrameSequence],
    hmms: Sequence[CharacterHMM],
    tying: StateTyingMap,
    scorer: Scorer,
    lm: Optional[Union[NGramModel, HybridLm]] = None,
    config: Optional[DecodeConfig] = None,
    jobs: int = 1,
) -> List[DecodeResult]:
    """Decode lines independently, in parallel when ``jobs`` > 1."""
    work = partial(decode, hmms=hmms, tying=tying, scorer=scorer, lm=lm, config=config)
    results = parallel_map(work, sequences, jobs)
    logger.info("Decoded %d lines", len(results))
    return results


def rescore_nbest(
    hypotheses: Sequence[Hypothesis],
    hybrid: Union[HybridLm, NGramModel],
    lm_scale: float = 1.0,
    insertion_penalty: float = 0.0,
) -> List[Hypothesis]:
    """
    Re-rank hypotheses by acoustic + lm_scale * LM + insertion_penalty * length.

    The LM score of every hypothesis is replaced by the hybrid (or N-gram)
    log probability; the sort is stable.
    """
    rescored = []
    for hypothesis in hypotheses:
        if isinstance(hybrid, HybridLm):
            lm_score = hybrid_score(hybrid, hypothesis.transcript)
        else:
            lm_score = hybrid.sentence_log_prob(hypothesis.transcript)
        rescored.append(Hypothesis(hypothesis.transcript, hypothesis.acoustic, lm_score))
    return sorted(rescored, key=lambda h: -h.total(lm_scale, insertion_penalty))
