"""
GMM-HMM Service

Left-to-right character HMMs with diagonal Gaussian emissions: flat
start, exact Baum-Welch and Viterbi re-estimation, forced alignment,
positioned-state statistics and mixture splitting.

Emissions are indexed through a StateTyingMap, so the same code trains
both the untied system and the tied (parsimonious) one.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.models.hmm import (
    Alignment,
    CharacterHMM,
    GaussianEmission,
    GaussianNodeStats,
    PositionedState,
)
from src.models.tying import StateTyingMap
from src.utils.errors import DataMismatchError, EmptyInputError, InfeasibleAlignmentError
from src.utils.helpers import chunk_list, parallel_map

logger = logging.getLogger(__name__)

DEFAULT_VARIANCE_FLOOR = 1e-4


@dataclass
class TrainingLine:
    """Feature frames of one line with its transcript."""
    line_id: int
    frames: np.ndarray
    transcript: List[int]


@dataclass
class HmmSet:
    """Character HMMs plus the (possibly tied) emission inventory."""
    hmms: List[CharacterHMM]
    emissions: List[GaussianEmission]
    tying: StateTyingMap
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self) -> None:
        if self.tying.count != len(self.emissions):
            raise DataMismatchError(
                f"Tying map has {self.tying.count} tied states but {len(self.emissions)} emissions"
            )

    @property
    def num_classes(self) -> int:
        return len(self.hmms)

    @property
    def num_states(self) -> int:
        return self.hmms[0].num_states

    @property
    def dim(self) -> int:
        return self.emissions[0].dim

    def emission_scores(self, frames: np.ndarray, ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """(T, E) log densities for all emissions, or the listed ones."""
        ids = range(len(self.emissions)) if ids is None else ids
        return np.stack([self.emissions[e].log_density(frames) for e in ids], axis=1)


@dataclass
class Cascade:
    """Transcript HMMs concatenated into one left-to-right chain."""
    emission_ids: np.ndarray
    log_loop: np.ndarray
    log_next: np.ndarray
    labels: List[PositionedState]
    char_index: np.ndarray

    @property
    def num_states(self) -> int:
        return int(self.emission_ids.shape[0])


@dataclass
class EmAccumulator:
    """Mergeable E-step sums."""
    occupancy: List[np.ndarray]
    first: List[np.ndarray]
    second: List[np.ndarray]
    loop_counts: np.ndarray
    next_counts: np.ndarray
    log_likelihood: float = 0.0
    lines: int = 0

    @classmethod
    def empty(cls, model: HmmSet) -> "EmAccumulator":
        return cls(
            occupancy=[np.zeros(e.num_components) for e in model.emissions],
            first=[np.zeros_like(e.means) for e in model.emissions],
            second=[np.zeros_like(e.means) for e in model.emissions],
            loop_counts=np.zeros((model.num_classes, model.num_states)),
            next_counts=np.zeros((model.num_classes, model.num_states)),
        )

    def merge(self, other: "EmAccumulator") -> "EmAccumulator":
        for mine, theirs in (
            (self.occupancy, other.occupancy),
            (self.first, other.first),
            (self.second, other.second),
        ):
            for i, value in enumerate(theirs):
                mine[i] = mine[i] + value
        self.loop_counts += other.loop_counts
        self.next_counts += other.next_counts
        self.log_likelihood += other.log_likelihood
        self.lines += other.lines
        return self


@dataclass
class IterationReport:
    """Outcome of one re-estimation step."""
    log_likelihood: float
    lines: int
    zero_occupancy: List[int] = field(default_factory=list)


def build_cascade(model: HmmSet, transcript: Sequence[int]) -> Cascade:
    """Concatenate the HMMs of a transcript; the last state's forward move is its exit."""
    if not transcript:
        raise EmptyInputError("Transcript is empty")
    emission_ids, loops, nexts, labels, chars = [], [], [], [], []
    for index, class_id in enumerate(transcript):
        hmm = model.hmms[class_id]
        emission_ids.append(model.tying.ids[class_id])
        loops.append(hmm.log_loop)
        nexts.append(hmm.log_next)
        labels.extend(PositionedState(class_id, s) for s in range(hmm.num_states))
        chars.extend([index] * hmm.num_states)
    return Cascade(
        emission_ids=np.concatenate(emission_ids),
        log_loop=np.concatenate(loops),
        log_next=np.concatenate(nexts),
        labels=labels,
        char_index=np.asarray(chars),
    )


def _state_scores(model: HmmSet, frames: np.ndarray, cascade: Cascade) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Per-state emission log densities (T, N) and per-emission component terms."""
    components = {}
    for e in np.unique(cascade.emission_ids):
        components[int(e)] = model.emissions[int(e)].component_log_densities(frames)
    per_emission = {e: np.logaddexp.reduce(c, axis=1) for e, c in components.items()}
    scores = np.stack([per_emission[int(e)] for e in cascade.emission_ids], axis=1)
    return scores, components


def forward_backward(scores: np.ndarray, log_loop: np.ndarray, log_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """
    Log-domain forward-backward over a left-to-right chain.

    The path must start in state 0 and leave state N-1 through its exit
    after the last frame.

    Returns:
        (gamma (T, N), expected self-loop counts (N,), expected forward
        counts (N,), total log-likelihood).
    """
    num_frames, num_states = scores.shape
    if num_frames < num_states:
        raise InfeasibleAlignmentError(num_frames, num_states)
    alpha = np.full((num_frames, num_states), -np.inf)
    alpha[0, 0] = scores[0, 0]
    move = np.full(num_states, -np.inf)
    for t in range(1, num_frames):
        move[1:] = alpha[t - 1, :-1] + log_next[:-1]
        alpha[t] = np.logaddexp(alpha[t - 1] + log_loop, move) + scores[t]
    total = float(alpha[-1, -1] + log_next[-1])

    beta = np.full((num_frames, num_states), -np.inf)
    beta[-1, -1] = log_next[-1]
    ahead = np.full(num_states, -np.inf)
    for t in range(num_frames - 2, -1, -1):
        emit = scores[t + 1] + beta[t + 1]
        ahead[:-1] = log_next[:-1] + emit[1:]
        beta[t] = np.logaddexp(log_loop + emit, ahead)

    gamma = np.exp(alpha + beta - total)
    emit_next = scores[1:] + beta[1:]
    loop_counts = np.exp(alpha[:-1] + log_loop + emit_next - total).sum(axis=0)
    next_counts = np.zeros(num_states)
    next_counts[:-1] = np.exp(alpha[:-1, :-1] + log_next[:-1] + emit_next[:, 1:] - total).sum(axis=0)
    next_counts[-1] = gamma[-1, -1]
    return gamma, loop_counts, next_counts, total


def _viterbi(scores: np.ndarray, log_loop: np.ndarray, log_next: np.ndarray) -> Tuple[np.ndarray, float]:
    """Best monotone state path; ties keep the self-loop."""
    num_frames, num_states = scores.shape
    if num_frames < num_states:
        raise InfeasibleAlignmentError(num_frames, num_states)
    delta = np.full(num_states, -np.inf)
    delta[0] = scores[0, 0]
    moved = np.zeros((num_frames, num_states), dtype=bool)
    move = np.full(num_states, -np.inf)
    for t in range(1, num_frames):
        stay = delta + log_loop
        move[1:] = delta[:-1] + log_next[:-1]
        moved[t] = move > stay
        delta = np.where(moved[t], move, stay) + scores[t]
    best = float(delta[-1] + log_next[-1])
    path = np.zeros(num_frames, dtype=np.int64)
    state = num_states - 1
    for t in range(num_frames - 1, -1, -1):
        path[t] = state
        if t > 0 and moved[t, state]:
            state -= 1
    return path, best


def forced_align(model: HmmSet, frames: np.ndarray, transcript: Sequence[int], line_id: int = 0) -> Alignment:
    """
    Viterbi-optimal state labels constrained to a transcript.

    Args:
        model: Trained HMM set.
        frames: (T, D) feature vectors.
        transcript: Non-empty class sequence.
        line_id: Identifier stored on the alignment.

    Returns:
        The alignment with per-frame emission log-likelihoods and the path score.

    Raises:
        InfeasibleAlignmentError: If there are fewer frames than states.
    """
    cascade = build_cascade(model, transcript)
    if len(frames) < cascade.num_states:
        raise InfeasibleAlignmentError(len(frames), cascade.num_states)
    scores, _ = _state_scores(model, frames, cascade)
    path, best = _viterbi(scores, cascade.log_loop, cascade.log_next)
    return Alignment(
        line_id=line_id,
        labels=[cascade.labels[j] for j in path],
        log_likelihoods=scores[np.arange(len(path)), path],
        char_index=[int(cascade.char_index[j]) for j in path],
        score=best,
    )


def _accumulate_line(model: HmmSet, line: TrainingLine, acc: EmAccumulator, viterbi: bool) -> None:
    cascade = build_cascade(model, line.transcript)
    scores, components = _state_scores(model, line.frames, cascade)
    if viterbi:
        path, total = _viterbi(scores, cascade.log_loop, cascade.log_next)
        gamma = np.zeros_like(scores)
        gamma[np.arange(len(path)), path] = 1.0
        steps = np.diff(path)
        loop_counts = np.bincount(path[:-1][steps == 0], minlength=cascade.num_states).astype(float)
        next_counts = np.bincount(path[:-1][steps == 1], minlength=cascade.num_states).astype(float)
        next_counts[-1] += 1.0
    else:
        gamma, loop_counts, next_counts, total = forward_backward(
            scores, cascade.log_loop, cascade.log_next
        )

    x = line.frames
    x2 = x * x
    for e, comp in components.items():
        occ = gamma[:, cascade.emission_ids == e].sum(axis=1)
        resp = np.exp(comp - np.logaddexp.reduce(comp, axis=1, keepdims=True))
        weights = resp * occ[:, None]
        acc.occupancy[e] += weights.sum(axis=0)
        acc.first[e] += weights.T @ x
        acc.second[e] += weights.T @ x2
    for j, label in enumerate(cascade.labels):
        acc.loop_counts[label.class_id, label.position] += loop_counts[j]
        acc.next_counts[label.class_id, label.position] += next_counts[j]
    acc.log_likelihood += total
    acc.lines += 1


def _accumulate_chunk(lines: Sequence[TrainingLine], model: HmmSet, viterbi: bool) -> EmAccumulator:
    acc = EmAccumulator.empty(model)
    for line in lines:
        _accumulate_line(model, line, acc, viterbi)
    return acc


def usable_lines(model: HmmSet, lines: Sequence[TrainingLine]) -> List[TrainingLine]:
    """Drop lines too short for their transcript's state chain, with a warning."""
    kept = []
    for line in lines:
        required = sum(model.hmms[c].num_states for c in line.transcript)
        if len(line.frames) < required:
            logger.warning("Skipping line %d: %d frames < %d states", line.line_id, len(line.frames), required)
            continue
        kept.append(line)
    return kept


def accumulate(model: HmmSet, lines: Sequence[TrainingLine], viterbi: bool = False, jobs: int = 1) -> EmAccumulator:
    """E-step over all lines with per-worker accumulators merged in order."""
    chunks = chunk_list(list(lines), max(1, -(-len(lines) // max(jobs, 1))))
    parts = parallel_map(partial(_accumulate_chunk, model=model, viterbi=viterbi), chunks, jobs)
    total = EmAccumulator.empty(model)
    for part in parts:
        total.merge(part)
    return total


def maximize(model: HmmSet, acc: EmAccumulator) -> Tuple[HmmSet, List[int]]:
    """
    M-step with variance flooring.

    Emissions without occupancy keep their previous parameters and are
    reported; so do mixture components and transition rows without counts.
    """
    floor = model.variance_floor
    emissions = []
    zero = []
    for e, old in enumerate(model.emissions):
        occ = acc.occupancy[e]
        total = occ.sum()
        if total <= 0:
            zero.append(e)
            emissions.append(old)
            continue
        alive = occ > 0
        safe = np.where(alive, occ, 1.0)[:, None]
        means = np.where(alive[:, None], acc.first[e] / safe, old.means)
        variances = np.where(
            alive[:, None],
            np.maximum(acc.second[e] / safe - means * means, floor),
            old.variances,
        )
        emissions.append(GaussianEmission(weights=occ / total, means=means, variances=variances))
    if zero:
        logger.warning("%d emissions had zero occupancy and kept their parameters", len(zero))

    hmms = []
    for c, old in enumerate(model.hmms):
        trans = old.transitions.copy()
        for s in range(old.num_states):
            denom = acc.loop_counts[c, s] + acc.next_counts[c, s]
            if denom > 0:
                trans[s, s] = acc.loop_counts[c, s] / denom
                trans[s, s + 1] = acc.next_counts[c, s] / denom
        hmms.append(replace(old, transitions=trans))
    return replace(model, hmms=hmms, emissions=emissions), zero


def baum_welch_iterate(model: HmmSet, lines: Sequence[TrainingLine], jobs: int = 1) -> Tuple[HmmSet, IterationReport]:
    """
    One exact Baum-Welch iteration.

    The reported log-likelihood is that of the input model, so successive
    calls return a non-decreasing sequence.

    Raises:
        EmptyInputError: If no line is long enough to be used.
    """
    lines = usable_lines(model, lines)
    if not lines:
        raise EmptyInputError("No usable training line")
    acc = accumulate(model, lines, viterbi=False, jobs=jobs)
    updated, zero = maximize(model, acc)
    logger.info("Baum-Welch: log-likelihood %.4f over %d lines", acc.log_likelihood, acc.lines)
    return updated, IterationReport(acc.log_likelihood, acc.lines, zero)


def viterbi_iterate(model: HmmSet, lines: Sequence[TrainingLine], jobs: int = 1) -> Tuple[HmmSet, IterationReport]:
    """One Viterbi (hard-count) re-estimation; reports the best-path score total."""
    lines = usable_lines(model, lines)
    if not lines:
        raise EmptyInputError("No usable training line")
    acc = accumulate(model, lines, viterbi=True, jobs=jobs)
    updated, zero = maximize(model, acc)
    logger.info("Viterbi training: path score %.4f over %d lines", acc.log_likelihood, acc.lines)
    return updated, IterationReport(acc.log_likelihood, acc.lines, zero)


def uniform_segmentation(num_frames: int, num_states: int) -> np.ndarray:
    """State index of every frame under a uniform split (sizes differ by at most one)."""
    bounds = (np.arange(num_states + 1) * num_frames) // num_states
    return np.repeat(np.arange(num_states), np.diff(bounds))


def flat_start(
    lines: Sequence[TrainingLine],
    num_classes: int,
    num_states: int = 5,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> Tuple[HmmSet, List[Alignment]]:
    """
    Initialise untied single-Gaussian HMMs from uniform segmentations.

    Positioned states that receive no frames start from the global
    statistics. Self-loop probabilities come from the segment durations
    with add-one smoothing.

    Returns:
        The model set and the uniform alignments of the used lines.

    Raises:
        EmptyInputError: If no line is long enough.
    """
    kept = []
    for line in lines:
        required = num_states * len(line.transcript)
        if len(line.frames) < required:
            logger.warning("Skipping line %d: %d frames < %d states", line.line_id, len(line.frames), required)
            continue
        kept.append(line)
    if not kept:
        raise EmptyInputError("No usable training line for flat start")
    dim = kept[0].frames.shape[1]

    stats = {}
    frames_in = np.zeros((num_classes, num_states))
    visits = np.zeros((num_classes, num_states))
    alignments = []
    for line in kept:
        chain = uniform_segmentation(len(line.frames), num_states * len(line.transcript))
        labels = [
            PositionedState(int(line.transcript[j // num_states]), int(j % num_states)) for j in chain
        ]
        for j in np.unique(chain):
            state = PositionedState(int(line.transcript[j // num_states]), int(j % num_states))
            block = line.frames[chain == j]
            stats[state] = stats.get(state, GaussianNodeStats.zeros(dim)) + GaussianNodeStats.from_frames(block)
            frames_in[state] += len(block)
            visits[state] += 1
        alignments.append(Alignment(
            line_id=line.line_id,
            labels=labels,
            log_likelihoods=np.zeros(len(labels)),
            char_index=[int(j // num_states) for j in chain],
        ))

    global_stats = GaussianNodeStats.from_frames(np.concatenate([line.frames for line in kept]))
    emissions = []
    for c in range(num_classes):
        for s in range(num_states):
            node = stats.get(PositionedState(c, s), global_stats)
            emissions.append(node.to_emission(variance_floor))

    hmms = []
    for c in range(num_classes):
        loop = (frames_in[c] - visits[c] + 1.0) / (frames_in[c] + 2.0)
        trans = np.zeros((num_states, num_states + 1))
        for s in range(num_states):
            trans[s, s] = loop[s]
            trans[s, s + 1] = 1.0 - loop[s]
        hmms.append(CharacterHMM(class_id=c, transitions=trans))
    model = HmmSet(hmms, emissions, StateTyingMap.untied(num_classes, num_states), variance_floor)
    logger.info("Flat start: %d lines, %d classes x %d states", len(kept), num_classes, num_states)
    return model, alignments


def accumulate_positioned_stats(
    model: HmmSet,
    lines: Sequence[TrainingLine],
    alignments: Optional[Sequence[Alignment]] = None,
) -> Dict[PositionedState, GaussianNodeStats]:
    """
    Pool occupancy, first and second order sums per positioned state.

    With alignments the counts are hard; otherwise forward-backward
    posteriors of the model are used.
    """
    dim = lines[0].frames.shape[1] if lines else model.dim
    stats: Dict[PositionedState, GaussianNodeStats] = {}
    by_id = {a.line_id: a for a in alignments} if alignments is not None else None
    for line in lines:
        if by_id is not None:
            alignment = by_id.get(line.line_id)
            if alignment is None:
                continue
            keys = sorted(set(alignment.labels))
            label_array = np.array([(l.class_id, l.position) for l in alignment.labels])
            for key in keys:
                mask = (label_array[:, 0] == key.class_id) & (label_array[:, 1] == key.position)
                node = GaussianNodeStats.from_frames(line.frames[mask])
                stats[key] = stats.get(key, GaussianNodeStats.zeros(dim)) + node
        else:
            if len(line.frames) < sum(model.hmms[c].num_states for c in line.transcript):
                continue
            cascade = build_cascade(model, line.transcript)
            scores, _ = _state_scores(model, line.frames, cascade)
            gamma, _, _, _ = forward_backward(scores, cascade.log_loop, cascade.log_next)
            for j, key in enumerate(cascade.labels):
                node = GaussianNodeStats.from_frames(line.frames, gamma[:, j])
                stats[key] = stats.get(key, GaussianNodeStats.zeros(dim)) + node
    return stats


def split_mixtures(model: HmmSet, factor: int = 2, perturbation: float = 0.2) -> HmmSet:
    """
    Split every Gaussian component into ``factor`` copies.

    Copies are offset by up to +-perturbation standard deviations along
    each dimension and share the original weight equally.
    """
    if factor <= 1:
        return model
    offsets = np.linspace(-perturbation, perturbation, factor)
    emissions = []
    for emission in model.emissions:
        sigma = np.sqrt(emission.variances)
        means = np.concatenate([emission.means + o * sigma for o in offsets])
        variances = np.concatenate([emission.variances] * factor)
        weights = np.concatenate([emission.weights / factor] * factor)
        order = np.arange(len(weights)).reshape(factor, -1).T.ravel()
        emissions.append(GaussianEmission(weights[order], means[order], variances[order]))
    return replace(model, emissions=emissions)


def tie_model(model: HmmSet, tying: StateTyingMap, stats: Dict[PositionedState, GaussianNodeStats]) -> HmmSet:
    """
    Build the tied system: one single-Gaussian emission per tied state
    from the pooled statistics of its members; transitions are kept.
    """
    dim = model.dim
    emissions = []
    for tied_id, members in sorted(tying.members().items()):
        pooled = GaussianNodeStats.zeros(dim)
        for state in members:
            pooled = pooled + stats.get(state, GaussianNodeStats.zeros(dim))
        if pooled.occupancy <= 0:
            source = model.emissions[model.tying.tied_id(members[0])]
            emissions.append(GaussianEmission(source.weights.copy(), source.means.copy(), source.variances.copy()))
        else:
            emissions.append(pooled.to_emission(model.variance_floor))
    return HmmSet(model.hmms, emissions, tying, model.variance_floor)


def train_schedule(
    lines: Sequence[TrainingLine],
    num_classes: int,
    num_states: int = 5,
    first_iterations: int = 4,
    second_iterations: int = 4,
    mixtures: int = 1,
    training: str = "baum_welch",
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    jobs: int = 1,
) -> Tuple[HmmSet, List[Alignment], List[float]]:
    """
    Default recipe: flat start, re-estimate, realign, optionally split
    mixtures, re-estimate again.

    Returns:
        Final model, final forced alignments and the log-likelihood trace.
    """
    model, _ = flat_start(lines, num_classes, num_states, variance_floor)
    step = viterbi_iterate if training == "viterbi" else baum_welch_iterate
    history = []
    for _ in range(first_iterations):
        model, report = step(model, lines, jobs)
        history.append(report.log_likelihood)
    alignments = align_lines(model, lines)
    if mixtures > 1:
        model = split_mixtures(model, mixtures)
    for _ in range(second_iterations):
        model, report = step(model, lines, jobs)
        history.append(report.log_likelihood)
    alignments = align_lines(model, lines)
    return model, alignments, history


def align_lines(model: HmmSet, lines: Sequence[TrainingLine]) -> List[Alignment]:
    """Forced alignment of every usable line."""
    return [
        forced_align(model, line.frames, line.transcript, line.line_id)
        for line in usable_lines(model, lines)
    ]
