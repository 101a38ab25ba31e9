"""
State Tying Service

Parsimonious HMM construction: data-driven question generation by
recursive 2-means clustering of classes, top-down tying-tree growth by
likelihood gain, and bottom-up merging of sibling leaves to an exact
tied-state budget.
"""
import copy
import heapq
import logging
from dataclasses import dataclass
from functools import partial
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from src.models.hmm import LOG_2PI, GaussianNodeStats, PositionedState
from src.models.tying import Question, QuestionNode, StateTyingMap, TyingNode, TyingTree
from src.utils.errors import ConfigurationError, InvariantViolationError
from src.utils.helpers import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_VARIANCE_FLOOR = 1e-4
KMEANS_ITERATIONS = 20
REFINE_ITERATIONS = 200
# Largest node whose two-way splits are all enumerated.
EXHAUSTIVE_SPLIT_CLASSES = 12


def pooled_log_likelihood(stats: GaussianNodeStats, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> float:
    """
    Log-likelihood of the pooled frames under their own ML Gaussian.

    Depends only on the pooled occupancy and variance:
    -1/2 * gamma * (ln|Sigma| + D + D ln 2pi) for variances above the floor.
    A dimension whose variance s falls below the floor F contributes
    ln F + s/F instead of ln s + 1, which is the exact likelihood under
    the floored variance.

    Raises:
        InvariantViolationError: If the occupancy is negative.
    """
    if stats.occupancy < 0:
        raise InvariantViolationError(f"Negative occupancy {stats.occupancy}")
    if stats.occupancy == 0:
        return 0.0
    s = stats.variance
    per_dim = np.log(np.maximum(s, variance_floor)) + np.minimum(s, variance_floor) / variance_floor
    return float(-0.5 * stats.occupancy * (per_dim.sum() + stats.dim * LOG_2PI))


def _pool(classes: FrozenSet[int], stats: Dict[int, GaussianNodeStats], dim: int) -> GaussianNodeStats:
    total = GaussianNodeStats.zeros(dim)
    for c in sorted(classes):
        if c in stats:
            total = total + stats[c]
    return total


def split_gain(
    node_stats: GaussianNodeStats,
    question: Question,
    member_stats: Dict[int, GaussianNodeStats],
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> Optional[float]:
    """
    Likelihood increase L(S_l) + L(S_r) - L(S) of splitting a node.

    Args:
        node_stats: Pooled statistics of the node.
        question: States of member classes go left, the rest right.
        member_stats: Statistics of each class in the node.
        variance_floor: Variance floor used by the likelihood.

    Returns:
        The gain, or None when the question leaves a side empty.
    """
    classes = frozenset(member_stats)
    if not question.applies_to(classes):
        return None
    dim = node_stats.dim
    left = _pool(classes & question.members, member_stats, dim)
    right = _pool(classes - question.members, member_stats, dim)
    return (
        pooled_log_likelihood(left, variance_floor)
        + pooled_log_likelihood(right, variance_floor)
        - pooled_log_likelihood(node_stats, variance_floor)
    )


def _split_log_likelihoods(
    masks: np.ndarray,
    stats: Sequence[GaussianNodeStats],
    variance_floor: float,
) -> np.ndarray:
    """
    L(S_l) + L(S_r) for every row of ``masks`` (True marks the left side).

    Same closed form as pooled_log_likelihood, evaluated for all candidate
    partitions at once.
    """
    occupancy = np.array([s.occupancy for s in stats])
    first = np.stack([s.first for s in stats])
    second = np.stack([s.second for s in stats])
    dim = first.shape[1]
    total = np.zeros(len(masks))
    for side in (masks, ~masks):
        weights = side.astype(float)
        gamma = weights @ occupancy
        safe = np.where(gamma > 0, gamma, 1.0)[:, None]
        mean = (weights @ first) / safe
        var = np.maximum((weights @ second) / safe - mean * mean, 0.0)
        per_dim = np.log(np.maximum(var, variance_floor)) + np.minimum(var, variance_floor) / variance_floor
        total += np.where(gamma > 0, -0.5 * gamma * (per_dim.sum(axis=1) + dim * LOG_2PI), 0.0)
    return total


def _seed_assignment(means: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Occupancy-weighted 2-means on class means from the two most distant ones."""
    dist = np.sum((means[:, None, :] - means[None, :, :]) ** 2, axis=2)
    i, j = np.unravel_index(int(np.argmax(np.triu(dist, k=1))), dist.shape)
    centers = means[[i, j]]
    assign = np.array([idx != i for idx in range(len(means))])
    for _ in range(KMEANS_ITERATIONS):
        d = np.sum((means[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = d[:, 1] < d[:, 0]
        if new_assign.all() or not new_assign.any() or np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in (False, True):
            w = weights[assign == k]
            centers[int(k)] = w @ means[assign == k] / w.sum()
    return assign


def _two_means(
    classes: List[int],
    stats: Dict[int, GaussianNodeStats],
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> Tuple[List[int], List[int]]:
    """
    Two-way split of classes maximising the pooled single-Gaussian likelihood.

    Up to EXHAUSTIVE_SPLIT_CLASSES classes every partition is scored and the
    best kept (lowest enumeration index on ties). Larger sets start from
    occupancy-weighted 2-means on the class means and then move single
    classes across while that raises L(S_l) + L(S_r). Classes with identical
    means split in halves. The side holding the lowest class id is returned
    first.
    """
    node = [stats[c] for c in classes]
    means = np.stack([s.mean for s in node])
    if np.all(means == means[0]):
        half = len(classes) // 2
        return classes[:half], classes[half:]

    n = len(classes)
    if n <= EXHAUSTIVE_SPLIT_CLASSES:
        # Code m puts class k right when bit k-1 is set; class 0 stays left.
        codes = np.arange(1, 1 << (n - 1))
        bits = (codes[:, None] >> np.arange(n - 1)[None, :]) & 1
        masks = np.column_stack([np.ones(len(codes), bool), bits == 0])
        best = masks[int(np.argmax(_split_log_likelihoods(masks, node, variance_floor)))]
    else:
        best = ~_seed_assignment(means, np.array([s.occupancy for s in node]))
        score = _split_log_likelihoods(best[None, :], node, variance_floor)[0]
        for _ in range(REFINE_ITERATIONS):
            moves = np.repeat(best[None, :], n, axis=0)
            moves[np.arange(n), np.arange(n)] ^= True
            valid = moves.any(axis=1) & ~moves.all(axis=1)
            scores = np.where(valid, _split_log_likelihoods(moves, node, variance_floor), -np.inf)
            k = int(np.argmax(scores))
            if scores[k] <= score + 1e-12 * abs(score):
                break
            best, score = moves[k], scores[k]
    if not best[0]:
        best = ~best
    return [c for c, b in zip(classes, best) if b], [c for c, b in zip(classes, best) if not b]


def generate_question_set(
    class_stats: Dict[int, GaussianNodeStats],
    position: int = 0,
    max_depth: Optional[int] = None,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> Tuple[List[Question], Optional[QuestionNode]]:
    """
    Build the question tree for one position and read off its questions.

    Classes are split recursively by 2-means until every node holds one
    class (or ``max_depth`` is reached). Each non-leaf node contributes the
    reachable-leaf set of its left child, the split it performs.

    Args:
        class_stats: Per-class pooled statistics at this position.
        position: HMM state position the questions belong to.
        max_depth: Optional depth at which clustering stops.
        variance_floor: Floor used for node likelihoods.

    Returns:
        The question list and the clustering tree (None without data).
    """
    classes = sorted(c for c, s in class_stats.items() if s.occupancy > 0)
    if not classes:
        return [], None
    dim = class_stats[classes[0]].dim

    def make_node(members: List[int]) -> QuestionNode:
        pooled = _pool(frozenset(members), class_stats, dim)
        return QuestionNode(frozenset(members), pooled_log_likelihood(pooled, variance_floor))

    root = make_node(classes)
    stack: List[Tuple[QuestionNode, List[int], int]] = [(root, classes, 0)]
    while stack:
        node, members, depth = stack.pop()
        if len(members) < 2 or (max_depth is not None and depth >= max_depth):
            continue
        left, right = _two_means(members, class_stats, variance_floor)
        node.left, node.right = make_node(left), make_node(right)
        stack.append((node.right, right, depth + 1))
        stack.append((node.left, left, depth + 1))

    questions: List[Question] = []
    seen = set()
    for node in root.walk():
        if node.left is None or node.left.classes in seen:
            continue
        seen.add(node.left.classes)
        questions.append(Question(id=len(questions), position=position, members=node.left.classes))
    return questions, root


def build_tying_tree(
    position: int,
    questions: Sequence[Question],
    stats: Dict[int, GaussianNodeStats],
    split_threshold: float = 0.0,
    min_occupancy: float = 0.0,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    classes: Optional[Sequence[int]] = None,
) -> TyingTree:
    """
    Grow a tying tree greedily from the root.

    A leaf is split by its best applicable question while the gain reaches
    ``split_threshold`` and both children keep at least ``min_occupancy``.
    Gain ties go to the lower question id.

    Args:
        position: HMM state position of the tree.
        questions: Candidate questions.
        stats: Per-class statistics at this position.
        split_threshold: Minimum gain for a split.
        min_occupancy: Minimum pooled occupancy of each child.
        variance_floor: Floor used by the likelihood.
        classes: All classes of the tree; defaults to the stats keys.

    Returns:
        The grown tree.
    """
    classes = frozenset(classes if classes is not None else stats)
    dim = next(iter(stats.values())).dim
    full = {c: stats.get(c, GaussianNodeStats.zeros(dim)) for c in classes}
    ordered = sorted(questions, key=lambda q: q.id)
    counter = iter(range(1 << 30))

    def make_node(members: FrozenSet[int]) -> TyingNode:
        pooled = _pool(members, full, dim)
        return TyingNode(next(counter), members, pooled, pooled_log_likelihood(pooled, variance_floor))

    root = make_node(classes)
    stack = [root]
    while stack:
        node = stack.pop()
        best = None
        for question in ordered:
            if not question.applies_to(node.classes):
                continue
            left = node.classes & question.members
            right = node.classes - question.members
            l_stats, r_stats = _pool(left, full, dim), _pool(right, full, dim)
            if l_stats.occupancy < min_occupancy or r_stats.occupancy < min_occupancy:
                continue
            gain = (
                pooled_log_likelihood(l_stats, variance_floor)
                + pooled_log_likelihood(r_stats, variance_floor)
                - node.log_likelihood
            )
            if best is None or gain > best[0]:
                best = (gain, question, left, right)
        if best is None or best[0] < split_threshold:
            continue
        gain, question, left, right = best
        node.question_id, node.gain = question.id, gain
        node.left, node.right = make_node(left), make_node(right)
        stack.extend([node.right, node.left])
    logger.debug("Position %d tree: %d leaves", position, len(root.leaves()))
    return TyingTree(position=position, root=root)


@dataclass
class MergeRecord:
    """One executed sibling-leaf merge."""
    position: int
    node_id: int
    cost: float


def merge_cost(node: TyingNode, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> float:
    """Likelihood decrease of collapsing a node's two leaf children, from summed stats."""
    assert node.left is not None and node.right is not None
    merged = node.left.stats + node.right.stats
    return (
        pooled_log_likelihood(node.left.stats, variance_floor)
        + pooled_log_likelihood(node.right.stats, variance_floor)
        - pooled_log_likelihood(merged, variance_floor)
    )


def merge_trees(
    trees: Sequence[TyingTree],
    target: int,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> Tuple[List[TyingTree], List[MergeRecord]]:
    """
    Merge sibling leaves across all trees, cheapest first, until exactly
    ``target`` leaves remain. The input trees are left untouched.

    Raises:
        ConfigurationError: If the target is below one leaf per tree or
            above the current leaf total.
    """
    trees = copy.deepcopy(list(trees))
    total = sum(t.num_leaves for t in trees)
    if target < len(trees):
        raise ConfigurationError(f"Target {target} below the feasible minimum {len(trees)}")
    if target > total:
        raise ConfigurationError(f"Target {target} exceeds the current {total} leaves")

    parents: Dict[Tuple[int, int], TyingNode] = {}
    heap: List[Tuple[float, int, int, TyingNode]] = []
    for tree in trees:
        for node in tree.root.walk():
            if node.left is not None and node.right is not None:
                parents[(tree.position, node.left.node_id)] = node
                parents[(tree.position, node.right.node_id)] = node
                if node.left.is_leaf and node.right.is_leaf:
                    heapq.heappush(heap, (merge_cost(node, variance_floor), tree.position, node.node_id, node))

    records = []
    while total > target:
        cost, position, node_id, node = heapq.heappop(heap)
        node.left = node.right = None
        node.question_id = None
        node.gain = 0.0
        total -= 1
        records.append(MergeRecord(position, node_id, cost))
        parent = parents.get((position, node_id))
        if parent is not None and parent.left.is_leaf and parent.right.is_leaf:
            heapq.heappush(heap, (merge_cost(parent, variance_floor), position, parent.node_id, parent))
    logger.info("Merged %d leaf pairs to reach %d tied states", len(records), target)
    return trees, records


def tying_map_from_trees(trees: Sequence[TyingTree], num_classes: int) -> StateTyingMap:
    """Dense ids: positions in order, leaves left to right."""
    ids = np.full((num_classes, len(trees)), -1, dtype=np.int64)
    next_id = 0
    for tree in sorted(trees, key=lambda t: t.position):
        for leaf in tree.leaves():
            for c in leaf.classes:
                ids[c, tree.position] = next_id
            next_id += 1
    if (ids < 0).any():
        raise InvariantViolationError("Tying trees do not cover every positioned state")
    return StateTyingMap(ids)


def merge_to_target(
    trees: Sequence[TyingTree],
    target: int,
    num_classes: Optional[int] = None,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> StateTyingMap:
    """
    Reduce the trees to exactly ``target`` tied states and emit the map.

    Raises:
        ConfigurationError: If the target is infeasible.
    """
    merged, _ = merge_trees(trees, target, variance_floor)
    if num_classes is None:
        num_classes = max(max(t.root.classes) for t in trees) + 1
    return tying_map_from_trees(merged, num_classes)


def retarget_average_states(num_classes: int, avg_states: float, num_states: int = 5) -> int:
    """
    Tied-state budget for an average number of states per class.

    Raises:
        ConfigurationError: If the average is outside [1, num_states].
    """
    if not 1 <= avg_states <= num_states:
        raise ConfigurationError(f"Average states {avg_states} outside [1, {num_states}]")
    return int(np.floor(avg_states * num_classes + 0.5))


@dataclass
class TyingResult:
    """Everything the tie step produces."""
    questions: Dict[int, List[Question]]
    trees: List[TyingTree]
    merged: List[TyingTree]
    merges: List[MergeRecord]
    tying: StateTyingMap


def stats_at_position(stats: Dict[PositionedState, GaussianNodeStats], position: int) -> Dict[int, GaussianNodeStats]:
    return {state.class_id: s for state, s in stats.items() if state.position == position}


def _questions_for_position(position: int, stats, max_depth, variance_floor) -> List[Question]:
    questions, _ = generate_question_set(stats_at_position(stats, position), position, max_depth, variance_floor)
    return questions


def generate_all_questions(
    stats: Dict[PositionedState, GaussianNodeStats],
    num_states: int,
    max_depth: Optional[int] = None,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    jobs: int = 1,
) -> Dict[int, List[Question]]:
    """Independent question sets for every position."""
    work = partial(_questions_for_position, stats=stats, max_depth=max_depth, variance_floor=variance_floor)
    sets = parallel_map(work, range(num_states), jobs)
    for position, questions in enumerate(sets):
        logger.info("Position %d: %d questions", position, len(questions))
    return dict(enumerate(sets))


def _tree_for_position(position: int, questions, stats, num_classes, split_threshold, min_occupancy, variance_floor) -> TyingTree:
    return build_tying_tree(
        position,
        questions[position],
        stats_at_position(stats, position),
        split_threshold,
        min_occupancy,
        variance_floor,
        classes=range(num_classes),
    )


def build_state_tying(
    stats: Dict[PositionedState, GaussianNodeStats],
    num_classes: int,
    num_states: int,
    target: int,
    questions: Optional[Dict[int, List[Question]]] = None,
    split_threshold: float = 0.0,
    min_occupancy: float = 50.0,
    max_depth: Optional[int] = None,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    jobs: int = 1,
) -> TyingResult:
    """
    Full tying run: questions, one tree per position, merge to target.

    If the grown trees have fewer leaves than the target (thresholds and
    occupancy limits stop growth), they are grown again with both limits
    lifted, so only the questions bound the leaf count.

    Raises:
        ConfigurationError: If even unlimited growth leaves fewer leaves
            than the target.
    """
    if questions is None:
        questions = generate_all_questions(stats, num_states, max_depth, variance_floor, jobs)
    work = partial(
        _tree_for_position,
        questions=questions,
        stats=stats,
        num_classes=num_classes,
        split_threshold=split_threshold,
        min_occupancy=min_occupancy,
        variance_floor=variance_floor,
    )
    trees = parallel_map(work, range(num_states), jobs)
    if target >= num_classes * num_states:
        logger.info("Target %d keeps every positioned state; tying map is the identity", target)
        return TyingResult(questions, trees, trees, [], StateTyingMap.untied(num_classes, num_states))
    leaves = sum(t.num_leaves for t in trees)
    if leaves < target:
        logger.warning("Trees hold %d leaves, fewer than the target %d; growing without limits", leaves, target)
        work = partial(work, split_threshold=-np.inf, min_occupancy=0.0)
        trees = parallel_map(work, range(num_states), jobs)
        leaves = sum(t.num_leaves for t in trees)
        if leaves < target:
            raise ConfigurationError(
                f"Questions separate at most {leaves} tied states, below the target {target}; "
                "lower the average states or the question depth limit"
            )
    merged, merges = merge_trees(trees, target, variance_floor)
    return TyingResult(questions, trees, merged, merges, tying_map_from_trees(merged, num_classes))


def tree_to_dot(tree: TyingTree, questions: Optional[Sequence[Question]] = None) -> str:
    """Graphviz rendering of a tying tree."""
    lookup = {q.id: q for q in questions or []}
    lines = [f"digraph position_{tree.position} {{", "  node [shape=box, fontsize=10];"]
    for node in tree.root.walk():
        members = " ".join(str(c) for c in sorted(node.classes))
        if node.is_leaf:
            label = f"leaf {node.node_id}\\n{{{members}}}\\nocc={node.stats.occupancy:.1f}"
        else:
            question = lookup.get(node.question_id)
            asked = " ".join(str(c) for c in sorted(question.members)) if question else node.question_id
            label = f"q{node.question_id}: {{{asked}}}\\ngain={node.gain:.2f}"
        lines.append(f'  n{node.node_id} [label="{label}"];')
        if node.left is not None and node.right is not None:
            lines.append(f'  n{node.node_id} -> n{node.left.node_id} [label="yes"];')
            lines.append(f'  n{node.node_id} -> n{node.right.node_id} [label="no"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
