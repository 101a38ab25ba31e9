"""
State Tying Models

Question sets, question trees, tying trees and the resulting
positioned-state to tied-state map.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterator, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from src.models.hmm import GaussianNodeStats, PositionedState


class Question(BaseModel):
    """A set of character classes; member states go left."""
    id: int = Field(..., ge=0)
    position: int = Field(..., ge=0)
    members: FrozenSet[int] = Field(..., min_length=1)

    def applies_to(self, classes: FrozenSet[int]) -> bool:
        """True when the question splits the class set into two non-empty sides."""
        inside = classes & self.members
        return bool(inside) and inside != classes


@dataclass
class QuestionNode:
    """Node of the 2-means clustering tree over classes."""
    classes: FrozenSet[int]
    log_likelihood: float
    left: Optional["QuestionNode"] = None
    right: Optional["QuestionNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def walk(self) -> Iterator["QuestionNode"]:
        yield self
        if self.left is not None and self.right is not None:
            yield from self.left.walk()
            yield from self.right.walk()


@dataclass
class TyingNode:
    """Node of a tying tree; ``classes`` names the positioned states it pools."""
    node_id: int
    classes: FrozenSet[int]
    stats: GaussianNodeStats
    log_likelihood: float
    question_id: Optional[int] = None
    gain: float = 0.0
    left: Optional["TyingNode"] = None
    right: Optional["TyingNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def leaves(self) -> List["TyingNode"]:
        if self.left is None or self.right is None:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def walk(self) -> Iterator["TyingNode"]:
        yield self
        if self.left is not None and self.right is not None:
            yield from self.left.walk()
            yield from self.right.walk()


@dataclass
class TyingTree:
    """Binary tying tree for one HMM state position."""
    position: int
    root: TyingNode

    def leaves(self) -> List[TyingNode]:
        return self.root.leaves()

    @property
    def num_leaves(self) -> int:
        return len(self.leaves())


@dataclass
class StateTyingMap:
    """
    Total map from (class, position) to dense tied-state ids.

    ``ids`` has shape (num_classes, num_states).
    """
    ids: np.ndarray
    count: int = field(init=False)

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.count = int(self.ids.max()) + 1 if self.ids.size else 0

    @classmethod
    def untied(cls, num_classes: int, num_states: int) -> "StateTyingMap":
        return cls(np.arange(num_classes * num_states).reshape(num_classes, num_states))

    @property
    def num_classes(self) -> int:
        return int(self.ids.shape[0])

    @property
    def num_states(self) -> int:
        return int(self.ids.shape[1])

    def tied_id(self, state: PositionedState) -> int:
        return int(self.ids[state.class_id, state.position])

    def members(self) -> Dict[int, List[PositionedState]]:
        groups: Dict[int, List[PositionedState]] = {}
        for c in range(self.num_classes):
            for s in range(self.num_states):
                groups.setdefault(int(self.ids[c, s]), []).append(PositionedState(c, s))
        return groups

    def position_of(self, tied_id: int) -> int:
        return self.members()[tied_id][0].position
