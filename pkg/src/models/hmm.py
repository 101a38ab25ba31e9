"""
HMM Models

Character HMMs, Gaussian emissions, pooled sufficient statistics and
forced alignments.
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


class PositionedState(NamedTuple):
    """An HMM state identified by character class and position."""
    class_id: int
    position: int


@dataclass
class CharacterHMM:
    """
    Left-to-right character HMM.

    ``transitions`` has shape (S, S+1); column S is the non-emitting exit.
    Row s holds a self-loop at column s and a forward move at column s+1.
    """
    class_id: int
    transitions: np.ndarray

    @classmethod
    def left_to_right(cls, class_id: int, num_states: int, self_loop: float = 0.6) -> "CharacterHMM":
        trans = np.zeros((num_states, num_states + 1))
        for s in range(num_states):
            trans[s, s] = self_loop
            trans[s, s + 1] = 1.0 - self_loop
        return cls(class_id=class_id, transitions=trans)

    @property
    def num_states(self) -> int:
        return int(self.transitions.shape[0])

    @property
    def initial(self) -> np.ndarray:
        """Initial distribution: all mass on state 0."""
        pi = np.zeros(self.num_states)
        pi[0] = 1.0
        return pi

    @property
    def log_loop(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.diagonal(self.transitions))

    @property
    def log_next(self) -> np.ndarray:
        """Log probability of leaving each state forward (exit for the last)."""
        with np.errstate(divide="ignore"):
            return np.log(np.diagonal(self.transitions, offset=1))


@dataclass
class GaussianEmission:
    """Diagonal-covariance Gaussian mixture."""
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @classmethod
    def single(cls, mean: np.ndarray, variance: np.ndarray) -> "GaussianEmission":
        return cls(
            weights=np.ones(1),
            means=np.asarray(mean, dtype=float)[None, :],
            variances=np.asarray(variance, dtype=float)[None, :],
        )

    @property
    def num_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def component_log_densities(self, frames: np.ndarray) -> np.ndarray:
        """(T, M) weighted component log densities."""
        diff = frames[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        log_norm = self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return log_w[None, :] - 0.5 * (quad + log_norm[None, :])

    def log_density(self, frames: np.ndarray) -> np.ndarray:
        """(T,) log density of each frame."""
        return logsumexp(self.component_log_densities(frames), axis=1)


@dataclass
class GaussianNodeStats:
    """
    Occupancy-weighted zeroth, first and second order sums.

    Additive under disjoint union; mean and variance follow from the sums.
    """
    occupancy: float
    first: np.ndarray
    second: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "GaussianNodeStats":
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    @classmethod
    def from_frames(cls, frames: np.ndarray, weights: Optional[np.ndarray] = None) -> "GaussianNodeStats":
        frames = np.asarray(frames, dtype=float)
        if weights is None:
            weights = np.ones(len(frames))
        return cls(
            float(np.sum(weights)),
            weights @ frames,
            weights @ (frames * frames),
        )

    @property
    def dim(self) -> int:
        return int(self.first.shape[0])

    def __add__(self, other: "GaussianNodeStats") -> "GaussianNodeStats":
        return GaussianNodeStats(
            self.occupancy + other.occupancy,
            self.first + other.first,
            self.second + other.second,
        )

    @property
    def mean(self) -> np.ndarray:
        if self.occupancy <= 0:
            return np.zeros(self.dim)
        return self.first / self.occupancy

    @property
    def variance(self) -> np.ndarray:
        """Unfloored ML variance, clipped at zero against rounding."""
        if self.occupancy <= 0:
            return np.zeros(self.dim)
        mean = self.mean
        return np.maximum(self.second / self.occupancy - mean * mean, 0.0)

    def to_emission(self, variance_floor: float) -> GaussianEmission:
        return GaussianEmission.single(self.mean, np.maximum(self.variance, variance_floor))


@dataclass
class Alignment:
    """Frame-level positioned-state labels of one line."""
    line_id: int
    labels: List[PositionedState]
    log_likelihoods: np.ndarray
    char_index: List[int] = field(default_factory=list)
    score: float = 0.0

    def __len__(self) -> int:
        return len(self.labels)
