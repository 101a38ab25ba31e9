"""
Classifier Models

Architecture description, writer profiles and state priors of the
writer-aware frame classifier.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator


class ClassifierSpec(BaseModel):
    """Layer configuration of an AdaptiveClassifier."""
    input_height: int = Field(40, ge=8)
    input_width: int = Field(20, ge=8)
    channels: Tuple[int, ...] = (16, 32)
    kernel_size: int = Field(3, ge=1)
    hidden_units: int = Field(128, ge=1)
    num_outputs: int = Field(..., ge=1)
    adapted_blocks: int = Field(0, ge=0)
    code_dim: int = Field(200, ge=1)

    @model_validator(mode="after")
    def check_blocks(self) -> "ClassifierSpec":
        if self.adapted_blocks > len(self.channels):
            raise ValueError("More adaptation layers than convolutional blocks")
        return self


@dataclass
class WriterProfile:
    """A writer's learnable code and adaptation bookkeeping."""
    writer_id: int
    code: np.ndarray
    pass_count: int = 0
    loss_history: List[float] = field(default_factory=list)

    @property
    def code_dim(self) -> int:
        return int(self.code.shape[0])


@dataclass
class LabeledLine:
    """Window patches of one line with per-frame tied-state labels."""
    line_id: int
    writer_id: int
    patches: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class StatePrior:
    """Tied-state prior estimated from alignment counts."""
    probs: np.ndarray

    @classmethod
    def from_counts(cls, counts: np.ndarray, smoothing: float = 1.0) -> "StatePrior":
        counts = np.asarray(counts, dtype=float) + smoothing
        return cls(counts / counts.sum())

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(self.probs)

    def __len__(self) -> int:
        return int(self.probs.shape[0])


@dataclass
class TrainingReport:
    """Loss trace of a training run."""
    losses: List[float] = field(default_factory=list)
    accuracy: Optional[float] = None
    frames_seen: int = 0
