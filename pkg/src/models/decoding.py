"""
Decoding Models

Search configuration and results.
"""
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field


class DecodeConfig(BaseModel):
    """Beam search settings."""
    beam: Optional[int] = Field(None, ge=1, description="Active tokens; None is unlimited")
    lm_scale: float = Field(1.0, ge=0.0)
    insertion_penalty: float = 0.0
    lm_mode: Literal["none", "ngram", "hybrid"] = "none"
    nbest: int = Field(10, ge=1)


@dataclass
class Hypothesis:
    """One transcript hypothesis with its score components."""
    transcript: Tuple[int, ...]
    acoustic: float
    lm: float = 0.0

    def total(self, lm_scale: float, insertion_penalty: float) -> float:
        return self.acoustic + lm_scale * self.lm + insertion_penalty * len(self.transcript)


@dataclass
class DecodeResult:
    """Best path of a decode."""
    line_id: int
    transcript: List[int]
    score: float
    alignment: np.ndarray
    positions: np.ndarray
    char_frames: List[Tuple[int, int]]
    boundaries: List[Tuple[int, int]]
    nbest: List[Hypothesis] = field(default_factory=list)
