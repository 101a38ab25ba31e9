"""
Report Models

Character error rate reports and run manifests.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class CerCounts(BaseModel):
    """Edit-operation totals."""
    N: int = Field(0, ge=0)
    N_s: int = Field(0, ge=0)
    N_i: int = Field(0, ge=0)
    N_d: int = Field(0, ge=0)

    @property
    def errors(self) -> int:
        return self.N_s + self.N_i + self.N_d

    @property
    def cer(self) -> float:
        return self.errors / self.N if self.N else 0.0

    def __add__(self, other: "CerCounts") -> "CerCounts":
        return CerCounts(
            N=self.N + other.N,
            N_s=self.N_s + other.N_s,
            N_i=self.N_i + other.N_i,
            N_d=self.N_d + other.N_d,
        )


class PassRecord(BaseModel):
    """Result of one decoding pass."""
    index: int = Field(..., ge=1)
    CER: float
    seconds: float = 0.0
    adaptation_seconds: float = 0.0
    time_ratio: float = 1.0


class CerReport(BaseModel):
    """CER totals with per-writer and per-pass breakdown."""
    N: int = 0
    N_s: int = 0
    N_i: int = 0
    N_d: int = 0
    CER: float = 0.0
    per_writer: Dict[int, CerCounts] = Field(default_factory=dict)
    passes: List[PassRecord] = Field(default_factory=list)
    missing_lines: List[int] = Field(default_factory=list)
    extra: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def from_counts(cls, total: CerCounts, **kwargs) -> "CerReport":
        return cls(N=total.N, N_s=total.N_s, N_i=total.N_i, N_d=total.N_d, CER=total.cer, **kwargs)


class RunManifest(BaseModel):
    """Machine-readable record of one subcommand run."""
    step: str
    version: str
    created_at: str
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    settings: dict = Field(default_factory=dict)
    notes: Optional[str] = None
