"""
Corpus Models

Defines the synthetic handwriting corpus: glyph composition, writer
styles and rendered text-line samples.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

PARTITIONS = ("train", "adapt", "test")


class PlacementBox(BaseModel):
    """Axis-aligned box in unit-square glyph coordinates."""
    x0: float = Field(..., ge=0.0, le=1.0)
    y0: float = Field(..., ge=0.0, le=1.0)
    x1: float = Field(..., ge=0.0, le=1.0)
    y1: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_order(self) -> "PlacementBox":
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("Placement box must have positive extent")
        return self


LEFT_BOX = PlacementBox(x0=0.0, y0=0.0, x1=0.5, y1=1.0)
RIGHT_BOX = PlacementBox(x0=0.5, y0=0.0, x1=1.0, y1=1.0)


class RadicalPlacement(BaseModel):
    """One radical drawn inside one placement box."""
    radical_id: int = Field(..., ge=0)
    box: PlacementBox


class GlyphSpec(BaseModel):
    """A character class composed of positioned radicals."""
    class_id: int = Field(..., ge=0)
    radicals: List[RadicalPlacement] = Field(..., min_length=1)

    def signature(self) -> Tuple:
        """Hashable identity of the composition."""
        return tuple(
            (r.radical_id, r.box.x0, r.box.y0, r.box.x1, r.box.y1)
            for r in self.radicals
        )


class WriterStyle(BaseModel):
    """Per-writer geometric and photometric style."""
    writer_id: int = Field(..., ge=0)
    shear: float = 0.0
    scale_x: float = Field(1.0, ge=0.5, le=2.0)
    scale_y: float = Field(1.0, ge=0.5, le=2.0)
    stroke_width: float = Field(1.0, ge=1.0)
    noise_sigma: float = Field(0.0, ge=0.0)

    @classmethod
    def identity(cls, writer_id: int = 0) -> "WriterStyle":
        """Style that leaves rendered glyphs untouched."""
        return cls(writer_id=writer_id)


class CorpusConfig(BaseModel):
    """Everything that determines a generated corpus besides the seed."""
    num_classes: int = Field(20, ge=1)
    num_radicals: int = Field(8, ge=1)
    train_writers: int = Field(20, ge=0)
    test_writers: int = Field(10, ge=0)
    train_lines_per_writer: int = Field(10, ge=0)
    adapt_lines_per_writer: int = Field(5, ge=0)
    test_lines_per_writer: int = Field(15, ge=0)
    min_line_length: int = Field(3, ge=1)
    max_line_length: int = Field(8, ge=1)
    min_occurrences: int = Field(5, ge=0)
    successors_per_class: int = Field(3, ge=1)
    successor_mass: float = Field(0.8, ge=0.0, le=1.0)
    line_height: int = Field(40, ge=8)
    max_gap: int = Field(4, ge=0)
    max_shear: float = Field(0.3, ge=0.0)
    scale_range: Tuple[float, float] = (0.8, 1.25)
    stroke_width_range: Tuple[float, float] = (1.0, 3.0)
    noise_sigma_range: Tuple[float, float] = (0.0, 0.08)


@dataclass
class TextLineSample:
    """A rendered text line with its transcript and character boundaries."""
    line_id: int
    writer_id: int
    transcript: List[int]
    image: np.ndarray
    char_boundaries: List[Tuple[int, int]]

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass
class Corpus:
    """Train/adapt/test partitions plus the generating description."""
    config: CorpusConfig
    seed: int
    glyphs: List[GlyphSpec]
    styles: Dict[int, WriterStyle]
    partitions: Dict[str, List[TextLineSample]] = field(default_factory=dict)

    def writers(self, partition: str) -> List[int]:
        return sorted({line.writer_id for line in self.partitions.get(partition, [])})

    def by_writer(self, partition: str) -> Dict[int, List[TextLineSample]]:
        grouped: Dict[int, List[TextLineSample]] = {}
        for line in self.partitions.get(partition, []):
            grouped.setdefault(line.writer_id, []).append(line)
        return grouped
