"""
Frame Sequence Model

The observation sequence of one text line.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class FrameSequence:
    """
    Sliding-window frames of one line.

    Attributes:
        line_id: Identifier of the source line.
        frames: (T+1, D) pooled feature vectors in [0, 1].
        patches: (T+1, H, W_win) raw gray windows in [0, 1].
        frame_shift: Window shift in pixels.
        window: Window width in pixels.
    """
    line_id: int
    frames: np.ndarray
    patches: np.ndarray
    frame_shift: int
    window: int

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.patches):
            raise ValueError("Frame vectors and patches differ in length")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    def frame_columns(self, t: int) -> tuple:
        """Pixel column range [start, end) covered by frame t."""
        start = t * self.frame_shift
        return start, start + self.window
