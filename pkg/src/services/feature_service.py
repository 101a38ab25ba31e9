"""
Feature Service

Sliding-window frame extraction: raw patches for the classifier and
mean-pooled vectors for the GMM-HMM and the tying statistics.
"""
import logging
from functools import partial
from typing import Dict, List, Optional

import numpy as np

from src.models.corpus import TextLineSample
from src.models.features import FrameSequence
from src.utils.errors import ConfigurationError, FrameGeometryError
from src.utils.helpers import parallel_map

logger = logging.getLogger(__name__)


def pool_patches(patches: np.ndarray, grid: int = 8) -> np.ndarray:
    """
    Mean-pool (N, H, W) patches onto a grid x grid lattice.

    Cell k along an axis of length L spans [floor(k*L/grid), floor((k+1)*L/grid)).

    Returns:
        (N, grid*grid) pooled vectors.
    """
    n, height, width = patches.shape
    if height < grid or width < grid:
        raise FrameGeometryError(f"Patch {height}x{width} is smaller than the {grid}x{grid} pooling grid")
    rows = (np.arange(grid) * height) // grid
    cols = (np.arange(grid) * width) // grid
    row_sizes = np.diff(np.append(rows, height))
    col_sizes = np.diff(np.append(cols, width))
    summed = np.add.reduceat(np.add.reduceat(patches, rows, axis=1), cols, axis=2)
    pooled = summed / (row_sizes[None, :, None] * col_sizes[None, None, :])
    return pooled.reshape(n, grid * grid)


def extract_frames(
    image: np.ndarray,
    window: int = 20,
    shift: int = 4,
    line_id: int = 0,
    grid: int = 8,
    line_height: Optional[int] = None,
    pad: bool = False,
) -> FrameSequence:
    """
    Cut a line image into frames.

    Frame t covers columns [t*shift, t*shift + window).

    Args:
        image: 2-D gray image, uint8 (0..255) or float in [0, 1].
        window: Window width W_win in pixels.
        shift: Frame shift in pixels.
        line_id: Identifier stored on the result.
        grid: Pooling lattice size (grid*grid = D).
        line_height: Expected image height, checked when given.
        pad: Right-pad images narrower than the window with background.

    Returns:
        The frame sequence.

    Raises:
        ConfigurationError: If shift or window is not positive.
        FrameGeometryError: If the image is narrower than the window and
            padding is off, or its height is wrong.
    """
    if shift <= 0 or window <= 0:
        raise ConfigurationError(f"Window {window} and shift {shift} must be positive")
    pixels = np.asarray(image)
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(np.float64) / 255.0
    else:
        pixels = pixels.astype(np.float64)
    if pixels.ndim != 2:
        raise FrameGeometryError("Line image must be two-dimensional")
    height, width = pixels.shape
    if line_height is not None and height != line_height:
        raise FrameGeometryError(f"Line height {height} differs from expected {line_height}")
    if width < window:
        if not pad:
            raise FrameGeometryError(
                f"Image width {width} is below the window width {window}; pad the line first"
            )
        pixels = np.pad(pixels, ((0, 0), (0, window - width)))
        width = window

    count = (width - window) // shift + 1
    starts = np.arange(count) * shift
    patches = np.stack([pixels[:, s:s + window] for s in starts])
    return FrameSequence(
        line_id=line_id,
        frames=pool_patches(patches, grid),
        patches=patches,
        frame_shift=shift,
        window=window,
    )


def _extract_line(line: TextLineSample, window: int, shift: int, grid: int) -> FrameSequence:
    return extract_frames(line.image, window, shift, line_id=line.line_id, grid=grid, pad=True)


def extract_corpus(
    lines: List[TextLineSample],
    window: int = 20,
    shift: int = 4,
    grid: int = 8,
    jobs: int = 1,
) -> Dict[int, FrameSequence]:
    """
    Extract frames for every line, padding short lines.

    Returns:
        Frame sequences keyed by line id.
    """
    work = partial(_extract_line, window=window, shift=shift, grid=grid)
    sequences = parallel_map(work, lines, jobs)
    logger.info("Extracted %d frames from %d lines", sum(len(s) for s in sequences), len(lines))
    return {seq.line_id: seq for seq in sequences}
