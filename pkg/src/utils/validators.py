"""
Validation Utilities

Shape and range checks shared across the pipeline. Each check returns a
result dictionary; ``ensure`` turns a failed result into a typed error.
"""
from typing import Sequence, Type

import numpy as np

from src.utils.errors import PhmmError


def validate_transcript(transcript: Sequence[int], num_classes: int) -> dict:
    """
    Check that a transcript is non-empty and uses known classes.

    Args:
        transcript: Class-id sequence.
        num_classes: Alphabet size.

    Returns:
        Dictionary with 'valid' boolean and list of 'errors'.
    """
    errors = []

    if len(transcript) == 0:
        errors.append("Transcript is empty")

    bad = sorted({int(c) for c in transcript if not 0 <= int(c) < num_classes})
    if bad:
        errors.append(f"Class ids {bad} outside [0, {num_classes})")

    return {"valid": not errors, "errors": errors}


def validate_line_image(image: np.ndarray, line_height: int) -> dict:
    """
    Check a gray line image against the corpus geometry.

    Returns:
        Dictionary with 'valid' boolean and list of 'errors'.
    """
    errors = []
    image = np.asarray(image)

    if image.ndim != 2:
        errors.append(f"Image has {image.ndim} dimensions, expected 2")
    elif image.shape[0] != line_height:
        errors.append(f"Image height {image.shape[0]} differs from line height {line_height}")

    if image.dtype != np.uint8 and image.size and (image.min() < 0 or image.max() > 1):
        errors.append("Float image values must lie in [0, 1]")

    return {"valid": not errors, "errors": errors}


def validate_stochastic_rows(matrix: np.ndarray, tolerance: float = 1e-6) -> dict:
    """
    Check that every row is a probability distribution.

    Returns:
        Dictionary with 'valid' boolean and the list of offending 'rows'.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    negative = (matrix < 0).any(axis=1)
    off = np.abs(matrix.sum(axis=1) - 1.0) > tolerance
    rows = np.flatnonzero(negative | off).tolist()
    return {"valid": not rows, "rows": rows}


def ensure(result: dict, error: Type[PhmmError], context: str = "") -> None:
    """
    Raise ``error`` when a validation result is not valid.

    Args:
        result: Output of one of the validate_* functions.
        error: Exception type to raise.
        context: Prefix for the message.
    """
    if result["valid"]:
        return
    details = result.get("errors") or [f"rows {result.get('rows')}"]
    message = "; ".join(details)
    raise error(f"{context}: {message}" if context else message)
