"""
Helper Utilities

General-purpose helper functions used across the pipeline.
"""
import hashlib
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, List, Sequence, TypeVar, Union

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def sub_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Create a counter-based random generator.

    The stream depends only on the seed and the key tuple, so work items
    drawn in parallel get the same numbers as in a serial run.

    Args:
        seed: The base seed.
        *keys: Integer counters identifying the work item.

    Returns:
        An independent numpy Generator.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def file_digest(path: Union[str, Path]) -> str:
    """
    Create a SHA-256 digest of a file's contents.

    Args:
        path: The file to hash.

    Returns:
        The hexadecimal hash digest.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def tree_digest(path: Union[str, Path]) -> str:
    """
    Digest a file or every file below a directory.

    Files are visited in sorted relative-path order so the digest is
    stable across platforms.
    """
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    digest = hashlib.sha256()
    for item in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(item.relative_to(path).as_posix().encode())
        digest.update(file_digest(item).encode())
    return digest.hexdigest()


def utc_timestamp() -> str:
    """Current UTC time in ISO-8601 format."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def chunk_list(items: Sequence[T], chunk_size: int) -> List[Sequence[T]]:
    """
    Split a sequence into chunks of specified size.

    Args:
        items: The sequence to split.
        chunk_size: Maximum items per chunk.

    Returns:
        List of chunks.
    """
    return [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]


def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """
    Map a picklable function over items, preserving input order.

    Args:
        func: Module-level function (or functools.partial of one).
        items: Work items.
        jobs: Number of worker processes; 1 runs in-process.

    Returns:
        Results in input order.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items, chunksize=max(1, len(items) // (4 * jobs))))


def as_jsonable(value: Any) -> Any:
    """Convert numpy scalars and paths inside nested containers to JSON types."""
    if isinstance(value, dict):
        return {str(k): as_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [as_jsonable(v) for v in value]
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value
