"""
Corpus Service

Deterministic generation of synthetic handwritten text lines. Glyphs are
built from straight-stroke radicals placed side by side, so classes that
share a radical share pixels at that placement; writers differ by a fixed
geometric and photometric style.
"""
import logging
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from src.models.corpus import (
    LEFT_BOX,
    PARTITIONS,
    RIGHT_BOX,
    Corpus,
    CorpusConfig,
    GlyphSpec,
    PlacementBox,
    RadicalPlacement,
    TextLineSample,
    WriterStyle,
)
from src.utils.errors import ConfigurationError
from src.utils.helpers import parallel_map, sub_rng

logger = logging.getLogger(__name__)

# Stream tags for counter-based seeding
_RADICALS, _GLYPHS, _STYLES, _GRAMMAR, _LINES, _COVERAGE = range(6)

_LATTICE = np.linspace(0.1, 0.9, 5)

Segment = Tuple[float, float, float, float]


@dataclass
class LineJob:
    """Everything needed to render one line independently."""
    line_id: int
    writer_id: int
    transcript: List[int]
    style: WriterStyle
    seed: int
    partition_index: int
    line_index: int


def make_radicals(num_radicals: int, seed: int) -> List[List[Segment]]:
    """
    Draw distinct stroke radicals on a 5x5 lattice of the unit square.

    Each radical has two or three non-degenerate segments.
    """
    rng = sub_rng(seed, _RADICALS)
    radicals: List[List[Segment]] = []
    seen = set()
    while len(radicals) < num_radicals:
        strokes: List[Segment] = []
        for _ in range(int(rng.integers(2, 4))):
            while True:
                x0, y0, x1, y1 = (float(v) for v in rng.choice(_LATTICE, size=4))
                if (x0, y0) != (x1, y1):
                    break
            strokes.append((x0, y0, x1, y1))
        key = tuple(sorted(strokes))
        if key not in seen:
            seen.add(key)
            radicals.append(strokes)
    return radicals


def compose_glyphs(num_classes: int, num_radicals: int, seed: int) -> List[GlyphSpec]:
    """
    Assign each class a (left, right) radical pair.

    Classes 2j and 2j+1 always share their left radical, so radical sharing
    at the first state positions is guaranteed by construction.

    Raises:
        ConfigurationError: If the alphabet cannot be expressed with
            distinct radical pairs.
    """
    if num_classes > num_radicals * num_radicals:
        raise ConfigurationError(
            f"{num_classes} classes exceed the {num_radicals ** 2} expressible radical pairs"
        )
    used = set()
    glyphs = []
    for class_id in range(num_classes):
        left = (class_id // 2) % num_radicals
        order = sub_rng(seed, _GLYPHS, class_id).permutation(num_radicals)
        right = next((int(r) for r in order if (left, int(r)) not in used), None)
        if right is None:
            raise ConfigurationError(
                f"Class {class_id}: no unused right radical for left radical {left}; "
                "increase num_radicals"
            )
        used.add((left, right))
        glyphs.append(GlyphSpec(
            class_id=class_id,
            radicals=[
                RadicalPlacement(radical_id=left, box=LEFT_BOX),
                RadicalPlacement(radical_id=right, box=RIGHT_BOX),
            ],
        ))
    return glyphs


def render_glyph(glyph: GlyphSpec, radicals: Sequence[List[Segment]], size: int) -> np.ndarray:
    """
    Render a glyph with the identity style on a size x size grid.

    Strokes are one pixel wide and kept one pixel inside their box, so a
    radical's pixels never leave its placement box.
    """
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    for placement in glyph.radicals:
        x_lo, x_hi, y_lo, y_hi = _box_pixels(placement.box, size)
        for x0, y0, x1, y1 in radicals[placement.radical_id]:
            draw.line(
                [
                    (x_lo + x0 * (x_hi - x_lo), y_lo + y0 * (y_hi - y_lo)),
                    (x_lo + x1 * (x_hi - x_lo), y_lo + y1 * (y_hi - y_lo)),
                ],
                fill=255,
                width=1,
            )
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _box_pixels(box: PlacementBox, size: int) -> Tuple[float, float, float, float]:
    x_lo = np.floor(box.x0 * size) + 1
    x_hi = np.ceil(box.x1 * size) - 2
    y_lo = np.floor(box.y0 * size) + 1
    y_hi = np.ceil(box.y1 * size) - 2
    return float(x_lo), float(x_hi), float(y_lo), float(y_hi)


def box_columns(box: PlacementBox, size: int) -> Tuple[int, int]:
    """Pixel column range [start, end) owned by a placement box."""
    return int(np.floor(box.x0 * size)), int(np.ceil(box.x1 * size))


def writer_style(writer_id: int, config: CorpusConfig, seed: int) -> WriterStyle:
    """Draw a writer's style; a pure function of (writer_id, seed)."""
    rng = sub_rng(seed, _STYLES, writer_id)
    lo, hi = config.scale_range
    return WriterStyle(
        writer_id=writer_id,
        shear=float(rng.uniform(-config.max_shear, config.max_shear)),
        scale_x=float(np.clip(rng.uniform(lo, hi), 0.5, 2.0)),
        scale_y=float(np.clip(rng.uniform(lo, hi), 0.5, 2.0)),
        stroke_width=float(rng.uniform(*config.stroke_width_range)),
        noise_sigma=float(rng.uniform(*config.noise_sigma_range)),
    )


def apply_style(glyph: np.ndarray, style: WriterStyle) -> np.ndarray:
    """
    Scale, shear and dilate a glyph image.

    The output keeps the glyph height; its width follows scale_x and grows
    to hold sheared content. Noise is added later on the whole line.
    """
    height, width = glyph.shape
    k = float(np.tan(style.shear))
    if style.scale_x == 1.0 and style.scale_y == 1.0 and k == 0.0:
        out = glyph.copy()
    else:
        cy = (height - 1) / 2.0
        margin = int(np.ceil(abs(k) * height / 2.0))
        out_width = max(1, int(round(width * style.scale_x))) + 2 * margin
        matrix = np.array([
            [1.0 / style.scale_y, 0.0],
            [-k / style.scale_x, 1.0 / style.scale_x],
        ])
        offset = np.array([cy - cy / style.scale_y, (k * cy - margin) / style.scale_x])
        out = ndimage.affine_transform(
            glyph, matrix, offset=offset, output_shape=(height, out_width), order=1, cval=0.0
        )
    size = max(1, int(round(style.stroke_width)))
    if size > 1:
        out = ndimage.grey_dilation(out, size=(size, size))
    return np.clip(out, 0.0, 1.0)


def successor_table(config: CorpusConfig, seed: int) -> np.ndarray:
    """Row-stochastic class bigram matrix of the synthetic grammar."""
    n = config.num_classes
    rng = sub_rng(seed, _GRAMMAR)
    table = np.full((n, n), (1.0 - config.successor_mass) / n)
    k = min(config.successors_per_class, n)
    for c in range(n):
        successors = rng.choice(n, size=k, replace=False)
        table[c, successors] += config.successor_mass / k
    return table / table.sum(axis=1, keepdims=True)


def sample_transcript(config: CorpusConfig, table: np.ndarray, rng: np.random.Generator) -> List[int]:
    """Draw a line length and a transcript from the grammar."""
    length = int(rng.integers(config.min_line_length, config.max_line_length + 1))
    current = int(rng.integers(config.num_classes))
    transcript = [current]
    for _ in range(length - 1):
        current = int(rng.choice(config.num_classes, p=table[current]))
        transcript.append(current)
    return transcript


def enforce_coverage(transcripts: List[List[int]], config: CorpusConfig, seed: int) -> None:
    """
    Patch transcripts in place until every class occurs min_occurrences times.

    Replacement positions are drawn deterministically and only taken from
    classes that stay above the minimum.
    """
    need = config.min_occurrences
    if need == 0:
        return
    total = sum(len(t) for t in transcripts)
    if total < need * config.num_classes:
        raise ConfigurationError(
            f"Training partition has {total} characters; "
            f"{need} occurrences of {config.num_classes} classes are required"
        )
    counts = np.bincount([c for t in transcripts for c in t], minlength=config.num_classes)
    slots = [(i, j) for i, t in enumerate(transcripts) for j in range(len(t))]
    order = sub_rng(seed, _COVERAGE).permutation(len(slots))
    cursor = 0
    for cls in range(config.num_classes):
        while counts[cls] < need:
            while True:
                i, j = slots[order[cursor % len(slots)]]
                cursor += 1
                donor = transcripts[i][j]
                if donor != cls and counts[donor] > need:
                    break
            transcripts[i][j] = cls
            counts[donor] -= 1
            counts[cls] += 1


def render_line(
    job: LineJob,
    glyph_images: Dict[int, np.ndarray],
    max_gap: int,
) -> TextLineSample:
    """Render one line from its own sub-seeded random stream."""
    rng = sub_rng(job.seed, _LINES, job.partition_index, job.line_index, 1)
    pieces = [apply_style(glyph_images[c], job.style) for c in job.transcript]
    gaps = [int(rng.integers(0, max_gap + 1)) for _ in range(len(pieces) - 1)] + [0]
    height = pieces[0].shape[0]
    width = sum(p.shape[1] for p in pieces) + sum(gaps)
    image = np.zeros((height, width))
    boundaries = []
    x = 0
    for piece, gap in zip(pieces, gaps):
        image[:, x:x + piece.shape[1]] = piece
        boundaries.append((x, x + piece.shape[1]))
        x += piece.shape[1] + gap
    if job.style.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, job.style.noise_sigma, image.shape), 0.0, 1.0)
    return TextLineSample(
        line_id=job.line_id,
        writer_id=job.writer_id,
        transcript=list(job.transcript),
        image=np.round(image * 255.0).astype(np.uint8),
        char_boundaries=boundaries,
    )


def validate_config(config: CorpusConfig) -> None:
    """Raise ConfigurationError for corpus settings that cannot be generated."""
    if config.train_writers + config.test_writers == 0:
        raise ConfigurationError("Corpus needs at least one writer")
    if config.min_line_length > config.max_line_length:
        raise ConfigurationError("min_line_length exceeds max_line_length")
    if config.scale_range[0] > config.scale_range[1]:
        raise ConfigurationError("scale_range is empty")


def generate_corpus(config: CorpusConfig, seed: int, jobs: int = 1) -> Corpus:
    """
    Generate train, adapt and test partitions.

    Training writers get ids 0..train_writers-1; test writers follow and
    own both the adapt and the test partition. Identical (config, seed)
    gives identical corpora regardless of ``jobs``.

    Args:
        config: Corpus description.
        seed: Master seed.
        jobs: Worker processes used for rendering.

    Returns:
        The generated corpus.

    Raises:
        ConfigurationError: For zero writers, inexpressible alphabets or
            unreachable coverage.
    """
    validate_config(config)
    radicals = make_radicals(config.num_radicals, seed)
    glyphs = compose_glyphs(config.num_classes, config.num_radicals, seed)
    glyph_images = {g.class_id: render_glyph(g, radicals, config.line_height) for g in glyphs}
    table = successor_table(config, seed)

    train_ids = list(range(config.train_writers))
    test_ids = list(range(config.train_writers, config.train_writers + config.test_writers))
    styles = {w: writer_style(w, config, seed) for w in train_ids + test_ids}
    layout = {
        "train": (train_ids, config.train_lines_per_writer),
        "adapt": (test_ids, config.adapt_lines_per_writer),
        "test": (test_ids, config.test_lines_per_writer),
    }

    line_id = 0
    corpus = Corpus(config=config, seed=seed, glyphs=glyphs, styles=styles)
    for p_index, name in enumerate(PARTITIONS):
        writers, per_writer = layout[name]
        owners = [w for w in writers for _ in range(per_writer)]
        transcripts = [
            sample_transcript(config, table, sub_rng(seed, _LINES, p_index, i, 0))
            for i in range(len(owners))
        ]
        if name == "train":
            enforce_coverage(transcripts, config, seed)
        line_jobs = [
            LineJob(
                line_id=line_id + i,
                writer_id=w,
                transcript=t,
                style=styles[w],
                seed=seed,
                partition_index=p_index,
                line_index=i,
            )
            for i, (w, t) in enumerate(zip(owners, transcripts))
        ]
        line_id += len(line_jobs)
        render = partial(render_line, glyph_images=glyph_images, max_gap=config.max_gap)
        corpus.partitions[name] = parallel_map(render, line_jobs, jobs)
        logger.info("Generated %d %s lines from %d writers", len(line_jobs), name, len(writers))
    return corpus


def identity_render(config: CorpusConfig, seed: int, class_id: int) -> np.ndarray:
    """Identity-style render of one class (used to inspect radical sharing)."""
    radicals = make_radicals(config.num_radicals, seed)
    glyphs = compose_glyphs(config.num_classes, config.num_radicals, seed)
    return render_glyph(glyphs[class_id], radicals, config.line_height)
