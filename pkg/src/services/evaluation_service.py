"""
Evaluation Service

Character error rate by Levenshtein alignment, CER reports and the
classifier compactness bookkeeping.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.models.report import CerCounts, CerReport

logger = logging.getLogger(__name__)


def edit_counts(reference: Sequence[int], hypothesis: Sequence[int]) -> CerCounts:
    """
    Unit-cost edit operations turning the reference into the hypothesis.

    Among minimal-cost alignments the one with the most substitutions
    wins, which fixes the split into substitutions, insertions and
    deletions.
    """
    n, m = len(reference), len(hypothesis)
    # cost[i][j] = (errors, insertions + deletions, substitutions, insertions, deletions)
    cost: List[List[Tuple[int, int, int, int, int]]] = [[(0, 0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i, 0, 0, i)
    for j in range(1, m + 1):
        cost[0][j] = (j, j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, g, s, ins, d = cost[i - 1][j - 1]
            if reference[i - 1] == hypothesis[j - 1]:
                diagonal = (e, g, s, ins, d)
            else:
                diagonal = (e + 1, g, s + 1, ins, d)
            e, g, s, ins, d = cost[i - 1][j]
            deletion = (e + 1, g + 1, s, ins, d + 1)
            e, g, s, ins, d = cost[i][j - 1]
            insertion = (e + 1, g + 1, s, ins + 1, d)
            cost[i][j] = min(diagonal, deletion, insertion, key=lambda c: (c[0], c[1]))
    errors, _, subs, ins, dels = cost[n][m]
    return CerCounts(N=n, N_s=subs, N_i=ins, N_d=dels)


def cer(
    references: Mapping[int, Sequence[int]],
    hypotheses: Mapping[int, Sequence[int]],
    writers: Optional[Mapping[int, int]] = None,
) -> CerReport:
    """
    Sum edit counts over id-aligned lines.

    A reference line without hypothesis counts as all deletions and is
    listed in ``missing_lines``; hypotheses without reference are ignored.

    Args:
        references: Reference transcripts by line id.
        hypotheses: Recognized transcripts by line id.
        writers: Optional writer of each line for the per-writer breakdown.

    Returns:
        The report. CER may exceed 1 when insertions dominate.
    """
    total = CerCounts()
    per_writer: Dict[int, CerCounts] = {}
    missing = []
    for line_id in sorted(references):
        reference = references[line_id]
        if line_id in hypotheses:
            counts = edit_counts(reference, hypotheses[line_id])
        else:
            missing.append(line_id)
            counts = CerCounts(N=len(reference), N_d=len(reference))
        total = total + counts
        if writers is not None:
            writer = writers[line_id]
            per_writer[writer] = per_writer.get(writer, CerCounts()) + counts
    extra = sorted(set(hypotheses) - set(references))
    if missing:
        logger.warning("%d lines have no hypothesis; counted as deletions", len(missing))
    if extra:
        logger.warning("Ignoring %d hypotheses without reference", len(extra))
    return CerReport.from_counts(total, per_writer=per_writer, missing_lines=missing)


def write_report_json(report: CerReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))


def read_report_json(path: Path) -> CerReport:
    return CerReport.model_validate(json.loads(path.read_text()))


def write_report_csv(report: CerReport, path: Path) -> None:
    """Flat form: one row for the total, one per writer, one per pass."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["scope", "id", "N", "N_s", "N_i", "N_d", "CER", "seconds", "adaptation_seconds", "time_ratio"])
        writer.writerow(["total", "", report.N, report.N_s, report.N_i, report.N_d, report.CER, "", "", ""])
        for writer_id, counts in sorted(report.per_writer.items()):
            writer.writerow(["writer", writer_id, counts.N, counts.N_s, counts.N_i, counts.N_d, counts.cer, "", "", ""])
        for record in report.passes:
            writer.writerow(["pass", record.index, "", "", "", "", record.CER, record.seconds,
                             record.adaptation_seconds, record.time_ratio])


def output_layer_size(hidden_units: int, tied_states: int) -> int:
    """Weights plus biases of a classifier output layer over ``tied_states`` units."""
    return (hidden_units + 1) * tied_states


def compactness_ratios(
    tied_counts: Mapping[float, int],
    hidden_units: int,
    num_classes: int,
    num_states: int,
) -> Dict[float, float]:
    """
    Output-layer size of each tied system over that of the untied system.

    Args:
        tied_counts: Tied-state count per average-states setting.
        hidden_units: Width of the layer feeding the output.
        num_classes: Alphabet size.
        num_states: States per untied character HMM.

    Returns:
        Ratio per setting.
    """
    untied = output_layer_size(hidden_units, num_classes * num_states)
    return {avg: output_layer_size(hidden_units, count) / untied for avg, count in sorted(tied_counts.items())}
