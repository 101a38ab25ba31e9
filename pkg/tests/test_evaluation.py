"""
Tests for character error rate scoring and report files.
"""
import csv
from functools import lru_cache

import pytest

from src.models.report import CerCounts, PassRecord
from src.services.evaluation_service import (
    cer,
    compactness_ratios,
    edit_counts,
    output_layer_size,
    read_report_json,
    write_report_csv,
    write_report_json,
)


def recursive_distance(reference, hypothesis):
    """Levenshtein distance by plain recursion."""
    reference, hypothesis = tuple(reference), tuple(hypothesis)

    @lru_cache(maxsize=None)
    def distance(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            distance(i - 1, j - 1) + (reference[i - 1] != hypothesis[j - 1]),
            distance(i - 1, j) + 1,
            distance(i, j - 1) + 1,
        )

    return distance(len(reference), len(hypothesis))


class TestEditCounts:
    """Test cases for edit operation counting."""

    def test_single_substitution(self):
        """Test 'a b c' against 'a x c' is one substitution."""
        counts = edit_counts([0, 1, 2], [0, 9, 2])
        assert (counts.N, counts.N_s, counts.N_i, counts.N_d) == (3, 1, 0, 0)
        assert counts.cer == pytest.approx(1 / 3)

    def test_matches_recursive_distance(self, rng):
        """Test 200 random pairs against the recursive edit distance."""
        for _ in range(200):
            reference = list(rng.integers(0, 4, rng.integers(0, 9)))
            hypothesis = list(rng.integers(0, 4, rng.integers(0, 9)))
            counts = edit_counts(reference, hypothesis)
            assert counts.errors == recursive_distance(reference, hypothesis)
            assert counts.N == len(reference)
            assert len(hypothesis) == counts.N - counts.N_d + counts.N_i
            assert counts.N_s + counts.N_d <= counts.N

    def test_empty_sides(self):
        """Test empty hypotheses are deletions and empty references insertions."""
        assert edit_counts([1, 2], []).N_d == 2
        assert edit_counts([], [1, 2]).N_i == 2
        assert edit_counts([], []).cer == 0.0

    def test_insertions_push_cer_above_one(self):
        """Test CER exceeds one when insertions dominate."""
        assert edit_counts([1], [2, 3, 4]).cer > 1.0

    def test_substitutions_preferred(self):
        """Test a changed symbol counts as a substitution, not an insertion and a deletion."""
        counts = edit_counts([1, 2], [1, 3])
        assert (counts.N_s, counts.N_i, counts.N_d) == (1, 0, 0)


class TestReports:
    """Test cases for corpus-level reports."""

    def test_totals_and_writers(self):
        """Test counts add up over lines and writers."""
        references = {1: [0, 1, 2], 2: [3, 3], 3: [1]}
        hypotheses = {1: [0, 9, 2], 2: [3, 3, 3], 3: [1]}
        report = cer(references, hypotheses, writers={1: 10, 2: 10, 3: 11})
        assert (report.N, report.N_s, report.N_i, report.N_d) == (6, 1, 1, 0)
        assert report.CER == pytest.approx(2 / 6)
        assert report.per_writer[10].errors == 2
        assert report.per_writer[11].errors == 0

    def test_missing_line(self):
        """Test a line without hypothesis counts as deletions and is listed."""
        report = cer({1: [0, 1], 2: [2]}, {1: [0, 1], 5: [4]})
        assert report.missing_lines == [2]
        assert report.N_d == 1
        assert report.N == 3

    def test_json_round_trip(self, tmp_path):
        """Test reports survive a JSON round trip."""
        report = cer({1: [0, 1]}, {1: [1]}, writers={1: 4})
        report.passes.append(PassRecord(index=1, CER=report.CER, seconds=0.5))
        path = tmp_path / "cer.json"
        write_report_json(report, path)
        assert read_report_json(path) == report

    def test_csv_rows(self, tmp_path):
        """Test the CSV holds a total row and one row per writer."""
        report = cer({1: [0], 2: [1]}, {1: [0], 2: [2]}, writers={1: 0, 2: 1})
        path = tmp_path / "cer.csv"
        write_report_csv(report, path)
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][:3] == ["scope", "id", "N"]
        assert [row[0] for row in rows[1:]] == ["total", "writer", "writer"]

    def test_counts_add(self):
        """Test edit counts add field by field."""
        total = CerCounts(N=2, N_s=1) + CerCounts(N=3, N_i=2, N_d=1)
        assert (total.N, total.N_s, total.N_i, total.N_d) == (5, 1, 2, 1)


class TestCompactness:
    """Test cases for output-layer compactness."""

    def test_output_layer_size(self):
        """Test weights plus biases per output unit."""
        assert output_layer_size(100, 30) == 101 * 30

    def test_ratios_follow_state_counts(self):
        """Test ratios shrink with fewer tied states and equal one untied."""
        ratios = compactness_ratios({5.0: 50, 3.0: 30, 1.0: 10}, hidden_units=20, num_classes=10, num_states=5)
        assert ratios[5.0] == pytest.approx(1.0)
        assert ratios[1.0] == pytest.approx(0.2)
        assert ratios[1.0] < ratios[3.0] < ratios[5.0]
