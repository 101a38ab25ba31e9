"""
Tests for artifact codecs and run manifests.
"""
import json
import struct

import numpy as np
import pytest

from src.models.classifier import ClassifierSpec, StatePrior, WriterProfile
from src.models.tying import Question, StateTyingMap
from src.services.classifier_service import build_classifier, frame_log_posteriors
from src.services.hmm_service import align_lines, flat_start
from src.services.lm_service import build_rnnlm, sequence_log_prob
from src.services.storage import (
    GMM_MAGIC,
    Workspace,
    load_alignments,
    load_classifier,
    load_codes,
    load_corpus,
    load_features,
    load_hmm_set,
    load_questions,
    load_rnnlm,
    load_tying,
    read_blob,
    save_alignments,
    save_classifier,
    save_codes,
    save_corpus,
    save_features,
    save_hmm_set,
    save_questions,
    save_rnnlm,
    save_tying,
    write_blob,
    write_manifest,
)
from src.utils.errors import ArtifactError, ArtifactVersionError


class TestBlobContainer:
    """Test cases for the binary container."""

    def test_round_trip(self, tmp_path):
        """Test arrays and header survive with their dtypes."""
        path = tmp_path / "blob.bin"
        arrays = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.linspace(0, 1, 4)}
        write_blob(path, GMM_MAGIC, {"note": "x"}, arrays)
        header, loaded = read_blob(path, GMM_MAGIC)
        assert header["note"] == "x"
        np.testing.assert_array_equal(loaded["a"], arrays["a"])
        np.testing.assert_array_equal(loaded["b"], arrays["b"])

    def test_version_mismatch(self, tmp_path):
        """Test a blob from another format version is refused."""
        path = tmp_path / "blob.bin"
        write_blob(path, GMM_MAGIC, {}, {"a": np.zeros(2)})
        data = path.read_bytes()
        path.write_bytes(data.replace(b'"version": 1', b'"version": 9'))
        with pytest.raises(ArtifactVersionError):
            read_blob(path, GMM_MAGIC)

    def test_wrong_magic(self, tmp_path):
        """Test a blob of another kind is refused."""
        path = tmp_path / "blob.bin"
        write_blob(path, b"XXXX", {}, {"a": np.zeros(2)})
        with pytest.raises(ArtifactError):
            read_blob(path, GMM_MAGIC)

    def test_trailing_bytes(self, tmp_path):
        """Test extra bytes after the arrays are refused."""
        path = tmp_path / "blob.bin"
        write_blob(path, GMM_MAGIC, {}, {"a": np.zeros(2)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ArtifactError):
            read_blob(path, GMM_MAGIC)

    def test_missing_file(self, tmp_path):
        """Test a missing artifact raises."""
        with pytest.raises(ArtifactError):
            read_blob(tmp_path / "absent.bin", GMM_MAGIC)


class TestCorpusArtifacts:
    """Test cases for corpus and feature files."""

    def test_corpus_round_trip(self, tmp_path, tiny_corpus):
        """Test lines, transcripts and boundaries survive."""
        save_corpus(tiny_corpus, tmp_path)
        loaded = load_corpus(tmp_path)
        assert loaded.seed == tiny_corpus.seed
        assert loaded.config == tiny_corpus.config
        for name, lines in tiny_corpus.partitions.items():
            for original, restored in zip(lines, loaded.partitions[name]):
                assert (restored.line_id, restored.writer_id) == (original.line_id, original.writer_id)
                assert restored.transcript == original.transcript
                assert restored.char_boundaries == list(original.char_boundaries)
                np.testing.assert_array_equal(restored.image, original.image)

    def test_missing_corpus(self, tmp_path):
        """Test loading an empty directory raises."""
        with pytest.raises(ArtifactError):
            load_corpus(tmp_path)

    def test_features_round_trip(self, tmp_path, tiny_frames):
        """Test frames and patches survive."""
        sequences = list(tiny_frames.values())[:3]
        path = tmp_path / "features.bin"
        save_features(sequences, path)
        loaded = load_features(path)
        for sequence in sequences:
            restored = loaded[sequence.line_id]
            np.testing.assert_allclose(restored.frames, sequence.frames, rtol=1e-6, atol=1e-7)
            np.testing.assert_allclose(restored.patches, sequence.patches, atol=1e-12)
            assert (restored.frame_shift, restored.window) == (sequence.frame_shift, sequence.window)

    def test_features_layout(self, tmp_path, tiny_frames):
        """Test the file holds D and per-line float32 frames after the magic."""
        sequences = list(tiny_frames.values())[:2]
        path = tmp_path / "features.bin"
        save_features(sequences, path)
        data = path.read_bytes()
        assert data[:4] == b"PHF1"
        dim, version, height, width = struct.unpack_from("<4I", data, 4)
        assert (dim, version) == (sequences[0].dim, 1)
        offset = 4 + 7 * 4
        line_id, count = struct.unpack_from("<2I", data, offset)
        assert (line_id, count) == (sequences[0].line_id, len(sequences[0]))
        frames = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset + 8)
        np.testing.assert_array_equal(frames.reshape(count, dim), sequences[0].frames.astype(np.float32))
        per_line = [8 + len(s) * (s.dim * 4 + height * width) for s in sequences]
        assert len(data) == offset + sum(per_line)

    def test_features_truncated(self, tmp_path, tiny_frames):
        """Test a cut-off features file is refused."""
        path = tmp_path / "features.bin"
        save_features(list(tiny_frames.values())[:2], path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ArtifactError):
            load_features(path)


class TestModelArtifacts:
    """Test cases for model files."""

    def test_hmm_set_and_alignments(self, tmp_path, tiny_training_lines, tiny_config):
        """Test a GMM-HMM and its alignments survive."""
        model, _ = flat_start(tiny_training_lines, tiny_config.num_classes, 3)
        save_hmm_set(model, tmp_path / "gmm.bin")
        loaded = load_hmm_set(tmp_path / "gmm.bin")
        frames = tiny_training_lines[0].frames
        np.testing.assert_allclose(loaded.emission_scores(frames), model.emission_scores(frames))
        np.testing.assert_array_equal(loaded.tying.ids, model.tying.ids)

        alignments = align_lines(model, tiny_training_lines)
        save_alignments(alignments, tmp_path / "align.tsv")
        restored = load_alignments(tmp_path / "align.tsv")
        assert [a.labels for a in restored] == [a.labels for a in alignments]
        assert [a.char_index for a in restored] == [a.char_index for a in alignments]

    def test_questions_and_tying(self, tmp_path):
        """Test question sets and tying maps survive."""
        questions = {0: [Question(id=0, position=0, members=frozenset({1, 3}))]}
        save_questions(questions, tmp_path / "questions.tsv")
        assert load_questions(tmp_path / "questions.tsv") == questions
        tying = StateTyingMap(np.array([[0, 1], [0, 2]]))
        save_tying(tying, tmp_path / "tying.tsv")
        np.testing.assert_array_equal(load_tying(tmp_path / "tying.tsv").ids, tying.ids)

    def test_incomplete_tying(self, tmp_path):
        """Test a tying file missing a state is refused."""
        (tmp_path / "tying.tsv").write_text("0\t0\t0\n1\t1\t1\n")
        with pytest.raises(ArtifactError):
            load_tying(tmp_path / "tying.tsv")

    def test_classifier_round_trip(self, tmp_path, rng):
        """Test weights, layer description and prior survive."""
        spec = ClassifierSpec(input_height=8, input_width=8, channels=(2,), kernel_size=3, hidden_units=4,
                              num_outputs=3, adapted_blocks=1, code_dim=2)
        model = build_classifier(spec, 1)
        model.eval()
        prior = StatePrior(np.array([0.2, 0.3, 0.5]))
        save_classifier(model, prior, tmp_path / "wcnn.bin")
        loaded, loaded_prior = load_classifier(tmp_path / "wcnn.bin")
        patches = rng.uniform(size=(5, 8, 8))
        code = np.array([0.3, -0.1])
        np.testing.assert_allclose(frame_log_posteriors(loaded, patches, code),
                                   frame_log_posteriors(model, patches, code), rtol=1e-6)
        np.testing.assert_allclose(loaded_prior.probs, prior.probs)

    def test_codes_round_trip(self, tmp_path):
        """Test writer codes survive exactly."""
        profiles = {4: WriterProfile(4, np.array([0.1, -2.5])), 2: WriterProfile(2, np.array([1e-8, 3.0]))}
        save_codes(profiles, tmp_path / "codes.csv")
        loaded = load_codes(tmp_path / "codes.csv")
        assert sorted(loaded) == [2, 4]
        for writer_id, profile in profiles.items():
            np.testing.assert_array_equal(loaded[writer_id].code, profile.code)

    def test_rnnlm_round_trip(self, tmp_path):
        """Test the recurrent LM scores lines identically after reloading."""
        model = build_rnnlm(3, 5, seed=4)
        save_rnnlm(model, tmp_path / "rnnlm.bin")
        loaded = load_rnnlm(tmp_path / "rnnlm.bin")
        assert sequence_log_prob(loaded, [0, 2, 1]) == pytest.approx(sequence_log_prob(model, [0, 2, 1]))


class TestManifest:
    """Test cases for run manifests."""

    def test_digests_recorded(self, tmp_path):
        """Test existing inputs and outputs are hashed and missing ones skipped."""
        workspace = Workspace(tmp_path)
        output = tmp_path / "out.txt"
        output.write_text("hello")
        manifest = write_manifest(workspace, "synth", "1.0.0", {"absent": tmp_path / "nope"},
                                  {"out": output}, seeds={"corpus": 3})
        assert manifest.inputs == {}
        assert len(manifest.outputs["out"]) == 64
        stored = json.loads(workspace.manifest_file("synth").read_text())
        assert stored["seeds"] == {"corpus": 3}

    def test_require(self, tmp_path):
        """Test missing prerequisites name the step to run."""
        workspace = Workspace(tmp_path)
        with pytest.raises(ArtifactError, match="phmm train-gmm"):
            workspace.require(workspace.gmm_file, "train-gmm")
