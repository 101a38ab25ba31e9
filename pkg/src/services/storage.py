"""
Artifact Storage

Workspace layout and codecs for every artifact: versioned little-endian
binary blobs, TSV/CSV/JSON text files and run manifests.

Binary blobs share one container: a 4-byte magic, a little-endian
uint32 header length, a JSON header (format version, array directory)
and the raw array bytes in directory order. Frame features use their own
flat per-line layout of float32 frames, see `save_features`.
"""
import csv
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from src.models.classifier import ClassifierSpec, StatePrior, WriterProfile
from src.models.corpus import PARTITIONS, Corpus, CorpusConfig, GlyphSpec, TextLineSample, WriterStyle
from src.models.decoding import DecodeResult
from src.models.features import FrameSequence
from src.models.hmm import Alignment, CharacterHMM, GaussianEmission, GaussianNodeStats, PositionedState
from src.models.report import RunManifest
from src.models.tying import Question, StateTyingMap, TyingNode, TyingTree
from src.services.classifier_service import AdaptiveClassifier
from src.services.hmm_service import HmmSet
from src.services.lm_service import RnnLm
from src.utils.errors import ArtifactError, ArtifactVersionError
from src.utils.helpers import as_jsonable, file_digest, tree_digest, utc_timestamp
from src.utils.validators import ensure, validate_stochastic_rows

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

CORPUS_MAGIC = b"PHC1"
FEATURE_MAGIC = b"PHF1"
GMM_MAGIC = b"PHG1"
CLASSIFIER_MAGIC = b"PHW1"
RNNLM_MAGIC = b"PHR1"


class Workspace:
    """Paths of every artifact below one work directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    def features_file(self, partition: str) -> Path:
        return self.root / "features" / f"{partition}.bin"

    @property
    def gmm_file(self) -> Path:
        return self.root / "gmm" / "gmmhmm.bin"

    @property
    def tied_gmm_file(self) -> Path:
        return self.root / "gmm" / "tied.bin"

    @property
    def align_file(self) -> Path:
        return self.root / "gmm" / "align.tsv"

    @property
    def questions_file(self) -> Path:
        return self.root / "questions.tsv"

    @property
    def tying_file(self) -> Path:
        return self.root / "tying.tsv"

    @property
    def tying_dir(self) -> Path:
        return self.root / "tying"

    @property
    def trees_file(self) -> Path:
        return self.tying_dir / "trees.json"

    @property
    def grown_trees_file(self) -> Path:
        return self.tying_dir / "grown.json"

    @property
    def classifier_file(self) -> Path:
        return self.root / "nn" / "wcnn.bin"

    @property
    def codes_file(self) -> Path:
        return self.root / "nn" / "codes.csv"

    @property
    def arpa_file(self) -> Path:
        return self.root / "lm" / "lm.arpa"

    @property
    def rnnlm_file(self) -> Path:
        return self.root / "lm" / "rnnlm.bin"

    @property
    def decode_dir(self) -> Path:
        return self.root / "decode"

    @property
    def multipass_dir(self) -> Path:
        return self.root / "multipass"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    def manifest_file(self, step: str) -> Path:
        return self.root / f"{step}.manifest.json"

    def require(self, path: Path, step: str) -> Path:
        """
        Raises:
            ArtifactError: If the artifact is missing.
        """
        if not path.exists():
            raise ArtifactError(f"Missing artifact {path}; run `phmm {step}` first")
        return path


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

def write_blob(path: Path, magic: bytes, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    directory, payload = [], []
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        directory.append({"name": name, "dtype": array.dtype.str, "shape": list(array.shape)})
        payload.append(array.tobytes())
    meta = json.dumps(
        as_jsonable({**header, "version": FORMAT_VERSION, "arrays": directory}),
        sort_keys=True,
    ).encode()
    with open(path, "wb") as handle:
        handle.write(magic)
        handle.write(struct.pack("<I", len(meta)))
        handle.write(meta)
        for chunk in payload:
            handle.write(chunk)


def read_blob(path: Path, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    """
    Raises:
        ArtifactError: If the file is missing or not of the expected kind.
        ArtifactVersionError: If it was written by another format version.
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Missing artifact {path}")
    data = path.read_bytes()
    if data[:4] != magic:
        raise ArtifactError(f"{path} is not a {magic.decode()} artifact")
    (size,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + size])
    except ValueError as exc:
        raise ArtifactError(f"Corrupt header in {path}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"{path} has format version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    arrays, offset = {}, 8 + size
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        offset += count * dtype.itemsize
    if offset != len(data):
        raise ArtifactError(f"{path} has {len(data) - offset} trailing bytes")
    return header, arrays


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def _join(values: Iterable) -> str:
    return " ".join(str(v) for v in values)


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split()]


def save_corpus(corpus: Corpus, directory: Path) -> List[Path]:
    """Write lines.bin, transcripts.tsv and boundaries.tsv per partition plus corpus.json."""
    written = []
    for name in PARTITIONS:
        lines = corpus.partitions.get(name, [])
        part = directory / name
        part.mkdir(parents=True, exist_ok=True)
        pixels = np.concatenate([line.image.ravel() for line in lines]) if lines else np.zeros(0, np.uint8)
        write_blob(
            part / "lines.bin",
            CORPUS_MAGIC,
            {"partition": name, "lines": [[line.line_id, line.writer_id, *line.image.shape] for line in lines]},
            {"pixels": pixels.astype(np.uint8)},
        )
        with open(part / "transcripts.tsv", "w") as handle:
            for line in lines:
                handle.write(f"{line.line_id}\t{line.writer_id}\t{_join(line.transcript)}\n")
        with open(part / "boundaries.tsv", "w") as handle:
            for line in lines:
                for index, (start, end) in enumerate(line.char_boundaries):
                    handle.write(f"{line.line_id}\t{index}\t{start}\t{end}\n")
        written += [part / "lines.bin", part / "transcripts.tsv", part / "boundaries.tsv"]
    meta = {
        "version": FORMAT_VERSION,
        "seed": corpus.seed,
        "config": corpus.config.model_dump(mode="json"),
        "glyphs": [g.model_dump(mode="json") for g in corpus.glyphs],
        "styles": [s.model_dump(mode="json") for _, s in sorted(corpus.styles.items())],
    }
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    written.append(directory / "corpus.json")
    logger.info("Saved corpus to %s", directory)
    return written


def load_corpus(directory: Path, partitions: Sequence[str] = PARTITIONS) -> Corpus:
    """
    Raises:
        ArtifactError: If a file is missing or inconsistent.
    """
    meta_path = directory / "corpus.json"
    if not meta_path.exists():
        raise ArtifactError(f"Missing artifact {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(f"{meta_path} has format version {meta.get('version')}")
    corpus = Corpus(
        config=CorpusConfig.model_validate(meta["config"]),
        seed=int(meta["seed"]),
        glyphs=[GlyphSpec.model_validate(g) for g in meta["glyphs"]],
        styles={s["writer_id"]: WriterStyle.model_validate(s) for s in meta["styles"]},
    )
    for name in partitions:
        part = directory / name
        header, arrays = read_blob(part / "lines.bin", CORPUS_MAGIC)
        transcripts: Dict[int, List[int]] = {}
        for row in _read_rows(part / "transcripts.tsv"):
            transcripts[int(row[0])] = _ints(row[2]) if len(row) > 2 else []
        boundaries: Dict[int, List[Tuple[int, int]]] = {}
        for row in _read_rows(part / "boundaries.tsv"):
            boundaries.setdefault(int(row[0]), []).append((int(row[2]), int(row[3])))
        lines, offset = [], 0
        pixels = arrays["pixels"]
        for line_id, writer_id, height, width in header["lines"]:
            image = pixels[offset:offset + height * width].reshape(height, width).copy()
            offset += height * width
            if line_id not in transcripts:
                raise ArtifactError(f"Line {line_id} has no transcript in {part}")
            lines.append(TextLineSample(line_id, writer_id, transcripts[line_id], image, boundaries.get(line_id, [])))
        corpus.partitions[name] = lines
    return corpus


def _read_rows(path: Path) -> List[List[str]]:
    if not path.exists():
        raise ArtifactError(f"Missing artifact {path}")
    with open(path) as handle:
        return [line.rstrip("\n").split("\t") for line in handle if line.strip()]


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

# Features file: magic, then little-endian uint32 D, format version, patch
# height, patch width, frame shift, window and line count. Each line is
# (line_id, T+1) as uint32, (T+1)*D float32 frames, then (T+1)*H*W uint8
# patches.
FEATURE_HEADER = struct.Struct("<7I")
FEATURE_LINE = struct.Struct("<2I")


def save_features(sequences: Sequence[FrameSequence], path: Path) -> None:
    dim = sequences[0].dim if sequences else 0
    height, width = sequences[0].patches.shape[1:] if sequences else (0, 0)
    shift = sequences[0].frame_shift if sequences else 0
    window = sequences[0].window if sequences else 0
    for s in sequences:
        if s.dim != dim or s.patches.shape[1:] != (height, width) or (s.frame_shift, s.window) != (shift, window):
            raise ArtifactError(f"Line {s.line_id} has a frame geometry unlike line {sequences[0].line_id}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(FEATURE_MAGIC)
        handle.write(FEATURE_HEADER.pack(dim, FORMAT_VERSION, height, width, shift, window, len(sequences)))
        for s in sequences:
            handle.write(FEATURE_LINE.pack(s.line_id, len(s)))
            handle.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
            handle.write(np.rint(s.patches * 255.0).astype(np.uint8).tobytes())


def load_features(path: Path) -> Dict[int, FrameSequence]:
    """
    Raises:
        ArtifactError: If the file is missing, not a features file or truncated.
        ArtifactVersionError: If it was written by another format version.
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Missing artifact {path}")
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ArtifactError(f"{path} is not a {FEATURE_MAGIC.decode()} artifact")
    if len(data) < 4 + FEATURE_HEADER.size:
        raise ArtifactError(f"{path} is truncated")
    dim, version, height, width, shift, window, count = FEATURE_HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    sequences, offset = {}, 4 + FEATURE_HEADER.size
    try:
        for _ in range(count):
            line_id, frames = FEATURE_LINE.unpack_from(data, offset)
            offset += FEATURE_LINE.size
            vectors = np.frombuffer(data, dtype="<f4", count=frames * dim, offset=offset)
            offset += vectors.nbytes
            pixels = np.frombuffer(data, dtype=np.uint8, count=frames * height * width, offset=offset)
            offset += pixels.nbytes
            sequences[line_id] = FrameSequence(
                line_id=line_id,
                frames=vectors.reshape(frames, dim).astype(np.float64),
                patches=pixels.reshape(frames, height, width).astype(np.float64) / 255.0,
                frame_shift=shift,
                window=window,
            )
    except (struct.error, ValueError) as exc:
        raise ArtifactError(f"{path} is truncated") from exc
    if offset != len(data):
        raise ArtifactError(f"{path} has {len(data) - offset} trailing bytes")
    return sequences


# ---------------------------------------------------------------------------
# GMM-HMM and alignments
# ---------------------------------------------------------------------------

def save_hmm_set(model: HmmSet, path: Path) -> None:
    write_blob(
        path,
        GMM_MAGIC,
        {
            "num_classes": model.num_classes,
            "num_states": model.num_states,
            "variance_floor": model.variance_floor,
            "components": [e.num_components for e in model.emissions],
        },
        {
            "transitions": np.stack([h.transitions for h in model.hmms]),
            "tying": model.tying.ids,
            "weights": np.concatenate([e.weights for e in model.emissions]),
            "means": np.concatenate([e.means for e in model.emissions]),
            "variances": np.concatenate([e.variances for e in model.emissions]),
        },
    )


def load_hmm_set(path: Path) -> HmmSet:
    header, arrays = read_blob(path, GMM_MAGIC)
    transitions = arrays["transitions"]
    ensure(validate_stochastic_rows(transitions.reshape(-1, transitions.shape[-1])), ArtifactError, str(path))
    hmms = [CharacterHMM(c, arrays["transitions"][c].copy()) for c in range(header["num_classes"])]
    emissions, offset = [], 0
    for count in header["components"]:
        emissions.append(GaussianEmission(
            arrays["weights"][offset:offset + count].copy(),
            arrays["means"][offset:offset + count].copy(),
            arrays["variances"][offset:offset + count].copy(),
        ))
        offset += count
    return HmmSet(hmms, emissions, StateTyingMap(arrays["tying"].copy()), header["variance_floor"])


def save_alignments(alignments: Sequence[Alignment], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for alignment in alignments:
            labels = _join(f"{label.class_id}:{label.position}" for label in alignment.labels)
            handle.write(f"{alignment.line_id}\t{alignment.score!r}\t{labels}\n")


def load_alignments(path: Path) -> List[Alignment]:
    alignments = []
    for row in _read_rows(path):
        labels = [PositionedState(*map(int, item.split(":"))) for item in row[2].split()]
        char_index, current = [], 0
        for t, label in enumerate(labels):
            if t > 0 and label.position < labels[t - 1].position:
                current += 1
            char_index.append(current)
        alignments.append(Alignment(int(row[0]), labels, np.zeros(len(labels)), char_index, float(row[1])))
    return alignments


# ---------------------------------------------------------------------------
# Tying
# ---------------------------------------------------------------------------

def save_questions(questions: Mapping[int, Sequence[Question]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for position in sorted(questions):
            for q in questions[position]:
                handle.write(f"{position}\t{q.id}\t{_join(sorted(q.members))}\n")


def load_questions(path: Path) -> Dict[int, List[Question]]:
    questions: Dict[int, List[Question]] = {}
    for row in _read_rows(path):
        position = int(row[0])
        questions.setdefault(position, []).append(
            Question(id=int(row[1]), position=position, members=frozenset(_ints(row[2])))
        )
    return questions


def save_tying(tying: StateTyingMap, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for c in range(tying.num_classes):
            for s in range(tying.num_states):
                handle.write(f"{c}\t{s}\t{int(tying.ids[c, s])}\n")


def load_tying(path: Path) -> StateTyingMap:
    rows = [tuple(map(int, row)) for row in _read_rows(path)]
    if not rows:
        raise ArtifactError(f"{path} is empty")
    ids = np.full((max(r[0] for r in rows) + 1, max(r[1] for r in rows) + 1), -1, dtype=np.int64)
    for c, s, tied in rows:
        ids[c, s] = tied
    if (ids < 0).any():
        raise ArtifactError(f"{path} does not cover every positioned state")
    return StateTyingMap(ids)


def _node_to_dict(node: TyingNode) -> dict:
    data = {
        "node_id": node.node_id,
        "classes": sorted(node.classes),
        "occupancy": node.stats.occupancy,
        "first": node.stats.first,
        "second": node.stats.second,
        "log_likelihood": node.log_likelihood,
        "question_id": node.question_id,
        "gain": node.gain,
    }
    if node.left is not None and node.right is not None:
        data["children"] = [_node_to_dict(node.left), _node_to_dict(node.right)]
    return data


def _node_from_dict(data: dict) -> TyingNode:
    node = TyingNode(
        node_id=data["node_id"],
        classes=frozenset(data["classes"]),
        stats=GaussianNodeStats(data["occupancy"], np.asarray(data["first"]), np.asarray(data["second"])),
        log_likelihood=data["log_likelihood"],
        question_id=data["question_id"],
        gain=data["gain"],
    )
    if "children" in data:
        node.left, node.right = (_node_from_dict(d) for d in data["children"])
    return node


def save_trees(trees: Sequence[TyingTree], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"version": FORMAT_VERSION, "trees": [{"position": t.position, "root": _node_to_dict(t.root)} for t in trees]}
    path.write_text(json.dumps(as_jsonable(payload)))


def load_trees(path: Path) -> List[TyingTree]:
    if not path.exists():
        raise ArtifactError(f"Missing artifact {path}")
    payload = json.loads(path.read_text())
    if payload.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(f"{path} has format version {payload.get('version')}")
    return [TyingTree(t["position"], _node_from_dict(t["root"])) for t in payload["trees"]]


# ---------------------------------------------------------------------------
# Classifier and writer codes
# ---------------------------------------------------------------------------

def save_classifier(model: AdaptiveClassifier, prior: StatePrior, path: Path) -> None:
    arrays = {}
    for name, tensor in model.state_dict().items():
        value = tensor.detach().cpu().numpy()
        arrays[name] = value.astype(np.float32) if value.dtype.kind == "f" else value.astype(np.int64)
    arrays["__prior__"] = prior.probs.astype(np.float64)
    write_blob(path, CLASSIFIER_MAGIC, {"spec": model.spec.model_dump(mode="json")}, arrays)


def load_classifier(path: Path) -> Tuple[AdaptiveClassifier, StatePrior]:
    header, arrays = read_blob(path, CLASSIFIER_MAGIC)
    model = AdaptiveClassifier(ClassifierSpec.model_validate(header["spec"]))
    state = {name: torch.from_numpy(value.copy()) for name, value in arrays.items() if name != "__prior__"}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ArtifactError(f"{path} does not match its layer description: {exc}") from exc
    model.eval()
    return model, StatePrior(arrays["__prior__"].copy())


def save_codes(profiles: Mapping[int, WriterProfile], path: Path) -> None:
    """codes.csv: writer_id followed by the G code values."""
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = next(iter(profiles.values())).code_dim if profiles else 0
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["writer_id"] + [f"g{k}" for k in range(dim)])
        for writer_id, profile in sorted(profiles.items()):
            writer.writerow([writer_id] + [repr(float(v)) for v in profile.code])


def load_codes(path: Path) -> Dict[int, WriterProfile]:
    if not path.exists():
        raise ArtifactError(f"Missing artifact {path}")
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    return {
        int(row[0]): WriterProfile(writer_id=int(row[0]), code=np.array([float(v) for v in row[1:]]))
        for row in rows[1:]
    }


# ---------------------------------------------------------------------------
# Recurrent LM
# ---------------------------------------------------------------------------

def save_rnnlm(model: RnnLm, path: Path) -> None:
    write_blob(
        path,
        RNNLM_MAGIC,
        {"vocab_size": model.vocab_size, "hidden_size": model.hidden_size},
        {name: p.detach().numpy().astype(np.float32) for name, p in model.named_parameters()},
    )


def load_rnnlm(path: Path) -> RnnLm:
    header, arrays = read_blob(path, RNNLM_MAGIC)
    model = RnnLm(header["vocab_size"], header["hidden_size"])
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(arrays[name].copy()))
    return model


# ---------------------------------------------------------------------------
# Decoding outputs
# ---------------------------------------------------------------------------

def save_decode_results(results: Sequence[DecodeResult], directory: Path, prefix: str = "") -> List[Path]:
    """hyp.tsv, align_out.tsv and nbest.tsv."""
    directory.mkdir(parents=True, exist_ok=True)
    hyp, align, nbest = (directory / f"{prefix}{n}.tsv" for n in ("hyp", "align_out", "nbest"))
    with open(hyp, "w") as h, open(align, "w") as a, open(nbest, "w") as n:
        for r in sorted(results, key=lambda r: r.line_id):
            h.write(f"{r.line_id}\t{_join(r.transcript)}\n")
            spans = " ".join(f"{start}-{end}" for start, end in r.boundaries)
            a.write(f"{r.line_id}\t{_join(r.alignment)}\t{spans}\n")
            for rank, hypothesis in enumerate(r.nbest, start=1):
                n.write(
                    f"{r.line_id}\t{rank}\t{r.score if rank == 1 else ''}\t{hypothesis.acoustic!r}\t"
                    f"{hypothesis.lm!r}\t{_join(hypothesis.transcript)}\n"
                )
    return [hyp, align, nbest]


def load_hypotheses(path: Path) -> Dict[int, List[int]]:
    return {int(row[0]): _ints(row[1]) if len(row) > 1 else [] for row in _read_rows(path)}


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def digest(path: Path) -> str:
    return tree_digest(path) if path.is_dir() else file_digest(path)


def write_manifest(
    workspace: Workspace,
    step: str,
    version: str,
    inputs: Mapping[str, Path],
    outputs: Mapping[str, Path],
    seeds: Optional[Mapping[str, int]] = None,
    settings: Optional[dict] = None,
    notes: Optional[str] = None,
) -> RunManifest:
    """Record inputs, outputs and their sha256 digests for one step."""
    manifest = RunManifest(
        step=step,
        version=version,
        created_at=utc_timestamp(),
        seeds=dict(seeds or {}),
        inputs={name: digest(Path(p)) for name, p in inputs.items() if Path(p).exists()},
        outputs={name: digest(Path(p)) for name, p in outputs.items() if Path(p).exists()},
        settings=as_jsonable(settings or {}),
        notes=notes,
    )
    path = workspace.manifest_file(step)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    return manifest
