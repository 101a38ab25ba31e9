"""
Export Commands

Graphviz renderings of the tying trees and a single table of every
writer code, for inspection outside the toolkit.
"""
import argparse
import logging
from pathlib import Path
from typing import Dict

from src.api.context import StepContext
from src.models.classifier import WriterProfile
from src.services.storage import load_codes, load_questions, load_trees, save_codes
from src.services.tying_service import tree_to_dot
from src.utils.errors import ArtifactError

logger = logging.getLogger(__name__)


def export_tree(args: argparse.Namespace) -> None:
    """One DOT file per HMM state position."""
    ctx = StepContext.from_args("export-tree", args)
    ws = ctx.workspace
    source = ws.grown_trees_file if args.grown else ws.trees_file
    trees = load_trees(ws.require(source, "tie"))
    questions = load_questions(ws.questions_file) if ws.questions_file.exists() else {}
    out_dir = Path(args.output) if args.output else ws.tying_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for tree in trees:
        path = out_dir / f"position_{tree.position}.dot"
        path.write_text(tree_to_dot(tree, questions.get(tree.position)))
        outputs[f"position_{tree.position}"] = path
    logger.info("Wrote %d trees to %s", len(trees), out_dir)
    ctx.finish({"trees": source}, outputs)


def export_codes(args: argparse.Namespace) -> None:
    """Training-writer codes and adapted test-writer codes in one CSV."""
    ctx = StepContext.from_args("export-codes", args)
    ws = ctx.workspace
    sources = [path for path in (ws.codes_file, ws.multipass_dir / "codes.csv") if path.exists()]
    if not sources:
        raise ArtifactError(f"No writer codes under {ws.root}; run `phmm train-adapt` first")
    profiles: Dict[int, WriterProfile] = {}
    for path in sources:
        for writer_id, profile in load_codes(path).items():
            if writer_id in profiles:
                logger.warning("Writer %d appears in several code files; keeping %s", writer_id, path)
            profiles[writer_id] = profile
    output = Path(args.output) if args.output else ws.root / "codes.csv"
    save_codes(profiles, output)
    logger.info("Exported %d writer codes to %s", len(profiles), output)
    ctx.finish({path.parent.name: path for path in sources}, {"codes": output})


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("export-tree", parents=[common], help="write tying trees as Graphviz DOT")
    parser.add_argument("--grown", action="store_true", help="export the trees before merging")
    parser.add_argument("--output", help="output directory (default <workdir>/tying)")
    parser.set_defaults(handler=export_tree)

    parser = subparsers.add_parser("export-codes", parents=[common], help="write every writer code to one CSV")
    parser.add_argument("--output", help="output file (default <workdir>/codes.csv)")
    parser.set_defaults(handler=export_codes)
