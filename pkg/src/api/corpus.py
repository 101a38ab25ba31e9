"""
Corpus Commands

`synth` generates the synthetic corpus; `extract` turns every partition
into frame sequences.
"""
import argparse
import logging

from src.api.context import StepContext
from src.models.corpus import PARTITIONS, CorpusConfig
from src.services.corpus_service import generate_corpus
from src.services.feature_service import extract_corpus
from src.services.storage import save_corpus, save_features
from src.utils.errors import FrameGeometryError
from src.utils.validators import ensure, validate_line_image

logger = logging.getLogger(__name__)


def synth(args: argparse.Namespace) -> None:
    """Generate train, adapt and test partitions."""
    ctx = StepContext.from_args("synth", args)
    corpus_settings = ctx.settings.corpus
    config = CorpusConfig(**corpus_settings.model_dump(exclude={"seed"}))
    corpus = generate_corpus(config, corpus_settings.seed, ctx.settings.jobs)
    save_corpus(corpus, ctx.workspace.corpus_dir)
    ctx.finish({}, {"corpus": ctx.workspace.corpus_dir}, seeds={"corpus": corpus_settings.seed})


def extract(args: argparse.Namespace) -> None:
    """Sliding-window frames for every partition."""
    ctx = StepContext.from_args("extract", args)
    features = ctx.settings.features
    corpus = ctx.corpus(*PARTITIONS)
    outputs = {}
    for name in PARTITIONS:
        lines = corpus.partitions[name]
        for line in lines:
            ensure(validate_line_image(line.image, corpus.config.line_height), FrameGeometryError, f"line {line.line_id}")
        sequences = extract_corpus(lines, features.window, features.shift, features.pool_grid, ctx.settings.jobs)
        path = ctx.workspace.features_file(name)
        save_features([sequences[line.line_id] for line in lines], path)
        outputs[name] = path
    ctx.finish({"corpus": ctx.workspace.corpus_dir}, outputs)


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    parser.add_argument("--seed", type=int, help="corpus seed (default 7)")
    parser.add_argument("--num-classes", type=int, help="alphabet size (default 20)")
    parser.add_argument("--num-radicals", type=int, help="radical inventory size (default 8)")
    parser.add_argument("--train-writers", type=int, help="training writers (default 20)")
    parser.add_argument("--test-writers", type=int, help="unseen test writers (default 10)")
    parser.set_defaults(handler=synth)

    parser = subparsers.add_parser("extract", parents=[common], help="extract sliding-window frames")
    parser.add_argument("--window", type=int, help="window width in pixels (default 20)")
    parser.add_argument("--shift", type=int, help="frame shift in pixels (default 4)")
    parser.set_defaults(handler=extract)
