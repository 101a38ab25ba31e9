"""
Training Commands

GMM-HMM training and alignment, question generation, state tying,
classifier training (base and writer-adaptive) and language models.
"""
import argparse
import logging
from typing import Dict, List

import numpy as np

from config.settings import ClassifierSettings
from src.api.context import StepContext
from src.models.classifier import ClassifierSpec, LabeledLine
from src.services.classifier_service import build_classifier, tied_labels, train_adaptive, train_base
from src.services.hmm_service import (
    accumulate_positioned_stats,
    align_lines,
    baum_welch_iterate,
    tie_model,
    train_schedule,
    viterbi_iterate,
)
from src.services.lm_service import perplexity, train_ngram, train_rnnlm, write_arpa
from src.services.storage import (
    load_alignments,
    load_classifier,
    load_hmm_set,
    load_questions,
    load_tying,
    save_alignments,
    save_classifier,
    save_codes,
    save_hmm_set,
    save_questions,
    save_rnnlm,
    save_trees,
    save_tying,
)
from src.services.tying_service import (
    build_state_tying,
    generate_all_questions,
    retarget_average_states,
    tree_to_dot,
)
from src.utils.errors import DataMismatchError

logger = logging.getLogger(__name__)


def train_gmm(args: argparse.Namespace) -> None:
    """Flat start and re-estimation of the untied GMM-HMM system."""
    ctx = StepContext.from_args("train-gmm", args)
    hmm = ctx.settings.hmm
    lines = ctx.training_lines()
    model, alignments, history = train_schedule(
        lines,
        ctx.num_classes,
        hmm.num_states,
        hmm.first_iterations,
        hmm.second_iterations,
        hmm.mixtures,
        hmm.training,
        hmm.variance_floor,
        ctx.settings.jobs,
    )
    ws = ctx.workspace
    save_hmm_set(model, ws.gmm_file)
    save_alignments(alignments, ws.align_file)
    trace = ", ".join(f"{value:.2f}" for value in history)
    ctx.finish(
        {"features": ws.features_file("train")},
        {"gmm": ws.gmm_file, "align": ws.align_file},
        notes=f"log-likelihood per iteration: {trace}",
    )


def align(args: argparse.Namespace) -> None:
    """Forced alignment of the training lines with the current GMM-HMM."""
    ctx = StepContext.from_args("align", args)
    ws = ctx.workspace
    model = load_hmm_set(ws.require(ws.gmm_file, "train-gmm"))
    alignments = align_lines(model, ctx.training_lines())
    save_alignments(alignments, ws.align_file)
    ctx.finish({"gmm": ws.gmm_file}, {"align": ws.align_file})


def _positioned_stats(ctx: StepContext):
    ws = ctx.workspace
    model = load_hmm_set(ws.require(ws.gmm_file, "train-gmm"))
    lines = ctx.training_lines()
    alignments = load_alignments(ws.require(ws.align_file, "align"))
    return model, lines, accumulate_positioned_stats(model, lines, alignments)


def questions(args: argparse.Namespace) -> None:
    """Question sets from 2-means clustering of classes at every position."""
    ctx = StepContext.from_args("questions", args)
    ws = ctx.workspace
    model, _, stats = _positioned_stats(ctx)
    result = generate_all_questions(
        stats, model.num_states, ctx.settings.tying.question_depth, model.variance_floor, ctx.settings.jobs
    )
    save_questions(result, ws.questions_file)
    ctx.finish({"gmm": ws.gmm_file, "align": ws.align_file}, {"questions": ws.questions_file})


def tie(args: argparse.Namespace) -> None:
    """Grow tying trees, merge to the state budget and re-estimate the tied GMM-HMM."""
    ctx = StepContext.from_args("tie", args)
    ws, tying_settings = ctx.workspace, ctx.settings.tying
    model, lines, stats = _positioned_stats(ctx)
    question_sets = load_questions(ws.questions_file) if ws.questions_file.exists() else None
    target = retarget_average_states(model.num_classes, tying_settings.avg_states, model.num_states)
    result = build_state_tying(
        stats,
        model.num_classes,
        model.num_states,
        target,
        questions=question_sets,
        split_threshold=tying_settings.split_threshold,
        min_occupancy=tying_settings.min_occupancy,
        max_depth=tying_settings.question_depth,
        variance_floor=model.variance_floor,
        jobs=ctx.settings.jobs,
    )
    save_tying(result.tying, ws.tying_file)
    save_trees(result.merged, ws.trees_file)
    save_trees(result.trees, ws.grown_trees_file)
    for tree in result.merged:
        dot = tree_to_dot(tree, result.questions.get(tree.position))
        (ws.tying_dir / f"position_{tree.position}.dot").write_text(dot)

    tied = tie_model(model, result.tying, stats)
    step = viterbi_iterate if ctx.settings.hmm.training == "viterbi" else baum_welch_iterate
    for _ in range(ctx.settings.hmm.tied_iterations):
        tied, report = step(tied, lines, ctx.settings.jobs)
        logger.info("Tied re-estimation: log-likelihood %.2f", report.log_likelihood)
    save_hmm_set(tied, ws.tied_gmm_file)
    ctx.finish(
        {"gmm": ws.gmm_file, "align": ws.align_file},
        {"tying": ws.tying_file, "trees": ws.trees_file, "tied_gmm": ws.tied_gmm_file},
        notes=f"{result.tying.count} tied states (target {target}), {len(result.merges)} merges",
    )


def classifier_spec(settings: ClassifierSettings, num_outputs: int, height: int, width: int) -> ClassifierSpec:
    adapted = len(settings.channels) if settings.adapted_blocks is None else settings.adapted_blocks
    return ClassifierSpec(
        input_height=height,
        input_width=width,
        channels=settings.channels,
        kernel_size=settings.kernel_size,
        hidden_units=settings.hidden_units,
        num_outputs=num_outputs,
        adapted_blocks=adapted,
        code_dim=settings.code_dim,
    )


def labeled_lines(ctx: StepContext, tying) -> List[LabeledLine]:
    """Training lines with tied-state labels from the stored alignments."""
    ws = ctx.workspace
    sequences = ctx.features("train")
    writers = {line.line_id: line.writer_id for line in ctx.corpus_lines("train")}
    result = []
    for alignment in load_alignments(ws.require(ws.align_file, "align")):
        sequence = sequences[alignment.line_id]
        if len(alignment) != len(sequence):
            raise DataMismatchError(f"Alignment of line {alignment.line_id} does not cover its frames")
        result.append(LabeledLine(alignment.line_id, writers[alignment.line_id], sequence.patches,
                                  tied_labels(alignment, tying)))
    return result


def train_nn(args: argparse.Namespace) -> None:
    """Writer-independent classifier training on tied-state labels."""
    ctx = StepContext.from_args("train-nn", args)
    ws, settings = ctx.workspace, ctx.settings.classifier
    tying = load_tying(ws.require(ws.tying_file, "tie"))
    lines = labeled_lines(ctx, tying)
    patches = np.concatenate([line.patches for line in lines])
    labels = np.concatenate([line.labels for line in lines])
    spec = classifier_spec(settings, tying.count, patches.shape[1], patches.shape[2])
    model = build_classifier(spec, settings.seed)
    prior, report = train_base(
        model,
        patches,
        labels,
        epochs=settings.base_epochs,
        batch_size=settings.batch_size,
        learning_rate=settings.learning_rate,
        momentum=settings.momentum,
        seed=settings.seed,
        prior_smoothing=settings.prior_smoothing,
    )
    save_classifier(model, prior, ws.classifier_file)
    ctx.finish(
        {"tying": ws.tying_file, "align": ws.align_file, "features": ws.features_file("train")},
        {"classifier": ws.classifier_file},
        seeds={"classifier": settings.seed},
        notes=f"epoch losses {report.losses}, frame accuracy {report.accuracy}",
    )


def train_adapt(args: argparse.Namespace) -> None:
    """Adaptation matrices and training-writer codes with the base weights frozen."""
    ctx = StepContext.from_args("train-adapt", args)
    ws, settings = ctx.workspace, ctx.settings.classifier
    model, prior = load_classifier(ws.require(ws.classifier_file, "train-nn"))
    tying = load_tying(ws.require(ws.tying_file, "tie"))
    profiles, report = train_adaptive(
        model,
        labeled_lines(ctx, tying),
        epochs=settings.adapt_epochs,
        learning_rate=settings.adapt_learning_rate,
        decay=settings.adapt_decay,
        decay_frames=settings.adapt_decay_frames,
        seed=settings.seed,
        code_init_std=settings.code_init_std,
    )
    save_classifier(model, prior, ws.classifier_file)
    save_codes(profiles, ws.codes_file)
    ctx.finish(
        {"classifier": ws.classifier_file, "align": ws.align_file},
        {"classifier": ws.classifier_file, "codes": ws.codes_file},
        seeds={"classifier": settings.seed},
        notes=f"epoch losses {report.losses}",
    )


def train_lm(args: argparse.Namespace) -> None:
    """N-gram (ARPA) and recurrent character LMs from the training transcripts."""
    ctx = StepContext.from_args("train-lm", args)
    ws, settings = ctx.workspace, ctx.settings.lm
    transcripts = [line.transcript for line in ctx.corpus_lines("train")]
    num_classes = ctx.num_classes
    ngram = train_ngram(transcripts, num_classes, settings.order)
    ws.arpa_file.parent.mkdir(parents=True, exist_ok=True)
    with open(ws.arpa_file, "w") as handle:
        write_arpa(ngram, handle)
    rnn, report = train_rnnlm(
        transcripts,
        num_classes,
        hidden_size=settings.rnn_hidden,
        epochs=settings.rnn_epochs,
        bptt_steps=settings.bptt_steps,
        learning_rate=settings.rnn_learning_rate,
        seed=settings.seed,
    )
    save_rnnlm(rnn, ws.rnnlm_file)
    perplexities: Dict[str, float] = {"ngram": perplexity(ngram, transcripts), "rnn": report.losses[-1]}
    ctx.finish(
        {"corpus": ws.corpus_dir},
        {"arpa": ws.arpa_file, "rnnlm": ws.rnnlm_file},
        seeds={"lm": settings.seed},
        notes=f"training perplexity {perplexities}",
    )


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("train-gmm", parents=[common], help="train the untied GMM-HMM")
    parser.add_argument("--states", type=int, help="states per character HMM (default 5)")
    parser.add_argument("--training", choices=["baum_welch", "viterbi"], help="re-estimation (default baum_welch)")
    parser.add_argument("--mixtures", type=int, help="Gaussians per state in the second phase (default 1)")
    parser.set_defaults(handler=train_gmm)

    parser = subparsers.add_parser("align", parents=[common], help="forced-align the training lines")
    parser.set_defaults(handler=align)

    parser = subparsers.add_parser("questions", parents=[common], help="generate tying questions")
    parser.add_argument("--depth", type=int, help="question-tree depth limit (default unlimited)")
    parser.set_defaults(handler=questions)

    parser = subparsers.add_parser("tie", parents=[common], help="build the parsimonious state tying")
    parser.add_argument("--avg-states", type=float, help="average tied states per class (default 3)")
    parser.add_argument("--min-occupancy", type=float, help="minimum leaf occupancy (default 50)")
    parser.add_argument("--split-threshold", type=float, help="minimum split gain (default 0)")
    parser.add_argument("--depth", type=int, help="question-tree depth limit (default unlimited)")
    parser.set_defaults(handler=tie)

    parser = subparsers.add_parser("train-nn", parents=[common], help="train the frame classifier")
    parser.add_argument("--epochs", type=int, help="base training epochs (default 3)")
    parser.add_argument("--nn-seed", type=int, help="classifier seed (default 11)")
    parser.add_argument("--adapted-blocks", type=int, help="adapted conv blocks P (default all)")
    parser.add_argument("--code-dim", type=int, help="writer code dimension G (default 200)")
    parser.set_defaults(handler=train_nn)

    parser = subparsers.add_parser("train-adapt", parents=[common], help="train adaptation layers and writer codes")
    parser.add_argument("--adapt-epochs", type=int, help="adaptive training epochs (default 2)")
    parser.add_argument("--nn-seed", type=int, help="classifier seed (default 11)")
    parser.set_defaults(handler=train_adapt)

    parser = subparsers.add_parser("train-lm", parents=[common], help="train the character language models")
    parser.add_argument("--order", type=int, help="N-gram order (default 3)")
    parser.add_argument("--rnn-hidden", type=int, help="recurrent LM hidden size (default 300)")
    parser.add_argument("--rnn-epochs", type=int, help="recurrent LM epochs (default 5)")
    parser.set_defaults(handler=train_lm)
