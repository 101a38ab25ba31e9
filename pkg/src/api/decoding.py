"""
Decoding Commands

Single-pass decoding, multi-pass recognition with unsupervised writer
adaptation, and CER evaluation.
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from src.api.context import StepContext
from src.models.decoding import DecodeConfig
from src.services.classifier_service import output_layer_parameters
from src.services.decoder_service import ClassifierScorer, GmmScorer, decode_lines
from src.services.evaluation_service import (
    cer,
    compactness_ratios,
    output_layer_size,
    write_report_csv,
    write_report_json,
)
from src.services.hmm_service import HmmSet
from src.services.lm_service import HybridLm, NGramModel, read_arpa
from src.services.pipeline_service import AdaptationSchedule, RecognitionSystem, group_writers, multipass_recognize
from src.services.storage import (
    Workspace,
    load_classifier,
    load_hmm_set,
    load_hypotheses,
    load_rnnlm,
    load_trees,
    load_tying,
    save_codes,
    save_decode_results,
)
from src.services.tying_service import merge_to_target, retarget_average_states
from src.utils.errors import DataMismatchError

logger = logging.getLogger(__name__)

# Average states per class of the compactness table.
COMPACTNESS_AVERAGES = (5.0, 4.0, 3.0, 2.0, 1.0)


def _hmm_set(ws: Workspace) -> HmmSet:
    """The tied GMM-HMM when `tie` has run, the untied one otherwise."""
    if ws.tied_gmm_file.exists():
        return load_hmm_set(ws.tied_gmm_file)
    return load_hmm_set(ws.require(ws.gmm_file, "train-gmm"))


def load_language_model(ctx: StepContext, mode: str) -> Optional[Union[NGramModel, HybridLm]]:
    if mode == "none":
        return None
    ws = ctx.workspace
    with open(ws.require(ws.arpa_file, "train-lm")) as handle:
        ngram = read_arpa(handle, ctx.num_classes)
    if mode == "ngram":
        return ngram
    rnn = load_rnnlm(ws.require(ws.rnnlm_file, "train-lm"))
    return HybridLm(ngram, rnn, ctx.settings.lm.omega)


def build_system(ctx: StepContext, scorer_kind: str) -> RecognitionSystem:
    """Assemble HMMs, tying map, frame scorer and LM from the workspace."""
    ws = ctx.workspace
    model = _hmm_set(ws)
    if scorer_kind == "gmm":
        scorer, tying = GmmScorer(model), model.tying
    else:
        classifier, prior = load_classifier(ws.require(ws.classifier_file, "train-nn"))
        tying = load_tying(ws.require(ws.tying_file, "tie"))
        scorer = ClassifierScorer(classifier, prior)
    if tying.num_classes != model.num_classes:
        raise DataMismatchError(f"Tying map covers {tying.num_classes} classes, HMM set {model.num_classes}")
    config = DecodeConfig(**ctx.settings.decode.model_dump())
    lm = load_language_model(ctx, config.lm_mode)
    logger.info("Decoding with %s scores over %d tied states, LM %s", scorer_kind, tying.count, config.lm_mode)
    return RecognitionSystem(model.hmms, tying, scorer, lm, config)


def decode(args: argparse.Namespace) -> None:
    """Writer-independent decoding of one partition."""
    ctx = StepContext.from_args("decode", args)
    ws = ctx.workspace
    system = build_system(ctx, args.scorer)
    sequences = ctx.features(args.partition)
    lines = [sequences[line.line_id] for line in ctx.corpus_lines(args.partition)]
    results = decode_lines(lines, system.hmms, system.tying, system.scorer, system.lm, system.config, ctx.settings.jobs)
    paths = save_decode_results(results, ws.decode_dir)
    ctx.finish(
        {"features": ws.features_file(args.partition)},
        {path.stem: path for path in paths},
    )


def multipass(args: argparse.Namespace) -> None:
    """Alternate writer-code estimation and re-decoding for every unseen writer."""
    ctx = StepContext.from_args("multipass", args)
    ws, settings = ctx.workspace, ctx.settings
    system = build_system(ctx, "nn")
    sequences = {**ctx.features("adapt"), **ctx.features("test")}
    corpus = ctx.corpus("adapt", "test")
    writers = group_writers(
        sequences,
        [(line.line_id, line.writer_id, line.transcript) for line in corpus.partitions["test"]],
        [(line.line_id, line.writer_id) for line in corpus.partitions["adapt"]],
    )
    schedule = AdaptationSchedule(
        epochs=settings.classifier.test_epochs,
        learning_rate=settings.classifier.test_learning_rate,
        seed=settings.classifier.seed,
        code_init_std=settings.classifier.code_init_std,
    )
    result = multipass_recognize(writers, system, settings.passes, schedule, settings.jobs)

    out = ws.multipass_dir
    write_report_json(result.report, out / "report.json")
    write_report_csv(result.report, out / "report.csv")
    with open(out / "hyp.tsv", "w") as handle:
        for line_id, transcript in sorted(result.hypotheses().items()):
            handle.write(f"{line_id}\t{' '.join(str(c) for c in transcript)}\n")
    profiles = {w: o.profile for w, o in result.outcomes.items() if o.profile is not None}
    if profiles:
        save_codes(profiles, out / "codes.csv")
    ctx.finish(
        {"classifier": ws.classifier_file, "tying": ws.tying_file},
        {"report": out / "report.json", "hyp": out / "hyp.tsv"},
        seeds={"adaptation": settings.classifier.seed},
        notes="CER per pass: " + ", ".join(f"{r.CER:.4f}" for r in result.report.passes),
    )


def tied_state_counts(ws: Workspace, num_classes: int, num_states: int, variance_floor: float) -> Dict[float, int]:
    """Tied-state count the grown trees yield at every average in COMPACTNESS_AVERAGES up to the topology."""
    trees = load_trees(ws.grown_trees_file)
    leaves = sum(tree.num_leaves for tree in trees)
    counts = {}
    for avg in COMPACTNESS_AVERAGES:
        if avg > num_states:
            continue
        target = retarget_average_states(num_classes, avg, num_states)
        if target >= num_classes * num_states:
            counts[avg] = num_classes * num_states
            continue
        target = max(min(target, leaves), len(trees))
        counts[avg] = merge_to_target(trees, target, num_classes, variance_floor).count
    return counts


def evaluate(args: argparse.Namespace) -> None:
    """CER of a hypothesis file, per writer, plus classifier compactness."""
    ctx = StepContext.from_args("eval", args)
    ws = ctx.workspace
    hyp_path = Path(args.hyp) if args.hyp else ws.decode_dir / "hyp.tsv"
    hypotheses = load_hypotheses(ws.require(hyp_path, "decode"))
    lines = ctx.corpus_lines(args.partition)
    report = cer(
        {line.line_id: line.transcript for line in lines},
        hypotheses,
        {line.line_id: line.writer_id for line in lines},
    )

    if ws.grown_trees_file.exists():
        model = _hmm_set(ws)
        untied_states = model.num_classes * model.num_states
        classifier = load_classifier(ws.classifier_file)[0] if ws.classifier_file.exists() else None
        hidden = classifier.spec.hidden_units if classifier else ctx.settings.classifier.hidden_units
        counts = tied_state_counts(ws, model.num_classes, model.num_states, model.variance_floor)
        ratios = compactness_ratios(counts, hidden, model.num_classes, model.num_states)
        report.extra.update({f"compactness_avg_{avg:g}": ratio for avg, ratio in ratios.items()})
        if classifier is not None:
            untied = output_layer_size(hidden, untied_states)
            report.extra["compactness_current"] = output_layer_parameters(classifier) / untied

    write_report_json(report, ws.eval_dir / "report.json")
    write_report_csv(report, ws.eval_dir / "report.csv")
    logger.info("CER %.4f over %d reference characters", report.CER, report.N)
    ctx.finish(
        {"hyp": hyp_path},
        {"report": ws.eval_dir / "report.json", "csv": ws.eval_dir / "report.csv"},
        notes=f"CER {report.CER:.4f}",
    )


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--beam", help="active tokens per frame, or 'inf' (default 256)")
    search.add_argument("--lm-scale", type=float, help="LM scale factor (default 1.0)")
    search.add_argument("--ins-penalty", type=float, help="character insertion penalty (default 0.0)")
    search.add_argument("--lm", choices=["none", "ngram", "hybrid"], help="language model (default ngram)")
    search.add_argument("--nbest", type=int, help="hypotheses kept per line (default 10)")
    search.add_argument("--omega", type=float, help="hybrid LM weight of the N-gram (default 0.5)")

    parser = subparsers.add_parser("decode", parents=[common, search], help="decode a partition")
    parser.add_argument("--scorer", choices=["nn", "gmm"], default="nn", help="frame scorer (default nn)")
    parser.add_argument("--partition", choices=["train", "adapt", "test"], default="test", help="default test")
    parser.set_defaults(handler=decode)

    parser = subparsers.add_parser("multipass", parents=[common, search], help="multi-pass recognition with adaptation")
    parser.add_argument("--passes", type=int, help="decoding passes (default 3)")
    parser.add_argument("--test-epochs", type=int, help="code estimation epochs per pass (default 5)")
    parser.set_defaults(handler=multipass)

    parser = subparsers.add_parser("eval", parents=[common], help="character error rate of a hypothesis file")
    parser.add_argument("--hyp", help="hypothesis file (default <workdir>/decode/hyp.tsv)")
    parser.add_argument("--partition", choices=["train", "adapt", "test"], default="test", help="default test")
    parser.set_defaults(handler=evaluate)
