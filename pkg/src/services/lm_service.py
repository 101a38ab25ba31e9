"""
Language Model Service

Character N-gram model with interpolated Witten-Bell smoothing stored in
backoff form, a simple recurrent LM trained by truncated BPTT, and their
log-linear hybrid.

Tokens are class ids plus the boundary markers ``<s>`` (context only)
and ``</s>`` (predicted at the end of every line).
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.models.classifier import TrainingReport
from src.utils.errors import ArtifactError, ConfigurationError, DataMismatchError, EmptyInputError

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
LOG10 = math.log(10.0)
ARPA_FLOOR = -99.0

Token = Union[int, str]
History = Tuple[Token, ...]


@dataclass
class NGramModel:
    """
    Backoff N-gram model.

    ``log_probs`` maps full n-gram tuples to natural-log probabilities;
    ``backoffs`` maps contexts to natural-log backoff weights. A missing
    backoff weight is zero.
    """
    order: int
    num_classes: int
    log_probs: Dict[History, float] = field(default_factory=dict)
    backoffs: Dict[History, float] = field(default_factory=dict)

    @property
    def vocabulary(self) -> List[Token]:
        """Predictable tokens: every class and the end marker."""
        return list(range(self.num_classes)) + [EOS]

    def initial_history(self) -> History:
        return (BOS,) if self.order > 1 else ()

    def extend(self, history: History, token: Token) -> History:
        """History after emitting ``token``, truncated to order - 1 tokens."""
        if self.order <= 1:
            return ()
        return (tuple(history) + (token,))[-(self.order - 1):]

    def log_prob(self, token: Token, history: Sequence[Token] = ()) -> float:
        """
        Natural-log probability of a token after a history.

        Raises:
            DataMismatchError: If the token is outside the vocabulary.
        """
        context = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        penalty = 0.0
        while True:
            value = self.log_probs.get(context + (token,))
            if value is not None:
                return penalty + value
            if not context:
                raise DataMismatchError(f"Token {token!r} is not in the language model vocabulary")
            penalty += self.backoffs.get(context, 0.0)
            context = context[1:]

    def sentence_log_prob(self, transcript: Sequence[int]) -> float:
        """Log probability of a whole line, end marker included."""
        history = self.initial_history()
        total = 0.0
        for token in list(transcript) + [EOS]:
            total += self.log_prob(token, history)
            history = self.extend(history, token)
        return total


def _padded(transcript: Sequence[int]) -> List[Token]:
    return [BOS] + [int(c) for c in transcript] + [EOS]


def train_ngram(transcripts: Sequence[Sequence[int]], num_classes: int, order: int = 3) -> NGramModel:
    """
    Interpolated Witten-Bell N-gram estimation.

    P(w|h) = (c(h,w) + T(h) P(w|h')) / (c(h) + T(h)) where T(h) counts the
    distinct continuations of h and h' drops the oldest token. The
    recursion ends in the uniform distribution over the vocabulary.
    Seen n-grams store P(w|h); every context stores T(h) / (c(h) + T(h))
    as its backoff weight, which makes the backoff form exact.

    Args:
        transcripts: Training lines as class-id sequences.
        num_classes: Alphabet size.
        order: N.

    Returns:
        The normalized model.

    Raises:
        ConfigurationError: If the order is below one.
        EmptyInputError: If there is no training line.
    """
    if order < 1:
        raise ConfigurationError(f"N-gram order {order} must be at least 1")
    if not transcripts:
        raise EmptyInputError("No training text for the N-gram model")

    counts: Dict[History, Dict[Token, int]] = defaultdict(lambda: defaultdict(int))
    for transcript in transcripts:
        seq = _padded(transcript)
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                counts[tuple(seq[i - n + 1:i])][seq[i]] += 1

    model = NGramModel(order=order, num_classes=num_classes)
    vocabulary = model.vocabulary
    uniform = 1.0 / len(vocabulary)

    def lower(token: Token, context: History) -> float:
        """Interpolated probability, computed from counts."""
        if context is None:
            return uniform
        followers = counts.get(context)
        shorter = context[1:] if context else None
        if not followers:
            return lower(token, shorter)
        total = sum(followers.values())
        types = len(followers)
        return (followers.get(token, 0) + types * lower(token, shorter)) / (total + types)

    for context in sorted(counts, key=lambda h: (len(h), [str(t) for t in h])):
        followers = counts[context]
        total = sum(followers.values())
        types = len(followers)
        model.backoffs[context] = math.log(types / (total + types))
        tokens = vocabulary if not context else sorted(followers, key=str)
        for token in tokens:
            model.log_probs[context + (token,)] = math.log(lower(token, context))
    logger.info(
        "Trained %d-gram model: %d n-grams over %d lines",
        order, len(model.log_probs), len(transcripts),
    )
    return model


def perplexity(model, transcripts: Sequence[Sequence[int]]) -> float:
    """Per-token perplexity (end markers counted) of an N-gram or recurrent LM."""
    total, tokens = 0.0, 0
    for transcript in transcripts:
        if isinstance(model, NGramModel):
            total += model.sentence_log_prob(transcript)
        else:
            total += sequence_log_prob(model, transcript)
        tokens += len(transcript) + 1
    if tokens == 0:
        raise EmptyInputError("No text to evaluate")
    return float(math.exp(-total / tokens))


def _token_text(token: Token) -> str:
    return token if isinstance(token, str) else str(token)


def _text_token(text: str) -> Token:
    return text if text in (BOS, EOS) else int(text)


def write_arpa(model: NGramModel, handle: TextIO) -> None:
    """Write the model in ARPA format (log10 values)."""
    by_order: Dict[int, List[History]] = defaultdict(list)
    for ngram in model.log_probs:
        by_order[len(ngram)].append(ngram)
    start_entry = (BOS,) in model.backoffs and model.order > 1
    if start_entry:
        by_order[1].append((BOS,))

    handle.write("\\data\\\n")
    for n in range(1, model.order + 1):
        handle.write(f"ngram {n}={len(by_order[n])}\n")
    for n in range(1, model.order + 1):
        handle.write(f"\n\\{n}-grams:\n")
        for ngram in sorted(by_order[n], key=lambda g: [_token_text(t) for t in g]):
            value = model.log_probs.get(ngram)
            prob = ARPA_FLOOR if value is None else value / LOG10
            words = " ".join(_token_text(t) for t in ngram)
            if n < model.order and ngram in model.backoffs:
                handle.write(f"{prob!r}\t{words}\t{model.backoffs[ngram] / LOG10!r}\n")
            else:
                handle.write(f"{prob!r}\t{words}\n")
    handle.write("\n\\end\\\n")


def read_arpa(handle: Union[TextIO, Iterable[str]], num_classes: Optional[int] = None) -> NGramModel:
    """
    Read an ARPA model written by ``write_arpa`` or another toolkit.

    Raises:
        ArtifactError: If the file is not valid ARPA.
    """
    order = 0
    section = None
    log_probs: Dict[History, float] = {}
    backoffs: Dict[History, float] = {}
    seen_data = False
    for raw in handle:
        line = raw.strip()
        if not line:
            continue
        if line == "\\data\\":
            seen_data = True
            continue
        if line == "\\end\\":
            break
        if line.startswith("ngram "):
            order = max(order, int(line.split("=")[0].split()[1]))
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1:line.index("-")])
            continue
        if section is None:
            continue
        parts = line.split()
        if len(parts) not in (section + 1, section + 2):
            raise ArtifactError(f"Malformed {section}-gram entry: {line}")
        ngram = tuple(_text_token(w) for w in parts[1:section + 1])
        prob = float(parts[0])
        if prob > ARPA_FLOOR:
            log_probs[ngram] = prob * LOG10
        if len(parts) == section + 2:
            backoffs[ngram] = float(parts[-1]) * LOG10
    if not seen_data or order == 0:
        raise ArtifactError("Missing \\data\\ header")
    if num_classes is None:
        num_classes = 1 + max((t for g in log_probs for t in g if isinstance(t, int)), default=-1)
    return NGramModel(order=order, num_classes=num_classes, log_probs=log_probs, backoffs=backoffs)


class RnnLm(nn.Module):
    """
    Elman character LM without biases.

    H_i = sigmoid(W_hv R_i + W_hh H_{i-1}); P_i = softmax(W_vh H_i), where
    R_i is the one-hot previous token. Index ``num_classes`` is the line
    boundary: fed as the first input and predicted as the end marker.
    """

    def __init__(self, vocab_size: int, hidden_size: int = 300):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.w_hv = nn.Parameter(torch.zeros(hidden_size, vocab_size))
        self.w_hh = nn.Parameter(torch.zeros(hidden_size, hidden_size))
        self.w_vh = nn.Parameter(torch.zeros(vocab_size, hidden_size))

    @property
    def boundary(self) -> int:
        return self.vocab_size - 1

    def initial_hidden(self) -> torch.Tensor:
        return torch.zeros(self.hidden_size, dtype=self.w_hh.dtype)

    def step(self, token: int, hidden: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Logits of the next token and the new hidden state."""
        hidden = torch.sigmoid(self.w_hv[:, token] + self.w_hh @ hidden)
        return self.w_vh @ hidden, hidden

    def forward(self, inputs: Sequence[int], hidden: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(len(inputs), V) logits for a run of input tokens."""
        outputs = []
        for token in inputs:
            logits, hidden = self.step(int(token), hidden)
            outputs.append(logits)
        return torch.stack(outputs), hidden


def build_rnnlm(num_classes: int, hidden_size: int = 300, seed: int = 0, init_std: float = 0.1) -> RnnLm:
    model = RnnLm(num_classes + 1, hidden_size)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(torch.randn(param.shape, generator=generator) * init_std)
    return model


def _rnn_token(model: RnnLm, token: Token) -> int:
    if token in (BOS, EOS):
        return model.boundary
    token = int(token)
    if not 0 <= token < model.boundary:
        raise DataMismatchError(f"Token {token} outside the recurrent LM vocabulary")
    return token


def rnnlm_step(model: RnnLm, previous: Token, hidden: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    One recurrent step.

    Args:
        model: Recurrent LM.
        previous: Previous token (``<s>`` at line start).
        hidden: Previous hidden state; zeros when omitted.

    Returns:
        The next-token distribution P_i and the new hidden state.
    """
    with torch.no_grad():
        h = model.initial_hidden() if hidden is None else torch.as_tensor(hidden, dtype=model.w_hh.dtype)
        logits, h = model.step(_rnn_token(model, previous), h)
        return F.softmax(logits.double(), dim=0).numpy(), h.double().numpy()


def sequence_nll(model: RnnLm, transcript: Sequence[int], hidden: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Differentiable negative log probability of a line, end marker included."""
    inputs = [model.boundary] + [_rnn_token(model, c) for c in transcript]
    targets = torch.as_tensor(inputs[1:] + [model.boundary])
    logits, _ = model(inputs, model.initial_hidden() if hidden is None else hidden)
    return F.cross_entropy(logits, targets, reduction="sum")


def sequence_log_prob(model: RnnLm, transcript: Sequence[int]) -> float:
    """Product of the per-step probabilities of a line, in natural log."""
    with torch.no_grad():
        return -float(sequence_nll(model, transcript))


def train_rnnlm(
    transcripts: Sequence[Sequence[int]],
    num_classes: int,
    hidden_size: int = 300,
    epochs: int = 5,
    bptt_steps: int = 8,
    learning_rate: float = 0.01,
    seed: int = 0,
) -> Tuple[RnnLm, TrainingReport]:
    """
    Truncated-BPTT training.

    Each line is processed in chunks of ``bptt_steps`` tokens; gradients
    stop at chunk boundaries while the hidden state carries over. Adam
    updates once per chunk.

    Returns:
        The model and a report whose ``losses`` hold the training
        perplexity before training and after every epoch.

    Raises:
        EmptyInputError: If there is no training line.
    """
    if not transcripts:
        raise EmptyInputError("No training text for the recurrent LM")
    model = build_rnnlm(num_classes, hidden_size, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed + 1)
    report = TrainingReport(losses=[perplexity(model, transcripts)])
    logger.info("Recurrent LM initial perplexity %.3f", report.losses[0])

    for epoch in range(epochs):
        for index in torch.randperm(len(transcripts), generator=generator).tolist():
            inputs = [model.boundary] + [_rnn_token(model, c) for c in transcripts[index]]
            targets = inputs[1:] + [model.boundary]
            hidden = model.initial_hidden()
            for start in range(0, len(inputs), bptt_steps):
                optimizer.zero_grad()
                logits, hidden = model(inputs[start:start + bptt_steps], hidden)
                loss = F.cross_entropy(logits, torch.as_tensor(targets[start:start + bptt_steps]), reduction="sum")
                loss.backward()
                optimizer.step()
                hidden = hidden.detach()
                report.frames_seen += len(logits)
        report.losses.append(perplexity(model, transcripts))
        logger.info("Recurrent LM epoch %d: perplexity %.3f", epoch + 1, report.losses[-1])
    return model, report


@dataclass
class HybridLm:
    """Log-linear combination of an N-gram and a recurrent LM."""
    ngram: NGramModel
    rnn: RnnLm
    omega: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigurationError(f"Interpolation weight {self.omega} outside [0, 1]")


def combine_scores(omega: float, ngram_score: float, rnn_score: float) -> float:
    """omega * ngram + (1 - omega) * rnn; the extreme weights return one side exactly."""
    if omega == 1.0:
        return ngram_score
    if omega == 0.0:
        return rnn_score
    return omega * ngram_score + (1.0 - omega) * rnn_score


def hybrid_score(hybrid: HybridLm, transcript: Sequence[int]) -> float:
    """Hybrid log probability of a line."""
    ngram_score = hybrid.ngram.sentence_log_prob(transcript) if hybrid.omega > 0 else 0.0
    rnn_score = sequence_log_prob(hybrid.rnn, transcript) if hybrid.omega < 1 else 0.0
    return combine_scores(hybrid.omega, ngram_score, rnn_score)
