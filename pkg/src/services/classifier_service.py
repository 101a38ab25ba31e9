"""
Classifier Service

Writer-aware convolutional frame classifier over window patches.

Each adapted convolutional block adds a per-channel bias Q = A V to its
pre-normalization activations, where V is a writer code and A the
block's adaptation matrix. Base weights are trained by frame
cross-entropy on forced-alignment labels; A and the training writers'
codes are then trained with the base frozen; an unseen writer's code is
estimated from pseudo-labels with everything else frozen.
"""
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.models.classifier import ClassifierSpec, LabeledLine, StatePrior, TrainingReport, WriterProfile
from src.models.hmm import Alignment
from src.models.tying import StateTyingMap
from src.utils.errors import (
    CodeDimensionError,
    ConfigurationError,
    DataMismatchError,
    FrameGeometryError,
    UnknownWriterError,
)

logger = logging.getLogger(__name__)


class AdaptiveConvBlock(nn.Module):
    """Conv -> (+ A V) -> batch norm -> ReLU -> 2x max-pool."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, code_dim: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.norm = nn.BatchNorm2d(out_channels)
        self.pool = nn.MaxPool2d(2)
        self.adaptation = nn.Parameter(torch.zeros(out_channels, code_dim)) if code_dim else None

    def forward(self, x: torch.Tensor, code: Optional[torch.Tensor] = None) -> torch.Tensor:
        m = self.conv(x)
        if self.adaptation is not None and code is not None:
            m = m + (code @ self.adaptation.T)[:, :, None, None]
        return self.pool(torch.relu(self.norm(m)))


class AdaptiveClassifier(nn.Module):
    """
    Convolutional blocks, one dense ReLU layer and a linear output over
    tied-state ids. The first ``spec.adapted_blocks`` blocks carry
    adaptation matrices.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_channels, height, width = 1, spec.input_height, spec.input_width
        pad = spec.kernel_size // 2
        for index, channels in enumerate(spec.channels):
            code_dim = spec.code_dim if index < spec.adapted_blocks else None
            blocks.append(AdaptiveConvBlock(in_channels, channels, spec.kernel_size, code_dim))
            height = (height + 2 * pad - spec.kernel_size + 1) // 2
            width = (width + 2 * pad - spec.kernel_size + 1) // 2
            in_channels = channels
        if height < 1 or width < 1:
            raise FrameGeometryError("Input patch too small for the convolutional stack")
        self.blocks = nn.ModuleList(blocks)
        self.dense = nn.Linear(in_channels * height * width, spec.hidden_units)
        self.output = nn.Linear(spec.hidden_units, spec.num_outputs)
        nn.init.normal_(self.output.weight, std=1e-3)
        nn.init.zeros_(self.output.bias)

    @property
    def num_outputs(self) -> int:
        return self.spec.num_outputs

    @property
    def code_dim(self) -> int:
        return self.spec.code_dim

    def adaptation_parameters(self) -> List[nn.Parameter]:
        return [b.adaptation for b in self.blocks if b.adaptation is not None]

    def base_parameters(self) -> List[nn.Parameter]:
        adapted = {id(p) for p in self.adaptation_parameters()}
        return [p for p in self.parameters() if id(p) not in adapted]

    def forward(self, x: torch.Tensor, code: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            x: (B, H, W) patches.
            code: (B, G) writer codes, or None for writer-independent mode.

        Returns:
            (B, S) logits.
        """
        h = x.unsqueeze(1)
        for block in self.blocks:
            h = block(h, code)
        h = torch.relu(self.dense(h.flatten(1)))
        return self.output(h)


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> AdaptiveClassifier:
    """Create a classifier with seeded weight initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AdaptiveClassifier(spec)
    logger.info(
        "Classifier: blocks %s, %d adapted, %d outputs",
        list(spec.channels), spec.adapted_blocks, spec.num_outputs,
    )
    return model


def output_layer_parameters(model: AdaptiveClassifier) -> int:
    """Weights and biases of the output layer."""
    return sum(p.numel() for p in model.output.parameters())


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _patch_tensor(model: AdaptiveClassifier, patches: np.ndarray) -> torch.Tensor:
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    expected = (model.spec.input_height, model.spec.input_width)
    if patches.ndim != 3 or patches.shape[1:] != expected:
        raise FrameGeometryError(f"Patch shape {patches.shape[1:]} does not match model input {expected}")
    return torch.as_tensor(patches, dtype=_dtype(model))


def _code_tensor(model: AdaptiveClassifier, code, batch: int) -> Optional[torch.Tensor]:
    if code is None:
        return None
    code = torch.as_tensor(np.asarray(code), dtype=_dtype(model))
    if code.shape[-1] != model.code_dim:
        raise CodeDimensionError(f"Code length {code.shape[-1]} differs from model code dimension {model.code_dim}")
    if code.dim() == 1:
        code = code.expand(batch, -1)
    return code


def frame_log_posteriors(
    model: AdaptiveClassifier,
    patches: np.ndarray,
    code: Optional[np.ndarray] = None,
    batch_size: int = 1024,
) -> np.ndarray:
    """
    Log posteriors of every frame in inference mode (running BN statistics).

    Args:
        model: Trained classifier.
        patches: (T, H, W) or a single (H, W) patch.
        code: Writer code of length G; None runs writer-independent.
        batch_size: Frames per forward call.

    Returns:
        (T, S) log posteriors.

    Raises:
        FrameGeometryError: If the patch shape does not match the model.
        CodeDimensionError: If the code length is not G.
    """
    x = _patch_tensor(model, patches)
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            chunk = x[start:start + batch_size]
            logits = model(chunk, _code_tensor(model, code, len(chunk)))
            outputs.append(F.log_softmax(logits, dim=1))
    model.train(was_training)
    if not outputs:
        return np.zeros((0, model.num_outputs))
    return torch.cat(outputs).double().numpy()


def frame_posteriors(model: AdaptiveClassifier, patches: np.ndarray, code: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior vectors p(s | x_t); each row sums to one."""
    return np.exp(frame_log_posteriors(model, patches, code))


def scaled_likelihood(posterior: np.ndarray, prior: StatePrior) -> np.ndarray:
    """log p(s|x) - log p(s) for each state (p(x) is dropped)."""
    with np.errstate(divide="ignore"):
        return np.log(posterior) - prior.log_probs


def tied_labels(alignment: Alignment, tying: StateTyingMap) -> np.ndarray:
    """Tied-state id of every aligned frame."""
    return np.array([tying.tied_id(label) for label in alignment.labels], dtype=np.int64)


def check_labels(labels: np.ndarray, num_outputs: int) -> None:
    """
    Raises:
        DataMismatchError: If a label is outside the output range.
    """
    if len(labels) and (labels.min() < 0 or labels.max() >= num_outputs):
        raise DataMismatchError(f"Label {int(labels.max())} outside the {num_outputs} classifier outputs")


def train_base(
    model: AdaptiveClassifier,
    patches: np.ndarray,
    labels: np.ndarray,
    epochs: int = 3,
    batch_size: int = 64,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    seed: int = 0,
    prior_smoothing: float = 1.0,
) -> Tuple[StatePrior, TrainingReport]:
    """
    Frame cross-entropy training of the writer-independent weights.

    Batch norm uses batch statistics while training. The model is updated
    in place.

    Args:
        model: Classifier to train.
        patches: (N, H, W) training patches.
        labels: (N,) tied-state ids.
        epochs: Passes over the data.
        batch_size: Frames per minibatch.
        learning_rate: SGD step size.
        momentum: SGD momentum.
        seed: Shuffling seed.
        prior_smoothing: Add-k smoothing of the label-count prior.

    Returns:
        The state prior and the per-epoch loss trace.

    Raises:
        DataMismatchError: If a label id is not below the output dimension.
    """
    labels = np.asarray(labels, dtype=np.int64)
    check_labels(labels, model.num_outputs)
    x = _patch_tensor(model, patches)
    y = torch.as_tensor(labels)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.SGD(model.base_parameters(), lr=learning_rate, momentum=momentum)
    report = TrainingReport()

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(y), generator=generator)
        total = 0.0
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            if len(index) < 2:
                continue
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x[index]), y[index])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(index)
            report.frames_seen += len(index)
        report.losses.append(total / max(len(y), 1))
        logger.info("Base epoch %d: mean frame loss %.4f", epoch + 1, report.losses[-1])
    model.eval()

    if len(y):
        predicted = frame_log_posteriors(model, patches).argmax(axis=1)
        report.accuracy = float(np.mean(predicted == labels))
    prior = StatePrior.from_counts(np.bincount(labels, minlength=model.num_outputs), prior_smoothing)
    return prior, report


def require_adaptation_layers(model: AdaptiveClassifier) -> None:
    """
    Raises:
        ConfigurationError: If the model has no adapted blocks.
    """
    if not model.adaptation_parameters():
        raise ConfigurationError("Model has no adaptation layers; writer codes have no effect")


@contextmanager
def frozen(params: Sequence[nn.Parameter]) -> Iterator[None]:
    """Temporarily disable gradients of the given parameters."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def line_loss(model: AdaptiveClassifier, line: LabeledLine, code: torch.Tensor) -> torch.Tensor:
    """Summed frame cross-entropy of one line under a writer code."""
    x = _patch_tensor(model, line.patches)
    y = torch.as_tensor(np.asarray(line.labels, dtype=np.int64))
    logits = model(x, code.expand(len(x), -1))
    return F.cross_entropy(logits, y, reduction="sum")


def train_adaptive(
    model: AdaptiveClassifier,
    lines: Sequence[LabeledLine],
    writer_ids: Optional[Sequence[int]] = None,
    epochs: int = 2,
    learning_rate: float = 0.001,
    decay: float = 0.8,
    decay_frames: int = 5_000_000,
    seed: int = 0,
    code_init_std: float = 0.01,
) -> Tuple[Dict[int, WriterProfile], TrainingReport]:
    """
    Learn the adaptation matrices and one code per training writer.

    Each minibatch is the frames of one line, coded with the line's writer.
    Base weights are frozen and batch norm uses its running statistics;
    the batch mean of a one-writer line would cancel the code offset.
    The step size is multiplied by ``decay`` after every ``decay_frames``
    processed frames.

    Args:
        model: Base-trained classifier; its adaptation matrices are
            re-initialized and trained in place.
        lines: Labeled lines with writer ids.
        writer_ids: Known writers; defaults to the writers of ``lines``.
        epochs: Passes over the lines.
        learning_rate: Initial step size.
        decay: Step-size decay factor.
        decay_frames: Frames between decays.
        seed: Initialization and shuffling seed.
        code_init_std: Standard deviation of the initial codes.

    Returns:
        Writer profiles and the per-epoch loss trace.

    Raises:
        UnknownWriterError: If a line's writer is not in ``writer_ids``.
        DataMismatchError: If a label id is not below the output dimension.
    """
    require_adaptation_layers(model)
    known = sorted(set(writer_ids if writer_ids is not None else (line.writer_id for line in lines)))
    for line in lines:
        if line.writer_id not in known:
            raise UnknownWriterError(f"Line {line.line_id} has unknown writer {line.writer_id}")
        check_labels(np.asarray(line.labels), model.num_outputs)

    generator = torch.Generator().manual_seed(seed)
    dtype = _dtype(model)
    with torch.no_grad():
        for param in model.adaptation_parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=dtype) / np.sqrt(model.code_dim))
    codes = {
        w: (torch.randn(model.code_dim, generator=generator, dtype=dtype) * code_init_std).requires_grad_(True)
        for w in known
    }
    profiles = {w: WriterProfile(writer_id=w, code=np.zeros(model.code_dim)) for w in known}
    report = TrainingReport()

    model.eval()
    step, frames_since_decay = learning_rate, 0
    with frozen(model.base_parameters()):
        for epoch in range(epochs):
            total, frames = 0.0, 0
            for index in torch.randperm(len(lines), generator=generator).tolist():
                line = lines[index]
                if len(line) == 0:
                    continue
                code = codes[line.writer_id]
                loss = line_loss(model, line, code)
                params = model.adaptation_parameters() + [code]
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                with torch.no_grad():
                    for param, grad in zip(params, grads):
                        if grad is not None:
                            param -= step * grad
                total += float(loss)
                frames += len(line)
                profiles[line.writer_id].loss_history.append(float(loss) / len(line))
                frames_since_decay += len(line)
                while frames_since_decay >= decay_frames:
                    frames_since_decay -= decay_frames
                    step *= decay
            report.frames_seen += frames
            report.losses.append(total / max(frames, 1))
            logger.info("Adaptive epoch %d: mean frame loss %.4f (step %.2e)", epoch + 1, report.losses[-1], step)

    for w, code in codes.items():
        profiles[w].code = code.detach().double().numpy().copy()
        profiles[w].pass_count = epochs
    return profiles, report


def adaptation_loss(model: AdaptiveClassifier, lines: Sequence[LabeledLine], code: torch.Tensor) -> float:
    with torch.no_grad():
        return float(sum(float(line_loss(model, line, code)) for line in lines if len(line)))


def adapt_unknown_writer(
    model: AdaptiveClassifier,
    lines: Sequence[LabeledLine],
    writer_id: int = 0,
    epochs: int = 5,
    learning_rate: float = 0.001,
    initial_code: Optional[np.ndarray] = None,
    seed: int = 0,
    code_init_std: float = 0.01,
) -> WriterProfile:
    """
    Estimate an unseen writer's code from pseudo-labeled lines.

    Only the code moves; each line is one gradient step. After every
    epoch the summed cross-entropy over the whole adaptation set is
    evaluated and the best code so far (the initial one included) is
    kept, so the final loss never exceeds the initial loss.

    Args:
        model: Classifier with trained adaptation matrices.
        lines: Pseudo-labeled lines of the writer.
        writer_id: Writer the profile belongs to.
        epochs: Passes over the lines.
        learning_rate: Step size.
        initial_code: Starting code; random when omitted.
        seed: Seed of the random initial code.
        code_init_std: Standard deviation of the random initial code.

    Returns:
        The writer profile; ``loss_history`` holds the set loss after each
        epoch, starting with the initial value.
    """
    require_adaptation_layers(model)
    if initial_code is None:
        generator = torch.Generator().manual_seed(seed)
        start = torch.randn(model.code_dim, generator=generator, dtype=torch.float64) * code_init_std
        initial_code = start.numpy()
    initial_code = np.asarray(initial_code, dtype=np.float64)
    if initial_code.shape != (model.code_dim,):
        raise CodeDimensionError(f"Code length {initial_code.shape} differs from {model.code_dim}")
    lines = [line for line in lines if len(line)]
    if not lines:
        logger.warning("Writer %d has no adaptation frames; using the zero code", writer_id)
        return WriterProfile(writer_id=writer_id, code=np.zeros(model.code_dim))
    for line in lines:
        check_labels(np.asarray(line.labels), model.num_outputs)

    model.eval()
    code = torch.as_tensor(initial_code, dtype=_dtype(model)).clone().requires_grad_(True)
    best_loss = adaptation_loss(model, lines, code)
    best_code = initial_code.copy()
    history = [best_loss]
    with frozen(list(model.parameters())):
        for epoch in range(epochs):
            for line in lines:
                loss = line_loss(model, line, code)
                (grad,) = torch.autograd.grad(loss, [code])
                with torch.no_grad():
                    code -= learning_rate * grad
            current = adaptation_loss(model, lines, code)
            history.append(current)
            if np.isfinite(current) and current < best_loss:
                best_loss = current
                best_code = code.detach().double().numpy().copy()
    logger.debug("Writer %d adaptation loss %.3f -> %.3f", writer_id, history[0], best_loss)
    return WriterProfile(writer_id=writer_id, code=best_code, pass_count=epochs, loss_history=history)
