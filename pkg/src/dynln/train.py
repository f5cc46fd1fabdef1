"""Initialization, frame-level NLL, Adam, and the mini-batch training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .adapt import summary_variance
from .data import Dataset, make_batches, pad_batch
from .recurrent import AcousticModel, StackConfig, param_shapes, stack_forward
from .tensor import NonFiniteError, Tensor, as_tensor, backward, log_softmax, mul, no_grad

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    learning_rate: float = 1e-3
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# initialization -----------------------------------------------------------------

def orthogonal_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows (rows <= cols) or columns (otherwise) from a seeded Gaussian QR."""
    if rows < 1 or cols < 1:
        raise ValueError("matrix extents must be positive")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return np.ascontiguousarray(q if rows >= cols else q.T)


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 2:
        return orthogonal_init(shape[0], shape[1], rng)
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("scale"):
        return np.ones(shape)
    # a generator bias for a scale target starts at 1 so DLN begins as plain LN
    if leaf == "b" and ".scale" in name:
        return np.ones(shape)
    return np.zeros(shape)


def init_model(cfg: StackConfig, seed: int = 0) -> AcousticModel:
    rng = np.random.default_rng(seed)
    params = {name: Tensor(_init_value(name, shape, rng), requires_grad=True)
              for name, shape in param_shapes(cfg).items()}
    return AcousticModel(cfg, params)


# loss ---------------------------------------------------------------------------

def nll_loss(logits, targets, mask=None) -> Tensor:
    """Mean over valid frames of -log softmax(logits)[target], then mean over utterances.

    ``logits`` is ``[T, B, C]`` with ``targets``/``mask`` ``[T, B]``, or a single
    utterance ``[T, C]`` with ``[T]`` targets.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim == 2:
        logits = logits.reshape(logits.shape[0], 1, logits.shape[1])
        targets = targets.reshape(-1, 1)
        mask = None if mask is None else np.asarray(mask).reshape(-1, 1)
    T, B, C = logits.shape
    m = np.ones((T, B)) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = m > 0
    if targets.shape != (T, B):
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if ((targets < 0) | (targets >= C))[valid].any():
        raise ValueError(f"target outside [0, {C})")
    counts = m.sum(axis=0)
    if (counts <= 0).any():
        raise ValueError("an utterance has no valid frames")
    weights = np.zeros((T, B, C))
    tt, bb = np.nonzero(valid)
    weights[tt, bb, targets[tt, bb]] = -1.0 / (counts[bb] * B)
    return mul(log_softmax(logits), weights).sum()


def frame_errors(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    pred = np.argmax(logits, axis=-1)
    valid = mask > 0
    return int(((pred != targets) & valid).sum()), int(valid.sum())


# optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, **kw) -> AdamState:
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   lr=lr, **kw)


def adam_step(state: AdamState, params, grads) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(grads) != len(state.m):
        raise ValueError("gradient count does not match optimizer state")
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# training loop ------------------------------------------------------------------

@dataclass
class BatchResult:
    loss: Tensor
    nll: float
    penalty: float
    variance: float
    errors: int
    frames: int


def batch_objective(model: AcousticModel, utts) -> BatchResult:
    """Total loss (NLL plus the variance penalty under DLN) for one padded batch."""
    frames, labels, mask = pad_batch(utts)
    logits, summaries = stack_forward(model, frames, mask)
    nll = nll_loss(logits, labels, mask)
    loss, penalty, variance = nll, 0.0, 0.0
    if summaries is not None:
        var = summary_variance(summaries)
        variance = var.item()
        lam = model.config.lam
        if lam > 0:
            pen = var * (-lam)
            penalty = pen.item()
            loss = nll + pen
    errs, n = frame_errors(logits.data, labels, mask)
    return BatchResult(loss, nll.item(), penalty, variance, errs, n)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    mean_penalty: float
    mean_variance: float
    train_fer: float
    dev_fer: float | None = None
    wall_time: float = 0.0


def train_epoch(model: AcousticModel, dataset: Dataset, cfg: TrainConfig, state: AdamState,
                rng: np.random.Generator, epoch: int = 1) -> EpochMetrics:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    params = model.parameters()
    losses, penalties, variances = [], [], []
    errors = frames = 0
    for k, batch in enumerate(make_batches(dataset, cfg.batch_size, rng)):
        for p in params:
            p.grad = None
        try:
            res = batch_objective(model, batch)
            grads = backward(res.loss, params)
            if cfg.grad_clip is not None:
                clip_global_norm(grads, cfg.grad_clip)
            adam_step(state, params, grads)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}, batch {k}: {exc}") from exc
        losses.append(res.loss.item())
        penalties.append(res.penalty)
        variances.append(res.variance)
        errors += res.errors
        frames += res.frames
    for p in params:
        p.grad = None
    return EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(penalties)),
                        float(np.mean(variances)), 100.0 * errors / frames,
                        wall_time=time.perf_counter() - t0)


def evaluate(model: AcousticModel, dataset: Dataset, batch_size: int = 16) -> dict:
    """FER, mean NLL and mean summary variance over fixed-order batches, no graph."""
    errors = frames = 0
    nlls, variances = [], []
    with no_grad():
        for batch in make_batches(dataset, batch_size, None):
            res = batch_objective(model, batch)
            errors += res.errors
            frames += res.frames
            nlls.append(res.nll)
            variances.append(res.variance)
    return {"fer": 100.0 * errors / max(frames, 1), "nll": float(np.mean(nlls)),
            "variance": float(np.mean(variances))}


def frame_error_rate(model: AcousticModel, dataset: Dataset, batch_size: int = 16) -> float:
    """Percent of valid frames whose argmax logit (lowest index on ties) misses the target."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.frame_dim != model.config.input_dim:
        raise ValueError(f"data frame dim {dataset.frame_dim} != model input_dim "
                         f"{model.config.input_dim}")
    if dataset.max_label() >= model.config.num_classes:
        raise ValueError(f"data has label {dataset.max_label()} but model has "
                         f"{model.config.num_classes} classes")
    return evaluate(model, dataset, batch_size)["fer"]


LOG_COLUMNS = ("epoch", "mean_loss", "mean_penalty", "summary_var", "train_fer", "dev_fer")


def format_log_line(m: EpochMetrics) -> str:
    dev = "nan" if m.dev_fer is None else repr(m.dev_fer)
    return "\t".join([str(m.epoch), repr(m.mean_loss), repr(m.mean_penalty),
                      repr(m.mean_variance), repr(m.train_fer), dev])


def fit(model: AcousticModel, train: Dataset, cfg: TrainConfig, dev: Dataset | None = None,
        log_path: str | None = None, timing_path: str | None = None) -> list[EpochMetrics]:
    """Train for ``cfg.epochs`` epochs and leave ``model`` at its best-dev-FER epoch.

    Without a dev set the last epoch is kept. The epoch log holds only
    deterministic columns; wall-clock times go to ``timing_path``.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(model.parameters(), lr=cfg.learning_rate)
    history: list[EpochMetrics] = []
    best = None
    log_fh = open(log_path, "w") if log_path else None
    time_fh = open(timing_path, "w") if timing_path else None
    try:
        if log_fh:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")
        if time_fh:
            time_fh.write("epoch\twall_time\n")
        for epoch in range(1, cfg.epochs + 1):
            m = train_epoch(model, train, cfg, state, rng, epoch)
            if dev is not None and len(dev):
                m.dev_fer = frame_error_rate(model, dev, cfg.batch_size)
            history.append(m)
            logger.info("epoch %d loss %.4f penalty %.4f train FER %.2f dev FER %s (%.1fs)",
                        epoch, m.mean_loss, m.mean_penalty, m.train_fer,
                        "-" if m.dev_fer is None else f"{m.dev_fer:.2f}", m.wall_time)
            if log_fh:
                log_fh.write(format_log_line(m) + "\n")
                log_fh.flush()
            if time_fh:
                time_fh.write(f"{epoch}\t{m.wall_time:.3f}\n")
            score = m.dev_fer if m.dev_fer is not None else -epoch
            if best is None or score < best[0]:
                best = (score, {k: p.data.copy() for k, p in model.named_parameters()})
    finally:
        if log_fh:
            log_fh.close()
        if time_fh:
            time_fh.close()
    if best is not None:
        for k, p in model.named_parameters():
            p.data[...] = best[1][k]
    return history
