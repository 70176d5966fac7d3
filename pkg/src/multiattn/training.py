"""End-to-end optimization: masked NLL, clipped SGD (or Adam) with a
decoder learning ratio, best-dev checkpoint selection, and per-epoch
fusion-weight trajectory logging."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .batching import iter_batches
from .corpus import corpus_instances
from .errors import ConfigError, NumericError, UsageError
from .evaluation import SenseInventory, evaluate_model
from .model import build_model, build_model as _build, forward_sentence
from .corpus import build_vocab

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
FUSION_INITS = ("ones", "uniform")
LOSS_SCOPES = ("sequence", "target-slot")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    epochs: int = 50
    dropout: float = 0.1
    clip_norm: float = 50.0
    decoder_lr_ratio: float = 5.0
    optimizer: str = "sgd"
    seed: int = 0
    fusion_init: str = "ones"
    context_window: int = 50
    min_count: int = 1
    loss_scope: str = "sequence"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.decoder_lr_ratio < 1:
            raise ConfigError(f"decoder_lr_ratio must be >= 1, got {self.decoder_lr_ratio}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.fusion_init not in FUSION_INITS:
            raise ConfigError(f"unknown fusion_init {self.fusion_init!r}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"unknown loss_scope {self.loss_scope!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimizer steps


def compute_loss(logits, targets, mask):
    """Mean negative log-likelihood over unmasked positions.

    logits are log-probabilities [B, S, V]; targets and mask are [B, S].
    """
    if logits.ndim != 3:
        raise UsageError(f"compute_loss expects [B, S, V] logits, got {logits.shape}")
    count = float(np.sum(mask))
    if count == 0:
        raise UsageError("compute_loss over an all-masked batch")
    picked = T.take_along_last(logits, targets)
    return T.mul(T.tsum(T.mul(picked, mask)), -1.0 / count)


def clip_gradients(params, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the applied scale factor; direction is preserved.
    """
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    scale = 1.0 if norm <= max_norm or norm == 0.0 else max_norm / norm
    if scale != 1.0:
        for p in params.tensors():
            if p.grad is not None:
                p.grad *= scale
    return scale


def sgd_step(params, lr, decoder_lr_ratio=1.0):
    """SGD update; decoder-side parameters move decoder_lr_ratio times
    faster. Gradients are zeroed after the step."""
    for name, p in params.items():
        if p.grad is None:
            continue
        eff = lr * decoder_lr_ratio if params.is_decoder_side(name) else lr
        p.data -= eff * p.grad
    params.zero_grads()


class AdamState:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0
        self.betas = betas
        self.eps = eps


def adam_step(params, state, lr, decoder_lr_ratio=1.0):
    b1, b2 = state.betas
    state.t += 1
    correction1 = 1 - b1 ** state.t
    correction2 = 1 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        eff = lr * decoder_lr_ratio if params.is_decoder_side(name) else lr
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        p.data -= eff * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    params.zero_grads()


# ---------------------------------------------------------------------------
# logging


@dataclass
class EpochLog:
    epoch: int
    loss: float
    dev_f1: float | None
    w1: float | None
    w2: float | None
    w3: float | None
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None
    initial_weights: tuple | None = None

    def to_csv(self):
        def fmt(v):
            return "" if v is None else repr(v)

        lines = ["epoch,loss,dev_f1,w1,w2,w3,seconds"]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{fmt(r.loss)},{fmt(r.dev_f1)},{fmt(r.w1)},{fmt(r.w2)},{fmt(r.w3)},{fmt(r.seconds)}"
            )
        return "\n".join(lines) + "\n"

    def weights_csv(self):
        """Fusion-weight trajectory alone: epoch,w1,w2,w3.

        Epoch 0 carries the pre-training initial values.
        """
        lines = ["epoch,w1,w2,w3"]
        if self.initial_weights is not None:
            w1, w2, w3 = self.initial_weights
            lines.append(f"0,{w1!r},{w2!r},{w3!r}")
        for r in self.rows:
            if r.w1 is None:
                continue
            lines.append(f"{r.epoch},{r.w1!r},{r.w2!r},{r.w3!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        from .serialize import atomic_write_text

        atomic_write_text(path, self.to_csv())


def _slot_mask(batch):
    mask = np.zeros_like(batch.mask)
    mask[np.arange(batch.batch_size), batch.target_positions] = 1.0
    return mask


def train(splits, config, arch, clock=None, progress=None):
    """Train on splits["train"], selecting the best epoch by dev F1.

    Returns (model, TrainLog); the model carries the best-dev parameters
    (final parameters when no dev split is given). Training aborts and
    keeps the last good epoch if the loss goes non-finite. Deterministic
    under a fixed config.seed; pass clock to control the wall-time column.
    """
    if "train" not in splits or len(splits["train"].sentences) == 0:
        raise UsageError("train() needs a non-empty 'train' split")
    clock = clock or time.perf_counter
    train_corpus = splits["train"]
    dev_corpus = splits.get("dev")

    vocab = build_vocab(train_corpus, min_count=config.min_count)
    train_instances = corpus_instances(train_corpus)
    if not train_instances:
        raise UsageError("training corpus has no sense-tagged tokens")
    dev_instances = corpus_instances(dev_corpus) if dev_corpus is not None else []
    inventory = SenseInventory.from_instances(train_instances)

    arch = replace(arch, dropout=config.dropout)
    model = build_model(arch, vocab, seed=config.seed, fusion_init=config.fusion_init)
    shuffle_rng = np.random.RandomState(config.seed + 1)
    dropout_rng = np.random.RandomState(config.seed + 2)
    adam = AdamState(model.params) if config.optimizer == "adam" else None

    train_log = TrainLog()
    if model.fusion_weights is not None:
        train_log.initial_weights = model.fusion_weights.values()
    best_f1 = -1.0
    best_state = model.params.state_dict()
    last_good = model.params.state_dict()
    diverged = False

    for epoch in range(1, config.epochs + 1):
        started = clock()
        epoch_loss = 0.0
        n_batches = 0
        for batch in iter_batches(
            train_instances, vocab, config.batch_size,
            context_window=config.context_window, rng=shuffle_rng,
        ):
            model.params.zero_grads()
            rng = dropout_rng if config.dropout > 0 else None
            logits, _ = forward_sentence(batch, model, mode="teacher-forced", dropout_rng=rng)
            mask = batch.mask if config.loss_scope == "sequence" else _slot_mask(batch)
            loss = compute_loss(logits, batch.target[:, :batch.seq_len], mask)
            value = loss.item()
            if not np.isfinite(value):
                log.warning("loss diverged at epoch %d; restoring last good checkpoint", epoch)
                diverged = True
                break
            epoch_loss += value
            n_batches += 1
            T.backward(loss)
            clip_gradients(model.params, config.clip_norm)
            if adam is not None:
                adam_step(model.params, adam, config.learning_rate, config.decoder_lr_ratio)
            else:
                sgd_step(model.params, config.learning_rate, config.decoder_lr_ratio)
        if diverged:
            model.params.load_state(last_good)
            break
        last_good = model.params.state_dict()

        dev_f1 = None
        if dev_instances:
            report = evaluate_model(
                model, dev_instances, inventory,
                batch_size=config.batch_size, context_window=config.context_window,
            )
            dev_f1 = report.overall_f1
            if dev_f1 > best_f1:
                best_f1 = dev_f1
                best_state = model.params.state_dict()
                train_log.best_epoch = epoch

        w1 = w2 = w3 = None
        if model.fusion_weights is not None:
            w1, w2, w3 = model.fusion_weights.values()
        row = EpochLog(
            epoch=epoch, loss=epoch_loss / max(n_batches, 1), dev_f1=dev_f1,
            w1=w1, w2=w2, w3=w3, seconds=clock() - started,
        )
        train_log.rows.append(row)
        if progress is not None:
            progress(row)

    if dev_instances and not diverged:
        model.params.load_state(best_state)
    return model, train_log
