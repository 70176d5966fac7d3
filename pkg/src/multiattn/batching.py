"""Batch assembly: context-window trimming, padding, and target substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, PAD, Instance
from .errors import UsageError


@dataclass
class Batch:
    source: np.ndarray          # [B, S] word indices
    pos: np.ndarray             # [B, S] POS indices
    target: np.ndarray          # [B, S+1] output indices, <eos> after the last token
    lengths: np.ndarray         # [B] true lengths
    target_positions: np.ndarray  # [B] sense-slot index after trimming
    mask: np.ndarray            # [B, S] 1.0 on real positions, 0.0 on padding
    instances: list[Instance]   # trimmed, in row order
    row_order: list[int]        # row -> position in the make_batch argument

    @property
    def batch_size(self):
        return self.source.shape[0]

    @property
    def seq_len(self):
        return self.source.shape[1]


def trim_to_window(instance, context_window):
    """Keep positions within context_window//2 of the target slot."""
    half = context_window // 2
    t = instance.target_index
    start = max(0, t - half)
    end = min(len(instance.tokens) - 1, t + half)
    if start == 0 and end == len(instance.tokens) - 1:
        return instance
    return Instance(
        tokens=instance.tokens[start:end + 1],
        target_index=t - start,
        sentence_id=instance.sentence_id,
    )


def make_batch(instances, vocab, context_window=50, substitute=True):
    """Assemble one padded, length-sorted batch.

    substitute=False leaves the target as a plain copy of the source, which
    is what evaluation feeds the decoder (no gold sense leaks in).
    """
    if not instances:
        raise UsageError("make_batch called with zero instances")
    trimmed = [trim_to_window(inst, context_window) for inst in instances]
    row_order = sorted(
        range(len(trimmed)),
        key=lambda i: (-len(trimmed[i].tokens), trimmed[i].sentence_id, trimmed[i].target_index),
    )
    trimmed = [trimmed[i] for i in row_order]
    b = len(trimmed)
    s_max = max(len(inst.tokens) for inst in trimmed)

    source = np.full((b, s_max), PAD, dtype=np.int64)
    pos = np.full((b, s_max), PAD, dtype=np.int64)
    target = np.full((b, s_max + 1), PAD, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    target_positions = np.zeros(b, dtype=np.int64)
    mask = np.zeros((b, s_max), dtype=np.float64)

    for i, inst in enumerate(trimmed):
        n = len(inst.tokens)
        lengths[i] = n
        target_positions[i] = inst.target_index
        mask[i, :n] = 1.0
        for j, tok in enumerate(inst.tokens):
            source[i, j] = vocab.words.encode(tok.surface)
            pos[i, j] = vocab.pos.encode(tok.pos)
            if substitute and j == inst.target_index and tok.sense is not None:
                target[i, j] = vocab.output.encode(tok.sense_token)
            else:
                target[i, j] = vocab.output.encode(tok.surface)
        target[i, n] = EOS

    return Batch(
        source=source,
        pos=pos,
        target=target,
        lengths=lengths,
        target_positions=target_positions,
        mask=mask,
        instances=trimmed,
        row_order=row_order,
    )


def iter_batches(instances, vocab, batch_size, context_window=50, rng=None, substitute=True):
    """Yield batches; a RandomState shuffles instance order between epochs."""
    if batch_size <= 0:
        raise UsageError(f"batch_size must be positive, got {batch_size}")
    order = list(range(len(instances)))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, vocab, context_window=context_window, substitute=substitute)


def prepend_bos(source):
    """Prepend the <s> column used by the bigram convolution input."""
    b = source.shape[0]
    return np.concatenate([np.full((b, 1), BOS, dtype=source.dtype), source], axis=1)
