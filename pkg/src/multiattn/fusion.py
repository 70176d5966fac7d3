"""Fusing per-stream attention vectors into one distribution.

Four strategies: point-wise multiplication of two post-softmax
distributions, learned scalar weighting, local (sigmoid) gating, and
global (cross-stream column-softmax + per-position max) gating. The
weighted and gated variants consume raw attention energies and end in
their own softmax; the point-wise variant consumes distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

STRATEGIES = ("pointwise", "scalar-weighted", "local-gate", "global-gate")

STREAMS = ("word", "pos", "bigram")


@dataclass
class FusionWeights:
    """Learnable scalar weights on the word, POS, and bigram attentions."""

    w1: T.Tensor
    w2: T.Tensor
    w3: T.Tensor

    @classmethod
    def create(cls, init="ones", rng=None):
        if init == "ones":
            values = [1.0, 1.0, 1.0]
        elif init == "uniform":
            if rng is None:
                rng = np.random.RandomState(0)
            values = rng.uniform(-0.1, 0.1, size=3).tolist()
        else:
            raise ConfigError(f"unknown fusion weight init {init!r}")
        return cls(*(T.Tensor(np.array([v]), requires_grad=True) for v in values))

    def values(self):
        return (self.w1.item(), self.w2.item(), self.w3.item())

    def by_stream(self, stream):
        return {"word": self.w1, "pos": self.w2, "bigram": self.w3}[stream]


@dataclass
class AttentionBundle:
    """Pre-fusion attention vectors for one decoder step, plus the result."""

    streams: dict[str, T.Tensor]
    strategy: str
    step: int
    fused: T.Tensor | None = field(default=None)

    def stream_names(self):
        return tuple(s for s in STREAMS if s in self.streams)


def _check_same_shape(vectors):
    shapes = {v.shape for v in vectors}
    if len(shapes) > 1:
        raise DimensionError(f"attention streams have mismatched shapes {sorted(shapes)}")


def combine_pointwise(a_word, a_pos):
    """softmax(A_w * A_p); both inputs are post-softmax distributions."""
    _check_same_shape([a_word, a_pos])
    return T.softmax(T.mul(a_word, a_pos), axis=-1)


def combine_weighted(streams, weights):
    """softmax(w1*A_w + w2*A_p + w3*A_b); absent streams drop their term."""
    present = [s for s in STREAMS if streams.get(s) is not None]
    if not present:
        raise ConfigError("weighted fusion with no attention streams")
    _check_same_shape([streams[s] for s in present])
    total = None
    for s in present:
        term = T.mul(streams[s], weights.by_stream(s))
        total = term if total is None else T.add(total, term)
    return T.softmax(total, axis=-1)


def combine_local_gate(streams, per_vector=False):
    """softmax(sum_i sigmoid(A_i) * A_i).

    per_vector gates each vector by the sigmoid of its mean instead of
    element-wise sigmoid values.
    """
    present = [s for s in STREAMS if streams.get(s) is not None]
    if not present:
        raise ConfigError("local gating with no attention streams")
    _check_same_shape([streams[s] for s in present])
    total = None
    for s in present:
        a = streams[s]
        if per_vector:
            n = a.shape[-1]
            gate = T.sigmoid(T.mul(T.tsum(a, axis=-1, keepdims=True), 1.0 / n))
        else:
            gate = T.sigmoid(a)
        term = T.mul(gate, a)
        total = term if total is None else T.add(total, term)
    return T.softmax(total, axis=-1)


def combine_global_gate(streams):
    """Column-softmax across streams, per-position max, then softmax over
    positions. Ties in the max go to the lowest stream index."""
    present = [s for s in STREAMS if streams.get(s) is not None]
    if not present:
        raise ConfigError("global gating with no attention streams")
    vectors = [streams[s] for s in present]
    _check_same_shape(vectors)
    if vectors[0].ndim == 1:
        stacked = T.stack(vectors, axis=0)  # [K, S]
        normalized = T.softmax(stacked, axis=0)
        best = T.tmax(normalized, axis=0)
    else:
        stacked = T.stack(vectors, axis=1)  # [B, K, S]
        normalized = T.softmax(stacked, axis=1)
        best = T.tmax(normalized, axis=1)
    return T.softmax(best, axis=-1)


def fuse(bundle, strategy, weights=None, per_vector_gate=False):
    """Dispatch one strategy over the bundle and record the fused result."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    streams = bundle.streams
    if strategy == "pointwise":
        names = bundle.stream_names()
        if set(names) != {"word", "pos"}:
            raise ConfigError(
                f"pointwise fusion needs exactly the word+pos pair, got {names}"
            )
        fused = combine_pointwise(streams["word"], streams["pos"])
    elif strategy == "scalar-weighted":
        if weights is None:
            raise ConfigError("scalar-weighted fusion needs FusionWeights")
        fused = combine_weighted(streams, weights)
    elif strategy == "local-gate":
        fused = combine_local_gate(streams, per_vector=per_vector_gate)
    else:
        fused = combine_global_gate(streams)
    bundle.fused = fused
    bundle.strategy = strategy
    return fused
