"""Encoder-decoder architectures: embeddings, bigram convolution, a
shared-weight GRU encoder over up to three feature streams, an attentive
GRU decoder, and the output projection.

All five architecture variants run through one forward path; they differ
only in which streams are active and how stream attentions are fused.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .batching import prepend_bos
from .corpus import BOS, EOS, Vocabulary
from .errors import ConfigError, DataError, DimensionError
from .fusion import AttentionBundle, FusionWeights, fuse
from .serialize import atomic_write_text, load_params, save_params

ARCH_STREAMS = {
    "seq2seq": ("word",),
    "seq2seq+conv": ("bigram",),
    "seq2seq+pos-pointwise": ("word", "pos"),
    "seq2seq+pos-weighted": ("word", "pos"),
    "seq2seq+conv+pos-weighted": ("word", "pos", "bigram"),
}

ATTENTION_VARIANTS = ("dot", "general", "concat")

_DEFAULT_FUSION = {
    "seq2seq+pos-pointwise": "pointwise",
    "seq2seq+pos-weighted": "scalar-weighted",
    "seq2seq+conv+pos-weighted": "scalar-weighted",
}


@dataclass
class ArchitectureConfig:
    architecture: str = "seq2seq"
    fusion: str | None = None
    embed_dim: int = 100
    hidden_dim: int = 100
    encoder_layers: int = 2
    decoder_layers: int = 2
    bidirectional: bool = True
    dropout: float = 0.1
    attention: str = "dot"
    per_vector_gate: bool = False

    def __post_init__(self):
        if self.architecture not in ARCH_STREAMS:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; pick one of {sorted(ARCH_STREAMS)}"
            )
        if self.attention == "linear":
            # the bilinear scorer; kept as an accepted alias
            self.attention = "general"
        if self.attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown attention variant {self.attention!r}")
        if self.fusion is None:
            self.fusion = _DEFAULT_FUSION.get(self.architecture)
        if self.uses_fusion:
            if self.architecture == "seq2seq+pos-pointwise" and self.fusion != "pointwise":
                raise ConfigError("seq2seq+pos-pointwise fuses by pointwise multiplication only")
            if self.fusion == "pointwise" and set(self.streams) != {"word", "pos"}:
                raise ConfigError("pointwise fusion needs exactly the word+pos pair")
        if min(self.embed_dim, self.hidden_dim, self.encoder_layers, self.decoder_layers) < 1:
            raise ConfigError("dims and layer counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def streams(self):
        return ARCH_STREAMS[self.architecture]

    @property
    def base_stream(self):
        return "word" if "word" in self.streams else self.streams[0]

    @property
    def uses_fusion(self):
        return len(self.streams) >= 2

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "fusion": self.fusion,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "bidirectional": self.bidirectional,
            "dropout": self.dropout,
            "attention": self.attention,
            "per_vector_gate": self.per_vector_gate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter registry


class ModelParams:
    """All learnable tensors, addressable by name, split into encoder-side
    and decoder-side groups for the decoder learning ratio."""

    def __init__(self):
        self._tensors = {}
        self._decoder_side = {}

    def add(self, name, array, decoder_side=False):
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = T.Tensor(array, requires_grad=True)
        self._tensors[name] = t
        self._decoder_side[name] = decoder_side
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    def is_decoder_side(self, name):
        return self._decoder_side[name]

    def zero_grads(self):
        for t in self._tensors.values():
            t.zero_grad()

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, state):
        missing = set(self._tensors) - set(state)
        extra = set(state) - set(self._tensors)
        if missing or extra:
            raise DataError(f"parameter names disagree; missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            t = self._tensors[name]
            if tuple(arr.shape) != t.shape:
                raise DataError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# building blocks


@dataclass
class EmbeddingTable:
    matrix: T.Tensor

    @property
    def vocab_size(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


@dataclass
class BigramKernel:
    matrix: T.Tensor  # [2, E]


@dataclass
class GruLayer:
    """One direction of one GRU layer."""

    w_z: T.Tensor
    u_z: T.Tensor
    b_z: T.Tensor
    w_r: T.Tensor
    u_r: T.Tensor
    b_r: T.Tensor
    w_c: T.Tensor
    u_c: T.Tensor
    b_c: T.Tensor


@dataclass
class GruCell:
    """A GRU stack: per-layer forward (and optional backward) parameters."""

    input_dim: int
    hidden_dim: int
    forward_layers: list[GruLayer]
    backward_layers: list[GruLayer] | None = None

    @property
    def layers(self):
        return len(self.forward_layers)

    @property
    def bidirectional(self):
        return self.backward_layers is not None


@dataclass
class AttentionScorer:
    variant: str
    general_w: T.Tensor | None = None   # [H, H]
    concat_w: T.Tensor | None = None    # [2H, H]
    concat_v: T.Tensor | None = None    # [H, 1]


@dataclass
class DecoderHead:
    weight: T.Tensor  # [2H, V_out]
    bias: T.Tensor    # [V_out]


@dataclass
class Model:
    config: ArchitectureConfig
    vocab: Vocabulary
    params: ModelParams
    word_table: EmbeddingTable
    pos_table: EmbeddingTable
    out_table: EmbeddingTable
    kernel: BigramKernel
    encoder: GruCell
    decoder: GruCell
    scorer: AttentionScorer
    head: DecoderHead
    fusion_weights: FusionWeights | None = field(default=None)


def build_model(config, vocab, seed=0, fusion_init="ones"):
    """Construct a model with seeded initialization."""
    rng = np.random.RandomState(seed)
    params = ModelParams()
    e, h = config.embed_dim, config.hidden_dim

    def table(name, size):
        return EmbeddingTable(params.add(name, rng.normal(0.0, 0.3, (size, e))))

    word_table = table("embed.word", len(vocab.words))
    pos_table = table("embed.pos", len(vocab.pos))
    out_table = table("embed.out", len(vocab.output))
    kernel = BigramKernel(params.add("bigram.kernel", np.ones((2, e))))

    def gru_layer(prefix, in_dim, decoder_side):
        k = 1.0 / np.sqrt(h)

        def w(suffix, shape):
            return params.add(f"{prefix}.{suffix}", rng.uniform(-k, k, shape), decoder_side)

        return GruLayer(
            w_z=w("w_z", (in_dim, h)), u_z=w("u_z", (h, h)), b_z=w("b_z", (h,)),
            w_r=w("w_r", (in_dim, h)), u_r=w("u_r", (h, h)), b_r=w("b_r", (h,)),
            w_c=w("w_c", (in_dim, h)), u_c=w("u_c", (h, h)), b_c=w("b_c", (h,)),
        )

    enc_fwd = [gru_layer(f"enc.l{i}.fwd", e if i == 0 else h, False) for i in range(config.encoder_layers)]
    enc_bwd = None
    if config.bidirectional:
        enc_bwd = [gru_layer(f"enc.l{i}.bwd", e if i == 0 else h, False) for i in range(config.encoder_layers)]
    encoder = GruCell(input_dim=e, hidden_dim=h, forward_layers=enc_fwd, backward_layers=enc_bwd)

    dec_layers = [gru_layer(f"dec.l{i}", e if i == 0 else h, True) for i in range(config.decoder_layers)]
    decoder = GruCell(input_dim=e, hidden_dim=h, forward_layers=dec_layers)

    k = 1.0 / np.sqrt(h)
    scorer = AttentionScorer(variant=config.attention)
    if config.attention == "general":
        scorer.general_w = params.add("attn.general_w", rng.uniform(-k, k, (h, h)), True)
    elif config.attention == "concat":
        kc = 1.0 / np.sqrt(2 * h)
        scorer.concat_w = params.add("attn.concat_w", rng.uniform(-kc, kc, (2 * h, h)), True)
        scorer.concat_v = params.add("attn.concat_v", rng.uniform(-k, k, (h, 1)), True)

    kh = 1.0 / np.sqrt(2 * h)
    head = DecoderHead(
        weight=params.add("head.weight", rng.uniform(-kh, kh, (2 * h, len(vocab.output))), True),
        bias=params.add("head.bias", np.zeros(len(vocab.output)), True),
    )

    fusion_weights = None
    if config.uses_fusion and config.fusion != "pointwise":
        fusion_weights = FusionWeights.create(fusion_init, rng=rng)
        params.add("fusion.w1", fusion_weights.w1.data, True)
        params.add("fusion.w2", fusion_weights.w2.data, True)
        params.add("fusion.w3", fusion_weights.w3.data, True)
        fusion_weights.w1 = params["fusion.w1"]
        fusion_weights.w2 = params["fusion.w2"]
        fusion_weights.w3 = params["fusion.w3"]

    return Model(
        config=config, vocab=vocab, params=params,
        word_table=word_table, pos_table=pos_table, out_table=out_table,
        kernel=kernel, encoder=encoder, decoder=decoder,
        scorer=scorer, head=head, fusion_weights=fusion_weights,
    )


# ---------------------------------------------------------------------------
# operations


def embed_sequence(tokens, table):
    """Look up embedding rows for an integer index array."""
    return T.embedding(table.matrix, tokens)


def convolve_bigrams(emb, kernel):
    """Width-2 depthwise convolution over adjacent embeddings.

    Input carries the prepended <s> row, so output position i combines
    padded positions i and i+1 and the output is one shorter.
    """
    if emb.ndim != 3:
        raise DimensionError(f"convolve_bigrams expects [B, S, E], got {emb.shape}")
    s_in = emb.shape[1]
    if s_in < 2:
        raise DimensionError(f"convolve_bigrams needs sequence length >= 2, got {s_in}")
    e = emb.shape[2]
    if kernel.matrix.shape != (2, e):
        raise DimensionError(f"bigram kernel shape {kernel.matrix.shape} != (2, {e})")
    k1 = T.reshape(T.narrow(kernel.matrix, 0, 0, 1), (1, 1, e))
    k2 = T.reshape(T.narrow(kernel.matrix, 0, 1, 1), (1, 1, e))
    left = T.narrow(emb, 1, 0, s_in - 1)
    right = T.narrow(emb, 1, 1, s_in - 1)
    return T.add(T.mul(left, k1), T.mul(right, k2))


def gru_step(x, h_prev, layer):
    """One GRU step: x [B, in], h_prev [B, H] -> new hidden [B, H]."""
    z = T.sigmoid(T.add(T.add(T.matmul(x, layer.w_z), T.matmul(h_prev, layer.u_z)), layer.b_z))
    r = T.sigmoid(T.add(T.add(T.matmul(x, layer.w_r), T.matmul(h_prev, layer.u_r)), layer.b_r))
    c = T.tanh(T.add(T.add(T.matmul(x, layer.w_c), T.matmul(T.mul(r, h_prev), layer.u_c)), layer.b_c))
    one_minus_z = T.sub(1.0, z)
    return T.add(T.mul(one_minus_z, c), T.mul(z, h_prev))


def decode_step(prev_emb, h_prev, layer):
    """One decoder GRU step (single layer); alias of the shared step rule."""
    return gru_step(prev_emb, h_prev, layer)


def _run_direction(x, layer, mask, reverse=False):
    """Run one direction over time with mask-gated state updates.

    Gating keeps the carried state frozen across padding, so the final
    state equals the state at each row's true length.
    """
    b, s = x.shape[0], x.shape[1]
    h = T.Tensor(np.zeros((b, layer.u_z.shape[0])))
    steps = range(s - 1, -1, -1) if reverse else range(s)
    outs = [None] * s
    for t in steps:
        x_t = T.index_axis(x, 1, t)
        h_new = gru_step(x_t, h, layer)
        if mask is not None:
            m = mask[:, t:t + 1]
            h = T.add(T.mul(h_new, m), T.mul(h, 1.0 - m))
        else:
            h = h_new
        outs[t] = h
    return T.stack(outs, axis=1), h


def encode_stream(x, cell, mask=None, dropout_rate=0.0, dropout_rng=None):
    """Run the GRU stack over one feature stream.

    Returns per-step outputs [B, S, H] and the final state [B, H].
    Bidirectional layers sum the two directions' outputs and finals.
    Outputs at padded positions are zeroed.
    """
    if x.shape[2] != cell.input_dim:
        raise DimensionError(f"stream feature dim {x.shape[2]} != cell input dim {cell.input_dim}")
    current = x
    outputs, final = None, None
    for i in range(cell.layers):
        if i > 0 and dropout_rate > 0.0:
            current = T.dropout(current, dropout_rate, dropout_rng)
        fwd_out, fwd_final = _run_direction(current, cell.forward_layers[i], mask)
        if cell.bidirectional:
            bwd_out, bwd_final = _run_direction(current, cell.backward_layers[i], mask, reverse=True)
            outputs = T.add(fwd_out, bwd_out)
            final = T.add(fwd_final, bwd_final)
        else:
            outputs, final = fwd_out, fwd_final
        if mask is not None:
            outputs = T.mul(outputs, mask[:, :, None])
        current = outputs
    return outputs, final


def score_attention(encoder_outputs, decoder_hidden, scorer, normalize=True):
    """Attention energies of the decoder state against each source position.

    dot: h.O_i; general: h W O_i; concat: v^T tanh(W [h; O_i]).
    normalize applies the softmax over source positions; fusion
    architectures leave it off and normalize inside the combiner.
    """
    b, s, h = encoder_outputs.shape
    if decoder_hidden.shape != (b, h):
        raise DimensionError(
            f"decoder hidden {decoder_hidden.shape} incompatible with encoder outputs {encoder_outputs.shape}"
        )
    if scorer.variant == "dot":
        query = decoder_hidden
    elif scorer.variant == "general":
        query = T.matmul(decoder_hidden, scorer.general_w)
    elif scorer.variant == "concat":
        h3 = T.reshape(decoder_hidden, (b, 1, h))
        tiled = T.mul(h3, np.ones((1, s, 1)))
        cat = T.concat([tiled, encoder_outputs], axis=2)
        hidden = T.tanh(T.matmul(cat, scorer.concat_w))
        energies = T.reshape(T.matmul(hidden, scorer.concat_v), (b, s))
        return T.softmax(energies, axis=-1) if normalize else energies
    else:
        raise ConfigError(f"unknown attention variant {scorer.variant!r}")
    energies = T.tsum(T.mul(encoder_outputs, T.reshape(query, (b, 1, h))), axis=2)
    return T.softmax(energies, axis=-1) if normalize else energies


def project_output(decoder_hidden, context, head):
    """Concatenate hidden and context, project, and return log-probabilities."""
    cat = T.concat([decoder_hidden, context], axis=1)
    logits = T.add(T.matmul(cat, head.weight), head.bias)
    return T.log_softmax(logits, axis=-1)


def _stream_embeddings(batch, model, stream, rate, rng):
    if stream == "word":
        emb = embed_sequence(batch.source, model.word_table)
    elif stream == "pos":
        emb = embed_sequence(batch.pos, model.pos_table)
    elif stream == "bigram":
        padded = embed_sequence(prepend_bos(batch.source), model.word_table)
        emb = convolve_bigrams(padded, model.kernel)
    else:
        raise ConfigError(f"unknown stream {stream!r}")
    if rate > 0.0:
        emb = T.dropout(emb, rate, rng)
    return emb


def forward_sentence(batch, model, mode="teacher-forced", dropout_rng=None, max_steps=None):
    """Run the full encoder-decoder over a batch.

    Returns (logits [B, steps, V_out] of log-probabilities, bundles), one
    AttentionBundle per decoder step. Teacher-forced mode runs exactly the
    source length; greedy mode feeds back its own argmax predictions and
    stops early once every row has emitted <eos>.
    """
    if mode not in ("teacher-forced", "greedy"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    cfg = model.config
    rate = cfg.dropout if dropout_rng is not None else 0.0
    b, s = batch.source.shape
    mask = batch.mask

    outputs = {}
    finals = {}
    for stream in cfg.streams:
        emb = _stream_embeddings(batch, model, stream, rate, dropout_rng)
        outputs[stream], finals[stream] = encode_stream(
            emb, model.encoder, mask=mask, dropout_rate=rate, dropout_rng=dropout_rng
        )

    base = cfg.base_stream
    hidden = [finals[base] for _ in range(model.decoder.layers)]

    steps = s if mode == "teacher-forced" else (max_steps or s)
    prev_tokens = np.full(b, BOS, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    step_logits = []
    bundles = []
    for t in range(steps):
        emb = embed_sequence(prev_tokens, model.out_table)
        if rate > 0.0:
            emb = T.dropout(emb, rate, dropout_rng)
        layer_input = emb
        for i in range(model.decoder.layers):
            if i > 0 and rate > 0.0:
                layer_input = T.dropout(layer_input, rate, dropout_rng)
            hidden[i] = decode_step(layer_input, hidden[i], model.decoder.forward_layers[i])
            layer_input = hidden[i]
        h_top = hidden[-1]

        if cfg.uses_fusion:
            normalize = cfg.fusion == "pointwise"
            streams_att = {
                name: score_attention(outputs[name], h_top, model.scorer, normalize=normalize)
                for name in cfg.streams
            }
            bundle = AttentionBundle(streams=streams_att, strategy=cfg.fusion, step=t)
            fused = fuse(
                bundle, cfg.fusion,
                weights=model.fusion_weights,
                per_vector_gate=cfg.per_vector_gate,
            )
        else:
            fused = score_attention(outputs[base], h_top, model.scorer, normalize=True)
            bundle = AttentionBundle(streams={base: fused}, strategy="single", step=t, fused=fused)
        bundles.append(bundle)

        context = T.reshape(
            T.matmul(T.reshape(fused, (b, 1, s)), outputs[base]), (b, cfg.hidden_dim)
        )
        logp = project_output(h_top, context, model.head)
        step_logits.append(logp)

        if mode == "teacher-forced":
            prev_tokens = batch.target[:, t]
        else:
            pred = logp.data.argmax(axis=1)
            finished |= pred == EOS
            prev_tokens = pred.astype(np.int64)
            if finished.all():
                break

    return T.stack(step_logits, axis=1), bundles


def greedy_decode(batch, model, max_steps=None):
    """Deterministic greedy predictions [B, steps]."""
    logits, _ = forward_sentence(batch, model, mode="greedy", max_steps=max_steps)
    return logits.data.argmax(axis=2)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, directory):
    """Write params + architecture config + vocabulary. Atomic per file."""
    os.makedirs(directory, exist_ok=True)
    save_params(dict(model.params.items()), os.path.join(directory, "params.json"))
    atomic_write_text(os.path.join(directory, "config.json"), json.dumps(model.config.to_dict(), indent=2))
    atomic_write_text(os.path.join(directory, "vocab.json"), json.dumps(model.vocab.to_dict(), indent=2))


def load_checkpoint(directory):
    """Rebuild a model from a checkpoint directory, validating shapes."""
    with open(os.path.join(directory, "config.json")) as fh:
        config = ArchitectureConfig.from_dict(json.load(fh))
    with open(os.path.join(directory, "vocab.json")) as fh:
        vocab = Vocabulary.from_dict(json.load(fh))
    model = build_model(config, vocab, seed=0)
    state = load_params(os.path.join(directory, "params.json"))
    model.params.load_state(state)
    return model
