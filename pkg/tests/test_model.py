import numpy as np
import pytest

from multiattn import tensor as T
from multiattn.batching import make_batch
from multiattn.corpus import Instance, Token, Vocab, Vocabulary
from multiattn.errors import ConfigError, DimensionError
from multiattn.gradcheck import grad_check
from multiattn.model import (
    ARCH_STREAMS,
    ArchitectureConfig,
    AttentionScorer,
    BigramKernel,
    DecoderHead,
    EmbeddingTable,
    build_model,
    convolve_bigrams,
    decode_step,
    embed_sequence,
    encode_stream,
    forward_sentence,
    greedy_decode,
    gru_step,
    load_checkpoint,
    project_output,
    save_checkpoint,
    score_attention,
)
from multiattn.training import compute_loss, sgd_step


def tiny_vocab(n_words=8, senses=("bass%a", "bass%b")):
    words = [f"w{i}" for i in range(n_words)]
    return Vocabulary(
        words=Vocab(words),
        pos=Vocab(["nn", "vb", "adj", "adv", "other"]),
        output=Vocab(words + list(senses)),
    )


def micro_config(architecture="seq2seq", **kw):
    defaults = dict(
        architecture=architecture, embed_dim=4, hidden_dim=5,
        encoder_layers=1, decoder_layers=1, bidirectional=False, dropout=0.0,
    )
    defaults.update(kw)
    return ArchitectureConfig(**defaults)


def toy_instance(n=4, target=1):
    tokens = tuple(
        Token(surface=f"w{i}", lemma=f"w{i}", pos="nn", sense="a" if i == target else None)
        for i in range(n)
    )
    return Instance(tokens=tokens, target_index=target, sentence_id=0)


def toy_batch(vocab, n=4, rows=2):
    instances = [toy_instance(n=n, target=(r % n)) for r in range(rows)]
    instances = [
        Instance(tokens=tuple(
            Token(surface=f"w{(i + r) % 6}", lemma=f"w{(i + r) % 6}", pos="nn",
                  sense="a" if i == (r % n) else None)
            for i in range(n)
        ), target_index=r % n, sentence_id=r)
        for r in range(rows)
    ]
    return make_batch(instances, vocab)


# ---------------------------------------------------------------------------
# embedding


def test_embed_pad_lookup_is_deterministic():
    table = EmbeddingTable(T.Tensor(np.random.RandomState(0).randn(6, 3), requires_grad=True))
    out = embed_sequence(np.array([[0, 0]]), table)
    assert np.array_equal(out.data[0, 0], out.data[0, 1])


def test_embed_gradient_lands_only_on_used_rows():
    table = EmbeddingTable(T.Tensor(np.random.RandomState(1).randn(6, 3), requires_grad=True))
    out = embed_sequence(np.array([[1, 4]]), table)
    T.backward(T.tsum(out))
    used = {1, 4}
    for row in range(6):
        expected = 1.0 if row in used else 0.0
        assert np.all(table.matrix.grad[row] == expected)


def test_embed_matches_onehot_matmul():
    rng = np.random.RandomState(2)
    mat = rng.randn(7, 4)
    table = EmbeddingTable(T.Tensor(mat))
    idx = np.array([[3, 0, 6]])
    looked = embed_sequence(idx, table).data[0]
    onehot = np.eye(7)[idx[0]]
    assert np.allclose(looked, onehot @ mat)


# ---------------------------------------------------------------------------
# bigram convolution


def test_conv_all_ones_kernel_sums_neighbors():
    rng = np.random.RandomState(3)
    emb = T.Tensor(rng.randn(2, 5, 3))
    out = convolve_bigrams(emb, BigramKernel(T.Tensor(np.ones((2, 3)))))
    assert np.allclose(out.data, emb.data[:, :-1] + emb.data[:, 1:])


def test_conv_selector_kernel_recovers_unpadded_sequence():
    rng = np.random.RandomState(4)
    emb = T.Tensor(rng.randn(2, 5, 3))
    kernel = BigramKernel(T.Tensor(np.vstack([np.zeros(3), np.ones(3)])))
    out = convolve_bigrams(emb, kernel)
    assert np.allclose(out.data, emb.data[:, 1:])


def test_conv_matches_bruteforce_loop():
    rng = np.random.RandomState(5)
    for _ in range(20):
        b, s, e = rng.randint(1, 4), rng.randint(2, 7), rng.randint(2, 5)
        emb = rng.randn(b, s, e)
        kernel = rng.randn(2, e)
        out = convolve_bigrams(T.Tensor(emb), BigramKernel(T.Tensor(kernel))).data
        expected = np.zeros((b, s - 1, e))
        for bi in range(b):
            for i in range(s - 1):
                for j in range(2):
                    expected[bi, i] += emb[bi, i + j] * kernel[j]
        assert np.max(np.abs(out - expected)) < 1e-12


def test_conv_locality():
    rng = np.random.RandomState(6)
    emb = rng.randn(1, 6, 3)
    kernel = BigramKernel(T.Tensor(rng.randn(2, 3)))
    base = convolve_bigrams(T.Tensor(emb), kernel).data
    poked = emb.copy()
    poked[0, 4] += 10.0
    out = convolve_bigrams(T.Tensor(poked), kernel).data
    # rows 3 and 4 cover padded positions (3,4) and (4,5); all others exact
    for i in range(5):
        if i in (3, 4):
            continue
        assert np.array_equal(out[0, i], base[0, i])


def test_conv_too_short():
    with pytest.raises(DimensionError):
        convolve_bigrams(T.Tensor(np.ones((1, 1, 3))), BigramKernel(T.Tensor(np.ones((2, 3)))))


# ---------------------------------------------------------------------------
# GRU


def zero_layer(in_dim, h):
    from multiattn.model import GruLayer

    zeros = lambda shape: T.Tensor(np.zeros(shape), requires_grad=True)
    return GruLayer(
        w_z=zeros((in_dim, h)), u_z=zeros((h, h)), b_z=zeros(h),
        w_r=zeros((in_dim, h)), u_r=zeros((h, h)), b_r=zeros(h),
        w_c=zeros((in_dim, h)), u_c=zeros((h, h)), b_c=zeros(h),
    )


def test_gru_zero_fixed_point():
    layer = zero_layer(3, 4)
    out = gru_step(T.Tensor(np.random.RandomState(7).randn(2, 3)), T.Tensor(np.zeros((2, 4))), layer)
    assert np.all(out.data == 0)


def test_gru_step_matches_hand_formula():
    rng = np.random.RandomState(8)
    from multiattn.model import GruLayer

    p = {k: rng.randn(*shape) for k, shape in [
        ("w_z", (2, 2)), ("u_z", (2, 2)), ("b_z", (2,)),
        ("w_r", (2, 2)), ("u_r", (2, 2)), ("b_r", (2,)),
        ("w_c", (2, 2)), ("u_c", (2, 2)), ("b_c", (2,)),
    ]}
    layer = GruLayer(**{k: T.Tensor(v) for k, v in p.items()})
    x, h = rng.randn(1, 2), rng.randn(1, 2)
    sig = lambda v: 1 / (1 + np.exp(-v))
    z = sig(x @ p["w_z"] + h @ p["u_z"] + p["b_z"])
    r = sig(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    c = np.tanh(x @ p["w_c"] + (r * h) @ p["u_c"] + p["b_c"])
    expected = (1 - z) * c + z * h
    out = gru_step(T.Tensor(x), T.Tensor(h), layer)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_decode_step_pure():
    rng = np.random.RandomState(9)
    from multiattn.model import GruLayer

    layer = GruLayer(**{
        k: T.Tensor(rng.randn(*s)) for k, s in [
            ("w_z", (3, 4)), ("u_z", (4, 4)), ("b_z", (4,)),
            ("w_r", (3, 4)), ("u_r", (4, 4)), ("b_r", (4,)),
            ("w_c", (3, 4)), ("u_c", (4, 4)), ("b_c", (4,)),
        ]
    })
    x, h = T.Tensor(rng.randn(2, 3)), T.Tensor(rng.randn(2, 4))
    assert np.array_equal(decode_step(x, h, layer).data, decode_step(x, h, layer).data)


def test_encoder_zero_everything_stays_zero():
    cfg = micro_config()
    model = build_model(cfg, tiny_vocab(), seed=0)
    cell = model.encoder
    for layer in cell.forward_layers:
        for t in vars(layer).values():
            t.data[...] = 0.0
    x = T.Tensor(np.zeros((2, 3, 4)))
    outputs, final = encode_stream(x, cell)
    assert np.all(outputs.data == 0) and np.all(final.data == 0)


def test_encoder_single_step_output_equals_final():
    model = build_model(micro_config(), tiny_vocab(), seed=1)
    x = T.Tensor(np.random.RandomState(10).randn(3, 1, 4))
    outputs, final = encode_stream(x, model.encoder)
    assert np.array_equal(outputs.data[:, 0, :], final.data)


def test_shared_cell_two_streams_grads_add():
    # gradient through a shared cell equals the sum of per-stream gradients
    rng = np.random.RandomState(11)
    model = build_model(micro_config(), tiny_vocab(), seed=2)
    cell = model.encoder
    x1 = T.Tensor(rng.randn(2, 3, 4))
    x2 = T.Tensor(rng.randn(2, 3, 4))
    name = "enc.l0.fwd.w_c"
    p = model.params[name]

    def run(x):
        out, final = encode_stream(x, cell)
        return T.tsum(T.mul(out, out)) + T.tsum(final)

    model.params.zero_grads()
    T.backward(run(x1))
    g1 = p.grad.copy()
    model.params.zero_grads()
    T.backward(run(x2))
    g2 = p.grad.copy()
    model.params.zero_grads()
    T.backward(T.add(run(x1), run(x2)))
    assert np.allclose(p.grad, g1 + g2, atol=1e-12)


def test_bidirectional_sum_width():
    cfg = micro_config(bidirectional=True, encoder_layers=2)
    model = build_model(cfg, tiny_vocab(), seed=3)
    x = T.Tensor(np.random.RandomState(12).randn(2, 4, 4))
    outputs, final = encode_stream(x, model.encoder)
    assert outputs.shape == (2, 4, 5)
    assert final.shape == (2, 5)


def test_encoder_mask_freezes_state_and_zeroes_outputs():
    model = build_model(micro_config(), tiny_vocab(), seed=4)
    rng = np.random.RandomState(13)
    x = rng.randn(1, 5, 4)
    mask = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
    outputs, final = encode_stream(T.Tensor(x), model.encoder, mask=mask)
    assert np.all(outputs.data[0, 3:] == 0)
    short, short_final = encode_stream(T.Tensor(x[:, :3]), model.encoder)
    assert np.allclose(final.data, short_final.data, atol=1e-12)


# ---------------------------------------------------------------------------
# attention scoring


def test_dot_attention_orthonormal_rows():
    o = np.zeros((1, 3, 3))
    o[0] = np.eye(3)
    h = T.Tensor(o[0, 1][None, :])
    scores = score_attention(T.Tensor(o), h, AttentionScorer("dot"), normalize=False)
    assert np.allclose(scores.data, [[0.0, 1.0, 0.0]])


def test_dot_attention_zero_query_uniform():
    rng = np.random.RandomState(14)
    o = T.Tensor(rng.randn(2, 4, 3))
    att = score_attention(o, T.Tensor(np.zeros((2, 3))), AttentionScorer("dot"))
    assert np.allclose(att.data, 0.25)


def test_general_with_identity_equals_dot():
    rng = np.random.RandomState(15)
    o = T.Tensor(rng.randn(2, 4, 3))
    h = T.Tensor(rng.randn(2, 3))
    dot = score_attention(o, h, AttentionScorer("dot"), normalize=False)
    gen = score_attention(
        o, h, AttentionScorer("general", general_w=T.Tensor(np.eye(3))), normalize=False
    )
    assert np.allclose(dot.data, gen.data, atol=1e-12)


def test_concat_attention_shapes_and_distribution():
    rng = np.random.RandomState(16)
    scorer = AttentionScorer(
        "concat",
        concat_w=T.Tensor(rng.randn(6, 3)),
        concat_v=T.Tensor(rng.randn(3, 1)),
    )
    att = score_attention(T.Tensor(rng.randn(2, 5, 3)), T.Tensor(rng.randn(2, 3)), scorer)
    assert att.shape == (2, 5)
    assert np.allclose(att.data.sum(axis=1), 1.0)


def test_unknown_variant_is_config_error():
    with pytest.raises(ConfigError):
        score_attention(
            T.Tensor(np.ones((1, 2, 3))), T.Tensor(np.ones((1, 3))), AttentionScorer("scaled")
        )


# ---------------------------------------------------------------------------
# output projection


def test_project_output_rows_are_log_distributions():
    rng = np.random.RandomState(17)
    head = DecoderHead(weight=T.Tensor(rng.randn(6, 9)), bias=T.Tensor(rng.randn(9)))
    out = project_output(T.Tensor(rng.randn(2, 3)), T.Tensor(rng.randn(2, 3)), head)
    sums = np.log(np.exp(out.data).sum(axis=1))
    assert np.allclose(sums, 0.0, atol=1e-9)


def test_project_output_zero_weights_uniform():
    head = DecoderHead(weight=T.Tensor(np.zeros((6, 5))), bias=T.Tensor(np.zeros(5)))
    out = project_output(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))), head)
    assert np.allclose(out.data, -np.log(5))


def test_project_output_argmax_matches_bruteforce():
    rng = np.random.RandomState(18)
    w, b = rng.randn(4, 3), rng.randn(3)
    head = DecoderHead(weight=T.Tensor(w), bias=T.Tensor(b))
    h, c = rng.randn(1, 2), rng.randn(1, 2)
    out = project_output(T.Tensor(h), T.Tensor(c), head)
    raw = np.concatenate([h, c], axis=1) @ w + b
    probs = np.exp(raw[0]) / np.exp(raw[0]).sum()
    assert int(np.argmax(out.data[0])) == int(np.argmax(probs))


# ---------------------------------------------------------------------------
# end-to-end forward


@pytest.mark.parametrize("arch", sorted(ARCH_STREAMS))
def test_forward_shapes_and_attention_rows(arch):
    vocab = tiny_vocab()
    model = build_model(micro_config(arch), vocab, seed=5)
    batch = toy_batch(vocab, n=4, rows=2)
    logits, bundles = forward_sentence(batch, model)
    assert logits.shape == (2, 4, len(vocab.output))
    assert len(bundles) == 4
    for bundle in bundles:
        assert np.all(bundle.fused.data >= 0)
        assert np.allclose(bundle.fused.data.sum(axis=1), 1.0, atol=1e-6)
        assert set(bundle.streams) == set(ARCH_STREAMS[arch])


def test_forward_teacher_forced_length_matches_source():
    vocab = tiny_vocab()
    model = build_model(micro_config("seq2seq+pos-weighted"), vocab, seed=6)
    batch = toy_batch(vocab, n=5, rows=3)
    logits, _ = forward_sentence(batch, model)
    assert logits.shape[1] == batch.seq_len


def test_shared_weight_property_identity():
    # word and POS streams run through the same cell object, not a copy
    model = build_model(micro_config("seq2seq+pos-weighted"), tiny_vocab(), seed=7)
    cell = model.encoder
    before = model.params["enc.l0.fwd.w_z"].data.copy()
    cell.forward_layers[0].w_z.data += 1.0
    assert np.allclose(model.params["enc.l0.fwd.w_z"].data, before + 1.0)


def test_greedy_decode_deterministic():
    vocab = tiny_vocab()
    model = build_model(micro_config("seq2seq+conv"), vocab, seed=8)
    batch = toy_batch(vocab, n=4, rows=2)
    assert np.array_equal(greedy_decode(batch, model), greedy_decode(batch, model))


def test_training_smoke_loss_decreases():
    vocab = tiny_vocab()
    model = build_model(micro_config(hidden_dim=8), vocab, seed=9)
    batch = toy_batch(vocab, n=4, rows=5)
    losses = []
    for _ in range(50):
        model.params.zero_grads()
        logits, _ = forward_sentence(batch, model)
        loss = compute_loss(logits, batch.target[:, :batch.seq_len], batch.mask)
        losses.append(loss.item())
        T.backward(loss)
        sgd_step(model.params, lr=0.5, decoder_lr_ratio=1.0)
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("arch", sorted(ARCH_STREAMS))
def test_full_model_gradcheck_micro(arch):
    # micro configuration: V=12, E=4, H=5, S=4, B=2; the richest
    # architecture gets a full coordinate sweep, the rest a subsample
    vocab = tiny_vocab(n_words=8)
    assert len(vocab.words) == 12
    cfg = ArchitectureConfig(
        architecture=arch, embed_dim=4, hidden_dim=5,
        encoder_layers=2, decoder_layers=2, bidirectional=True, dropout=0.0,
    )
    model = build_model(cfg, vocab, seed=10)
    batch = toy_batch(vocab, n=4, rows=2)

    def f():
        logits, _ = forward_sentence(batch, model)
        return compute_loss(logits, batch.target[:, :batch.seq_len], batch.mask)

    full = arch == "seq2seq+conv+pos-weighted"
    report = grad_check(
        f, dict(model.params.items()), tolerance=1e-4,
        full_sweep=full, threshold=12, sample=12,
    )
    assert report.passed, f"{arch}\n{report.format_table()}"


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    vocab = tiny_vocab()
    model = build_model(micro_config("seq2seq+conv+pos-weighted"), vocab, seed=11)
    batch = toy_batch(vocab, n=4, rows=2)
    logits, _ = forward_sentence(batch, model)
    save_checkpoint(model, tmp_path / "ckpt")
    restored = load_checkpoint(tmp_path / "ckpt")
    logits2, _ = forward_sentence(batch, restored)
    assert np.array_equal(logits.data, logits2.data)
    assert restored.config.architecture == "seq2seq+conv+pos-weighted"


def test_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig(architecture="transformer")
    with pytest.raises(ConfigError):
        ArchitectureConfig(architecture="seq2seq+pos-pointwise", fusion="scalar-weighted")
    with pytest.raises(ConfigError):
        ArchitectureConfig(architecture="seq2seq+conv+pos-weighted", fusion="pointwise")
    cfg = ArchitectureConfig(architecture="seq2seq", attention="linear")
    assert cfg.attention == "general"
