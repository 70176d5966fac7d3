import numpy as np
import pytest

from multiattn.batching import iter_batches, make_batch, prepend_bos, trim_to_window
from multiattn.corpus import (
    BOS,
    EOS,
    PAD,
    SPECIALS,
    UNK,
    Instance,
    Token,
    build_vocab,
    corpus_instances,
    parse_corpus_text,
    serialize_corpus,
    split_corpus,
)
from multiattn.errors import ParseError, UsageError

FIXTURE = """\
# two-sentence fixture
The\tthe\tother
bass\tbass\tnn\tmusic
player\tplayer\tnn
smiled\tsmile\tvb

He\the\tother
caught\tcatch\tvb
a\ta\tother
bass\tbass\tnn\tfish
"""


def test_parse_empty_file():
    corpus = parse_corpus_text("")
    assert len(corpus) == 0


def test_parse_fixture_attaches_senses():
    corpus = parse_corpus_text(FIXTURE)
    assert len(corpus) == 2
    assert corpus.sentences[0].tokens[1].sense == "music"
    assert corpus.sentences[0].tokens[1].sense_token == "bass%music"
    assert corpus.sentences[0].tokens[2].sense is None
    assert corpus.sentences[1].tokens[3].sense == "fish"


def test_parse_roundtrip_identity():
    corpus = parse_corpus_text(FIXTURE)
    again = parse_corpus_text(serialize_corpus(corpus))
    assert serialize_corpus(again) == serialize_corpus(corpus)
    assert [t.surface for t in again.sentences[0].tokens] == ["The", "bass", "player", "smiled"]


def test_parse_bad_column_count_reports_line():
    with pytest.raises(ParseError) as err:
        parse_corpus_text("only_one_column\n")
    assert ":1:" in str(err.value)


def test_parse_unknown_pos_maps_to_other(caplog):
    import logging

    with caplog.at_level(logging.WARNING):
        corpus = parse_corpus_text("run\trun\tVERB\n")
    assert corpus.sentences[0].tokens[0].pos == "other"
    assert any("VERB" in r.message for r in caplog.records)


def test_build_vocab_counts_and_specials():
    corpus = parse_corpus_text(FIXTURE)
    vocab = build_vocab(corpus, min_count=1)
    # 7 distinct surfaces + 4 specials
    assert len(vocab.words) == 11
    assert vocab.words.itos[:4] == list(SPECIALS)
    assert vocab.pos.itos[:4] == list(SPECIALS)
    assert vocab.output.itos[:4] == list(SPECIALS)
    # shared indices between word vocab and output vocab
    assert vocab.output.encode("bass") == vocab.words.encode("bass")
    assert "bass%music" in vocab.output
    assert "bass%fish" in vocab.output


def test_vocab_min_count_unk():
    corpus = parse_corpus_text(FIXTURE)
    vocab = build_vocab(corpus, min_count=2)
    assert vocab.words.encode("bass") != UNK  # appears twice
    assert vocab.words.encode("player") == UNK
    assert vocab.words.encode("never-seen") == UNK


def test_vocab_roundtrip_dict():
    from multiattn.corpus import Vocabulary

    vocab = build_vocab(parse_corpus_text(FIXTURE))
    again = Vocabulary.from_dict(vocab.to_dict())
    assert again.words.itos == vocab.words.itos
    assert again.output.stoi == vocab.output.stoi


def test_instances_replicate_per_target():
    text = "a\ta\tother\nb\tb\tnn\ts1\nc\tc\tnn\ts2\n"
    corpus = parse_corpus_text(text)
    instances = corpus_instances(corpus)
    assert len(instances) == 2
    assert instances[0].target_index == 1
    assert instances[1].target_index == 2


def test_split_is_disjoint_and_exhaustive():
    sentences = "\n\n".join(f"w{i}\tw{i}\tnn\ts" for i in range(20))
    corpus = parse_corpus_text(sentences + "\n")
    splits, manifest = split_corpus(corpus, seed=3)
    ids = manifest["sentence_ids"]
    all_ids = ids["train"] + ids["dev"] + ids["test"]
    assert sorted(all_ids) == list(range(20))
    assert len(ids["train"]) == 16 and len(ids["dev"]) == 2 and len(ids["test"]) == 2
    # seeded: same split again
    splits2, manifest2 = split_corpus(corpus, seed=3)
    assert manifest2["sentence_ids"] == ids
    assert manifest["seed"] == 3


# ---------------------------------------------------------------------------
# batching


def make_instance(n, target=0, sense="s"):
    tokens = tuple(
        Token(surface=f"w{i}", lemma=f"w{i}", pos="nn", sense=sense if i == target else None)
        for i in range(n)
    )
    return Instance(tokens=tokens, target_index=target, sentence_id=0)


def fixture_vocab():
    corpus = parse_corpus_text(
        "\n\n".join("\n".join(f"w{i}\tw{i}\tnn" + ("\ts" if i == 0 else "") for i in range(9)) for _ in range(1))
        + "\n"
    )
    return build_vocab(corpus)


def test_single_sentence_no_padding():
    vocab = fixture_vocab()
    batch = make_batch([make_instance(3)], vocab)
    assert batch.seq_len == 3
    assert np.all(batch.mask == 1.0)
    assert batch.target.shape == (1, 4)
    assert batch.target[0, 3] == EOS


def test_mixed_lengths_mask_and_sorting():
    vocab = fixture_vocab()
    batch = make_batch([make_instance(3), make_instance(5)], vocab)
    # length-sorted: longest first
    assert batch.lengths.tolist() == [5, 3]
    assert batch.mask[1].sum() == 3
    assert np.all(batch.source[1, 3:] == PAD)
    assert np.all(batch.target[1, 4:] == PAD)


def test_window_trimming_arithmetic():
    inst = make_instance(60, target=40)
    trimmed = trim_to_window(inst, 50)
    # positions 15..59 survive
    assert len(trimmed.tokens) == 45
    assert trimmed.tokens[0].surface == "w15"
    assert trimmed.tokens[-1].surface == "w59"
    assert trimmed.target_index == 25
    assert trimmed.tokens[trimmed.target_index].sense == "s"


def test_target_copies_source_except_slot():
    vocab = fixture_vocab()
    corpus = parse_corpus_text("w0\tw0\tnn\tX\nw1\tw1\tnn\nw2\tw2\tnn\n")
    vocab = build_vocab(corpus)
    inst = corpus_instances(corpus)[0]
    batch = make_batch([inst], vocab)
    n = batch.lengths[0]
    for j in range(n):
        if j == batch.target_positions[0]:
            assert batch.target[0, j] == vocab.output.encode("w0%X")
        else:
            assert batch.target[0, j] == batch.source[0, j]


def test_substitute_false_is_plain_copy():
    corpus = parse_corpus_text("w0\tw0\tnn\tX\nw1\tw1\tnn\n")
    vocab = build_vocab(corpus)
    inst = corpus_instances(corpus)[0]
    batch = make_batch([inst], vocab, substitute=False)
    assert batch.target[0, 0] == batch.source[0, 0]


def test_empty_batch_rejected():
    with pytest.raises(UsageError):
        make_batch([], fixture_vocab())


def test_iter_batches_deterministic_under_seed():
    vocab = fixture_vocab()
    instances = [make_instance(3 + i % 3, target=0) for i in range(10)]
    a = [b.source.tolist() for b in iter_batches(instances, vocab, 3, rng=np.random.RandomState(5))]
    b = [b.source.tolist() for b in iter_batches(instances, vocab, 3, rng=np.random.RandomState(5))]
    assert a == b


def test_prepend_bos():
    src = np.array([[4, 5], [6, 7]])
    out = prepend_bos(src)
    assert out.shape == (2, 3)
    assert np.all(out[:, 0] == BOS)


def test_pad_positions_contribute_zero_embedding_gradient():
    import multiattn.tensor as T
    from multiattn.model import ArchitectureConfig, build_model, forward_sentence
    from multiattn.training import compute_loss

    corpus = parse_corpus_text(
        "w0\tw0\tnn\tX\nw1\tw1\tnn\nw2\tw2\tnn\nw3\tw3\tnn\n\nw0\tw0\tnn\tX\nw1\tw1\tnn\n"
    )
    vocab = build_vocab(corpus)
    batch = make_batch(corpus_instances(corpus), vocab)
    assert batch.mask[1].sum() < batch.seq_len  # second row is padded
    cfg = ArchitectureConfig(
        architecture="seq2seq+conv+pos-weighted", embed_dim=4, hidden_dim=5,
        encoder_layers=2, decoder_layers=1, bidirectional=True, dropout=0.0,
    )
    model = build_model(cfg, vocab, seed=1)
    logits, _ = forward_sentence(batch, model)
    loss = compute_loss(logits, batch.target[:, :batch.seq_len], batch.mask)
    T.backward(loss)
    for table in ("embed.word", "embed.pos", "embed.out"):
        grad_pad = model.params[table].grad[PAD]
        assert np.all(grad_pad == 0.0), f"{table} pad row got gradient {grad_pad}"
