"""Sense-tagged corpus ingestion, vocabulary construction, and splits.

Corpus format: UTF-8, tab-separated ``surface<TAB>lemma<TAB>pos[<TAB>sensekey]``,
one token per line, blank line between sentences, ``#`` starts a comment line.
POS tags are nn/vb/adj/adv/other; anything else maps to ``other`` with a warning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UsageError

log = logging.getLogger(__name__)

POS_TAGS = ("nn", "vb", "adj", "adv", "other")

SPECIALS = ("<pad>", "<s>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass(frozen=True)
class Token:
    surface: str
    lemma: str
    pos: str
    sense: str | None = None

    @property
    def sense_token(self):
        """Output-vocabulary form, e.g. ``bass%music``."""
        if self.sense is None:
            return None
        return f"{self.lemma}%{self.sense}"


@dataclass
class Sentence:
    tokens: list[Token]
    sent_id: int

    def __len__(self):
        return len(self.tokens)


@dataclass
class SenseCorpus:
    sentences: list[Sentence]
    split: str = "train"

    def __len__(self):
        return len(self.sentences)


@dataclass(frozen=True)
class Instance:
    """One training/evaluation unit: a sentence with a single target slot."""

    tokens: tuple[Token, ...]
    target_index: int
    sentence_id: int


def parse_corpus(path, format="tsv"):
    """Parse a corpus file into a SenseCorpus."""
    if format != "tsv":
        raise UsageError(f"unknown corpus format {format!r}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_corpus_text(text, source=str(path))


def parse_corpus_text(text, source="<string>"):
    sentences = []
    current = []

    def flush():
        if current:
            sentences.append(Sentence(tokens=list(current), sent_id=len(sentences)))
            current.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if line.startswith("#"):
            continue
        if not line.strip():
            flush()
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise ParseError(f"{source}:{lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}")
        surface, lemma, pos = cols[0], cols[1], cols[2]
        if not surface or not lemma or not pos:
            raise ParseError(f"{source}:{lineno}: empty column")
        if pos not in POS_TAGS:
            log.warning("%s:%d: unknown POS tag %r mapped to 'other'", source, lineno, pos)
            pos = "other"
        sense = cols[3] if len(cols) == 4 and cols[3] else None
        current.append(Token(surface=surface, lemma=lemma, pos=pos, sense=sense))
    flush()
    return SenseCorpus(sentences=sentences)


def serialize_corpus(corpus):
    """Inverse of parse_corpus_text: corpus back to its file format."""
    blocks = []
    for sentence in corpus.sentences:
        lines = []
        for tok in sentence.tokens:
            cols = [tok.surface, tok.lemma, tok.pos]
            if tok.sense is not None:
                cols.append(tok.sense)
            lines.append("\t".join(cols))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def write_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(corpus))


def corpus_instances(corpus):
    """One Instance per sense-tagged token; multi-target sentences replicate."""
    instances = []
    for sentence in corpus.sentences:
        for i, tok in enumerate(sentence.tokens):
            if tok.sense is not None:
                instances.append(
                    Instance(tokens=tuple(sentence.tokens), target_index=i, sentence_id=sentence.sent_id)
                )
    return instances


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Bijective token<->index map with the four specials at indices 0-3."""

    def __init__(self, tokens):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, token):
        return self.stoi.get(token, UNK)

    def decode(self, index):
        return self.itos[index]


@dataclass
class Vocabulary:
    words: Vocab
    pos: Vocab
    output: Vocab

    def to_dict(self):
        return {"words": self.words.itos, "pos": self.pos.itos, "output": self.output.itos}

    @classmethod
    def from_dict(cls, d):
        def restore(itos):
            if itos[:4] != list(SPECIALS):
                raise ParseError(f"vocabulary missing specials at indices 0-3: {itos[:4]}")
            return Vocab(itos[4:])

        return cls(words=restore(d["words"]), pos=restore(d["pos"]), output=restore(d["output"]))


def _by_count(counts):
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_vocab(corpus, min_count=1):
    """Build word, POS, and output vocabularies from a training corpus.

    Output vocabulary keeps word indices identical to the word vocabulary
    and appends every observed lemma%sensekey token after them.
    """
    word_counts = {}
    sense_counts = {}
    for sentence in corpus.sentences:
        for tok in sentence.tokens:
            word_counts[tok.surface] = word_counts.get(tok.surface, 0) + 1
            if tok.sense is not None:
                st = tok.sense_token
                sense_counts[st] = sense_counts.get(st, 0) + 1
    kept = [t for t in _by_count(word_counts) if word_counts[t] >= min_count]
    words = Vocab(kept)
    output = Vocab(kept + _by_count(sense_counts))
    pos = Vocab(list(POS_TAGS))
    return Vocabulary(words=words, pos=pos, output=output)


# ---------------------------------------------------------------------------
# splits


def split_corpus(corpus, seed=0, ratios=(0.8, 0.1, 0.1)):
    """Seeded sentence-level split into train/dev/test.

    Returns (splits, manifest); splits is a dict of SenseCorpus and the
    manifest records seed, ratios, and sentence-id lists per split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise UsageError(f"split ratios must be three values summing to 1, got {ratios}")
    n = len(corpus.sentences)
    order = np.random.RandomState(seed).permutation(n)
    n_dev = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_dev - n_test
    ids = {
        "train": sorted(int(i) for i in order[:n_train]),
        "dev": sorted(int(i) for i in order[n_train:n_train + n_dev]),
        "test": sorted(int(i) for i in order[n_train + n_dev:]),
    }
    splits = {}
    for name, id_list in ids.items():
        splits[name] = SenseCorpus(
            sentences=[corpus.sentences[i] for i in id_list], split=name
        )
    manifest = {"seed": seed, "ratios": list(ratios), "sentence_ids": ids}
    return splits, manifest


def save_split_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
