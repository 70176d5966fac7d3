"""Synthetic disambiguation corpus: one ambiguous noun whose sense is fully
determined by a cue word planted within a few positions of it.

Every cue word selects its own sense of the target, cue words carry the
only 'adj' POS tag, and filler positions all hold the same word, so the
disambiguating signal lives entirely at the cue position.
"""

from __future__ import annotations

import numpy as np

from .corpus import SenseCorpus, Sentence, Token

TARGET_LEMMA = "bass"

# cue word -> sense key it forces on the target
CUE_SENSES = {
    "river": "river",
    "lake": "lake",
    "guitar": "guitar",
    "chord": "chord",
}

FILLER = ("the", "other")

ALL_CUES = tuple(sorted(CUE_SENSES))


def generate_corpus(n_sentences, seed=0, length_range=(6, 9), max_cue_offset=3):
    """Sentences of identical fillers plus one cue word within
    max_cue_offset positions of the ambiguous target.

    Cue identities and cue-target offsets cycle so both directions and all
    senses stay balanced regardless of corpus size.
    """
    rng = np.random.RandomState(seed)
    offsets = [d for d in range(-max_cue_offset, max_cue_offset + 1) if d != 0]
    sentences = []
    for i in range(n_sentences):
        cue = ALL_CUES[i % len(ALL_CUES)]
        sense = CUE_SENSES[cue]
        length = int(rng.randint(length_range[0], length_range[1] + 1))
        # offset first, then a target position it fits, so cue-after-target
        # cases are as frequent as cue-before-target ones
        delta = int(offsets[i % len(offsets)])
        lo = max(0, -delta)
        hi = length - 1 - max(0, delta)
        target = int(rng.randint(lo, hi + 1))
        cue_pos = target + delta
        tokens = []
        for j in range(length):
            if j == target:
                tokens.append(Token(surface=TARGET_LEMMA, lemma=TARGET_LEMMA, pos="nn", sense=sense))
            elif j == cue_pos:
                tokens.append(Token(surface=cue, lemma=cue, pos="adj"))
            else:
                tokens.append(Token(surface=FILLER[0], lemma=FILLER[0], pos=FILLER[1]))
        sentences.append(Sentence(tokens=tokens, sent_id=i))
    return SenseCorpus(sentences=sentences)


def cue_position(tokens):
    """Index of the planted cue word, or None."""
    for i, tok in enumerate(tokens):
        if tok.surface in CUE_SENSES:
            return i
    return None
