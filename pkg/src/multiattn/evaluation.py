"""Candidate-sense ranking, per-POS F1 reporting, and attention export.

Precision counts attempted instances, recall counts all gold instances;
with full coverage the two coincide and F1 equals accuracy.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .batching import make_batch
from .corpus import UNK, Instance, Token
from .errors import UsageError
from .model import forward_sentence

EVAL_CLASSES = ("nn", "vb", "adj", "adv", "all")


@dataclass
class SenseInventory:
    """Per-lemma candidate senses with training frequencies."""

    candidates: dict[str, list[str]]            # lemma -> sense tokens, most frequent first
    counts: dict[str, int] = field(default_factory=dict)  # sense token -> train count

    @classmethod
    def from_instances(cls, instances):
        counts = {}
        for inst in instances:
            tok = inst.tokens[inst.target_index]
            if tok.sense is None:
                continue
            counts[tok.sense_token] = counts.get(tok.sense_token, 0) + 1
        by_lemma = {}
        for sense_token in counts:
            lemma = sense_token.split("%", 1)[0]
            by_lemma.setdefault(lemma, []).append(sense_token)
        candidates = {
            lemma: sorted(senses, key=lambda s: (-counts[s], s))
            for lemma, senses in by_lemma.items()
        }
        return cls(candidates=candidates, counts=counts)

    def __contains__(self, lemma):
        return lemma in self.candidates

    def most_frequent(self, lemma):
        return self.candidates[lemma][0]


def rank_senses(logits_at_target, inventory, lemma, vocab):
    """Order a lemma's candidate senses by model probability, best first.

    logits_at_target is the [V_out] log-probability row at the sense slot.
    Raises KeyError for lemmas absent from the inventory; callers decide
    the backoff policy.
    """
    candidates = inventory.candidates[lemma]
    scored = []
    for token in candidates:
        idx = vocab.output.encode(token)
        score = -np.inf if idx == UNK else float(logits_at_target[idx])
        scored.append((token, score))
    scored.sort(key=lambda ts: (-ts[1], candidates.index(ts[0])))
    return [token for token, _ in scored]


@dataclass
class Prediction:
    sentence_id: int
    lemma: str
    pos: str
    gold: str
    predicted: str | None
    rank_of_gold: int | None

    @property
    def attempted(self):
        return self.predicted is not None

    @property
    def correct(self):
        return self.predicted == self.gold


def predict_instances(model, instances, inventory, batch_size=32,
                      context_window=50, unseen="unattempted"):
    """Rank candidate senses for every instance.

    The decoder is fed the plain source copy, so nothing about the gold
    sense leaks into the logits at the target slot. Instances whose lemma
    never appeared in training are unattempted by default; unseen="corpus-mfs"
    predicts the globally most frequent training sense instead.
    """
    if unseen not in ("unattempted", "corpus-mfs"):
        raise UsageError(f"unknown unseen-lemma policy {unseen!r}")
    vocab = model.vocab
    global_mfs = None
    if inventory.counts:
        global_mfs = sorted(inventory.counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    predictions = [None] * len(instances)
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        batch = make_batch(chunk, vocab, context_window=context_window, substitute=False)
        with T.no_grad():
            logits, _ = forward_sentence(batch, model, mode="teacher-forced")
        for row, inst in enumerate(batch.instances):
            t = int(batch.target_positions[row])
            tok = inst.tokens[t]
            gold = tok.sense_token
            lemma = tok.lemma
            if lemma in inventory:
                ranked = rank_senses(logits.data[row, t], inventory, lemma, vocab)
                predicted = ranked[0]
                rank = ranked.index(gold) + 1 if gold in ranked else None
            elif unseen == "corpus-mfs" and global_mfs is not None:
                predicted, rank = global_mfs, None
            else:
                predicted, rank = None, None
            predictions[start + batch.row_order[row]] = Prediction(
                sentence_id=inst.sentence_id, lemma=lemma, pos=tok.pos,
                gold=gold, predicted=predicted, rank_of_gold=rank,
            )
    return predictions


# ---------------------------------------------------------------------------
# scoring


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int
    attempted: int
    correct: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassScore]
    predictions: list[Prediction]

    @property
    def overall_f1(self):
        return self.per_class["all"].f1

    def to_dict(self):
        return {
            "classes": {
                name: {
                    "precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "support": s.support, "attempted": s.attempted, "correct": s.correct,
                }
                for name, s in self.per_class.items()
            },
            "instances": [
                {
                    "sentence_id": p.sentence_id, "lemma": p.lemma, "pos": p.pos,
                    "gold": p.gold, "predicted": p.predicted, "rank_of_gold": p.rank_of_gold,
                }
                for p in self.predictions
            ],
        }

    def format_table(self, model_name="model", train_name="train", test_name="test"):
        header = f"{'model':<28} {'train':<10} {'test':<10} " + " ".join(
            f"{c:>7}" for c in EVAL_CLASSES
        )
        cells = []
        for c in EVAL_CLASSES:
            s = self.per_class[c]
            cells.append(f"{100 * s.f1:>7.1f}" if s.support else f"{'-':>7}")
        row = f"{model_name:<28} {train_name:<10} {test_name:<10} " + " ".join(cells)
        return header + "\n" + row


def _prf(correct, attempted, total):
    precision = correct / attempted if attempted else 0.0
    recall = correct / total if total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def score_f1(predictions, gold, pos_tags):
    """Attempted/total precision-recall-F1, per POS class and overall."""
    if not gold:
        raise UsageError("score_f1 called with an empty gold set")
    if not (len(predictions) == len(gold) == len(pos_tags)):
        raise UsageError("predictions, gold, and pos_tags must align")
    records = [
        Prediction(sentence_id=i, lemma="", pos=pos_tags[i], gold=gold[i],
                   predicted=predictions[i], rank_of_gold=None)
        for i in range(len(gold))
    ]
    return report_from_predictions(records)


def report_from_predictions(predictions):
    if not predictions:
        raise UsageError("no predictions to score")
    per_class = {}
    for cls in EVAL_CLASSES:
        members = [p for p in predictions if cls == "all" or p.pos == cls]
        correct = sum(1 for p in members if p.correct)
        attempted = sum(1 for p in members if p.attempted)
        p, r, f1 = _prf(correct, attempted, len(members))
        per_class[cls] = ClassScore(
            precision=p, recall=r, f1=f1,
            support=len(members), attempted=attempted, correct=correct,
        )
    return EvalReport(per_class=per_class, predictions=list(predictions))


def evaluate_model(model, instances, inventory, batch_size=32, context_window=50,
                   unseen="unattempted"):
    predictions = predict_instances(
        model, instances, inventory,
        batch_size=batch_size, context_window=context_window, unseen=unseen,
    )
    return report_from_predictions(predictions)


# ---------------------------------------------------------------------------
# attention export


def dump_attention(model, sentence, out_dir):
    """Write per-step attention matrices for one sentence.

    sentence is a list of Tokens or an Instance. Produces one S x S CSV per
    stream plus the fused matrix and a JSON manifest (tokens, strategy,
    weights, unknown-token substitutions).
    """
    if isinstance(sentence, Instance):
        instance = sentence
    else:
        tokens = [
            tok if isinstance(tok, Token) else Token(surface=tok, lemma=tok, pos="other")
            for tok in sentence
        ]
        target = next((i for i, t in enumerate(tokens) if t.sense is not None), 0)
        instance = Instance(tokens=tuple(tokens), target_index=target, sentence_id=0)

    vocab = model.vocab
    batch = make_batch([instance], vocab, context_window=10 ** 9, substitute=False)
    with T.no_grad():
        _, bundles = forward_sentence(batch, model, mode="teacher-forced")

    surfaces = [tok.surface for tok in instance.tokens]
    unk_tokens = [tok for tok in surfaces if vocab.words.encode(tok) == UNK]

    os.makedirs(out_dir, exist_ok=True)
    stream_names = list(bundles[0].streams) + ["fused"]
    files = {}
    for name in stream_names:
        rows = []
        for bundle in bundles:
            vec = bundle.fused if name == "fused" else bundle.streams[name]
            rows.append(vec.data[0].tolist())
        path = os.path.join(out_dir, f"attention_{name}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + surfaces)
            for step, row in enumerate(rows):
                writer.writerow([step] + [repr(v) for v in row])
        files[name] = os.path.basename(path)

    weights = model.fusion_weights.values() if model.fusion_weights is not None else None
    manifest = {
        "tokens": surfaces,
        "target_index": int(batch.target_positions[0]),
        "strategy": bundles[0].strategy,
        "weights": list(weights) if weights is not None else None,
        "unk_tokens": unk_tokens,
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
