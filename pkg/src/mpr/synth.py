"""Synthetic retrieval benchmark generator.

Builds a controllable corpus where the multi-positive training effect is
measurable at desk scale.  The construction:

- a vocabulary of roughly 5,000 pseudo-words;
- topics, each a set of word slots where every slot holds a few synonym
  variants (distinct words, hence distinct hash buckets);
- per question: a handful of private entity slots (also with synonym
  variants), a unique answer word, and three gold passages written in the
  question's topic with independently re-sampled synonym variants
  (paraphrase noise) and the answer injected verbatim;
- one hard negative per question: same topic, no entity words, no answer;
- distractor passages drawn from the topic pool, no answers.

Everything is drawn from a single seeded generator, so a seed fully
determines the corpus and dataset files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import AnswerPattern, Passage, QuestionRecord, save_corpus

TOPIC_SLOTS = 20
ENTITY_SLOTS = 3
SYNONYMS_PER_SLOT = 3
QUESTION_TOPIC_SLOTS = 4
PASSAGE_LEN = 50
FILLER_WORDS = 500
# Per-token source probabilities inside a gold passage.
GOLD_MIX = {"topic": 0.55, "entity": 0.25, "filler": 0.20}
PLAIN_MIX = {"topic": 0.80, "filler": 0.20}

_CONSONANTS = "bcdfghjklmnpqrstvwz"
_VOWELS = "aeiou"


@dataclass
class SynthBenchmark:
    passages: list[Passage]
    records: list[QuestionRecord]


def _word_stream(rng: np.random.Generator) -> Iterator[str]:
    """Unique pronounceable pseudo-words, deterministic given the generator."""
    seen: set[str] = set()
    while True:
        syllables = rng.integers(2, 5)
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if word not in seen:
            seen.add(word)
            yield word


def _pick(rng: np.random.Generator, slots: list[tuple[str, ...]]) -> str:
    slot = slots[rng.integers(len(slots))]
    return slot[rng.integers(len(slot))]


def _passage_body(
    rng: np.random.Generator,
    topic: list[tuple[str, ...]],
    entities: list[tuple[str, ...]] | None,
    filler: list[str],
    length: int,
    answer: str | None,
) -> str:
    mix = GOLD_MIX if entities is not None else PLAIN_MIX
    sources = sorted(mix)
    probs = [mix[s] for s in sources]
    tokens = []
    for _ in range(length):
        source = sources[rng.choice(len(sources), p=probs)]
        if source == "topic":
            tokens.append(_pick(rng, topic))
        elif source == "entity":
            tokens.append(_pick(rng, entities))
        else:
            tokens.append(filler[rng.integers(len(filler))])
    if answer is not None:
        tokens.insert(int(rng.integers(len(tokens) + 1)), answer)
    return " ".join(tokens)


def generate_benchmark(
    seed: int,
    n_questions: int = 200,
    n_passages: int = 2000,
    n_topics: int = 40,
) -> SynthBenchmark:
    """Generate a benchmark of ``n_passages`` passages and ``n_questions``
    questions, each with 3 gold passages and 1 hard negative."""
    if n_questions < 1 or n_topics < 1:
        raise ValueError("need at least one question and one topic")
    if n_passages < 4 * n_questions:
        raise ValueError(
            f"n_passages must be >= 4 * n_questions "
            f"({4 * n_questions}), got {n_passages}"
        )
    rng = np.random.default_rng(seed)
    words = _word_stream(rng)

    topics = [
        [
            tuple(next(words) for _ in range(SYNONYMS_PER_SLOT))
            for _ in range(TOPIC_SLOTS)
        ]
        for _ in range(n_topics)
    ]
    filler = [next(words) for _ in range(FILLER_WORDS)]

    passages: list[Passage] = []
    records: list[QuestionRecord] = []

    def add_passage(title: str, body: str) -> Passage:
        passage = Passage(id=len(passages), title=title, body=body)
        passages.append(passage)
        return passage

    for qid in range(n_questions):
        topic_idx = qid % n_topics
        topic = topics[topic_idx]
        title = f"topic-{topic_idx:02d}"
        entities = [
            tuple(next(words) for _ in range(SYNONYMS_PER_SLOT))
            for _ in range(ENTITY_SLOTS)
        ]
        answer = next(words)

        slot_ids = rng.choice(TOPIC_SLOTS, size=QUESTION_TOPIC_SLOTS, replace=False)
        question_tokens = [_pick(rng, [topic[j]]) for j in slot_ids]
        question_tokens += [_pick(rng, [slot]) for slot in entities]
        question = " ".join(question_tokens)

        golds = [
            add_passage(
                title,
                _passage_body(rng, topic, entities, filler, PASSAGE_LEN, answer),
            )
            for _ in range(3)
        ]
        hard_negative = add_passage(
            title, _passage_body(rng, topic, None, filler, PASSAGE_LEN, None)
        )
        records.append(
            QuestionRecord(
                id=qid,
                question=question,
                answers=[AnswerPattern(kind="literal", pattern=answer)],
                positives=golds,
                hard_negatives=[hard_negative],
            )
        )

    for i in range(n_passages - len(passages)):
        topic_idx = i % n_topics
        add_passage(
            f"topic-{topic_idx:02d}",
            _passage_body(rng, topics[topic_idx], None, filler, PASSAGE_LEN, None),
        )
    return SynthBenchmark(passages=passages, records=records)


def write_benchmark(bench: SynthBenchmark, out_dir) -> tuple[Path, Path]:
    """Write ``corpus.tsv`` and ``dataset.jsonl`` under ``out_dir``.

    Output bytes depend only on the benchmark contents.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.tsv"
    dataset_path = out_dir / "dataset.jsonl"
    save_corpus(bench.passages, corpus_path)
    with open(dataset_path, "w", encoding="utf-8", newline="\n") as fh:
        for record in bench.records:
            obj = {
                "question": record.question,
                "answers": [a.pattern for a in record.answers],
                "answer_kind": record.answers[0].kind,
                "positive_ctxs": [
                    {"title": p.title, "text": p.body} for p in record.positives
                ],
                "hard_negative_ctxs": [
                    {"title": p.title, "text": p.body} for p in record.hard_negatives
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    return corpus_path, dataset_path
