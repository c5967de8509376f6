"""Reproducible synthetic click data with a two-level topic hierarchy.

Topics are grouped into families. Queries and keywords of a positive pair
come from the same topic; family words are shared across sibling topics, so
sibling-topic negatives are hard and distant-topic negatives are easy.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from rbe.trainer import ClickPair, Dataset

BENCHMARK_SEED = 20180101


@dataclass(frozen=True)
class TopicSpace:
    family_words: list[list[str]]
    topic_words: list[list[str]]  # indexed by topic
    topic_family: list[int]
    generic_words: list[str]

    @property
    def n_topics(self) -> int:
        return len(self.topic_words)


def _words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    out = []
    while len(out) < count:
        word = "".join(rng.choice(letters, size=int(rng.integers(4, 9))))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def make_topics(
    rng: np.random.Generator,
    families: int = 12,
    topics_per_family: int = 4,
    family_vocab: int = 8,
    topic_vocab: int = 6,
    generic_vocab: int = 30,
) -> TopicSpace:
    taken: set[str] = set()
    family_words = [_words(rng, family_vocab, taken) for _ in range(families)]
    topic_words = []
    topic_family = []
    for fam in range(families):
        for _ in range(topics_per_family):
            topic_words.append(_words(rng, topic_vocab, taken))
            topic_family.append(fam)
    return TopicSpace(family_words, topic_words, topic_family, _words(rng, generic_vocab, taken))


def _phrase(rng: np.random.Generator, space: TopicSpace, topic: int, n_topic: int, n_family: int) -> str:
    words = list(rng.choice(space.topic_words[topic], size=n_topic, replace=False))
    fam = space.family_words[space.topic_family[topic]]
    words += list(rng.choice(fam, size=n_family, replace=False))
    if rng.random() < 0.3:
        words.append(str(rng.choice(space.generic_words)))
    rng.shuffle(words)
    return " ".join(words)


def query_text(rng, space, topic):
    return _phrase(rng, space, topic, 1, int(rng.integers(1, 3)))


def keyword_text(rng, space, topic):
    return _phrase(rng, space, topic, int(rng.integers(1, 3)), int(rng.integers(0, 2)))


def positive_pairs(rng, space, count) -> list[ClickPair]:
    topics = rng.integers(0, space.n_topics, size=count)
    return [ClickPair(query_text(rng, space, t), keyword_text(rng, space, t)) for t in topics]


def labeled_pairs(rng, space, count) -> tuple[list[ClickPair], list[int]]:
    """Half positives; negatives split between sibling and unrelated topics."""
    pairs, labels = [], []
    by_family: dict[int, list[int]] = {}
    for t, fam in enumerate(space.topic_family):
        by_family.setdefault(fam, []).append(t)
    for i in range(count):
        t = int(rng.integers(space.n_topics))
        if i % 2 == 0:
            other, label = t, 1
        elif i % 4 == 1:
            siblings = [s for s in by_family[space.topic_family[t]] if s != t]
            other, label = int(rng.choice(siblings)), 0
        else:
            other = int(rng.integers(space.n_topics - 1))
            other, label = other + (other >= t), 0
        pairs.append(ClickPair(query_text(rng, space, t), keyword_text(rng, space, other)))
        labels.append(label)
    return pairs, labels


def make_benchmark(
    seed: int = BENCHMARK_SEED,
    n_train: int = 4000,
    n_valid: int = 640,
    n_test: int = 2000,
) -> Dataset:
    """The committed synthetic benchmark; identical for identical arguments."""
    rng = np.random.default_rng(seed)
    space = make_topics(rng)
    train = positive_pairs(rng, space, n_train)
    valid = positive_pairs(rng, space, n_valid)
    test_pairs, test_labels = labeled_pairs(rng, space, n_test)
    return Dataset(train, valid, test_pairs, test_labels)
