"""Small synthetic corpora and tasks for desk-scale runs and tests.

Corpus lines follow a sparse Markov chain over a word list, so masked tokens
are predictable from their neighbours and an MLM can actually learn something.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .tasks import ClsExample, NerDataset
from .text import SPECIAL_TOKENS, Vocabulary


def word_list(prefix: str, n: int) -> List[str]:
    return [f"{prefix}{i}" for i in range(n)]


def make_vocab(*groups: Sequence[str]) -> Vocabulary:
    tokens = list(SPECIAL_TOKENS)
    for group in groups:
        for w in group:
            if w not in tokens:
                tokens.append(w)
    return Vocabulary(tokens)


def markov_corpus(words: Sequence[str], n_lines: int, seed: int, min_len: int = 5, max_len: int = 10,
                  branching: int = 2, grammar_seed: int = 0) -> List[str]:
    """Lines where each word is followed by one of ``branching`` fixed successors.

    The successor table depends only on ``grammar_seed``; ``seed`` draws lines.
    """
    grammar = np.random.default_rng(grammar_seed)
    n = len(words)
    successors = np.stack([grammar.permutation(n) for _ in range(branching)], axis=1)
    rng = np.random.default_rng(seed)
    probs = np.array([0.8] + [0.2 / (branching - 1)] * (branching - 1)) if branching > 1 else np.array([1.0])
    lines = []
    for _ in range(n_lines):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(n))
        seq = [cur]
        for _ in range(length - 1):
            cur = int(successors[cur, rng.choice(branching, p=probs)])
            seq.append(cur)
        lines.append(" ".join(words[i] for i in seq))
    return lines


def topic_corpus(words: Sequence[str], n_lines: int, seed: int, topic_size: int = 2, min_len: int = 5,
                 max_len: int = 10) -> List[str]:
    """Lines drawn from one small word cluster each; any context word reveals the cluster."""
    rng = np.random.default_rng(seed)
    topics = [words[i:i + topic_size] for i in range(0, len(words), topic_size)]
    lines = []
    for _ in range(n_lines):
        topic = topics[int(rng.integers(len(topics)))]
        length = int(rng.integers(min_len, max_len + 1))
        lines.append(" ".join(topic[int(i)] for i in rng.integers(len(topic), size=length)))
    return lines


def separable_cls(filler: Sequence[str], cue_words: Sequence[str], labels: Sequence[str], n: int,
                  seed: int, length: int = 8) -> List[ClsExample]:
    """Each example contains exactly one cue word, which decides its label."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(len(labels)))
        words = [filler[int(i)] for i in rng.integers(len(filler), size=length - 1)]
        words.insert(int(rng.integers(length)), cue_words[k])
        out.append(ClsExample(" ".join(words), labels[k]))
    return out


def lexical_ner(filler: Sequence[str], entity_words: dict, n: int, seed: int,
                length: Tuple[int, int] = (6, 12)) -> NerDataset:
    """Sentences with 1-2 entities whose class is fixed by their words.

    ``entity_words`` maps class → list of words. The first word of an entity
    comes from the first half of its list and a continuation from the second
    half, so every tag is decided by its own word.
    """
    rng = np.random.default_rng(seed)
    classes = list(entity_words)
    sentences = []
    for _ in range(n):
        size = int(rng.integers(length[0], length[1] + 1))
        tokens = [filler[int(i)] for i in rng.integers(len(filler), size=size)]
        tags = ["O"] * size
        for _ in range(int(rng.integers(1, 3))):
            cls = classes[int(rng.integers(len(classes)))]
            span = int(rng.integers(1, 3))
            start = int(rng.integers(0, size - span + 1))
            if any(t != "O" for t in tags[max(0, start - 1):start + span + 1]):
                continue
            words = entity_words[cls]
            half = max(1, len(words) // 2)
            for j in range(span):
                pool = words[:half] if j == 0 else words[half:] or words
                tokens[start + j] = pool[int(rng.integers(len(pool)))]
                tags[start + j] = ("B-" if j == 0 else "I-") + cls
        sentences.append((tokens, tags))
    return NerDataset(sentences, classes)
