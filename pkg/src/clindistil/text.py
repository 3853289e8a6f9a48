"""Vocabulary, WordPiece tokenisation, fixed-length encoding and MLM corruption."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .tensor import IGNORE_INDEX

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"


class VocabError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: List[str]
    token_to_id: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.token_to_id = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.token_to_id:
                raise VocabError(f"duplicate token {tok!r} at lines {self.token_to_id[tok] + 1} and {i + 1}")
            self.token_to_id[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in self.token_to_id]
        if missing:
            raise VocabError(f"vocabulary is missing special token(s): {', '.join(missing)}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def special_ids(self) -> List[int]:
        return [self.token_to_id[t] for t in SPECIAL_TOKENS]

    def convert_tokens_to_ids(self, tokens: Sequence[str]) -> List[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def convert_ids_to_tokens(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    """Read a vocabulary file with one token per line; line number is the id."""
    text = Path(path).read_text(encoding="utf-8")
    tokens = text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary([t.rstrip("\r") for t in tokens])


# -- basic (pre-)tokenisation ---------------------------------------------------


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _strip_accents(text: str) -> str:
    return "".join(c for c in unicodedata.normalize("NFD", text) if unicodedata.category(c) != "Mn")


def basic_tokenize(text: str, lowercase: bool = False) -> List[str]:
    """Split on whitespace and isolate punctuation characters as words."""
    if lowercase:
        text = _strip_accents(text.lower())
    words: List[str] = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def wordpiece_word(word: str, vocab: Vocabulary, max_chars_per_word: int = 100) -> List[str]:
    if len(word) > max_chars_per_word:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def wordpiece_tokenize(text, vocab: Vocabulary, max_chars_per_word: int = 100, lowercase: bool = False) -> List[str]:
    """Greedy longest-match-first WordPiece over pre-split words.

    ``text`` may be a raw string (split with :func:`basic_tokenize`) or an
    already split list of words.
    """
    words = basic_tokenize(text, lowercase) if isinstance(text, str) else list(text)
    out: List[str] = []
    for word in words:
        out.extend(wordpiece_word(word, vocab, max_chars_per_word))
    return out


# -- encoding -------------------------------------------------------------------


@dataclass
class EncodedSequence:
    ids: List[int]
    attention_mask: List[int]
    token_type_ids: List[int]


def _truncate_longest_first(a: List, b: List, budget: int) -> None:
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()


def encode(tokens_a: Sequence[str], tokens_b: Optional[Sequence[str]], vocab: Vocabulary, max_len: int) -> EncodedSequence:
    """Lay out ``[CLS] a [SEP] (b [SEP])``, truncating then padding to ``max_len``."""
    a = list(tokens_a)
    b = list(tokens_b) if tokens_b is not None else None
    if b is None:
        if max_len < 3:
            raise ValueError("max_len must be >= 3 for single sequences")
        del a[max_len - 2:]
        body = [CLS] + a + [SEP]
        types = [0] * len(body)
    else:
        if max_len < 5:
            raise ValueError("max_len must be >= 5 for sequence pairs")
        _truncate_longest_first(a, b, max_len - 3)
        body = [CLS] + a + [SEP] + b + [SEP]
        types = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    ids = vocab.convert_tokens_to_ids(body)
    n = len(ids)
    pad = max_len - n
    return EncodedSequence(
        ids=ids + [vocab.pad_id] * pad,
        attention_mask=[1] * n + [0] * pad,
        token_type_ids=types + [0] * pad,
    )


# -- MLM corruption -------------------------------------------------------------


@dataclass
class MlmBatch:
    input_ids: np.ndarray        # [B, L] after corruption
    labels: np.ndarray           # [B, L] original ids at selected positions, IGNORE_INDEX elsewhere
    attention_mask: np.ndarray   # [B, L]
    token_type_ids: np.ndarray   # [B, L]

    @property
    def shape(self):
        return self.input_ids.shape

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def apply_mlm_masking(
    ids,
    vocab: Vocabulary,
    rate: float = 0.15,
    mask_frac: float = 0.8,
    random_frac: float = 0.1,
    rng=None,
):
    """Corrupt token ids for masked-LM training.

    ``ids`` is an array of any shape (or an :class:`EncodedSequence`). Each
    non-special position is selected with probability ``rate``; a selected
    position becomes ``[MASK]`` with probability ``mask_frac``, a random
    non-special token with probability ``random_frac``, and is kept otherwise.
    Returns ``(corrupted_ids, labels)``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if mask_frac < 0 or random_frac < 0 or mask_frac + random_frac > 1.0 + 1e-12:
        raise ValueError("mask_frac + random_frac must be <= 1")
    if isinstance(ids, EncodedSequence):
        ids = ids.ids
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids = np.asarray(ids, dtype=np.int64)
    special = np.isin(ids, vocab.special_ids)
    selected = (rng.random(ids.shape) < rate) & ~special
    action = rng.random(ids.shape)
    candidates = np.setdiff1d(np.arange(len(vocab)), vocab.special_ids)
    random_tokens = candidates[rng.integers(0, len(candidates), size=ids.shape)]

    out = ids.copy()
    to_mask = selected & (action < mask_frac)
    to_random = selected & (action >= mask_frac) & (action < mask_frac + random_frac)
    out[to_mask] = vocab.mask_id
    out[to_random] = random_tokens[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return out, labels


# -- corpus batching --------------------------------------------------------------


@dataclass
class MlmSettings:
    rate: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1


def read_corpus(path) -> List[str]:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"corpus {path} is empty")
    return lines


class CorpusBatcher:
    """Deterministic MLM batch stream over an encoded line corpus.

    Epoch order and corruption are pure functions of ``(seed, epoch, index)``,
    so a run can resume at any batch without replaying earlier ones.
    """

    def __init__(self, lines: Sequence[str], vocab: Vocabulary, max_len: int, batch_size: int,
                 seed: int, mlm: Optional[MlmSettings] = None, lowercase: bool = False):
        if not lines:
            raise ValueError("corpus is empty")
        self.vocab = vocab
        self.batch_size = batch_size
        self.seed = seed
        self.mlm = mlm or MlmSettings()
        encoded = [encode(wordpiece_tokenize(ln, vocab, lowercase=lowercase), None, vocab, max_len) for ln in lines]
        self.ids = np.array([e.ids for e in encoded], dtype=np.int64)
        self.mask = np.array([e.attention_mask for e in encoded], dtype=np.int64)
        self.types = np.array([e.token_type_ids for e in encoded], dtype=np.int64)

    def __len__(self) -> int:
        return -(-len(self.ids) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 0]).permutation(len(self.ids))

    def batch(self, epoch: int, index: int, order: Optional[np.ndarray] = None) -> MlmBatch:
        if order is None:
            order = self.order(epoch)
        rows = order[index * self.batch_size:(index + 1) * self.batch_size]
        rng = np.random.default_rng([self.seed, epoch, index + 1])
        inputs, labels = apply_mlm_masking(self.ids[rows], self.vocab, self.mlm.rate,
                                           self.mlm.mask_frac, self.mlm.random_frac, rng)
        return MlmBatch(inputs, labels, self.mask[rows].copy(), self.types[rows].copy())

    def epoch(self, epoch: int) -> Iterator[MlmBatch]:
        order = self.order(epoch)
        for index in range(len(self)):
            yield self.batch(epoch, index, order)


def batch_corpus(corpus_path, vocab: Vocabulary, max_len: int, batch_size: int, rng_seed: int,
                 epochs: int = 1, mlm: Optional[MlmSettings] = None) -> Iterator[MlmBatch]:
    batcher = CorpusBatcher(read_corpus(corpus_path), vocab, max_len, batch_size, rng_seed, mlm)
    for ep in range(epochs):
        yield from batcher.epoch(ep)
