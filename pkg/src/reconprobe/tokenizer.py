"""Greedy longest-match subword tokenizer with ``##`` continuation pieces.

Words are tokenized independently, so every subword maps to exactly one
word index without any character-offset bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import FormatError

PAD, MASK, CLS, SEP, UNK = "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, MASK, CLS, SEP, UNK)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)
CONTINUATION = "##"


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:5]) != RESERVED:
            raise FormatError(f"vocab must start with reserved tokens {RESERVED}, got {tokens[:5]}")
        index = {}
        for i, tok in enumerate(tokens):
            if not tok:
                raise FormatError(f"vocab line {i}: empty token")
            if tok in index:
                raise FormatError(f"vocab line {i}: duplicate token {tok!r}")
            index[tok] = i
        self.tokens = tokens
        self.index = index

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def covers(self, text):
        """True if every character of ``text`` is a token or a continuation token."""
        return all(ch in self.index or CONTINUATION + ch in self.index for ch in text)


def default_vocab() -> Vocab:
    with resources.files("reconprobe.data").joinpath("vocab.txt").open(encoding="utf-8") as fh:
        return Vocab(fh.read().splitlines())


@dataclass(frozen=True)
class TokenizedSentence:
    ids: tuple[int, ...]
    pieces: tuple[str, ...]
    word_of: tuple[int | None, ...]  # None at [CLS]/[SEP]
    n_words: int

    @property
    def special(self):
        return tuple(w is None for w in self.word_of)

    @property
    def content_positions(self):
        return [i for i, w in enumerate(self.word_of) if w is not None]

    def __len__(self):
        return len(self.ids)


def split_word(word: str, vocab: Vocab) -> list[str]:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            cand = word[start:end]
            if start:
                cand = CONTINUATION + cand
            if cand in vocab.index:
                match = cand
                break
            end -= 1
        if match is None:
            pieces.append(UNK)
            break
        pieces.append(match)
        start = end
    return pieces


def tokenize(words, vocab: Vocab) -> TokenizedSentence:
    pieces = [CLS]
    word_of = [None]
    for w_idx, word in enumerate(words):
        for piece in split_word(word, vocab):
            pieces.append(piece)
            word_of.append(w_idx)
    pieces.append(SEP)
    word_of.append(None)
    return TokenizedSentence(
        ids=tuple(vocab.index[p] for p in pieces),
        pieces=tuple(pieces),
        word_of=tuple(word_of),
        n_words=len(words),
    )


def detokenize(ids, vocab: Vocab) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range for vocab of size {len(vocab)}")
        out.append(vocab.tokens[i])
    return out
