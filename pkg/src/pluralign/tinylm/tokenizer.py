"""Word-level tokenizer.

Text is split on whitespace, and a colon always closes a token, so
``"Answer:yes"`` becomes ``["Answer:", "yes"]``.  Ids 0 and 1 are reserved
for padding and unknown words; the rest follow first occurrence in the
texts the vocabulary was built from.
"""
from __future__ import annotations

import re
from typing import Iterable, Sequence

from ..errors import InvalidArgumentError

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(r"[^\s:]*:|[^\s:]+")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if vocab[:2] != [PAD, UNK]:
            raise InvalidArgumentError("vocabulary must start with the reserved pad/unk entries")
        if len(set(vocab)) != len(vocab):
            raise InvalidArgumentError("vocabulary has duplicate entries")
        self.vocab = vocab
        self._ids = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Tokenizer":
        vocab = [PAD, UNK]
        seen = set(vocab)
        for text in texts:
            for w in split_words(text):
                if w not in seen:
                    seen.add(w)
                    vocab.append(w)
        if max_size is not None and len(vocab) > max_size:
            raise InvalidArgumentError(f"vocabulary needs {len(vocab)} ids, limit is {max_size}")
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    def token_id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)
