"""Closed-vocabulary tokenizer for the counting prompt templates.

The vocabulary covers the template words, the category names, and one token
per integer count in [0, max_count]. A count is always a single token, so
"a photo of 12 circles" tokenizes to exactly five ids.
"""
from __future__ import annotations

from typing import NamedTuple

PAD_TOKEN = "<pad>"
EOT_TOKEN = "<eot>"
TEMPLATE_WORDS = ("a", "photo", "of")


class Tokenized(NamedTuple):
    ids: list          # padded to max_seq_len
    eot_index: int     # final non-pad position


class VocabTokenizer:
    def __init__(self, categories=("circles", "squares"), max_count=512, max_seq_len=8):
        categories = tuple(categories)
        reserved = set(TEMPLATE_WORDS) | {PAD_TOKEN, EOT_TOKEN}
        reserved |= {str(i) for i in range(max_count + 1)}
        for cat in categories:
            if cat in reserved:
                raise ValueError(f"category name collides with a reserved token: {cat!r}")
        if len(set(categories)) != len(categories):
            raise ValueError("duplicate category names")
        self.categories = categories
        self.max_count = max_count
        self.max_seq_len = max_seq_len
        self.vocab = [PAD_TOKEN, EOT_TOKEN, *TEMPLATE_WORDS, *categories]
        self._first_count_id = len(self.vocab)
        self.vocab += [str(i) for i in range(max_count + 1)]
        self._ids = {tok: i for i, tok in enumerate(self.vocab)}
        self.pad_id = self._ids[PAD_TOKEN]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def is_count_token(self, token_id: int) -> bool:
        return self._first_count_id <= token_id < self._first_count_id + self.max_count + 1

    def tokenize(self, text: str) -> Tokenized:
        words = text.split()
        if not words:
            raise ValueError("empty text")
        if len(words) > self.max_seq_len:
            raise ValueError(f"text longer than max_seq_len={self.max_seq_len}: {text!r}")
        try:
            ids = [self._ids[w] for w in words]
        except KeyError as e:
            raise ValueError(f"token not in vocabulary: {e.args[0]!r}") from None
        eot_index = len(ids) - 1
        ids += [self.pad_id] * (self.max_seq_len - len(ids))
        return Tokenized(ids=ids, eot_index=eot_index)

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.pad_id:
                break
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"id out of range: {i}")
            words.append(self.vocab[i])
        return " ".join(words)


def inference_text(category: str) -> str:
    return f"a photo of {category}"


def training_text(quantity: int, category: str) -> str:
    return f"a photo of {quantity} {category}"
