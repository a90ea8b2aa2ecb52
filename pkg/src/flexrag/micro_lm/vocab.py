"""Word-level vocabulary with byte fallback.

Tokenization is whitespace word splitting; unknown words degrade to their
UTF-8 bytes terminated by an end-of-word marker, so every string is
representable and ``detokenize(tokenize(t))`` reproduces ``t`` up to
whitespace normalization.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable

from ..errors import InvalidArgument

EOS = "<eos>"
EOW = "<eow>"
Q_MARK = "<q>"
A_MARK = "<a>"

_SPECIALS = [EOS, EOW, Q_MARK, A_MARK]
_BYTE_TOKENS = [f"<0x{i:02X}>" for i in range(256)]


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


class Vocab:
    """Token table: specials, then the 256 byte tokens, then corpus words."""

    def __init__(self, words: Iterable[str]):
        self.id_to_token: list[str] = list(_SPECIALS) + list(_BYTE_TOKENS)
        seen = set(self.id_to_token)
        for w in words:
            if w and not w.isspace() and w not in seen:
                seen.add(w)
                self.id_to_token.append(w)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.eos_id = self.token_to_id[EOS]
        self.eow_id = self.token_to_id[EOW]
        self.q_id = self.token_to_id[Q_MARK]
        self.a_id = self.token_to_id[A_MARK]
        self._byte_base = len(_SPECIALS)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> list[int]:
        """Deterministic word-level encoding; byte fallback for unknown words."""
        ids: list[int] = []
        for word in text.split():
            wid = self.token_to_id.get(word)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(self._byte_base + b for b in word.encode("utf-8"))
                ids.append(self.eow_id)
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        pending: bytearray = bytearray()
        for i in ids:
            if self._byte_base <= i < self._byte_base + 256:
                pending.append(i - self._byte_base)
            elif i == self.eow_id:
                words.append(pending.decode("utf-8", errors="replace"))
                pending = bytearray()
            elif i == self.eos_id:
                break
            else:
                if pending:
                    words.append(pending.decode("utf-8", errors="replace"))
                    pending = bytearray()
                words.append(self.id_to_token[i])
        if pending:
            words.append(pending.decode("utf-8", errors="replace"))
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        expected = list(_SPECIALS) + list(_BYTE_TOKENS)
        if tokens[: len(expected)] != expected:
            raise InvalidArgument(f"not a vocab file: {path}")
        return cls(tokens[len(expected):])


def build_vocab(texts: Iterable[str], max_words: int | None = None,
                min_count: int = 1) -> Vocab:
    """Count words over a corpus; ties broken lexicographically."""
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(text.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, c in ranked if c >= min_count]
    if max_words is not None:
        words = words[:max_words]
    return Vocab(words)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.tokenize(text)


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return vocab.detokenize(ids)
