"""Closed two-language vocabulary shared by the corpus, models and scoring."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

BLANK, PAD, EOS = "<blank>", "<pad>", "<eos>"
CHAR_LIKE, WORD_LIKE, SPECIAL = "char_like", "word_like", "special"

# pronounceable stand-ins for the word-like language
_WORDS = [
    "cat", "dog", "sun", "map", "red", "tea", "box", "car", "pen", "cup",
    "hat", "bus", "key", "egg", "ink", "jam", "kit", "log", "mud", "net",
    "oak", "pig", "rug", "sky", "toy", "van", "web", "yak", "zip", "bee",
]
_CJK_BASE = 0x4E00


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """id <-> symbol table with a class per symbol.

    Layout: 0 blank, 1 pad, 2 sos/eos, then char-like symbols, then
    word-like symbols.  Decoder and LM outputs cover eos plus the language
    symbols; the CTC head covers blank plus the language symbols.
    """

    symbols: tuple
    classes: tuple

    blank: int = 0
    pad: int = 1
    eos: int = 2

    @property
    def sos(self) -> int:
        return self.eos

    def __len__(self):
        return len(self.symbols)

    @classmethod
    def build(cls, n_char: int, n_word: int) -> "Vocab":
        if n_char < 1 or n_word < 1:
            raise VocabError("each language needs at least one symbol")
        if n_word > len(_WORDS):
            words = [f"w{i}" for i in range(n_word)]
        else:
            words = _WORDS[:n_word]
        chars = [chr(_CJK_BASE + i) for i in range(n_char)]
        symbols = (BLANK, PAD, EOS, *chars, *words)
        classes = (SPECIAL,) * 3 + (CHAR_LIKE,) * n_char + (WORD_LIKE,) * n_word
        return cls(symbols=symbols, classes=classes)

    # lookups -------------------------------------------------------------

    @cached_property
    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.symbols)}

    def id(self, symbol: str) -> int:
        try:
            return self.index[symbol]
        except KeyError:
            raise VocabError(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols) -> list[int]:
        idx = self.index
        out = []
        for s in symbols:
            if s not in idx or self.classes[idx[s]] == SPECIAL:
                raise VocabError(f"unknown symbol {s!r}")
            out.append(idx[s])
        return out

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    @cached_property
    def token_ids(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.classes) if c != SPECIAL], dtype=np.int64)

    def ids_of(self, cls_name: str) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.classes) if c == cls_name], dtype=np.int64)

    @cached_property
    def output_ids(self) -> np.ndarray:
        """Support of decoder/LM distributions: eos then language symbols."""
        return np.concatenate([[self.eos], self.token_ids]).astype(np.int64)

    @cached_property
    def ctc_ids(self) -> np.ndarray:
        """Support of the CTC head: blank then language symbols."""
        return np.concatenate([[self.blank], self.token_ids]).astype(np.int64)

    def class_map(self) -> dict:
        return {s: c for s, c in zip(self.symbols, self.classes) if c != SPECIAL}

    def render(self, ids) -> str:
        """Surface text: char-like runs written solid, words space separated."""
        parts: list[str] = []
        prev = None
        for i in ids:
            s, c = self.symbols[i], self.classes[i]
            if c == SPECIAL:
                continue
            if parts and not (c == CHAR_LIKE and prev == CHAR_LIKE):
                parts.append(" ")
            parts.append(s)
            prev = c
        return "".join(parts)

    # persistence ---------------------------------------------------------

    def to_json(self) -> list:
        return [{"symbol": s, "id": i, "class": c} for i, (s, c) in enumerate(zip(self.symbols, self.classes))]

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = sorted(rows, key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise VocabError("vocab ids are not dense")
        v = cls(symbols=tuple(r["symbol"] for r in rows), classes=tuple(r["class"] for r in rows))
        if v.symbols[:3] != (BLANK, PAD, EOS):
            raise VocabError("reserved ids 0..2 must be blank, pad, eos")
        return v
