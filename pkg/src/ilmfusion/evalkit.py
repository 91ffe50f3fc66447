"""Mixed error rate, perplexity and corpus statistics.

Mixed error rate scores char-like symbols one character at a time and
word-like symbols one whitespace-delimited word at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ilmfusion.vocab import CHAR_LIKE, WORD_LIKE

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class MixedTokenSeq:
    units: tuple = ()

    def __len__(self):
        return len(self.units)

    @property
    def surfaces(self) -> list[str]:
        return [u for u, _ in self.units]

    @classmethod
    def from_symbols(cls, symbols: Sequence[str], classes: dict) -> "MixedTokenSeq":
        try:
            return cls(tuple((s, classes[s]) for s in symbols))
        except KeyError as exc:
            raise EvalError(f"unknown symbol {exc.args[0]!r}") from None


def tokenize_mixed(text: str, classes: dict) -> MixedTokenSeq:
    """Split ``text`` into scoring units.

    Whitespace-separated chunks that are word-like symbols stay whole; any
    other chunk must consist of char-like symbols and is split per character.
    """
    units = []
    for chunk in text.split():
        if classes.get(chunk) == WORD_LIKE:
            units.append((chunk, WORD_LIKE))
            continue
        for ch in chunk:
            if classes.get(ch) != CHAR_LIKE:
                raise EvalError(f"unknown symbol {ch!r} in {chunk!r}")
            units.append((ch, CHAR_LIKE))
    return MixedTokenSeq(tuple(units))


@dataclass
class MerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0
    per_class: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def mer(self) -> float:
        return self.errors / self.ref_len if self.ref_len else float("nan")

    def __add__(self, other: "MerReport") -> "MerReport":
        per = {k: dict(v) for k, v in self.per_class.items()}
        for cls_name, counts in other.per_class.items():
            row = per.setdefault(cls_name, {"S": 0, "I": 0, "D": 0, "ref_len": 0})
            for key, v in counts.items():
                row[key] += v
        return MerReport(self.substitutions + other.substitutions, self.insertions + other.insertions,
                         self.deletions + other.deletions, self.ref_len + other.ref_len, per)


def _class_row(per, cls_name):
    return per.setdefault(cls_name, {"S": 0, "I": 0, "D": 0, "ref_len": 0})


def edit_alignment(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimal unit-cost alignment as (op, ref_index, hyp_index) with op in C/S/I/D.

    Among optimal paths the backtrace prefers substitution (or match), then
    insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i, j - 1] + 1, d[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("C" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ops.append(("I", None, j - 1))
            j -= 1
        else:
            ops.append(("D", i - 1, None))
            i -= 1
    return ops[::-1]


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    return sum(op != "C" for op, _, _ in edit_alignment(ref, hyp))


def mer(ref: MixedTokenSeq, hyp: MixedTokenSeq) -> MerReport:
    if len(ref) == 0:
        raise EvalError("empty reference")
    rep = MerReport(ref_len=len(ref))
    for _, cls_name in ref.units:
        _class_row(rep.per_class, cls_name)["ref_len"] += 1
    for op, i, j in edit_alignment(ref.surfaces, hyp.surfaces):
        if op == "S":
            rep.substitutions += 1
            _class_row(rep.per_class, ref.units[i][1])["S"] += 1
        elif op == "D":
            rep.deletions += 1
            _class_row(rep.per_class, ref.units[i][1])["D"] += 1
        elif op == "I":
            rep.insertions += 1
            _class_row(rep.per_class, hyp.units[j][1])["I"] += 1
    return rep


def corpus_mer(pairs: Iterable[tuple[MixedTokenSeq, MixedTokenSeq]], pooled: bool = True) -> float:
    """Corpus MER: pooled counts, or the mean of per-utterance rates."""
    reports = [mer(r, h) for r, h in pairs]
    if not reports:
        raise EvalError("no utterances to score")
    if pooled:
        total = reports[0]
        for r in reports[1:]:
            total = total + r
        return total.mer
    return float(np.mean([r.mer for r in reports]))


def pool(reports: Sequence[MerReport]) -> MerReport:
    total = MerReport()
    for r in reports:
        total = total + r
    return total


def perplexity(scorer: Callable[[Sequence], float], corpus: Sequence[Sequence], skip_infinite: bool = False) -> float:
    """exp(-total log-probability / predicted tokens), eos counted per sequence.

    ``scorer`` returns the log-probability of a whole sequence including its
    eos.  Sequences scoring ``-inf`` raise unless ``skip_infinite``.
    """
    if not corpus:
        raise EvalError("empty corpus")
    total, count, skipped = 0.0, 0, 0
    for seq in corpus:
        lp = float(scorer(seq))
        if not math.isfinite(lp):
            if not skip_infinite:
                raise EvalError(f"sequence {list(seq)!r} has log-probability {lp}")
            skipped += 1
            continue
        total += lp
        count += len(seq) + 1
    if skipped:
        log.warning("perplexity: excluded %d sequences with infinite log-probability", skipped)
    if count == 0:
        raise EvalError("every sequence was excluded")
    return math.exp(-total / count)


@dataclass
class CorpusStats:
    char_like_ratio: float
    word_like_ratio: float
    utterances: int
    switch_points: int


def corpus_stats(corpus: Iterable[MixedTokenSeq]) -> CorpusStats:
    n_char = n_word = n_utt = switches = 0
    for seq in corpus:
        n_utt += 1
        classes = [c for _, c in seq.units]
        n_char += sum(c == CHAR_LIKE for c in classes)
        n_word += sum(c == WORD_LIKE for c in classes)
        switches += sum(a != b for a, b in zip(classes, classes[1:]))
    total = n_char + n_word
    if total == 0:
        return CorpusStats(0.0, 0.0, n_utt, 0)
    return CorpusStats(n_char / total, n_word / total, n_utt, switches)
