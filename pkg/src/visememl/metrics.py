"""Viseme and word error rates from Levenshtein alignments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

from .viseme_map import strip_framing


@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )

    @property
    def rate(self) -> float:
        return self.errors / max(self.ref_len, 1)


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Among minimum-cost alignments the backtrace prefers substitution (or
    match), then deletion, then insertion. ``ref_len`` is ``len(ref)``.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ri != hyp[j - 1])
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), d, ins, n)


def corpus_counts(refs, hyps) -> EditCounts:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = EditCounts()
    for r, h in zip(refs, hyps):
        total = total + edit_distance(r, h)
    return total


def error_rate(refs, hyps) -> float:
    """Corpus-level (S + D + I) / N; the denominator is at least 1."""
    return corpus_counts(refs, hyps).rate


def ver(refs, hyps) -> float:
    """Viseme error rate; SoS/EoS/Pad are dropped, Space is scored."""
    return error_rate([strip_framing(r) for r in refs], [strip_framing(h) for h in hyps])


def wer(refs, hyps) -> float:
    """Word error rate over word lists (plain strings are split on whitespace)."""
    split = lambda x: x.split() if isinstance(x, str) else list(x)
    return error_rate([split(r) for r in refs], [split(h) for h in hyps])
