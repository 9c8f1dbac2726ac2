"""Corpus BLEU and Table-style evaluation matrices."""
from __future__ import annotations

import collections
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, InputError
from .model import EOS, Transformer, greedy_decode_batch
from .subword import BpeVocab, decode, encode


@dataclass
class NgramStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    def __add__(self, other: NgramStats) -> NgramStats:
        return NgramStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.hyp_len + other.hyp_len,
            self.ref_len + other.ref_len,
        )


def _ngrams(tokens: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_ngram_stats(hyp: Sequence[str], ref: Sequence[str], max_n: int = 4) -> NgramStats:
    """Clipped n-gram matches (hypothesis counts capped at reference counts) for n=1..max_n."""
    if max_n < 1:
        raise InputError(f"max_n must be >= 1, got {max_n}")
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return NgramStats(matches, totals, len(hyp), len(ref))


def bleu_from_stats(stats: NgramStats, smooth: bool = False) -> float:
    """Geometric mean of clipped precisions times the brevity penalty, on a 0-100 scale.

    Orders with no hypothesis n-grams anywhere in the corpus are left out of
    the mean. With `smooth`, orders n >= 2 use (matches + 1) / (totals + 1).
    """
    if stats.hyp_len == 0:
        return 0.0
    log_p = []
    for n, (m, t) in enumerate(zip(stats.matches, stats.totals), start=1):
        if t == 0:
            continue
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_p.append(math.log(m / t))
    bp = 1.0 if stats.hyp_len >= stats.ref_len else math.exp(1.0 - stats.ref_len / stats.hyp_len)
    return 100.0 * bp * math.exp(sum(log_p) / len(log_p))


def corpus_bleu(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], max_n: int = 4,
                smooth: bool = False) -> float:
    if not pairs:
        raise InputError("corpus_bleu needs at least one (hypothesis, reference) pair")
    total = None
    for hyp, ref in pairs:
        s = sentence_ngram_stats(list(hyp), list(ref), max_n)
        total = s if total is None else total + s
    return bleu_from_stats(total, smooth)


def translate(model: Transformer, vocab: BpeVocab, sources: Sequence[str],
              batch_size: int = 256, max_len: int | None = None) -> list[str]:
    if model.config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size={model.config.vocab_size} but tokenizer has {len(vocab)} ids")
    limit = max_len or model.config.max_seq_len
    out: list[str] = []
    for i in range(0, len(sources), batch_size):
        chunk = [encode(s, vocab)[: model.config.max_seq_len - 1] + [EOS] for s in sources[i:i + batch_size]]
        for ids in greedy_decode_batch(model, chunk, limit):
            out.append(decode(ids, vocab))
    return out


def score_model(model: Transformer, vocab: BpeVocab, test: Sequence[tuple[str, str]],
                smooth: bool = False) -> float:
    hyps = translate(model, vocab, [s for s, _ in test])
    return corpus_bleu([(h.split(), r.split()) for h, (_, r) in zip(hyps, test)], smooth=smooth)


@dataclass
class EvalMatrix:
    columns: list[str]
    rows: list[str] = field(default_factory=list)
    cells: list[list[float]] = field(default_factory=list)
    c_cost: list[str] = field(default_factory=list)
    t_cost: list[str] = field(default_factory=list)
    smooth: bool = False

    def add_row(self, label: str, scores: Mapping[str, float], c_cost: str = "NA",
                t_cost: str = "NA") -> None:
        self.rows.append(label)
        self.cells.append([float(scores[c]) for c in self.columns])
        self.c_cost.append(c_cost)
        self.t_cost.append(t_cost)

    def average(self, row: int | str) -> float:
        i = self.rows.index(row) if isinstance(row, str) else row
        return sum(self.cells[i]) / len(self.cells[i])

    def cell(self, row: str, column: str) -> float:
        return self.cells[self.rows.index(row)][self.columns.index(column)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Model", *self.columns, "Average", "C-Cost", "T-Cost"])
        for i, label in enumerate(self.rows):
            w.writerow([label, *(f"{c:.2f}" for c in self.cells[i]), f"{self.average(i):.2f}",
                        self.c_cost[i], self.t_cost[i]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "smooth": self.smooth,
            "rows": [
                {"label": label, "scores": dict(zip(self.columns, self.cells[i])),
                 "average": self.average(i), "c_cost": self.c_cost[i], "t_cost": self.t_cost[i]}
                for i, label in enumerate(self.rows)
            ],
        }


def evaluate_matrix(models: Mapping[str, Transformer], test_sets: Mapping[str, Sequence[tuple[str, str]]],
                    vocab: BpeVocab, smooth: bool = False,
                    costs: Mapping[str, tuple[str, str]] | None = None) -> EvalMatrix:
    """One greedy-decode pass per (model, test set) cell."""
    matrix = EvalMatrix(list(test_sets), smooth=smooth)
    for label, model in models.items():
        scores = {name: score_model(model, vocab, test, smooth) for name, test in test_sets.items()}
        c, t = (costs or {}).get(label, ("NA", "NA"))
        matrix.add_row(label, scores, c, t)
    return matrix
