"""Joint byte-pair-encoding vocabulary for both translation sides.

Words are whitespace-delimited; the last symbol of every word carries the
``</w>`` end-of-word marker, as in the original subword-NMT algorithm, so
decoding is plain concatenation with the marker turned back into a space.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError

END = "</w>"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

FULL_SCALE_MERGES = 30000
DESK_MERGES = 200

_HEADER = "#ctrlfl-bpe v1"


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END,)


@dataclass
class BpeVocab:
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.id_to_token:
            self.id_to_token = [None] * len(self.token_to_id)  # type: ignore[list-item]
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def segment(self, word: str) -> tuple[str, ...]:
        """Apply merges to one word, lowest training rank first."""
        symbols = list(_word_symbols(word))
        ranks = self.ranks
        while len(symbols) > 1:
            best = None
            best_rank = None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = symbols[best] + symbols[best + 1]
            merged = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and ranks.get((symbols[i], symbols[i + 1])) == best_rank:
                    merged.append(pair)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return tuple(symbols)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        lines = [_HEADER, f"#merges {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append(f"#tokens {len(self.id_to_token)}")
        lines += self.id_to_token
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> BpeVocab:
        lines = text.split("\n")
        if not lines or lines[0] != _HEADER:
            raise InputError("not a vocabulary file (bad header)")
        n_merges = int(lines[1].split()[1])
        merges = []
        for line in lines[2:2 + n_merges]:
            a, b = line.split(" ")
            merges.append((a, b))
        pos = 2 + n_merges
        n_tokens = int(lines[pos].split()[1])
        tokens = lines[pos + 1: pos + 1 + n_tokens]
        if len(tokens) != n_tokens:
            raise InputError("vocabulary token table is truncated")
        return cls(merges, {t: i for i, t in enumerate(tokens)}, tokens)

    @classmethod
    def load(cls, path: str | Path) -> BpeVocab:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: Iterable[str], num_merges: int) -> BpeVocab:
    if num_merges < 0:
        raise InputError(f"num_merges must be >= 0, got {num_merges}")
    word_freq: collections.Counter[str] = collections.Counter()
    for line in corpus:
        word_freq.update(line.split())
    if not word_freq:
        raise InputError("cannot train BPE on an empty corpus")

    words = {w: list(_word_symbols(w)) for w in word_freq}
    # every observed character in both its word-internal and word-final form
    chars = {c for w in words for c in w}
    alphabet = sorted(chars | {c + END for c in chars})
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: collections.Counter[tuple[str, str]] = collections.Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for pair in zip(syms, syms[1:]):
                pairs[pair] += f
        if not pairs:
            break
        # highest count wins; ties go to the lexicographically smallest pair
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        joined = best[0] + best[1]
        for w, syms in words.items():
            if len(syms) < 2:
                continue
            out = []
            i = 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == best[0] and syms[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out

    tokens = list(SPECIALS)
    seen = set(tokens)
    for tok in alphabet + [a + b for a, b in merges]:
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    return BpeVocab(merges, {t: i for i, t in enumerate(tokens)}, tokens)


def encode(text: str, vocab: BpeVocab, frame: bool = False) -> list[int]:
    ids: list[int] = []
    cache = vocab._cache
    for word in text.split():
        cached = cache.get(word)
        if cached is None:
            cached = tuple(vocab.token_to_id.get(s, UNK_ID) for s in vocab.segment(word))
            cache[word] = cached
        ids.extend(cached)
    if frame:
        return [BOS_ID, *ids, EOS_ID]
    return ids


def decode(ids: Sequence[int], vocab: BpeVocab) -> str:
    pieces = []
    n = len(vocab.id_to_token)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} outside vocabulary of size {n}")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if i == UNK_ID:
            pieces.append(SPECIALS[UNK_ID] + END)
        else:
            pieces.append(vocab.id_to_token[i])
    return "".join(pieces).replace(END, " ").rstrip(" ")


def tokens(text: str, vocab: BpeVocab) -> list[str]:
    """Token strings of `encode(text)` with the end-of-word marker stripped."""
    return [vocab.id_to_token[i].replace(END, "") for i in encode(text, vocab)]
