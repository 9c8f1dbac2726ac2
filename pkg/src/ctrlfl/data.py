"""Parallel corpora: file ingestion and synthetic non-IID translation domains.

The five default synthetic domains stand in for a heterogeneous collection of
real corpora. Their relatedness is graded on purpose: two domains share most
of their vocabulary and behave alike, one uses an alphabet nobody else uses,
and the remaining two are unrelated tasks over their own word lists.
"""
from __future__ import annotations

import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

Pair = tuple[str, str]

TASKS = ("copy", "reverse", "substitution-cipher", "token-shift", "disjoint-vocab-cipher")
LOWER = string.ascii_lowercase
UPPER = string.ascii_uppercase


@dataclass
class DomainCorpus:
    name: str
    train: list[Pair]
    dev: list[Pair] = field(default_factory=list)
    test: list[Pair] = field(default_factory=list)

    def split(self, which: str) -> list[Pair]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[which]

    def write(self, directory: str | Path) -> None:
        d = Path(directory) / self.name
        d.mkdir(parents=True, exist_ok=True)
        for which in ("train", "dev", "test"):
            pairs = self.split(which)
            (d / f"{which}.src").write_text("".join(s + "\n" for s, _ in pairs), encoding="utf-8")
            (d / f"{which}.tgt").write_text("".join(t + "\n" for _, t in pairs), encoding="utf-8")

    @classmethod
    def read(cls, directory: str | Path, name: str | None = None) -> DomainCorpus:
        d = Path(directory)
        splits = {}
        for which in ("train", "dev", "test"):
            src = _read_lines(d / f"{which}.src")
            tgt = _read_lines(d / f"{which}.tgt")
            if len(src) != len(tgt):
                raise InputError(f"{d}/{which}: {len(src)} source lines vs {len(tgt)} target lines")
            splits[which] = list(zip(src, tgt))
        return cls(name or d.name, splits["train"], splits["dev"], splits["test"])


@dataclass(frozen=True)
class SyntheticDomainSpec:
    name: str
    task: str
    lexicon_start: int = 0
    lexicon_size: int = 24
    alphabet: str = "lower"
    vocab_seed: int = 0
    # when set, lexicon words pass through this cipher first (the target side of that cipher domain)
    lexicon_cipher: int | None = None
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    min_words: int = 3
    max_words: int = 7

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"unknown synthetic task {self.task!r}; expected one of {TASKS}")
        if self.task == "disjoint-vocab-cipher" and self.alphabet != "upper":
            raise InputError("disjoint-vocab-cipher domains must use the 'upper' alphabet")
        if not 1 <= self.min_words <= self.max_words:
            raise InputError(f"bad length range [{self.min_words}, {self.max_words}]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def default_domain_specs(train_size: int = 2000, dev_size: int = 200,
                         test_size: int = 200) -> list[SyntheticDomainSpec]:
    sizes = dict(train_size=train_size, dev_size=dev_size, test_size=test_size)
    return [
        # broad base domain; the lowercase domains below live on its target side, so the
        # base model has produced every one of their tokens but never read them as input
        SyntheticDomainSpec("news", "substitution-cipher", 0, 52, vocab_seed=1, **sizes),
        SyntheticDomainSpec("subtitles", "copy", 0, 24, vocab_seed=2, lexicon_cipher=1, **sizes),
        # overlaps 20 of the 24 subtitle words
        SyntheticDomainSpec("talks", "copy", 4, 24, vocab_seed=3, lexicon_cipher=1, **sizes),
        SyntheticDomainSpec("php", "disjoint-vocab-cipher", 0, 24, alphabet="upper", vocab_seed=4, **sizes),
        SyntheticDomainSpec("ubuntu", "token-shift", 28, 24, vocab_seed=5, lexicon_cipher=1, **sizes),
    ]


def word_pool(alphabet: str, size: int, seed: int) -> list[str]:
    """`size` distinct words of 2-3 letters, a pure function of (alphabet, size, seed)."""
    letters = LOWER if alphabet == "lower" else UPPER
    rng = np.random.default_rng([seed, 7919])
    seen: set[str] = set()
    words: list[str] = []
    while len(words) < size:
        n = int(rng.integers(2, 4))
        w = "".join(letters[i] for i in rng.integers(0, len(letters), n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def char_cipher(alphabet: str, seed: int) -> dict[str, str]:
    letters = LOWER if alphabet == "lower" else UPPER
    perm = np.random.default_rng([seed, 104729]).permutation(len(letters))
    return {letters[i]: letters[j] for i, j in enumerate(perm)}


def invert_cipher(cipher: dict[str, str]) -> dict[str, str]:
    return {v: k for k, v in cipher.items()}


def apply_cipher(text: str, cipher: dict[str, str]) -> str:
    return "".join(cipher.get(c, c) for c in text)


def _translate(words: list[str], spec: SyntheticDomainSpec, lexicon: list[str],
               cipher: dict[str, str]) -> list[str]:
    if spec.task == "copy":
        return list(words)
    if spec.task == "reverse":
        return list(reversed(words))
    if spec.task == "token-shift":
        index = {w: i for i, w in enumerate(lexicon)}
        return [lexicon[(index[w] + 1) % len(lexicon)] for w in words]
    return [apply_cipher(w, cipher) for w in words]


def generate_domain(spec: SyntheticDomainSpec, seed: int, pool_size: int = 128) -> DomainCorpus:
    pool = word_pool(spec.alphabet, max(pool_size, spec.lexicon_start + spec.lexicon_size), seed)
    lexicon = pool[spec.lexicon_start: spec.lexicon_start + spec.lexicon_size]
    if spec.lexicon_cipher is not None:
        lexicon = [apply_cipher(w, char_cipher(spec.alphabet, spec.lexicon_cipher)) for w in lexicon]
    cipher = char_cipher(spec.alphabet, spec.vocab_seed)
    rng = np.random.default_rng([seed, spec.vocab_seed, 31])
    weights = 1.0 / np.sqrt(np.arange(1, len(lexicon) + 1))
    weights /= weights.sum()
    total = spec.train_size + spec.dev_size + spec.test_size
    seen: set[str] = set()
    pairs: list[Pair] = []
    attempts = 0
    while len(pairs) < total:
        attempts += 1
        if attempts > 50 * total:
            raise InputError(f"domain {spec.name!r}: cannot draw {total} distinct sentences")
        n = int(rng.integers(spec.min_words, spec.max_words + 1))
        words = [lexicon[i] for i in rng.choice(len(lexicon), size=n, p=weights)]
        src = " ".join(words)
        if src in seen:
            continue
        seen.add(src)
        pairs.append((src, " ".join(_translate(words, spec, lexicon, cipher))))
    a, b = spec.train_size, spec.train_size + spec.dev_size
    return DomainCorpus(spec.name, pairs[:a], pairs[a:b], pairs[b:])


def generate_synthetic_domains(specs: Sequence[SyntheticDomainSpec] | None = None,
                               seed: int = 0) -> list[DomainCorpus]:
    specs = list(specs) if specs is not None else default_domain_specs()
    if not specs:
        raise InputError("need at least one synthetic domain spec")
    return [generate_domain(s, seed) for s in specs]


def _read_lines(path: Path) -> list[str]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for i, line in enumerate(lines, start=1):
        try:
            out.append(line.decode("utf-8").rstrip("\r"))
        except UnicodeDecodeError as exc:
            raise InputError(f"{path}: line {i} is not valid UTF-8 ({exc.reason})") from exc
    return out


def ingest_corpus(src_path: str | Path, tgt_path: str | Path, dev_size: int, test_size: int,
                  seed: int = 0, name: str | None = None) -> DomainCorpus:
    src = _read_lines(Path(src_path))
    tgt = _read_lines(Path(tgt_path))
    if len(src) != len(tgt):
        raise InputError(f"line-count mismatch: {src_path} has {len(src)}, {tgt_path} has {len(tgt)}")
    if dev_size < 0 or test_size < 0 or dev_size + test_size > len(src):
        raise InputError(f"dev ({dev_size}) + test ({test_size}) exceeds {len(src)} available lines")
    order = np.random.default_rng(seed).permutation(len(src))
    pairs = [(src[i], tgt[i]) for i in order]
    test = pairs[:test_size]
    dev = pairs[test_size:test_size + dev_size]
    train = pairs[test_size + dev_size:]
    corpus = DomainCorpus(name or Path(src_path).stem, train, dev, test)
    log.info("ingested %s: train=%d dev=%d test=%d", corpus.name, len(train), len(dev), len(test))
    return corpus
