"""Local optimisation loop shared by standalone, chained and federated training."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import BOS, EOS, PAD, Transformer, trainable_subset
from .subword import BpeVocab, encode
from .tensor_core import AdamState, adam_step, no_grad

log = logging.getLogger(__name__)

IdPair = tuple[list[int], list[int]]


def encode_pairs(pairs: Sequence[tuple[str, str]], vocab: BpeVocab, max_len: int) -> list[IdPair]:
    """Token ids for each pair; pairs that would not fit `max_len` after framing are dropped."""
    out = []
    dropped = 0
    for src, tgt in pairs:
        s, t = encode(src, vocab), encode(tgt, vocab)
        if len(s) + 1 > max_len or len(t) + 1 > max_len:
            dropped += 1
            continue
        out.append((s, t))
    if dropped:
        log.info("dropped %d pairs longer than %d tokens", dropped, max_len)
    return out


def pad_batch(pairs: Sequence[IdPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(source + EOS, BOS + target, target + EOS), right-padded with PAD."""
    B = len(pairs)
    s_len = max(len(s) for s, _ in pairs) + 1
    t_len = max(len(t) for _, t in pairs) + 1
    src = np.full((B, s_len), PAD, dtype=np.int64)
    tin = np.full((B, t_len), PAD, dtype=np.int64)
    tout = np.full((B, t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s) + 1] = [*s, EOS]
        tin[i, : len(t) + 1] = [BOS, *t]
        tout[i, : len(t) + 1] = [*t, EOS]
    return src, tin, tout


class BatchSampler:
    """Seeded epoch-wise shuffling over a fixed list of pairs."""

    def __init__(self, pairs: Sequence[IdPair], batch_size: int, seed):
        if not pairs:
            raise ConfigError("cannot sample batches from an empty corpus")
        self.pairs = list(pairs)
        self.batch_size = min(batch_size, len(self.pairs))
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.pairs))
            self._pos = 0
        idx = self._order[self._pos: self._pos + self.batch_size]
        self._pos += self.batch_size
        return pad_batch([self.pairs[i] for i in idx])

    def probe(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return pad_batch(self.pairs[: self.batch_size])

    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self._order.copy(), "pos": self._pos}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = state["order"].copy()
        self._pos = state["pos"]


@dataclass
class StepResult:
    steps: int
    mean_loss: float
    losses: list[float]


def train_steps(model: Transformer, optimizer: AdamState, sampler: BatchSampler,
                steps: int) -> StepResult:
    """Run exactly `steps` Adam updates on the model's train subset."""
    names = trainable_subset(model).names()
    if steps == 0:
        with no_grad():
            loss = model.loss(*sampler.probe()).item()
        return StepResult(0, loss, [])
    model.set_trainable(names)
    losses = []
    try:
        for _ in range(steps):
            model.params.zero_grad()
            loss = model.loss(*sampler.next())
            loss.backward()
            adam_step(model.params, optimizer, names)
            losses.append(loss.item())
    finally:
        model.set_trainable(())
    return StepResult(steps, float(np.mean(losses)), losses)
