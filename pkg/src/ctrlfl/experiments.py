"""Experiment drivers: standalone, pooled, chained and federated training.

Budgets follow a pretrain + fine-tune split. Every model gets the same total
number of optimizer steps (``pretrain_steps + finetune_steps``); the
federation base checkpoint is the domain-1 standalone model captured after
``pretrain_steps``.
"""
from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import DomainCorpus
from .errors import ConfigError, InputError
from .evaluation import EvalMatrix, evaluate_matrix, score_model
from .federation import (
    ClientState,
    CostLedger,
    RoundConfig,
    RoundReport,
    ServerState,
    cost_notation,
    run_round,
)
from .labels import ConfigLabel, controller_spec_for, parse_config_label
from .model import (
    ModelConfig,
    Transformer,
    apply_controller_spec,
    build_model,
    shared_subset,
    trainable_subset,
)
from .subword import BpeVocab
from .tensor_core import AdamState, count_params
from .training import BatchSampler, IdPair, encode_pairs, train_steps

log = logging.getLogger(__name__)

MODES = ("standalone", "pooled", "chained", "federated")

DESK_LEARNING_RATE = 1e-3


@dataclass
class ExperimentPlan:
    mode: str = "federated"
    domains: list[str] = field(default_factory=list)
    label: str | None = None
    seed: int = 0
    pretrain_steps: int = 2000
    finetune_steps: int = 1000
    batch_size: int = 16
    learning_rate: float = DESK_LEARNING_RATE
    local_steps: int = 10
    eval_every: int = 5
    smooth_bleu: bool = False
    threads: int = 1
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("step budgets must be non-negative")

    @property
    def budget(self) -> int:
        return self.pretrain_steps + self.finetune_steps

    @property
    def rounds(self) -> int:
        if self.finetune_steps % self.local_steps:
            raise ConfigError(f"finetune_steps={self.finetune_steps} is not a multiple of "
                              f"local_steps={self.local_steps}")
        return self.finetune_steps // self.local_steps

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.enc_layers, self.dec_layers, self.d_model,
                           self.heads, self.d_ff, self.max_seq_len)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ExperimentPlan:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


def _mean(scores: Mapping[str, float]) -> float:
    # nan when nothing was evaluated
    return float(np.mean(list(scores.values()))) if scores else float("nan")


def derive_seed(seed: int, names: Sequence[str]) -> list[int]:
    """Seed material for a sampler over the given domains, independent of their order."""
    return [seed, *sorted(zlib.crc32(n.encode("utf-8")) for n in names)]


class Workspace:
    """Vocabulary plus corpora, with encoded training data cached per domain."""

    def __init__(self, vocab: BpeVocab, corpora: Sequence[DomainCorpus], max_seq_len: int = 32):
        self.vocab = vocab
        self.corpora = {c.name: c for c in corpora}
        self.max_seq_len = max_seq_len
        self._ids: dict[str, list[IdPair]] = {}

    def corpus(self, name: str) -> DomainCorpus:
        try:
            return self.corpora[name]
        except KeyError:
            raise InputError(f"no corpus named {name!r} (have {sorted(self.corpora)})") from None

    def train_ids(self, name: str) -> list[IdPair]:
        if name not in self._ids:
            self._ids[name] = encode_pairs(self.corpus(name).train, self.vocab, self.max_seq_len)
        return self._ids[name]

    def test_sets(self, names: Sequence[str] | None = None) -> dict[str, list[tuple[str, str]]]:
        return {n: self.corpus(n).test for n in (names or list(self.corpora))}


@dataclass
class TrainResult:
    model: Transformer
    scores: dict[str, float]
    steps: int
    checkpoints: dict[str, Transformer] = field(default_factory=dict)
    phase_scores: list[dict[str, float]] = field(default_factory=list)

    @property
    def average(self) -> float:
        return _mean(self.scores)


def _evaluate(model: Transformer, ws: Workspace, plan: ExperimentPlan,
              names: Sequence[str] | None = None) -> dict[str, float]:
    return {n: score_model(model, ws.vocab, t, plan.smooth_bleu) for n, t in ws.test_sets(names).items()}


def _fresh(plan: ExperimentPlan, ws: Workspace) -> Transformer:
    return build_model(plan.model_config(len(ws.vocab)), plan.seed)


def _all_domains(plan: ExperimentPlan, ws: Workspace) -> list[str]:
    return plan.domains or list(ws.corpora)


def train_standalone(domain: str, plan: ExperimentPlan, ws: Workspace, evaluate: bool = True) -> TrainResult:
    """Train on one domain for the full budget; keep the post-pretrain checkpoint as ``"base"``."""
    pairs = ws.train_ids(domain)
    if not pairs:
        raise InputError(f"domain {domain!r} has no training pairs")
    model = _fresh(plan, ws)
    opt = AdamState(learning_rate=plan.learning_rate)
    sampler = BatchSampler(pairs, plan.batch_size, derive_seed(plan.seed, [domain]))
    train_steps(model, opt, sampler, plan.pretrain_steps)
    base = model.clone()
    train_steps(model, opt, sampler, plan.finetune_steps)
    scores = _evaluate(model, ws, plan, _all_domains(plan, ws)) if evaluate else {}
    return TrainResult(model, scores, plan.budget, {"base": base})


def train_pooled_finetune(domains: Sequence[str], plan: ExperimentPlan, ws: Workspace) -> TrainResult:
    """One model on the union of all training sets (needs every corpus in one place)."""
    names = sorted(set(domains))
    pairs = [p for n in names for p in ws.train_ids(n)]
    model = _fresh(plan, ws)
    opt = AdamState(learning_rate=plan.learning_rate)
    sampler = BatchSampler(pairs, plan.batch_size, derive_seed(plan.seed, names))
    train_steps(model, opt, sampler, plan.budget)
    return TrainResult(model, _evaluate(model, ws, plan, _all_domains(plan, ws)), plan.budget)


def chain_schedule(n_domains: int, plan: ExperimentPlan) -> list[int]:
    """Steps per phase: the first domain gets the pretraining budget, the rest split the fine-tuning budget."""
    if n_domains == 1:
        return [plan.budget]
    k = n_domains - 1
    q, r = divmod(plan.finetune_steps, k)
    return [plan.pretrain_steps] + [q + (1 if i < r else 0) for i in range(k)]


def train_chained(domains: Sequence[str], plan: ExperimentPlan, ws: Workspace,
                  start_from: Transformer | None = None, track_phases: bool = False) -> TrainResult:
    """Sequential fine-tuning, each phase starting from the previous phase's weights.

    `start_from` may supply the already-trained first phase (it is what
    `train_standalone` returns as its ``"base"`` checkpoint).
    """
    if not domains:
        raise InputError("chained training needs at least one domain")
    schedule = chain_schedule(len(domains), plan)
    model = start_from.clone() if start_from is not None else None
    phase_scores = []
    for i, (name, steps) in enumerate(zip(domains, schedule)):
        if i == 0 and model is not None:
            continue
        if model is None:
            model = _fresh(plan, ws)
        opt = AdamState(learning_rate=plan.learning_rate)
        sampler = BatchSampler(ws.train_ids(name), plan.batch_size, derive_seed(plan.seed, [name]))
        train_steps(model, opt, sampler, steps)
        if track_phases:
            phase_scores.append(_evaluate(model, ws, plan, [name]))
    return TrainResult(model, _evaluate(model, ws, plan, _all_domains(plan, ws)), sum(schedule),
                       phase_scores=phase_scores)


@dataclass
class SessionReport:
    label: str
    spec: dict
    initial_scores: dict[str, float]
    final_scores: dict[str, float]
    rounds: list[RoundReport]
    ledger: CostLedger
    shared_params: int
    trained_params: int
    global_model: Transformer | None = None
    clients: list[ClientState] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list)

    @property
    def initial_mean(self) -> float:
        return _mean(self.initial_scores)

    @property
    def final_mean(self) -> float:
        return _mean(self.final_scores)

    def to_dict(self) -> dict:
        c_cost, t_cost = cost_notation(self.label)
        return {
            "label": self.label,
            "spec": self.spec,
            "initial_scores": self.initial_scores,
            "initial_mean": self.initial_mean,
            "final_scores": self.final_scores,
            "final_mean": self.final_mean,
            "shared_params_per_client_round": self.shared_params,
            "trained_params_per_client_round": self.trained_params,
            "c_cost": c_cost,
            "t_cost": t_cost,
            "ledger": self.ledger.snapshot(),
            "rounds": [r.to_dict() for r in self.rounds],
            "warnings": self.warnings,
        }


def make_clients(global0: Transformer, domains: Sequence[str], plan: ExperimentPlan,
                 ws: Workspace) -> list[ClientState]:
    clients = []
    for name in domains:
        pairs = ws.train_ids(name)
        if not pairs:
            raise ConfigError(f"client {name!r} has an empty local corpus")
        clients.append(ClientState(
            client_id=name,
            model=global0.clone(),
            sampler=BatchSampler(pairs, plan.batch_size, derive_seed(plan.seed, [name])),
            sample_count=len(pairs),
            optimizer=AdamState(learning_rate=plan.learning_rate),
        ))
    return clients


def run_fl_experiment(label: str | ConfigLabel, plan: ExperimentPlan, ws: Workspace,
                      base: Transformer, evaluate: bool = True) -> SessionReport:
    """Federated fine-tuning from `base`, one client per domain."""
    lab = parse_config_label(label) if isinstance(label, str) else label
    if base.config.vocab_size != len(ws.vocab):
        raise ConfigError("base checkpoint vocabulary does not match the workspace tokenizer")
    spec = controller_spec_for(lab, base.n_enc, base.n_dec)
    global0 = apply_controller_spec(base, spec, seed=plan.seed)
    domains = _all_domains(plan, ws)
    clients = make_clients(global0, domains, plan, ws)
    server = ServerState.from_model(global0, [c.client_id for c in clients])
    ledger = CostLedger()
    cfg = RoundConfig(plan.local_steps, plan.batch_size, plan.rounds, plan.eval_every, plan.threads)

    def evaluator(model: Transformer) -> dict[str, float]:
        return _evaluate(model, ws, plan, domains)

    initial = evaluator(global0) if evaluate else {}
    reports = []
    for _ in range(cfg.total_rounds):
        reports.append(run_round(server, clients, cfg, ledger, evaluator if evaluate else None))
    final_model = server.global_model()
    final = {}
    if evaluate:
        final = reports[-1].eval_scores if reports and reports[-1].eval_scores else evaluator(final_model)
    return SessionReport(
        label=lab.render(),
        spec=spec.to_dict(),
        initial_scores=initial,
        final_scores=final,
        rounds=reports,
        ledger=ledger,
        shared_params=count_params(shared_subset(global0)),
        trained_params=count_params(trainable_subset(global0)),
        global_model=final_model,
        clients=clients,
        warnings=list(global0.warnings),
    )


def table_matrix(rows: Mapping[str, TrainResult | SessionReport], columns: Sequence[str]) -> EvalMatrix:
    """Table-style matrix from already-computed results (no decoding)."""
    m = EvalMatrix(list(columns))
    for label, res in rows.items():
        if isinstance(res, SessionReport):
            c, t = cost_notation(res.label)
            m.add_row(label, res.final_scores, c, t)
        else:
            m.add_row(label, res.scores, "NA", f"{res.model.n_enc}E-{res.model.n_dec}D + W")
    return m


__all__ = [
    "ExperimentPlan", "SessionReport", "TrainResult", "Workspace", "chain_schedule", "derive_seed",
    "evaluate_matrix", "make_clients", "run_fl_experiment", "table_matrix", "train_chained",
    "train_pooled_finetune", "train_standalone",
]
