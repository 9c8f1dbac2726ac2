"""Cross-silo federation: FedAvg over the shared subset, broadcast, cost ledger.

Everything that crosses the client/server boundary is a serialized frame
(`tensor_core.serialize_params`), and the ledger counts parameters from the
parsed frames themselves rather than from the models.
"""
from __future__ import annotations

import logging
import math
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .labels import ConfigLabel, parse_config_label
from .model import Transformer, shared_subset, trainable_subset
from .tensor_core import AdamState, Partition, count_params, deserialize_params, serialize_params
from .training import BatchSampler, train_steps

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    client_id: str
    model: Transformer
    sampler: BatchSampler
    sample_count: int
    optimizer: AdamState
    local_steps_done: int = 0

    def __post_init__(self):
        if self.sample_count != len(self.sampler.pairs):
            raise ConfigError(f"client {self.client_id}: n_m={self.sample_count} but "
                              f"{len(self.sampler.pairs)} training pairs are available")

    def save_state(self) -> dict:
        return {
            "params": self.model.params.snapshot(),
            "optimizer": self.optimizer.copy(),
            "sampler": self.sampler.get_state(),
            "steps": self.local_steps_done,
        }

    def restore_state(self, state: dict) -> None:
        self.model.params.load(state["params"])
        self.optimizer = state["optimizer"]
        self.sampler.set_state(state["sampler"])
        self.local_steps_done = state["steps"]


@dataclass
class ServerState:
    shared: dict[str, np.ndarray]
    labels: dict[str, Partition]
    spec_fingerprint: str
    reference: Transformer
    clients: list[str] = field(default_factory=list)
    round_index: int = 0
    algorithm: str = "fedavg"

    @classmethod
    def from_model(cls, model: Transformer, client_ids: Sequence[str] = ()) -> ServerState:
        """Server seeded with `model` as the initial global model."""
        subset = shared_subset(model)
        return cls(
            shared={n: t.data.copy() for n, t in subset.items()},
            labels={n: subset.label(n) for n in subset},
            spec_fingerprint=model.spec.fingerprint() if model.spec else "",
            reference=model.clone(),
            clients=list(client_ids),
        )

    def global_model(self) -> Transformer:
        """Initial global model with the current aggregate loaded over the shared subset."""
        m = self.reference.clone()
        m.params.load(self.shared)
        return m


@dataclass
class RoundConfig:
    local_steps: int
    batch_size: int = 16
    total_rounds: int = 1
    eval_every: int = 5
    threads: int = 1
    keep_frames: bool = False

    def __post_init__(self):
        if self.local_steps <= 0:
            raise ConfigError("local_steps per round must be positive")


@dataclass(frozen=True)
class CostPreset:
    enc_layer: int
    dec_layer: int
    embedding: int

    def to_dict(self) -> dict:
        return {"enc_layer": self.enc_layer, "dec_layer": self.dec_layer, "embedding": self.embedding}


PAPER_PRESET = CostPreset(enc_layer=3_416_320, dec_layer=4_204_032, embedding=33_116_512)


@dataclass(frozen=True)
class LedgerRecord:
    round: int
    client_id: str
    uplink_params: int
    downlink_params: int
    trained_params: int
    uplink_bytes: int
    downlink_bytes: int
    header_bytes: int


class CostLedger:
    """Append-only record of parameters exchanged (C-Cost) and trained (T-Cost)."""

    def __init__(self, preset: CostPreset | None = None):
        self._records: list[LedgerRecord] = []
        self.preset = preset

    @property
    def records(self) -> tuple[LedgerRecord, ...]:
        return tuple(self._records)

    def extend(self, records: Sequence[LedgerRecord]) -> None:
        self._records.extend(records)

    def totals(self) -> dict[str, int]:
        keys = ("uplink_params", "downlink_params", "trained_params",
                "uplink_bytes", "downlink_bytes", "header_bytes")
        return {k: sum(getattr(r, k) for r in self._records) for k in keys}

    def round_totals(self, round_index: int) -> dict[str, int]:
        rs = [r for r in self._records if r.round == round_index]
        return {
            "uplink_params": sum(r.uplink_params for r in rs),
            "downlink_params": sum(r.downlink_params for r in rs),
            "trained_params": sum(r.trained_params for r in rs),
        }

    def snapshot(self) -> dict:
        return {"records": len(self._records), **self.totals()}


@dataclass
class RoundReport:
    round_index: int
    client_losses: dict[str, float]
    weights: dict[str, float]
    eval_scores: dict[str, float] | None
    ledger: dict
    uplink_frames: list[bytes] = field(default_factory=list, repr=False)
    downlink_frame: bytes | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_losses": self.client_losses,
            "weights": self.weights,
            "eval_scores": self.eval_scores,
            "ledger": self.ledger,
        }


def client_local_train(client: ClientState, steps: int) -> tuple[ClientState, float]:
    result = train_steps(client.model, client.optimizer, client.sampler, steps)
    client.local_steps_done += steps
    return client, result.mean_loss


def _check_submissions(submissions) -> tuple[list[str], dict[str, tuple[int, ...]]]:
    if not submissions:
        raise ProtocolError("fedavg needs at least one submission")
    names = list(submissions[0][0])
    shapes = {n: np.shape(submissions[0][0][n]) for n in names}
    for k, (params, n_m) in enumerate(submissions):
        if not n_m > 0:
            raise ProtocolError(f"submission {k}: sample count must be positive, got {n_m}")
        missing = set(names) ^ set(params)
        if missing:
            raise ProtocolError(f"submission {k}: tensor set differs at {sorted(missing)[0]!r}")
        for n in names:
            if np.shape(params[n]) != shapes[n]:
                raise ProtocolError(f"submission {k}: tensor {n!r} has shape "
                                    f"{np.shape(params[n])}, expected {shapes[n]}")
    return names, shapes


def _integer_counts(counts: Sequence[float]) -> list[int]:
    """Scale the sample counts to integers with the same ratios."""
    fracs = [Fraction(c) for c in counts]
    lcm = math.lcm(*(f.denominator for f in fracs))
    return [int(f * lcm) for f in fracs]


def _exact_mean_column(values: list[float], counts: list[int], total: int) -> float:
    ratios = [v.as_integer_ratio() for v in values]
    den = max(b for _, b in ratios)
    num = sum(c * a * (den // b) for c, (a, b) in zip(counts, ratios))
    return num / (den * total)  # int / int rounds once, to nearest


def fedavg_aggregate(submissions: Sequence[tuple[Mapping[str, np.ndarray], float]]) -> dict[str, np.ndarray]:
    """Element-wise ``sum_m (n_m / n) * w_m`` over the submitted tensors.

    The weighted mean is computed exactly in rational arithmetic and rounded
    once, so the result is independent of submission order, of how a client's
    count is split, and equals the input when all clients agree.
    """
    names, shapes = _check_submissions(submissions)
    counts = _integer_counts([n_m for _, n_m in submissions])
    total = sum(counts)
    out: dict[str, np.ndarray] = {}
    for name in names:
        stacked = np.stack([np.asarray(p[name], dtype=np.float64).reshape(-1) for p, _ in submissions])
        if not np.isfinite(stacked).all():
            raise ProtocolError(f"tensor {name!r}: non-finite values in a submission")
        flat = stacked[0].copy()
        # columns where every client agrees (sign of zero included) already hold the mean
        same = (stacked == stacked[0]) & (np.signbit(stacked) == np.signbit(stacked[0]))
        differ = np.flatnonzero(~same.all(axis=0))
        if differ.size:
            cols = stacked[:, differ].T.tolist()
            flat[differ] = [_exact_mean_column(c, counts, total) for c in cols]
        out[name] = flat.reshape(shapes[name])
    return out


def uplink_frame(client: ClientState, round_index: int) -> bytes:
    subset = shared_subset(client.model)
    meta = {
        "client_id": client.client_id,
        "round_index": round_index,
        "n_m": client.sample_count,
        "spec": client.model.spec.fingerprint() if client.model.spec else "",
    }
    return serialize_params(subset, meta)


def downlink_frame(server: ServerState) -> bytes:
    triples = [(n, a, server.labels[n]) for n, a in server.shared.items()]
    meta = {"round_index": server.round_index, "spec": server.spec_fingerprint}
    return serialize_params(triples, meta)


def broadcast(server: ServerState, clients: Sequence[ClientState], frame: bytes | None = None):
    """Overwrite every client's shared subset with the server aggregate."""
    frame = frame if frame is not None else downlink_frame(server)
    parsed = deserialize_params(frame)
    for c in clients:
        fp = c.model.spec.fingerprint() if c.model.spec else ""
        if fp != parsed.meta["spec"]:
            raise ProtocolError(f"client {c.client_id}: controller spec {fp} != server {parsed.meta['spec']}")
        local = set(shared_subset(c.model).names())
        if local != set(parsed.arrays):
            raise ProtocolError(f"client {c.client_id}: shared tensor set differs from server payload")
        c.model.params.load(parsed.arrays)
    return clients


def _collect(server: ServerState, frames: Sequence[bytes]):
    submissions = []
    for blob in frames:
        f = deserialize_params(blob)
        if f.meta["spec"] != server.spec_fingerprint:
            raise ProtocolError(f"client {f.meta['client_id']}: spec fingerprint mismatch")
        if f.meta["round_index"] != server.round_index:
            raise ProtocolError(f"client {f.meta['client_id']}: frame for round {f.meta['round_index']}, "
                                f"server is at {server.round_index}")
        for name, label in f.labels.items():
            if server.labels.get(name) != label:
                raise ProtocolError(f"client {f.meta['client_id']}: unexpected tensor {name!r} ({label.value})")
        submissions.append((f, f.meta["n_m"]))
    return submissions


def run_round(server: ServerState, clients: Sequence[ClientState], cfg: RoundConfig, ledger: CostLedger,
              evaluate: Callable[[Transformer], dict[str, float]] | None = None) -> RoundReport:
    """Local training on every client, FedAvg of the shared subset, broadcast.

    If anything fails, server and clients are rolled back to their state at
    the start of the round and the ledger is left untouched.
    """
    saved_server = ({n: a.copy() for n, a in server.shared.items()}, server.round_index)
    saved_clients = [c.save_state() for c in clients]
    try:
        report = _round(server, clients, cfg, ledger, evaluate)
    except BaseException:
        server.shared, server.round_index = saved_server
        for c, state in zip(clients, saved_clients):
            c.restore_state(state)
        raise
    return report


def _round(server, clients, cfg, ledger, evaluate) -> RoundReport:
    round_index = server.round_index
    if cfg.threads > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda c: client_local_train(c, cfg.local_steps), clients))
    else:
        results = [client_local_train(c, cfg.local_steps) for c in clients]
    losses = {c.client_id: loss for c, loss in results}

    frames = [uplink_frame(c, round_index) for c in clients]
    submissions = _collect(server, frames)
    aggregate = fedavg_aggregate([(f.arrays, n_m) for f, n_m in submissions])
    total = sum(n_m for _, n_m in submissions)
    weights = {f.meta["client_id"]: n_m / total for f, n_m in submissions}

    server.shared = aggregate
    server.round_index += 1
    down = downlink_frame(server)
    broadcast(server, clients, down)

    down_params = deserialize_params(down).param_count
    records = []
    for c, (f, _) in zip(clients, submissions):
        records.append(LedgerRecord(
            round=round_index,
            client_id=c.client_id,
            uplink_params=f.param_count,
            downlink_params=down_params,
            trained_params=count_params(trainable_subset(c.model)),
            uplink_bytes=f.total_bytes,
            downlink_bytes=len(down),
            header_bytes=f.header_bytes + (len(down) - 8 * down_params),
        ))
    scores = None
    if evaluate is not None and cfg.eval_every > 0 and (
            server.round_index % cfg.eval_every == 0 or server.round_index == cfg.total_rounds):
        scores = evaluate(server.global_model())
    # last step: a round that raised anywhere above leaves the ledger untouched
    ledger.extend(records)
    report = RoundReport(round_index, losses, weights, scores, ledger.snapshot())
    if cfg.keep_frames:
        report.uplink_frames = frames
        report.downlink_frame = down
    log.info("round %d: losses %s", round_index, {k: round(v, 4) for k, v in losses.items()})
    return report


def _layer_counts(label: ConfigLabel, scope: str) -> tuple[int, int]:
    if scope == "A":
        return label.enc_total, label.dec_total
    return label.n_controllers, label.n_controllers


def compute_cost_preset(label: str | ConfigLabel, preset: CostPreset = PAPER_PRESET) -> tuple[int, int]:
    """(C-Cost, T-Cost) in parameters from per-layer constants.

    Communication covers encoder/decoder layers only; training adds the
    embedding table whenever all layers are trained.
    """
    lab = parse_config_label(label) if isinstance(label, str) else label
    ce, cd = _layer_counts(lab, lab.share_scope)
    te, td = _layer_counts(lab, lab.train_scope)
    c_cost = ce * preset.enc_layer + cd * preset.dec_layer
    t_cost = te * preset.enc_layer + td * preset.dec_layer
    if lab.train_scope == "A":
        t_cost += preset.embedding
    return c_cost, t_cost


def cost_notation(label: str | ConfigLabel) -> tuple[str, str]:
    """Cost columns in the ``"8E-8D"`` / ``"2E-2D + W"`` notation."""
    lab = parse_config_label(label) if isinstance(label, str) else label
    ce, cd = _layer_counts(lab, lab.share_scope)
    te, td = _layer_counts(lab, lab.train_scope)
    t = f"{te}E-{td}D" + (" + W" if lab.train_scope == "A" else "")
    return f"{ce}E-{cd}D", t
