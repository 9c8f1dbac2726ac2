"""Encoder-decoder Transformer with Controller layers.

A Controller is an ordinary encoder/decoder layer whose parameters carry the
``controller`` partition label. Controllers are either *inserted* (new layers,
initialised close to the identity map so a pretrained model keeps its
behaviour) or *designated* (existing layers relabelled in place). Which
partitions get trained and which get exchanged with the server is decided by
`ControllerSpec` and read back through `partition_params`.

Layers are pre-norm (``x + f(norm(x))``) so that a sublayer with near-zero
output projection leaves its input almost untouched.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceWarning, InputError
from .tensor_core import (
    ParamSet,
    Partition,
    Tensor,
    count_params,
    cross_entropy,
    deserialize_params,
    embedding,
    layer_norm,
    no_grad,
    relu,
    serialize_params,
    softmax,
)
from .tensor_core.tensor import transpose

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9
NEAR_IDENTITY_SCALE = 1e-4



class Mode(str, enum.Enum):
    INSERT = "insert"
    DESIGNATE = "designate"


class Scope(str, enum.Enum):
    ALL = "all"
    CONTROLLERS = "controllers"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 32

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class ControllerSpec:
    mode: Mode = Mode.DESIGNATE
    enc_positions: tuple[int, ...] = ()
    dec_positions: tuple[int, ...] = ()
    share_scope: Scope = Scope.ALL
    train_scope: Scope = Scope.ALL
    train_embeddings: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "share_scope", Scope(self.share_scope))
        object.__setattr__(self, "train_scope", Scope(self.train_scope))
        object.__setattr__(self, "enc_positions", tuple(int(p) for p in self.enc_positions))
        object.__setattr__(self, "dec_positions", tuple(int(p) for p in self.dec_positions))
        if self.share_scope is Scope.CONTROLLERS and not (self.enc_positions or self.dec_positions):
            raise ConfigError("share_scope=controllers needs at least one controller position")
        if self.train_scope is Scope.CONTROLLERS and not (self.enc_positions or self.dec_positions):
            raise ConfigError("train_scope=controllers needs at least one controller position")

    @property
    def embeddings_trained(self) -> bool:
        if self.train_embeddings is None:
            return self.train_scope is Scope.ALL
        return self.train_embeddings

    @property
    def embeddings_shared(self) -> bool:
        # Frozen embeddings are identical on every client, so they never travel.
        return self.share_scope is Scope.ALL and self.embeddings_trained

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "enc_positions": list(self.enc_positions),
            "dec_positions": list(self.dec_positions),
            "share_scope": self.share_scope.value,
            "train_scope": self.train_scope.value,
            "train_embeddings": self.train_embeddings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ControllerSpec:
        return cls(
            mode=d["mode"], enc_positions=tuple(d["enc_positions"]),
            dec_positions=tuple(d["dec_positions"]), share_scope=d["share_scope"],
            train_scope=d["train_scope"], train_embeddings=d.get("train_embeddings"),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def layer_tensors(cfg: ModelConfig, stack: str, rng: np.random.Generator,
                  near_identity: bool = False) -> list[tuple[str, np.ndarray]]:
    """Freshly initialised (suffix, array) pairs for one encoder or decoder layer."""
    d, ff = cfg.d_model, cfg.d_ff
    scale = NEAR_IDENTITY_SCALE if near_identity else 1.0
    out: list[tuple[str, np.ndarray]] = []

    def attention(prefix: str) -> None:
        for w in ("q", "k", "v"):
            out.append((f"{prefix}.w_{w}", _xavier(rng, d, d)))
            out.append((f"{prefix}.b_{w}", np.zeros(d)))
        out.append((f"{prefix}.w_o", _xavier(rng, d, d) * scale))
        out.append((f"{prefix}.b_o", np.zeros(d)))

    def norm(prefix: str) -> None:
        out.append((f"{prefix}.gain", np.ones(d)))
        out.append((f"{prefix}.bias", np.zeros(d)))

    norm("norm_self")
    attention("self_attn")
    if stack == "dec":
        norm("norm_cross")
        attention("cross_attn")
    norm("norm_ffn")
    out.append(("ffn.w_1", _xavier(rng, d, ff)))
    out.append(("ffn.b_1", np.zeros(ff)))
    out.append(("ffn.w_2", _xavier(rng, ff, d) * scale))
    out.append(("ffn.b_2", np.zeros(d)))
    return out


def layer_param_count(cfg: ModelConfig, stack: str) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    attn = 4 * (d * d + d)
    per = attn + 2 * 2 * d + (d * ff + ff + ff * d + d)
    if stack == "dec":
        per += attn + 2 * d
    return per


def expected_param_count(cfg: ModelConfig) -> int:
    return (cfg.enc_layers * layer_param_count(cfg, "enc")
            + cfg.dec_layers * layer_param_count(cfg, "dec")
            + cfg.vocab_size * cfg.d_model + 2 * 2 * cfg.d_model)


def _positional_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Transformer:
    def __init__(self, config: ModelConfig, params: ParamSet,
                 enc_controllers: Sequence[bool], dec_controllers: Sequence[bool],
                 spec: ControllerSpec | None = None):
        self.config = config
        self.params = params
        self.enc_controllers = list(enc_controllers)
        self.dec_controllers = list(dec_controllers)
        self.spec = spec
        self.warnings: list[str] = []
        self._pe = _positional_table(config.max_seq_len, config.d_model)

    @property
    def n_enc(self) -> int:
        return len(self.enc_controllers)

    @property
    def n_dec(self) -> int:
        return len(self.dec_controllers)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def layer_names(self, stack: str, index: int) -> list[str]:
        prefix = f"{stack}.{index}."
        return [n for n in self.params if n.startswith(prefix)]

    def clone(self) -> Transformer:
        ps = ParamSet()
        for name, t in self.params.items():
            ps.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad), self.params.label(name))
        m = Transformer(self.config, ps, self.enc_controllers, self.dec_controllers, self.spec)
        m.warnings = list(self.warnings)
        return m

    def set_trainable(self, names) -> None:
        """Only tensors in `names` record gradients; everything else is a constant."""
        names = set(names)
        for name, t in self.params.items():
            t.requires_grad = name in names
            t.grad = None

    # -- forward pieces -------------------------------------------------

    def _embed(self, ids: np.ndarray) -> Tensor:
        d = self.config.d_model
        x = embedding(self.p("embed.weight"), ids) * math.sqrt(d)
        return x + self._pe[: ids.shape[1]]

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H = self.config.heads
        dh = d // H
        p = self.p
        q = (xq @ p(prefix + "w_q") + p(prefix + "b_q")).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        k = (xkv @ p(prefix + "w_k") + p(prefix + "b_k")).reshape(B, Tk, H, dh).transpose(0, 2, 3, 1)
        v = (xkv @ p(prefix + "w_v") + p(prefix + "b_v")).reshape(B, Tk, H, dh).transpose(0, 2, 1, 3)
        attn = softmax((q @ k) * (1.0 / math.sqrt(dh)) + mask)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return ctx @ p(prefix + "w_o") + p(prefix + "b_o")

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.p(prefix + "gain"), self.p(prefix + "bias"))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.p
        h = relu(x @ p(prefix + "ffn.w_1") + p(prefix + "ffn.b_1"))
        return h @ p(prefix + "ffn.w_2") + p(prefix + "ffn.b_2")

    def _check_ids(self, ids: np.ndarray, what: str) -> None:
        if ids.ndim != 2:
            raise InputError(f"{what} must be 1-D or 2-D token ids, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise InputError(f"{what} length {ids.shape[1]} exceeds max_seq_len={self.config.max_seq_len}")
        if ids.shape[1] == 0:
            raise InputError(f"{what} is empty")

    def encode(self, src_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        src_ids = np.asarray(src_ids, dtype=np.int64)
        self._check_ids(src_ids, "source")
        key_mask = np.where(src_ids == PAD, NEG_INF, 0.0)[:, None, None, :]
        x = self._embed(src_ids)
        for i in range(self.n_enc):
            x = self._enc_layer(f"enc.{i}.", x, key_mask)
        return self._norm("enc_norm.", x), key_mask

    def _enc_layer(self, pre: str, x: Tensor, key_mask: np.ndarray) -> Tensor:
        h = self._norm(pre + "norm_self.", x)
        x = x + self._attention(pre + "self_attn.", h, h, key_mask)
        return x + self._ffn(pre, self._norm(pre + "norm_ffn.", x))

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_ids: np.ndarray) -> Tensor:
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        self._check_ids(tgt_ids, "target")
        T = tgt_ids.shape[1]
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, None]
        self_mask = causal + np.where(tgt_ids == PAD, NEG_INF, 0.0)[:, None, None, :]
        x = self._embed(tgt_ids)
        for i in range(self.n_dec):
            pre = f"dec.{i}."
            h = self._norm(pre + "norm_self.", x)
            x = x + self._attention(pre + "self_attn.", h, h, self_mask)
            x = x + self._attention(pre + "cross_attn.", self._norm(pre + "norm_cross.", x), memory, src_mask)
            x = x + self._ffn(pre, self._norm(pre + "norm_ffn.", x))
        x = self._norm("dec_norm.", x)
        return x @ transpose(self.p("embed.weight"), (1, 0))

    def logits(self, src_ids, tgt_ids) -> Tensor:
        memory, mask = self.encode(src_ids)
        return self.decode(memory, mask, tgt_ids)

    def loss(self, src_ids, tgt_in, tgt_out) -> Tensor:
        return cross_entropy(self.logits(src_ids, tgt_in), tgt_out, ignore_index=PAD)


def build_model(cfg: ModelConfig, seed: int) -> Transformer:
    cfg.validate()
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("embed.weight", Tensor(_xavier(rng, cfg.vocab_size, cfg.d_model)), Partition.EMBEDDING)
    for stack, n in (("enc", cfg.enc_layers), ("dec", cfg.dec_layers)):
        for i in range(n):
            for suffix, arr in layer_tensors(cfg, stack, rng):
                ps.add(f"{stack}.{i}.{suffix}", Tensor(arr), Partition.BASE)
    for norm in ("enc_norm", "dec_norm"):
        ps.add(f"{norm}.gain", Tensor(np.ones(cfg.d_model)), Partition.BASE)
        ps.add(f"{norm}.bias", Tensor(np.zeros(cfg.d_model)), Partition.BASE)
    model = Transformer(cfg, ps, [False] * cfg.enc_layers, [False] * cfg.dec_layers)
    assert count_params(ps) == expected_param_count(cfg)
    return model


def _check_positions(positions: Sequence[int], length: int, what: str) -> None:
    if len(set(positions)) != len(positions):
        raise ConfigError(f"duplicate {what} controller positions: {list(positions)}")
    for p in positions:
        if not 0 <= p < length:
            raise ConfigError(f"{what} controller position {p} outside [0, {length})")


def insert_controllers(model: Transformer, spec: ControllerSpec, init: str = "near_identity",
                       seed: int = 0) -> Transformer:
    """New model with fresh controller layers at `spec`'s final-stack indices.

    Existing layers keep their weights bitwise and are renumbered around the
    new ones.
    """
    if spec.mode is not Mode.INSERT:
        raise ConfigError(f"insert_controllers needs mode=insert, got {spec.mode.value}")
    if init not in ("near_identity", "xavier"):
        raise ConfigError(f"unknown controller init {init!r}")
    old = model.config
    n_enc = model.n_enc + len(spec.enc_positions)
    n_dec = model.n_dec + len(spec.dec_positions)
    _check_positions(spec.enc_positions, n_enc, "encoder")
    _check_positions(spec.dec_positions, n_dec, "decoder")
    if 0 in spec.enc_positions or 0 in spec.dec_positions:
        msg = ("controller inserted directly after the embedding table (final index 0); "
               "this placement was observed never to converge")
        warnings.warn(msg, DivergenceWarning, stacklevel=2)
        log.warning(msg)
        model_warnings = [msg]
    else:
        model_warnings = []

    cfg = dataclasses.replace(old, enc_layers=n_enc, dec_layers=n_dec)
    ps = ParamSet()
    src = model.params
    ps.add("embed.weight", Tensor(src["embed.weight"].data.copy()), src.label("embed.weight"))
    flags: dict[str, list[bool]] = {}
    for stack, positions, old_flags in (("enc", spec.enc_positions, model.enc_controllers),
                                        ("dec", spec.dec_positions, model.dec_controllers)):
        total_len = len(old_flags) + len(positions)
        new_flags = []
        old_i = 0
        for i in range(total_len):
            if i in positions:
                rng = np.random.default_rng([seed, 0 if stack == "enc" else 1, i])
                for suffix, arr in layer_tensors(cfg, stack, rng, near_identity=init == "near_identity"):
                    ps.add(f"{stack}.{i}.{suffix}", Tensor(arr), Partition.CONTROLLER)
                new_flags.append(True)
            else:
                for name in model.layer_names(stack, old_i):
                    suffix = name[len(f"{stack}.{old_i}."):]
                    ps.add(f"{stack}.{i}.{suffix}", Tensor(src[name].data.copy()), src.label(name))
                new_flags.append(old_flags[old_i])
                old_i += 1
        flags[stack] = new_flags
    for name in ("enc_norm.gain", "enc_norm.bias", "dec_norm.gain", "dec_norm.bias"):
        ps.add(name, Tensor(src[name].data.copy()), src.label(name))
    out = Transformer(cfg, ps, flags["enc"], flags["dec"], spec)
    out.warnings = list(model.warnings) + model_warnings
    return out


def designate_controllers(model: Transformer, spec: ControllerSpec) -> Transformer:
    """Copy of `model` in which exactly the listed existing layers are controllers."""
    if spec.mode is not Mode.DESIGNATE:
        raise ConfigError(f"designate_controllers needs mode=designate, got {spec.mode.value}")
    _check_positions(spec.enc_positions, model.n_enc, "encoder")
    _check_positions(spec.dec_positions, model.n_dec, "decoder")
    out = model.clone()
    out.spec = spec
    for stack, positions, n in (("enc", spec.enc_positions, out.n_enc),
                                ("dec", spec.dec_positions, out.n_dec)):
        flags = [i in positions for i in range(n)]
        for i, flag in enumerate(flags):
            for name in out.layer_names(stack, i):
                out.params.relabel(name, Partition.CONTROLLER if flag else Partition.BASE)
        if stack == "enc":
            out.enc_controllers = flags
        else:
            out.dec_controllers = flags
    return out


def apply_controller_spec(model: Transformer, spec: ControllerSpec, seed: int = 0) -> Transformer:
    if spec.mode is Mode.INSERT:
        return insert_controllers(model, spec, seed=seed)
    return designate_controllers(model, spec)


def partition_params(model: Transformer, scope: Scope | str,
                     include_embeddings: bool = False) -> ParamSet:
    scope = Scope(scope)
    wanted = {Partition.CONTROLLER}
    if scope is Scope.ALL:
        wanted.add(Partition.BASE)
    if include_embeddings:
        wanted.add(Partition.EMBEDDING)
    return model.params.with_labels(*wanted)


def shared_subset(model: Transformer) -> ParamSet:
    spec = model.spec or ControllerSpec()
    return partition_params(model, spec.share_scope, spec.embeddings_shared)


def trainable_subset(model: Transformer) -> ParamSet:
    spec = model.spec or ControllerSpec()
    return partition_params(model, spec.train_scope, spec.embeddings_trained)


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def forward(model: Transformer, src_ids, tgt_ids) -> Tensor:
    """Logits ``[t, V]`` for one pair, or ``[B, t, V]`` for padded batches."""
    src, single = _as_batch(src_ids)
    tgt, _ = _as_batch(tgt_ids)
    out = model.logits(src, tgt)
    if single:
        return out.reshape(out.shape[1], out.shape[2])
    return out


def greedy_decode_batch(model: Transformer, sources: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    max_len = min(max_len, model.config.max_seq_len)
    if max_len <= 0 or not sources:
        return [[] for _ in sources]
    width = max(len(s) for s in sources)
    src = np.full((len(sources), width), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
    with no_grad():
        memory, mask = model.encode(src)
        ys = np.full((len(sources), 1), BOS, dtype=np.int64)
        done = np.zeros(len(sources), dtype=bool)
        for _ in range(max_len):
            logits = model.decode(memory, mask, ys).data[:, -1, :]
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in ys[:, 1:]:
        seq = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            seq.append(int(tok))
        out.append(seq)
    return out


def greedy_decode(model: Transformer, src_ids: Sequence[int], max_len: int) -> list[int]:
    return greedy_decode_batch(model, [list(src_ids)], max_len)[0]


def save_checkpoint(model: Transformer, path: str | Path, meta: dict | None = None) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "spec": model.spec.to_dict() if model.spec else None,
        "enc_controllers": model.enc_controllers,
        "dec_controllers": model.dec_controllers,
        "extra": meta or {},
    }
    blob = serialize_params(model.params, header)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path: str | Path) -> Transformer:
    frame = deserialize_params(Path(path).read_bytes())
    meta = frame.meta
    spec = ControllerSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return Transformer(ModelConfig.from_dict(meta["config"]), frame.to_paramset(),
                       meta["enc_controllers"], meta["dec_controllers"], spec)
