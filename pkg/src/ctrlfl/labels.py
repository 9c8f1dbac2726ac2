"""Configuration labels of the form ``"8E-8D/C-C (2-6)"``.

``NE-MD`` gives the encoder/decoder depth, the first letter after the slash
says whether all layers (A) or only controllers (C) are exchanged with the
server, the second whether all layers or only controllers are trained, and
the optional parenthesised list gives controller positions (the same
positions are used for both stacks).

Position rule: positions are 0-based stack indices. When the label is deeper
than the base model, the missing layers are inserted and the positions index
the final, post-insertion stack; when depths match, the positions designate
existing layers. ``-1`` is accepted and means "directly after the embedding
table", i.e. final index 0.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

from .errors import ConfigError, DivergenceWarning, LabelParseError
from .model import ControllerSpec, Mode, Scope

log = logging.getLogger(__name__)

_SCOPES = {"A": Scope.ALL, "C": Scope.CONTROLLERS}


@dataclass(frozen=True)
class ConfigLabel:
    enc_total: int
    dec_total: int
    share_scope: str
    train_scope: str
    positions: tuple[int, ...] = ()
    raw: str = field(default="", compare=False)

    def render(self) -> str:
        s = f"{self.enc_total}E-{self.dec_total}D/{self.share_scope}-{self.train_scope}"
        if self.positions:
            s += " (" + "-".join(str(p) for p in self.positions) + ")"
        return s

    def __str__(self) -> str:
        return self.render()

    @property
    def n_controllers(self) -> int:
        return len(self.positions)


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, reason: str):
        raise LabelParseError(self.text, self.pos, reason)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self) -> None:
        while self.peek().isspace():
            self.pos += 1

    def expect(self, chars: str, what: str) -> str:
        c = self.peek()
        if not c or c not in chars:
            self.fail(f"expected {what}, found {c!r}" if c else f"expected {what}, found end of label")
        self.pos += 1
        return c

    def integer(self, signed: bool = False) -> int:
        start = self.pos
        if signed and self.peek() == "-":
            self.pos += 1
        if not self.peek().isdigit():
            self.fail("expected an integer")
        while self.peek().isdigit():
            self.pos += 1
        return int(self.text[start:self.pos])


def parse_config_label(s: str) -> ConfigLabel:
    sc = _Scanner(s)
    sc.skip_ws()
    enc = sc.integer()
    letter = sc.expect("EeLl", "'E'")
    if letter in "Ll":
        log.info("label %r: treating layer letter %r as 'E'", s, letter)
    sc.expect("-", "'-'")
    dec = sc.integer()
    sc.expect("Dd", "'D'")
    sc.skip_ws()
    sc.expect("/", "'/'")
    sc.skip_ws()
    share = sc.expect("ACac", "share scope A or C").upper()
    sc.expect("-", "'-'")
    train = sc.expect("ACac", "train scope A or C").upper()
    sc.skip_ws()
    positions: list[int] = []
    if sc.peek() == "(":
        sc.pos += 1
        sc.skip_ws()
        positions.append(sc.integer(signed=True))
        while sc.peek() == "-":
            sc.pos += 1
            positions.append(sc.integer(signed=True))
        sc.skip_ws()
        sc.expect(")", "')'")
        sc.skip_ws()
    if sc.pos != len(s):
        sc.fail("unexpected trailing text")
    if enc <= 0 or dec <= 0:
        raise LabelParseError(s, 0, "layer counts must be positive")
    for p in positions:
        if p < -1:
            raise LabelParseError(s, s.index("("), f"position {p} is below -1")
    if (share == "C" or train == "C") and not positions:
        raise LabelParseError(s, len(s), "controller scopes need a position list")
    return ConfigLabel(enc, dec, share, train, tuple(positions), raw=s)


def controller_spec_for(label: ConfigLabel, base_enc: int, base_dec: int) -> ControllerSpec:
    """Map a label onto a base model of the given depth."""
    positions = list(label.positions)
    if -1 in positions:
        msg = f"label {label.raw or label.render()!r}: position -1 mapped to final index 0"
        warnings.warn(msg + " (controller directly after the embedding table)", DivergenceWarning, stacklevel=2)
        log.warning(msg)
        positions = [0 if p == -1 else p for p in positions]
    share, train = _SCOPES[label.share_scope], _SCOPES[label.train_scope]
    extra_enc, extra_dec = label.enc_total - base_enc, label.dec_total - base_dec
    if extra_enc == 0 and extra_dec == 0:
        return ControllerSpec(Mode.DESIGNATE, tuple(positions), tuple(positions), share, train)
    if extra_enc < 0 or extra_dec < 0:
        raise ConfigError(f"label {label.render()} is shallower than the {base_enc}E-{base_dec}D base model")
    if extra_enc != extra_dec or len(positions) != extra_enc:
        raise ConfigError(
            f"label {label.render()} needs {extra_enc} encoder / {extra_dec} decoder insertions "
            f"but lists {len(positions)} positions")
    return ControllerSpec(Mode.INSERT, tuple(positions), tuple(positions), share, train)
