"""Declarative search-space files and their validation.

A space file is line oriented: header fields first, then one candidate per
line as a chain of ``kind(params)`` tokens.  Example::

    name nasbench201
    nodes 4
    cells 3
    reduce_after 0 1
    stem_channels 8
    classes 10
    candidate none =
    candidate skip_connect = identity
    candidate nor_conv_1x1 = relu conv(k=1) bn

An empty chain declares the zero operation.  ``darts_cifar`` and
``nasbench201`` ship as built-ins next to this module.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .graph import (AVGPOOL, BN, CONV, IDENTITY, MAXPOOL, RELU, OperationChain,
                    SpecError, make_module)


@dataclass
class CandidateSpec:
    name: str
    tokens: list  # list of (kind, params dict)


@dataclass
class SpaceSpec:
    name: str
    nodes: int
    cells: int
    reduce_after: list
    stem_channels: int
    classes: int
    candidates: list
    in_channels: int = 3

    def validate(self) -> None:
        if self.nodes < 2:
            raise SpecError("a cell needs at least 2 nodes")
        if self.cells < 1:
            raise SpecError("at least one cell is required")
        if not self.candidates:
            raise SpecError("at least one candidate per edge is required")
        if self.stem_channels < 1 or self.classes < 2:
            raise SpecError("invalid channel/class plan")
        for idx in self.reduce_after:
            if not 0 <= idx < self.cells:
                raise SpecError(f"reduce_after index {idx} out of range")
        names = [c.name for c in self.candidates]
        if len(set(names)) != len(names):
            raise SpecError("duplicate candidate names")
        # dry-run instantiation catches channel-plan errors early
        import numpy as np
        rng = np.random.default_rng(0)
        for cand in self.candidates:
            self.instantiate_chain(cand, self.stem_channels, rng)

    def instantiate_chain(self, cand: CandidateSpec, channels: int, rng,
                          dtype=None) -> OperationChain:
        import numpy as np
        from . import engine
        dtype = dtype or engine.DEFAULT_DTYPE
        modules = []
        for kind, params in cand.tokens:
            modules.append(make_module(
                kind, channels, channels, rng, dtype=dtype,
                kernel_size=params.get("k", 0),
                dilation=params.get("d", 1),
                stride=params.get("s", 1),
                form=params.get("form", "dense")))
        return OperationChain(name=cand.name, modules=modules)

    def candidate_names(self):
        return [c.name for c in self.candidates]


class ParseError(SpecError):
    """Space file could not be parsed; message carries line and field context."""


_TOKEN_RE = re.compile(r"^(?P<kind>[a-z_]+)(\((?P<params>[^)]*)\))?$")
_KIND_MAP = {
    "identity": IDENTITY, "skip": IDENTITY, "relu": RELU, "bn": BN,
    "avgpool": AVGPOOL, "maxpool": MAXPOOL, "conv": CONV,
}
_PARAM_KEYS = {"k", "d", "s", "form"}
_NO_PARAM_KINDS = {IDENTITY, RELU, BN}


def _parse_token(token: str, lineno: int):
    m = _TOKEN_RE.match(token)
    if not m:
        raise ParseError(f"line {lineno}: malformed module token {token!r}")
    kind_name = m.group("kind")
    kind = _KIND_MAP.get(kind_name)
    if kind is None:
        raise ParseError(f"line {lineno}: unknown module kind {kind_name!r}")
    params = {}
    raw = m.group("params")
    if raw:
        for part in raw.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ParseError(f"line {lineno}: expected key=value in {part!r}")
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in _PARAM_KEYS:
                raise ParseError(f"line {lineno}: unknown field {key!r} for {kind_name}")
            params[key] = value.strip() if key == "form" else int(value)
    if kind in _NO_PARAM_KINDS and params:
        bad = sorted(params)[0]
        raise ParseError(f"line {lineno}: {kind_name} takes no parameters "
                         f"(field {bad!r})")
    if kind in (AVGPOOL, MAXPOOL):
        extra = set(params) - {"k", "s"}
        if extra:
            raise ParseError(f"line {lineno}: {kind_name} does not accept field "
                             f"{sorted(extra)[0]!r}")
        if "k" not in params:
            raise ParseError(f"line {lineno}: {kind_name} requires field 'k'")
    if kind == CONV and "k" not in params:
        raise ParseError(f"line {lineno}: conv requires field 'k'")
    return (kind, params)


def parse_space_text(text: str) -> SpaceSpec:
    header = {"reduce_after": []}
    candidates = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        if key == "candidate":
            name, eq, chain = rest.partition("=")
            if not eq:
                raise ParseError(f"line {lineno}: candidate needs '=' chain")
            name = name.strip()
            if not name:
                raise ParseError(f"line {lineno}: candidate needs a name")
            tokens = [_parse_token(t, lineno) for t in chain.split()]
            candidates.append(CandidateSpec(name=name, tokens=tokens))
        elif key == "name":
            header["name"] = rest
        elif key in ("nodes", "cells", "stem_channels", "classes", "in_channels"):
            try:
                header[key] = int(rest)
            except ValueError:
                raise ParseError(f"line {lineno}: {key} expects an integer") from None
        elif key == "reduce_after":
            header["reduce_after"] = [int(t) for t in rest.split()] if rest else []
        else:
            raise ParseError(f"line {lineno}: unknown header field {key!r}")
    missing = {"name", "nodes", "cells", "stem_channels", "classes"} - set(header)
    if missing:
        raise ParseError(f"missing header fields: {', '.join(sorted(missing))}")
    spec = SpaceSpec(name=header["name"], nodes=header["nodes"],
                     cells=header["cells"], reduce_after=header["reduce_after"],
                     stem_channels=header["stem_channels"],
                     classes=header["classes"], candidates=candidates,
                     in_channels=header.get("in_channels", 3))
    spec.validate()
    return spec


BUILTIN_SPACES = ("nasbench201", "darts_cifar")


def parse_space(source: str | Path) -> SpaceSpec:
    """Parse a space file path or a built-in space name."""
    name = str(source)
    if name in BUILTIN_SPACES:
        text = resources.files("toponas").joinpath(f"spaces/{name}.space").read_text()
        return parse_space_text(text)
    path = Path(source)
    if not path.exists():
        raise ParseError(f"space file not found: {path}")
    return parse_space_text(path.read_text())
