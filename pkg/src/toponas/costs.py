"""Search-cost accounting: module counts, memory/time proxies, normalized cost.

The module counting rule: zero and identity are free; ReLU, BN and each
pooling count one non-conv evaluation; a depthwise+pointwise pair counts a
single conv (it is one separable convolution); a dense or dilated conv
counts one conv; a merged conv node counts one conv; nodes shared between
branches are counted once.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .engine import ParameterError, StateError
from .graph import (AVGPOOL, BN, CONV, IDENTITY, MAXPOOL, RELU, ChainNode,
                    EdgeGraph, MergedConvNode, SearchableEdge)


@dataclass
class ModuleCount:
    conv: int = 0
    non_conv: int = 0

    @property
    def total(self) -> int:
        return self.conv + self.non_conv

    def astuple(self) -> tuple:
        return (self.conv, self.non_conv, self.total)

    def __add__(self, other: "ModuleCount") -> "ModuleCount":
        return ModuleCount(self.conv + other.conv, self.non_conv + other.non_conv)


def count_chain(modules) -> ModuleCount:
    count = ModuleCount()
    i = 0
    while i < len(modules):
        m = modules[i]
        if m.kind == IDENTITY:
            i += 1
        elif m.kind in (RELU, BN, AVGPOOL, MAXPOOL):
            count.non_conv += 1
            i += 1
        elif m.kind == CONV:
            if (m.form == "depthwise" and i + 1 < len(modules)
                    and modules[i + 1].kind == CONV
                    and modules[i + 1].form == "pointwise"):
                i += 2
            else:
                i += 1
            count.conv += 1
        else:
            i += 1
    return count


def count_modules(obj) -> ModuleCount:
    """Module evaluations per forward pass of an edge or its compute graph."""
    if isinstance(obj, SearchableEdge):
        total = ModuleCount()
        for cand in obj.candidates:
            total = total + count_chain(cand.modules)
        return total
    if isinstance(obj, EdgeGraph):
        total = ModuleCount()
        for node in obj.nodes():  # deduplicated, so shared chains count once
            if isinstance(node, ChainNode):
                total = total + count_chain(node.modules)
            elif isinstance(node, MergedConvNode):
                total.conv += 1
        return total
    raise ParameterError(f"cannot count modules of {type(obj).__name__}")


@dataclass
class RunCost:
    memory_bytes_peak: int
    wall_time_s: float

    def validate(self) -> None:
        if self.memory_bytes_peak <= 0 or self.wall_time_s <= 0:
            raise StateError("run cost requires a completed run")


@dataclass
class NormalizedCost:
    c: float
    m_ratio: float
    t_ratio: float
    m_min: float
    t_min: float


def normalized_cost(costs) -> list[NormalizedCost]:
    """C = (M/M_min + T/T_min) / 2 with the minima taken over the given runs."""
    costs = list(costs)
    if not costs:
        raise ParameterError("normalized_cost needs at least one run")
    mems = [float(c.memory_bytes_peak) for c in costs]
    times = [float(c.wall_time_s) for c in costs]
    if min(mems) <= 0 or min(times) <= 0:
        raise ParameterError("run costs must be positive")
    m_min = min(mems)
    t_min = min(times)
    out = []
    for m, t in zip(mems, times):
        mr = m / m_min
        tr = t / t_min
        out.append(NormalizedCost(c=0.5 * (mr + tr), m_ratio=mr, t_ratio=tr,
                                  m_min=m_min, t_min=t_min))
    return out


COST_COLUMNS = ["method", "space", "conv", "non_conv", "total",
                "memory_bytes", "wall_s", "C"]


def cost_table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COST_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in COST_COLUMNS})
    return buf.getvalue()


def cost_table_json(rows) -> str:
    return json.dumps([{k: row.get(k) for k in COST_COLUMNS} for row in rows],
                      indent=2)
