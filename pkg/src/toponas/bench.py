"""Cost scaling versus candidate count, with and without simplification.

Spaces grow from a parameterless base (skip, max pool, avg pool) by
alternately adding separable dilated convolutions and double-stacked
separable convolutions, cycling kernel sizes through {3, 5, 7} and
dilations through {2, 1}.  Each size is searched for one epoch both ways;
full-search time is estimated by multiplying the single-epoch time by the
configured epoch count.
"""

from __future__ import annotations

from dataclasses import dataclass

from .costs import count_modules, normalized_cost
from .datasets import DatasetSpec, load_dataset
from .graph import build_supernet, compile_vanilla
from .search import TrainConfig, bilevel_search
from .spaces import CandidateSpec, SpaceSpec


def _sep_dil_tokens(k: int, d: int):
    return [("relu", {}), ("conv", {"k": k, "d": d, "form": "depthwise"}),
            ("conv", {"k": 1, "form": "pointwise"}), ("bn", {})]


def _double_sep_tokens(k: int):
    stage = [("relu", {}), ("conv", {"k": k, "form": "depthwise"}),
             ("conv", {"k": 1, "form": "pointwise"}), ("bn", {})]
    return stage + stage


def make_scaling_space(n_ops: int, stem_channels: int = 8, classes: int = 4,
                       nodes: int = 2) -> SpaceSpec:
    """Benchmark space with n_ops candidates: 3 parameterless + added convs."""
    if n_ops < 3:
        raise ValueError("scaling spaces start from the 3 parameterless ops")
    candidates = [
        CandidateSpec("skip_connect", [("identity", {})]),
        CandidateSpec("max_pool_3x3", [("maxpool", {"k": 3})]),
        CandidateSpec("avg_pool_3x3", [("avgpool", {"k": 3})]),
    ]
    sizes = (3, 5, 7)
    dils = (1, 2)
    for i in range(n_ops - 3):
        idx = i // 2
        k = sizes[idx % len(sizes)]
        if i % 2 == 0:
            d = dils[(idx // len(sizes)) % len(dils)]
            candidates.append(CandidateSpec(
                f"sep_dil_{k}x{k}_d{d}_{i}", _sep_dil_tokens(k, d)))
        else:
            candidates.append(CandidateSpec(
                f"dbl_sep_{k}x{k}_{i}", _double_sep_tokens(k)))
    spec = SpaceSpec(name=f"scaling_{n_ops}", nodes=nodes, cells=1,
                     reduce_after=[], stem_channels=stem_channels,
                     classes=classes, candidates=candidates)
    spec.validate()
    return spec


@dataclass
class BenchRow:
    method: str
    space: str
    n_ops: int
    conv: int
    non_conv: int
    total: int
    memory_bytes: int
    wall_s: float
    wall_s_extrapolated: float

    def as_dict(self) -> dict:
        return {
            "method": self.method, "space": self.space, "n_ops": self.n_ops,
            "conv": self.conv, "non_conv": self.non_conv, "total": self.total,
            "memory_bytes": self.memory_bytes, "wall_s": self.wall_s,
            "wall_s_extrapolated": self.wall_s_extrapolated,
        }


DEFAULT_BENCH_SIZES = (4, 6, 8, 10, 16)


def _one_epoch_cost(space, simplification, bundle, seed, batch_size):
    net = build_supernet(space, seed=seed)
    if simplification == "full":
        net.simplify()
    sample = net.cells()[0]
    counts = count_modules(sample.graphs[next(iter(sample.graphs))])
    config = TrainConfig(epochs=1, batch_size=batch_size, seed=seed,
                         simplification=simplification,
                         kernel_normalization=(simplification == "full"))
    result = bilevel_search(net, bundle.train, bundle.val, config)
    return counts, result.run_cost


def bench_sizes(sizes=DEFAULT_BENCH_SIZES, seed: int = 0,
                extrapolate_epochs: int = 50, n_examples: int = 64,
                batch_size: int = 8, image_size: int = 12,
                repeats: int = 3) -> list[BenchRow]:
    """One-epoch search cost per size, baseline vs simplified, paired rows.

    Measurements interleave the two methods and keep the fastest of
    ``repeats`` epochs each, so background load hits both sides alike.
    Tracked bytes are deterministic and identical across repeats.
    """
    rows = []
    data_spec = DatasetSpec(source="synthetic-blobs", classes=4, n_train=n_examples,
                            n_test=16, image_size=image_size, split_seed=seed)
    bundle = load_dataset(data_spec)
    for n_ops in sizes:
        space = make_scaling_space(n_ops)
        best = {}
        for _ in range(max(repeats, 1)):
            for method, simplification in (("baseline", "none"),
                                           ("simplified", "full")):
                counts, cost = _one_epoch_cost(space, simplification, bundle,
                                               seed, batch_size)
                prev = best.get(method)
                if prev is None or cost.wall_time_s < prev[1].wall_time_s:
                    best[method] = (counts, cost)
        for method in ("baseline", "simplified"):
            counts, cost = best[method]
            rows.append(BenchRow(
                method=method, space=space.name, n_ops=n_ops,
                conv=counts.conv, non_conv=counts.non_conv, total=counts.total,
                memory_bytes=cost.memory_bytes_peak,
                wall_s=cost.wall_time_s,
                wall_s_extrapolated=cost.wall_time_s * extrapolate_epochs))
    return rows


def bench_csv(rows) -> str:
    import csv
    import io
    fields = ["method", "space", "n_ops", "conv", "non_conv", "total",
              "memory_bytes", "wall_s", "wall_s_extrapolated", "C"]
    pairs: dict[int, list[BenchRow]] = {}
    for r in rows:
        pairs.setdefault(r.n_ops, []).append(r)
    cs: dict[tuple, float] = {}
    for n_ops, group in pairs.items():
        costs = normalized_cost([_RC(r.memory_bytes, r.wall_s) for r in group])
        for r, c in zip(group, costs):
            cs[(n_ops, r.method)] = c.c
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for r in rows:
        d = r.as_dict()
        d["C"] = f"{cs[(r.n_ops, r.method)]:.4f}"
        writer.writerow(d)
    return buf.getvalue()


class _RC:
    def __init__(self, memory_bytes_peak, wall_time_s):
        self.memory_bytes_peak = memory_bytes_peak
        self.wall_time_s = wall_time_s
