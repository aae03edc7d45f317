"""Cell-based search spaces as executable DAGs.

A supernet is a stem, a stack of cells (with fixed downsampling blocks in
between), and a classifier head.  Each cell is a small DAG whose edges
carry a set of candidate operation chains relaxed into a softmax-weighted
sum.  Edges are compiled to :class:`EdgeGraph` compute graphs: vanilla
compilation mirrors the weighted-sum semantics directly, and the rewrite
passes in :mod:`toponas.simplify` / :mod:`toponas.reparam` produce
structurally cheaper graphs over the same parameters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import (BNState, DimensionError, ParameterError, Parameter,
                     Tensor, constant)

EPS_P = 1e-8  # clamp for sums of branch probabilities used as divisors

ZERO = "zero"
IDENTITY = "identity"
RELU = "relu"
BN = "bn"
AVGPOOL = "avgpool"
MAXPOOL = "maxpool"
CONV = "conv"

SHAREABLE_KINDS = frozenset({IDENTITY, RELU, BN, AVGPOOL, MAXPOOL})
CONV_FORMS = ("dense", "depthwise", "pointwise")


class SpecError(Exception):
    """Search-space definition is inconsistent."""


class RewriteError(Exception):
    """A graph rewrite was applied with stale or mismatched metadata."""


_module_ids = itertools.count()


class BasicModule:
    """Atomic compute unit: the building block candidate chains are made of."""

    __slots__ = ("kind", "in_channels", "out_channels", "kernel_size", "dilation",
                 "stride", "form", "kernel", "bn_state", "uid")

    def __init__(self, kind, in_channels, out_channels, kernel_size=0, dilation=1,
                 stride=1, form="dense", kernel=None, bn_state=None):
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.stride = stride
        self.form = form
        self.kernel = kernel
        self.bn_state = bn_state
        self.uid = next(_module_ids)

    def signature(self):
        """Structural identity: kind plus all hyperparameters, never weights."""
        return (self.kind, self.in_channels, self.out_channels, self.kernel_size,
                self.dilation, self.stride, self.form)

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    def effective_size(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    def label(self) -> str:
        if self.kind == CONV:
            tag = {"dense": "", "depthwise": " dw", "pointwise": " pw"}[self.form]
            d = f" d{self.dilation}" if self.dilation > 1 else ""
            s = f" s{self.stride}" if self.stride > 1 else ""
            return f"conv{self.kernel_size}x{self.kernel_size}{tag}{d}{s}"
        if self.kind in (AVGPOOL, MAXPOOL):
            return f"{self.kind}{self.kernel_size}x{self.kernel_size}"
        return self.kind

    def __repr__(self):
        return f"BasicModule({self.label()}, {self.in_channels}->{self.out_channels})"


def make_module(kind: str, in_channels: int, out_channels: int, rng,
                dtype=engine.DEFAULT_DTYPE, kernel_size: int = 0, dilation: int = 1,
                stride: int = 1, form: str = "dense") -> BasicModule:
    """Instantiate a module, allocating its kernel or BN statistics as needed."""
    if kind in (IDENTITY, RELU):
        if in_channels != out_channels:
            raise SpecError(f"{kind} cannot change channel count")
        return BasicModule(kind, in_channels, out_channels, stride=1)
    if kind == BN:
        if in_channels != out_channels:
            raise SpecError("bn cannot change channel count")
        return BasicModule(kind, in_channels, out_channels,
                           bn_state=BNState(in_channels, dtype=dtype))
    if kind in (AVGPOOL, MAXPOOL):
        if in_channels != out_channels:
            raise SpecError("pooling cannot change channel count")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise SpecError("pooling kernel size must be odd")
        return BasicModule(kind, in_channels, out_channels, kernel_size=kernel_size,
                           stride=stride)
    if kind == CONV:
        if form not in CONV_FORMS:
            raise SpecError(f"unknown conv form {form!r}")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise SpecError("conv kernel size must be odd")
        if form == "depthwise":
            if in_channels != out_channels:
                raise SpecError("depthwise conv requires in == out channels")
            shape = (out_channels, 1, kernel_size, kernel_size)
            fan_in = kernel_size * kernel_size
        elif form == "pointwise":
            if kernel_size != 1:
                raise SpecError("pointwise conv has kernel size 1")
            shape = (out_channels, in_channels, 1, 1)
            fan_in = in_channels
        else:
            shape = (out_channels, in_channels, kernel_size, kernel_size)
            fan_in = in_channels * kernel_size * kernel_size
        bound = float(np.sqrt(6.0 / fan_in))
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        kernel = Parameter(Tensor(data, dtype=dtype), role="weight",
                           name=f"conv{next(_module_ids)}")
        return BasicModule(CONV, in_channels, out_channels, kernel_size=kernel_size,
                           dilation=dilation, stride=stride, form=form, kernel=kernel)
    raise SpecError(f"unknown module kind {kind!r}")


@dataclass
class EvalContext:
    """Per-forward switches shared by every node evaluation."""
    training: bool = True
    kernel_norm: bool = False
    use_cache: bool = False
    degenerate_events: int = 0


def apply_module(m: BasicModule, x: Tensor, ctx: EvalContext) -> Tensor:
    if m.kind == IDENTITY:
        return x
    if m.kind == RELU:
        return engine.relu(x)
    if m.kind == BN:
        return engine.batch_norm(x, m.bn_state, training=ctx.training)
    if m.kind == AVGPOOL:
        return engine.avg_pool(x, m.kernel_size, stride=m.stride)
    if m.kind == MAXPOOL:
        return engine.max_pool(x, m.kernel_size, stride=m.stride)
    if m.kind == CONV:
        groups = m.in_channels if m.form == "depthwise" else 1
        return engine.conv2d(x, m.kernel.value, stride=m.stride, dilation=m.dilation,
                             groups=groups, padding=m.padding)
    raise SpecError(f"unknown module kind {m.kind!r}")


@dataclass
class OperationChain:
    """Series composition of basic modules; an empty chain is the zero op."""
    name: str
    modules: list

    def signature(self):
        return tuple(m.signature() for m in self.modules)

    @property
    def is_zero(self) -> bool:
        return len(self.modules) == 0

    def __len__(self):
        return len(self.modules)


def chain_forward(modules, x: Tensor, ctx: EvalContext) -> Tensor:
    for m in modules:
        x = apply_module(m, x, ctx)
    return x


# ---------------------------------------------------------------------------
# weight expressions over the edge probability vector
# ---------------------------------------------------------------------------

class WeightExpr:
    def evaluate(self, beta: Tensor, ctx: EvalContext, wcache: dict) -> Tensor:
        """Scalar tensor for the current edge probabilities.

        ``wcache`` memoizes shared sub-expressions (group totals) within one
        edge forward, where the probability vector is fixed.
        """
        hit = wcache.get(id(self))
        if hit is None:
            hit = self._evaluate(beta, ctx, wcache)
            wcache[id(self)] = hit
        return hit

    def _evaluate(self, beta, ctx, wcache):
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError


class Const(WeightExpr):
    def __init__(self, value: float = 1.0):
        self.value = value

    def _evaluate(self, beta, ctx, wcache):
        return constant(self.value, dtype=beta.data.dtype)

    def describe(self):
        return f"{self.value:g}"


class Beta(WeightExpr):
    def __init__(self, index: int):
        self.index = index

    def _evaluate(self, beta, ctx, wcache):
        return engine.index_select(beta, self.index)

    def describe(self):
        return f"b{self.index}"


class SubsetSum(WeightExpr):
    def __init__(self, parts: list):
        self.parts = list(parts)

    def _evaluate(self, beta, ctx, wcache):
        if all(isinstance(p, Beta) for p in self.parts):
            return engine.subset_sum(beta, [p.index for p in self.parts])
        total = self.parts[0].evaluate(beta, ctx, wcache)
        for p in self.parts[1:]:
            total = engine.add(total, p.evaluate(beta, ctx, wcache))
        return total

    def describe(self):
        return "(" + "+".join(p.describe() for p in self.parts) + ")"


class CondWeight(WeightExpr):
    """Numerator weight divided by a clamped group total (conditional probability)."""

    def __init__(self, num: WeightExpr, den: SubsetSum):
        self.num = num
        self.den = den

    def _evaluate(self, beta, ctx, wcache):
        total = self.den.evaluate(beta, ctx, wcache)
        if float(total.data) < EPS_P:
            ctx.degenerate_events += 1
        key = (id(self.den), "clamped")
        inv = wcache.get(key)
        if inv is None:
            inv = engine.reciprocal(engine.clamp_min(total, EPS_P))
            wcache[key] = inv
        return engine.mul(self.num.evaluate(beta, ctx, wcache), inv)

    def describe(self):
        return f"{self.num.describe()}/{self.den.describe()}"


# ---------------------------------------------------------------------------
# compute-graph nodes
# ---------------------------------------------------------------------------

_node_ids = itertools.count()


class Node:
    def __init__(self):
        self.uid = next(_node_ids)

    def children(self):
        return ()

    def label(self) -> str:
        raise NotImplementedError


class InputNode(Node):
    def label(self):
        return "input"


class ZeroNode(Node):
    """Emits zeros shaped like the edge output (spatially reduced when strided)."""

    def __init__(self, child: Node, channels: int, stride: int):
        super().__init__()
        self.child = child
        self.channels = channels
        self.stride = stride

    def children(self):
        return (self.child,)

    def label(self):
        return "zero"


class ChainNode(Node):
    """Applies a module chain to its child; an empty chain passes through."""

    def __init__(self, modules, child: Node):
        super().__init__()
        self.modules = list(modules)
        self.child = child

    def children(self):
        return (self.child,)

    def label(self):
        if not self.modules:
            return "pass"
        return "-".join(m.label() for m in self.modules)


class WeightedSumNode(Node):
    def __init__(self, children, weights):
        super().__init__()
        if len(children) != len(weights):
            raise RewriteError("weighted-sum arity mismatch")
        self.kids = list(children)
        self.weights = list(weights)

    def children(self):
        return tuple(self.kids)

    def label(self):
        return "sum"


class MergedMember:
    """One branch folded into a merged convolution: a linear conv chain + weight."""

    __slots__ = ("modules", "weight")

    def __init__(self, modules, weight: WeightExpr):
        self.modules = list(modules)
        self.weight = weight


class MergedConvNode(Node):
    """Single convolution whose kernel is a weighted sum of unified branch kernels."""

    def __init__(self, members, child: Node, target: int, stride: int,
                 out_channels: int, in_channels: int):
        super().__init__()
        self.members = list(members)
        self.child = child
        self.target = target
        self.stride = stride
        self.out_channels = out_channels
        self.in_channels = in_channels
        self._cache_key = None
        self._cache_kernel = None

    def children(self):
        return (self.child,)

    def label(self):
        return f"conv merged x{len(self.members)} t{self.target}"

    def cache_token(self, alpha_version: int, kernel_norm: bool):
        versions = []
        for mem in self.members:
            for m in mem.modules:
                versions.append(m.kernel.version)
        return (alpha_version, kernel_norm, tuple(versions))


class EdgeGraph:
    """Executable compute graph for one searchable edge."""

    def __init__(self, input_node: InputNode, output: Node, num_candidates: int):
        self.input = input_node
        self.output = output
        self.num_candidates = num_candidates

    def nodes(self):
        """All nodes reachable from the output, deduplicated, children first."""
        seen = set()
        order = []

        def visit(n):
            if id(n) in seen:
                return
            seen.add(id(n))
            for c in n.children():
                visit(c)
            order.append(n)

        visit(self.output)
        return order

    def forward(self, x: Tensor, beta: Tensor, ctx: EvalContext,
                alpha_version: int = -1) -> Tensor:
        cache: dict[int, Tensor] = {}
        wcache: dict = {}
        return _eval_node(self.output, self.input, x, beta, ctx, cache, wcache,
                          alpha_version)


def _eval_node(node, input_node, x, beta, ctx, cache, wcache, alpha_version):
    hit = cache.get(id(node))
    if hit is not None:
        return hit
    if node is input_node or isinstance(node, InputNode):
        out = x
    elif isinstance(node, ZeroNode):
        base = _eval_node(node.child, input_node, x, beta, ctx, cache, wcache,
                          alpha_version)
        out = engine.zeros_like_output(base, node.channels, node.stride)
    elif isinstance(node, ChainNode):
        base = _eval_node(node.child, input_node, x, beta, ctx, cache, wcache,
                          alpha_version)
        out = chain_forward(node.modules, base, ctx)
    elif isinstance(node, WeightedSumNode):
        terms = []
        weights = []
        for kid, wexpr in zip(node.kids, node.weights):
            if isinstance(kid, ZeroNode):
                continue
            terms.append(_eval_node(kid, input_node, x, beta, ctx, cache, wcache,
                                    alpha_version))
            weights.append(wexpr.evaluate(beta, ctx, wcache))
        if not terms:
            # edge made of zero candidates only
            out = engine.zeros_like_output(x, x.data.shape[1], 1)
        else:
            out = engine.weighted_sum(terms, weights)
    elif isinstance(node, MergedConvNode):
        base = _eval_node(node.child, input_node, x, beta, ctx, cache, wcache,
                          alpha_version)
        out = _merged_conv_forward(node, base, beta, ctx, wcache, alpha_version)
    else:
        raise RewriteError(f"cannot evaluate node {node!r}")
    cache[id(node)] = out
    return out


def _member_kernel(modules, ctx: EvalContext) -> tuple[Tensor, int]:
    """Dense kernel Tensor for a linear conv chain plus its dilation descriptor.

    Supports a single conv of any form or a depthwise->pointwise pair; the
    composed kernel keeps the leading module's dilation so embedding can
    place taps on the right lattice.
    """
    first = modules[0]
    if len(modules) == 1:
        m = first
        if m.form == "dense" or m.form == "pointwise":
            k = m.kernel.value
        else:  # single depthwise: lift to a dense kernel with zero cross-channel taps
            c = m.in_channels
            eye = constant(np.eye(c, dtype=m.kernel.value.data.dtype).reshape(c, c, 1, 1),
                           dtype=m.kernel.value.data.dtype)
            kd = engine.reshape(m.kernel.value, (1, c, m.kernel_size, m.kernel_size))
            k = engine.mul(eye, kd)
        dilation = m.dilation
    elif (len(modules) == 2 and first.form == "depthwise"
          and modules[1].form == "pointwise"):
        dw, pw = first, modules[1]
        c = dw.in_channels
        kd = engine.reshape(dw.kernel.value, (1, c, dw.kernel_size, dw.kernel_size))
        k = engine.mul(pw.kernel.value, kd)  # (O,C,1,1) * (1,C,k,k) -> (O,C,k,k)
        dilation = dw.dilation
    else:
        raise RewriteError("unsupported conv chain for merging")
    if ctx.kernel_norm:
        k = normalize_kernel_tensor(k)
    return k, dilation


def normalize_kernel_tensor(k: Tensor, eps_std: float = 1e-5) -> Tensor:
    """Standardize a kernel to zero mean / unit deviation over all elements."""
    return engine.standardize(k, eps_std)


def _merged_conv_forward(node: MergedConvNode, x: Tensor, beta: Tensor,
                         ctx: EvalContext, wcache: dict, alpha_version: int) -> Tensor:
    pad = (node.target - 1) // 2
    if ctx.use_cache and engine.active_tape() is None and alpha_version >= 0:
        token = node.cache_token(alpha_version, ctx.kernel_norm)
        if node._cache_key != token:
            node._cache_kernel = _build_merged_kernel(node, beta, ctx, wcache)
            node._cache_key = token
        merged = node._cache_kernel
    else:
        merged = _build_merged_kernel(node, beta, ctx, wcache)
    return engine.conv2d(x, merged, stride=node.stride, dilation=1, groups=1,
                         padding=pad)


def _merged_weight_vector(node: MergedConvNode, beta: Tensor,
                          ctx: EvalContext) -> Tensor | None:
    """Fused weight vector when every member is beta_i over one group total."""
    exprs = node.members[0].weight
    if not isinstance(exprs, CondWeight):
        return None
    den = exprs.den
    num_indices = []
    for mem in node.members:
        w = mem.weight
        if not (isinstance(w, CondWeight) and w.den is den
                and isinstance(w.num, Beta)):
            return None
        num_indices.append(w.num.index)
    if not all(isinstance(p, Beta) for p in den.parts):
        return None
    den_indices = [p.index for p in den.parts]
    if float(beta.data[np.asarray(den_indices, dtype=np.intp)].sum()) < EPS_P:
        ctx.degenerate_events += 1
    return engine.normalized_subset(beta, num_indices, den_indices, EPS_P)


def _build_merged_kernel(node: MergedConvNode, beta: Tensor, ctx: EvalContext,
                         wcache: dict) -> Tensor:
    unified = []
    for mem in node.members:
        k, dilation = _member_kernel(mem.modules, ctx)
        if k.data.shape[-1] != node.target or dilation != 1:
            k = engine.embed_kernel(k, node.target, dilation)
        unified.append(k)
    weights = _merged_weight_vector(node, beta, ctx)
    if weights is None:
        weights = [mem.weight.evaluate(beta, ctx, wcache) for mem in node.members]
    return engine.weighted_sum(unified, weights)


# ---------------------------------------------------------------------------
# searchable edges and cells
# ---------------------------------------------------------------------------

class SearchableEdge:
    """Choice among candidate chains, relaxed to a softmax-weighted sum."""

    def __init__(self, candidates, alpha: Parameter, stride: int,
                 in_channels: int, out_channels: int):
        if len(candidates) < 1:
            raise SpecError("edge needs at least one candidate")
        if alpha.value.data.shape != (len(candidates),):
            raise SpecError("alpha length must match candidate count")
        self.candidates = list(candidates)
        self.alpha = alpha
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels

    def beta(self) -> Tensor:
        return engine.softmax(self.alpha.value)


def compile_vanilla(edge: SearchableEdge) -> EdgeGraph:
    """Weighted sum of the candidate chains, exactly as declared."""
    inp = InputNode()
    kids = []
    weights = []
    for i, cand in enumerate(edge.candidates):
        if cand.is_zero:
            kids.append(ZeroNode(inp, edge.out_channels, edge.stride))
        else:
            kids.append(ChainNode(cand.modules, inp))
        weights.append(Beta(i))
    out = WeightedSumNode(kids, weights)
    return EdgeGraph(inp, out, len(edge.candidates))


def edge_forward_vanilla(edge: SearchableEdge, x: Tensor, alpha=None,
                         ctx: EvalContext | None = None) -> Tensor:
    """Direct evaluation of the relaxed edge: sum_i softmax(alpha)_i * o_i(x)."""
    ctx = ctx or EvalContext()
    avec = alpha if alpha is not None else edge.alpha.value
    beta = engine.softmax(avec if isinstance(avec, Tensor) else Tensor(
        avec, dtype=edge.alpha.value.data.dtype))
    terms = []
    weights = []
    for i, cand in enumerate(edge.candidates):
        if cand.is_zero:
            continue
        terms.append(chain_forward(cand.modules, x, ctx))
        weights.append(engine.index_select(beta, i))
    if not terms:
        return engine.zeros_like_output(x, edge.out_channels, edge.stride)
    return engine.weighted_sum(terms, weights)


@dataclass
class Genotype:
    """One selected operation name per edge of the cell template."""
    n_nodes: int
    ops: dict  # (src, dst) -> candidate name

    def serialize(self) -> str:
        parts = []
        for dst in range(1, self.n_nodes):
            inner = "|".join(f"{self.ops[(src, dst)]}~{src}" for src in range(dst))
            parts.append(f"|{inner}|")
        return "+".join(parts)

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        ops = {}
        groups = text.split("+")
        for dst0, group in enumerate(groups):
            dst = dst0 + 1
            body = group.strip().strip("|")
            if not body:
                raise SpecError(f"empty genotype group {group!r}")
            for token in body.split("|"):
                name, _, src = token.rpartition("~")
                if not name:
                    raise SpecError(f"malformed genotype token {token!r}")
                ops[(int(src), dst)] = name
        return cls(n_nodes=len(groups) + 1, ops=ops)


class Cell:
    """DAG over feature nodes; one searchable edge per (src, dst) pair, src < dst."""

    def __init__(self, n_nodes: int, edges: dict):
        self.n_nodes = n_nodes
        self.edges = edges  # (src, dst) -> SearchableEdge
        self.graphs = {slot: compile_vanilla(e) for slot, e in edges.items()}

    def forward(self, x: Tensor, betas: dict, ctx: EvalContext,
                alpha_versions: dict | None = None) -> Tensor:
        states = [x]
        for dst in range(1, self.n_nodes):
            acc = None
            for src in range(dst):
                slot = (src, dst)
                edge = self.edges[slot]
                ver = -1 if alpha_versions is None else alpha_versions.get(slot, -1)
                term = self.graphs[slot].forward(states[src], betas[slot], ctx, ver)
                acc = term if acc is None else engine.add(acc, term)
            states.append(acc)
        return states[-1]


class ReductionBlock:
    """Fixed stride-2 downsampling between cell stages: conv3x3 /2 + BN + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype):
        self.conv = make_module(CONV, in_channels, out_channels, rng, dtype=dtype,
                                kernel_size=3, stride=2)
        self.bn = make_module(BN, out_channels, out_channels, rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: EvalContext) -> Tensor:
        x = apply_module(self.conv, x, ctx)
        x = apply_module(self.bn, x, ctx)
        return engine.relu(x)

    def parameters(self):
        return [self.conv.kernel]

    def bn_states(self):
        return [self.bn.bn_state]


class Supernet:
    """Stem + cell stack + linear head, with architecture parameters shared
    across cells (one alpha vector per edge slot of the cell template)."""

    def __init__(self, spec, seed: int = 0, dtype=engine.DEFAULT_DTYPE):
        from .spaces import SpaceSpec  # local import to avoid a cycle
        assert isinstance(spec, SpaceSpec)
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.dtype = dtype
        c = spec.stem_channels
        self.stem_conv = make_module(CONV, spec.in_channels, c, rng, dtype=dtype,
                                     kernel_size=3)
        self.stem_bn = make_module(BN, c, c, rng, dtype=dtype)

        self.alphas: dict = {}
        n = spec.nodes
        m = len(spec.candidates)
        for src in range(n):
            for dst in range(src + 1, n):
                self.alphas[(src, dst)] = Parameter(
                    Tensor(np.zeros(m, dtype=dtype), dtype=dtype),
                    role="arch", name=f"alpha_{src}_{dst}")

        self.layers: list = []
        width = c
        for idx in range(spec.cells):
            self.layers.append(self._build_cell(width, rng))
            if idx in spec.reduce_after and idx != spec.cells - 1:
                self.layers.append(ReductionBlock(width, width * 2, rng, dtype))
                width *= 2
        head_bound = float(np.sqrt(1.0 / width))
        self.head_w = Parameter(Tensor(
            rng.uniform(-head_bound, head_bound, size=(width, spec.classes)).astype(dtype)),
            role="weight", name="head_w")
        self.head_b = Parameter(Tensor(np.zeros(spec.classes, dtype=dtype)),
                                role="weight", name="head_b")
        self.rewrite_log = None

    def _build_cell(self, width: int, rng) -> Cell:
        edges = {}
        for slot, alpha in self.alphas.items():
            chains = [self.spec.instantiate_chain(c, width, rng, self.dtype)
                      for c in self.spec.candidates]
            edges[slot] = SearchableEdge(chains, alpha, stride=1,
                                         in_channels=width, out_channels=width)
        return Cell(self.spec.nodes, edges)

    def cells(self):
        return [l for l in self.layers if isinstance(l, Cell)]

    def forward(self, x: Tensor, ctx: EvalContext) -> Tensor:
        betas = {slot: engine.softmax(a.value) for slot, a in self.alphas.items()}
        versions = {slot: a.version for slot, a in self.alphas.items()}
        h = apply_module(self.stem_conv, x, ctx)
        h = apply_module(self.stem_bn, h, ctx)
        for layer in self.layers:
            if isinstance(layer, Cell):
                h = layer.forward(h, betas, ctx, versions)
            else:
                h = layer.forward(h, ctx)
        pooled = engine.tmean(h, axis=(2, 3))  # (N, C)
        logits = engine.matmul(pooled, self.head_w.value)
        return engine.add(logits, self.head_b.value)

    def parameters(self, role: str | None = None):
        params = [self.stem_conv.kernel, self.head_w, self.head_b]
        for layer in self.layers:
            if isinstance(layer, Cell):
                for edge in layer.edges.values():
                    for cand in edge.candidates:
                        for m in cand.modules:
                            if m.kernel is not None:
                                params.append(m.kernel)
            else:
                params.extend(layer.parameters())
        if role == "weight":
            return params
        arch = list(self.alphas.values())
        if role == "arch":
            return arch
        return params + arch

    def bn_states(self):
        states = [self.stem_bn.bn_state]
        for layer in self.layers:
            if isinstance(layer, Cell):
                for edge in layer.edges.values():
                    for cand in edge.candidates:
                        for m in cand.modules:
                            if m.bn_state is not None:
                                states.append(m.bn_state)
            else:
                states.extend(layer.bn_states())
        return states

    def persistent_bytes(self) -> int:
        total = sum(p.value.data.nbytes for p in self.parameters())
        total += sum(s.nbytes for s in self.bn_states())
        return total

    def simplify(self):
        """Rewrite every cell-edge graph in place; returns the per-edge log."""
        from .simplify import simplify_recursive
        log = None
        for cell in self.cells():
            for slot, graph in cell.graphs.items():
                new_graph, this_log = simplify_recursive(graph)
                cell.graphs[slot] = new_graph
                if log is None:
                    log = this_log
        self.rewrite_log = log
        return log


def build_supernet(spec, seed: int = 0, dtype=engine.DEFAULT_DTYPE) -> Supernet:
    """Supernet with Kaiming-uniform kernels and zero-initialized alphas."""
    return Supernet(spec, seed=seed, dtype=dtype)


def discretize(supernet: Supernet, exclude_zero: bool = True) -> Genotype:
    """Argmax candidate per edge; Zero is skipped unless explicitly allowed.
    Ties resolve to the lowest candidate index."""
    ops = {}
    sample_cell = supernet.cells()[0]
    for slot, alpha in supernet.alphas.items():
        edge = sample_cell.edges[slot]
        beta = engine.softmax(alpha.value).data
        best, best_val = None, -1.0
        for i, cand in enumerate(edge.candidates):
            if exclude_zero and cand.is_zero:
                continue
            if beta[i] > best_val:
                best, best_val = i, float(beta[i])
        if best is None:
            best = 0
        ops[slot] = edge.candidates[best].name
    return Genotype(n_nodes=supernet.spec.nodes, ops=ops)


# ---------------------------------------------------------------------------
# DOT emission
# ---------------------------------------------------------------------------

def _dot_escape(s: str) -> str:
    return s.replace('"', r'\"')


def emit_dot(obj) -> str:
    """Render an EdgeGraph or Cell as a DOT digraph."""
    lines = ["digraph G {"]
    if isinstance(obj, EdgeGraph):
        nodes = obj.nodes()
        parents: dict[int, int] = {}
        for n in nodes:
            for c in n.children():
                parents[id(c)] = parents.get(id(c), 0) + 1
        for n in nodes:
            label = n.label()
            if parents.get(id(n), 0) > 1 and not isinstance(n, InputNode):
                label += " (shared)"
            lines.append(f'  n{n.uid} [label="{_dot_escape(label)}"];')
        for n in nodes:
            for c in n.children():
                lines.append(f"  n{c.uid} -> n{n.uid};")
        lines.append(f'  out [label="output"];')
        lines.append(f"  n{obj.output.uid} -> out;")
    elif isinstance(obj, Cell):
        for i in range(obj.n_nodes):
            lines.append(f'  v{i} [label="node {i}"];')
        for (src, dst), edge in sorted(obj.edges.items()):
            names = ",".join(c.name for c in edge.candidates)
            lines.append(f'  v{src} -> v{dst} [label="{_dot_escape(names)}"];')
    else:
        raise ParameterError(f"cannot render {type(obj).__name__} as DOT")
    lines.append("}")
    return "\n".join(lines)
