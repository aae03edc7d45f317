"""Topology rewrites over searchable-edge graphs.

Two transformations shrink an edge's compute graph without touching its
parameters: prefix/suffix sharing (PMS) evaluates chain segments common to
a subset of candidates once, re-weighting the unique middles by conditional
probabilities so the branch sum is preserved wherever the shared suffix is
linear; floating sharing (FMS) evaluates a common interior segment once
between two weighted stages that reuse the same weights.  The recursive
driver alternates them until nothing is shareable, then hands the graph to
the reparameterization pass.

Only parameter-free module kinds (ReLU, BN, pooling, identity) are eligible
as shared segments; sharing a convolution would tie candidate kernels
together and change what is being searched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (SHAREABLE_KINDS, Beta, ChainNode, CondWeight, Const,
                    EdgeGraph, InputNode, MergedConvNode, Node, RewriteError,
                    SubsetSum, WeightedSumNode, ZeroNode, EPS_P)


@dataclass
class SharedPrefixSuffixGroup:
    """Candidates that share a structural prefix and/or suffix."""
    member_indices: tuple
    nonmember_indices: tuple
    prefix_len: int
    suffix_len: int
    ws_node: WeightedSumNode | None = None

    @property
    def savings(self) -> int:
        return (len(self.member_indices) - 1) * (self.prefix_len + self.suffix_len)


@dataclass
class DerivedWeights:
    """Conditional re-weighting of a shared-branch group (numeric form)."""
    beta1: np.ndarray   # conditional weights over the members
    beta2: np.ndarray   # untouched weights of the non-members
    beta_s: float       # probability mass of the whole group
    p_s: float
    degenerate: bool


@dataclass
class FloatingMatch:
    """Chains sharing an interior segment at the same structural position."""
    member_indices: tuple
    u1_len: int
    shared_len: int
    chain_len: int
    ws_node: WeightedSumNode | None = None

    @property
    def savings(self) -> int:
        return (len(self.member_indices) - 1) * self.shared_len


@dataclass
class RewriteEntry:
    pass_name: str
    savings: int
    before: tuple  # (conv, non_conv, total)
    after: tuple
    detail: str = ""


@dataclass
class RewriteLog:
    entries: list = field(default_factory=list)

    def add(self, entry: RewriteEntry) -> None:
        if entry.after[2] >= entry.before[2]:
            raise RewriteError("rewrite did not reduce the module count")
        self.entries.append(entry)

    def to_json(self) -> list:
        return [
            {
                "pass": e.pass_name,
                "savings": e.savings,
                "before": {"conv": e.before[0], "non_conv": e.before[1], "total": e.before[2]},
                "after": {"conv": e.after[0], "non_conv": e.after[1], "total": e.after[2]},
                "detail": e.detail,
            }
            for e in self.entries
        ]


def _chain_modules(chain) -> list:
    return chain.modules if hasattr(chain, "modules") else list(chain)


def _shareable_prefixes(sig, modules):
    """Signatures of every shareable prefix, shortest first (length >= 1)."""
    out = []
    for ln in range(1, len(modules) + 1):
        if modules[ln - 1].kind not in SHAREABLE_KINDS:
            break
        out.append(sig[:ln])
    return out


def find_pms(candidates) -> SharedPrefixSuffixGroup | None:
    """Best prefix/suffix sharing group among candidate chains, or None.

    Maximizes (|members| - 1) * (prefix_len + suffix_len); among equally
    saving groups the lexicographically smallest member index tuple wins,
    then the longer shared span.
    """
    chains = [_chain_modules(c) for c in candidates]
    if len(chains) < 2:
        return None
    sigs = [tuple(m.signature() for m in ch) for ch in chains]

    prefix_pool = {(): 0}
    suffix_pool = {(): 0}
    for ch, sig in zip(chains, sigs):
        for p in _shareable_prefixes(sig, ch):
            prefix_pool[p] = len(p)
        rev = list(reversed(ch))
        for s in _shareable_prefixes(tuple(reversed(sig)), rev):
            suffix_pool[tuple(reversed(s))] = len(s)

    best = None
    best_key = None
    for p, lp in prefix_pool.items():
        for s, ls in suffix_pool.items():
            if lp + ls == 0:
                continue
            members = tuple(
                i for i, sig in enumerate(sigs)
                if len(sig) >= lp + ls and sig[:lp] == p
                and (ls == 0 or sig[len(sig) - ls:] == s))
            if len(members) < 2:
                continue
            savings = (len(members) - 1) * (lp + ls)
            key = (-savings, members, -(lp + ls))
            if best_key is None or key < best_key:
                best_key = key
                nonmembers = tuple(i for i in range(len(chains)) if i not in members)
                best = SharedPrefixSuffixGroup(members, nonmembers, lp, ls)
    return best


def derive_weights(beta, member_indices) -> DerivedWeights:
    """Split a probability vector into group-conditional and residual weights.

    p_s is the mass of the member set; members are re-weighted by beta/p_s so
    that beta_s * beta1 reconstructs the original member weights; non-members
    keep their weights unchanged.  A vanishing p_s is clamped and flagged.
    """
    beta = np.asarray(beta, dtype=np.float64)
    members = sorted(member_indices)
    if not members:
        raise ValueError("member set must be nonempty")
    p_s = float(beta[members].sum())
    degenerate = p_s < EPS_P
    denom = max(p_s, EPS_P)
    beta1 = beta[members] / denom
    nonmembers = [i for i in range(beta.size) if i not in set(members)]
    beta2 = beta[nonmembers]
    return DerivedWeights(beta1=beta1, beta2=beta2, beta_s=p_s, p_s=p_s,
                          degenerate=degenerate)


def find_fms(candidates) -> FloatingMatch | None:
    """Best shared interior segment among chains, or None.

    Members must agree on total length, segment position and segment
    structure, with nonempty leading and trailing stages.  Maximizes
    (|members| - 1) * segment_len with the PMS tie-breaking rules.
    """
    chains = [_chain_modules(c) for c in candidates]
    if len(chains) < 2:
        return None
    sigs = [tuple(m.signature() for m in ch) for ch in chains]

    windows: dict = {}
    for i, (ch, sig) in enumerate(zip(chains, sigs)):
        n = len(ch)
        for a in range(1, n):
            for ln in range(1, n - a):
                if any(ch[j].kind not in SHAREABLE_KINDS for j in range(a, a + ln)):
                    continue
                key = (n, a, sig[a:a + ln])
                windows.setdefault(key, []).append(i)

    best = None
    best_key = None
    for (n, a, seg), idxs in windows.items():
        members = tuple(sorted(set(idxs)))
        if len(members) < 2:
            continue
        savings = (len(members) - 1) * len(seg)
        key = (-savings, members, -len(seg))
        if best_key is None or key < best_key:
            best_key = key
            best = FloatingMatch(members, u1_len=a, shared_len=len(seg), chain_len=n)
    return best


# ---------------------------------------------------------------------------
# graph-level application
# ---------------------------------------------------------------------------

def _ws_chain_groups(ws: WeightedSumNode):
    """Indices of ChainNode children grouped by their input node."""
    groups: dict[int, list[int]] = {}
    for i, kid in enumerate(ws.kids):
        if isinstance(kid, ChainNode) and kid.modules:
            groups.setdefault(id(kid.child), []).append(i)
    return groups


def _replace_node(graph: EdgeGraph, old: Node, new: Node) -> EdgeGraph:
    """Rebuild the graph with ``old`` swapped for ``new`` (functional rewrite)."""
    memo = {id(old): new}

    def rebuild(n):
        hit = memo.get(id(n))
        if hit is not None:
            return hit
        if isinstance(n, ChainNode):
            child = rebuild(n.child)
            out = n if child is n.child else ChainNode(n.modules, child)
        elif isinstance(n, ZeroNode):
            child = rebuild(n.child)
            out = n if child is n.child else ZeroNode(child, n.channels, n.stride)
        elif isinstance(n, WeightedSumNode):
            kids = [rebuild(k) for k in n.kids]
            out = n if all(a is b for a, b in zip(kids, n.kids)) else \
                WeightedSumNode(kids, n.weights)
        elif isinstance(n, MergedConvNode):
            child = rebuild(n.child)
            out = n if child is n.child else MergedConvNode(
                n.members, child, n.target, n.stride, n.out_channels, n.in_channels)
        else:
            out = n
        memo[id(n)] = out
        return out

    new_output = rebuild(graph.output)
    return EdgeGraph(graph.input, new_output, graph.num_candidates)


def find_pms_in_graph(graph: EdgeGraph) -> SharedPrefixSuffixGroup | None:
    """Best PMS opportunity across every weighted-sum node of the graph."""
    best = None
    for node in graph.nodes():
        if not isinstance(node, WeightedSumNode):
            continue
        for _, idxs in sorted(_ws_chain_groups(node).items(),
                              key=lambda kv: kv[1][0]):
            if len(idxs) < 2:
                continue
            chains = [node.kids[i].modules for i in idxs]
            local = find_pms(chains)
            if local is None:
                continue
            group = SharedPrefixSuffixGroup(
                tuple(idxs[i] for i in local.member_indices),
                tuple(i for i in range(len(node.kids))
                      if i not in set(idxs[j] for j in local.member_indices)),
                local.prefix_len, local.suffix_len, ws_node=node)
            if best is None or group.savings > best.savings:
                best = group
    return best


def find_fms_in_graph(graph: EdgeGraph) -> FloatingMatch | None:
    best = None
    for node in graph.nodes():
        if not isinstance(node, WeightedSumNode):
            continue
        for _, idxs in sorted(_ws_chain_groups(node).items(),
                              key=lambda kv: kv[1][0]):
            if len(idxs) < 2:
                continue
            chains = [node.kids[i].modules for i in idxs]
            local = find_fms(chains)
            if local is None:
                continue
            match = FloatingMatch(
                tuple(idxs[i] for i in local.member_indices),
                local.u1_len, local.shared_len, local.chain_len, ws_node=node)
            if best is None or match.savings > best.savings:
                best = match
    return best


def apply_pms(graph: EdgeGraph, group: SharedPrefixSuffixGroup) -> EdgeGraph:
    """Rewrite one weighted sum so the group's prefix and suffix run once.

    Members become  p_s * suffix( sum_i (beta_i / p_s) * unique_i(prefix(x)) );
    non-members keep their original weights.  The 1/p_s and p_s factors cancel
    through any linear suffix, which is what the exactness suites verify.
    """
    ws = group.ws_node
    if ws is None:
        raise RewriteError("group carries no target node")
    members = list(group.member_indices)
    kids = [ws.kids[i] for i in members]
    if not all(isinstance(k, ChainNode) for k in kids):
        raise RewriteError("group members must be chain nodes")
    common_input = kids[0].child
    if not all(k.child is common_input for k in kids):
        raise RewriteError("group members must share one input")
    lp, ls = group.prefix_len, group.suffix_len

    first = kids[0].modules
    prefix_modules = first[:lp]
    suffix_modules = first[len(first) - ls:] if ls else []

    prefix_node = ChainNode(prefix_modules, common_input) if lp else common_input
    member_weights = [ws.weights[i] for i in members]
    total = SubsetSum(member_weights)
    inner_kids = []
    inner_weights = []
    for kid, w in zip(kids, member_weights):
        mods = kid.modules
        unique = mods[lp:len(mods) - ls] if ls else mods[lp:]
        inner_kids.append(ChainNode(unique, prefix_node))
        inner_weights.append(CondWeight(w, total))
    inner = WeightedSumNode(inner_kids, inner_weights)
    shared_out = ChainNode(suffix_modules, inner) if ls else inner

    new_kids = []
    new_weights = []
    member_set = set(members)
    inserted = False
    for i, (kid, w) in enumerate(zip(ws.kids, ws.weights)):
        if i in member_set:
            if not inserted:
                new_kids.append(shared_out)
                new_weights.append(total)
                inserted = True
            continue
        new_kids.append(kid)
        new_weights.append(w)
    replacement = WeightedSumNode(new_kids, new_weights)
    return _replace_node(graph, ws, replacement)


def apply_fms(graph: EdgeGraph, match: FloatingMatch) -> EdgeGraph:
    """Rewrite matching chains into two weighted stages around one shared segment.

    h(x) = sum_i w_i * u1_i(x);  out = sum_i w_i * u2_i(shared(h(x))).
    Both stages reuse the members' original weights, so a one-hot selection
    reproduces the selected chain exactly.
    """
    ws = match.ws_node
    if ws is None:
        raise RewriteError("match carries no target node")
    members = list(match.member_indices)
    kids = [ws.kids[i] for i in members]
    if not all(isinstance(k, ChainNode) for k in kids):
        raise RewriteError("match members must be chain nodes")
    common_input = kids[0].child
    if not all(k.child is common_input for k in kids):
        raise RewriteError("match members must share one input")
    a, ln = match.u1_len, match.shared_len
    if any(len(k.modules) != match.chain_len for k in kids):
        raise RewriteError("match members must share one chain length")

    member_weights = [ws.weights[i] for i in members]
    stage1 = WeightedSumNode(
        [ChainNode(k.modules[:a], common_input) for k in kids], member_weights)
    shared = ChainNode(kids[0].modules[a:a + ln], stage1)
    stage2 = WeightedSumNode(
        [ChainNode(k.modules[a + ln:], shared) for k in kids], member_weights)

    new_kids = []
    new_weights = []
    member_set = set(members)
    inserted = False
    for i, (kid, w) in enumerate(zip(ws.kids, ws.weights)):
        if i in member_set:
            if not inserted:
                new_kids.append(stage2)
                new_weights.append(Const(1.0))
                inserted = True
            continue
        new_kids.append(kid)
        new_weights.append(w)
    replacement = WeightedSumNode(new_kids, new_weights)
    return _replace_node(graph, ws, replacement)


def simplify_recursive(graph: EdgeGraph) -> tuple[EdgeGraph, RewriteLog]:
    """Apply PMS while possible, then FMS, then merge the remaining conv sums.

    Every application strictly decreases the module count, so the loop
    terminates within the initial count.  Graphs with nothing to share pass
    through with an empty log.
    """
    from .costs import count_modules
    from .reparam import reparameterize

    log = RewriteLog()
    guard = count_modules(graph).total + 1
    for _ in range(max(guard, 1)):
        before = count_modules(graph)
        group = find_pms_in_graph(graph)
        if group is not None:
            graph = apply_pms(graph, group)
            after = count_modules(graph)
            log.add(RewriteEntry("pms", group.savings, before.astuple(),
                                 after.astuple(),
                                 f"members={list(group.member_indices)} "
                                 f"prefix={group.prefix_len} suffix={group.suffix_len}"))
            continue
        match = find_fms_in_graph(graph)
        if match is not None:
            graph = apply_fms(graph, match)
            after = count_modules(graph)
            log.add(RewriteEntry("fms", match.savings, before.astuple(),
                                 after.astuple(),
                                 f"members={list(match.member_indices)} "
                                 f"shared_len={match.shared_len}"))
            continue
        graph = reparameterize(graph)
        after = count_modules(graph)
        if after.total < before.total:
            log.add(RewriteEntry("reparam", before.total - after.total,
                                 before.astuple(), after.astuple()))
        break
    return graph, log
