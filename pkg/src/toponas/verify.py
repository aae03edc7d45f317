"""Verification suites behind ``toponas verify``.

Four fixed-seed suites: ``counts`` replays the module-count trajectory of
the built-in edges; ``equivalence`` checks the exactness regimes of the
rewrites; ``gradcheck`` compares tape gradients with central differences;
``degeneracy`` demonstrates that a merged branch without kernel
normalization admits a kernel construction that makes every architecture
weight vector optimal, and that normalization breaks the construction.

Each check reports a margin and its tolerance so reports stay auditable.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import F32, F64, GradTape, Parameter, Tensor, grad_check
from .graph import (EvalContext, SearchableEdge, compile_vanilla,
                    edge_forward_vanilla, make_module, OperationChain)
from .costs import count_modules
from .reparam import reparameterize
from .simplify import (SharedPrefixSuffixGroup, apply_pms, find_pms_in_graph,
                       simplify_recursive)
from .spaces import parse_space


def _check(name: str, margin: float, tol: float, larger_is_better: bool = False):
    passed = margin > tol if larger_is_better else margin <= tol
    return {"check": name, "margin": float(margin), "tolerance": float(tol),
            "mode": "min" if larger_is_better else "max", "passed": bool(passed)}


def _summarize(name: str, checks: list) -> dict:
    return {"suite": name, "passed": all(c["passed"] for c in checks),
            "checks": checks}


def _build_edge(space_name: str, channels: int, seed: int, dtype):
    spec = parse_space(space_name)
    rng = np.random.default_rng(seed)
    chains = [spec.instantiate_chain(c, channels, rng, dtype) for c in spec.candidates]
    alpha = Parameter(Tensor(np.zeros(len(chains), dtype=dtype)), role="arch")
    return SearchableEdge(chains, alpha, stride=1, in_channels=channels,
                          out_channels=channels)


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------

DARTS_TRAJECTORY = [(6, 14, 20), (6, 8, 14), (6, 6, 12), (3, 6, 9)]


def suite_counts(seed: int = 0) -> dict:
    checks = []
    edge = _build_edge("darts_cifar", 4, seed, F32)
    graph = compile_vanilla(edge)
    graph2, log = simplify_recursive(graph)
    trajectory = [count_modules(graph).astuple()] + [e.after for e in log.entries]
    ok = trajectory == DARTS_TRAJECTORY
    checks.append({"check": "darts_trajectory", "margin": 0.0 if ok else 1.0,
                   "tolerance": 0.0, "mode": "max", "passed": ok,
                   "trajectory": trajectory})
    checks.append(_check("darts_final_conv",
                         abs(count_modules(graph2).conv - 3), 0))

    edge201 = _build_edge("nasbench201", 4, seed, F32)
    g201 = compile_vanilla(edge201)
    g201s, log201 = simplify_recursive(g201)
    checks.append(_check("nb201_conv_before", abs(count_modules(g201).conv - 2), 0))
    checks.append(_check("nb201_conv_after", abs(count_modules(g201s).conv - 1), 0))
    passes = [e.pass_name for e in log201.entries]
    checks.append({"check": "nb201_log_passes", "margin": 0.0, "tolerance": 0.0,
                   "mode": "max", "passed": passes == ["pms", "reparam"],
                   "passes": passes})
    return _summarize("counts", checks)


# ---------------------------------------------------------------------------
# equivalence
# ---------------------------------------------------------------------------

def _forward_pair(vanilla, rewritten, x, beta, training=True):
    y1 = vanilla.forward(x, beta, EvalContext(training=training))
    y2 = rewritten.forward(x, beta, EvalContext(training=training))
    return y1.data, y2.data


def suite_equivalence(seed: int = 0, draws: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    checks = []
    c = 4

    # prefix-only sharing is exact for every beta (the p_s factors cancel)
    def mk(kind, **kw):
        return make_module(kind, c, c, rng, dtype=F32, **kw)

    chains = [
        OperationChain("a", [mk("relu"), mk("conv", kernel_size=3)]),
        OperationChain("b", [mk("relu"), mk("conv", kernel_size=1)]),
        OperationChain("c", [mk("relu"), mk("avgpool", kernel_size=3)]),
    ]
    alpha = Parameter(Tensor(np.zeros(3, dtype=F32)), role="arch")
    edge = SearchableEdge(chains, alpha, stride=1, in_channels=c, out_channels=c)
    vanilla = compile_vanilla(edge)
    group = find_pms_in_graph(vanilla)
    assert group is not None and group.prefix_len == 1 and group.suffix_len == 0
    rewritten = apply_pms(vanilla, group)
    worst = 0.0
    for _ in range(draws):
        x = Tensor(rng.standard_normal((2, c, 8, 8)).astype(F32))
        b = rng.random(3).astype(F32)
        b /= b.sum()
        y1, y2 = _forward_pair(vanilla, rewritten, x, Tensor(b))
        worst = max(worst, float(np.abs(y1 - y2).max()))
    checks.append(_check("prefix_sharing_exact_f32", worst, 1e-6))

    # a linear (bias-free conv) suffix shared as one instance stays exact
    shared_suffix = mk("conv", kernel_size=3)
    chains2 = [
        OperationChain("a", [mk("relu"), mk("conv", kernel_size=3), shared_suffix]),
        OperationChain("b", [mk("relu"), mk("conv", kernel_size=1), shared_suffix]),
    ]
    alpha2 = Parameter(Tensor(np.zeros(2, dtype=F32)), role="arch")
    edge2 = SearchableEdge(chains2, alpha2, stride=1, in_channels=c, out_channels=c)
    vanilla2 = compile_vanilla(edge2)
    group2 = SharedPrefixSuffixGroup((0, 1), (), prefix_len=1, suffix_len=1,
                                     ws_node=vanilla2.output)
    rewritten2 = apply_pms(vanilla2, group2)
    worst = 0.0
    for _ in range(draws):
        x = Tensor(rng.standard_normal((2, c, 8, 8)).astype(F32))
        b = rng.random(2).astype(F32)
        b /= b.sum()
        y1, y2 = _forward_pair(vanilla2, rewritten2, x, Tensor(b))
        denom = max(float(np.abs(y1).max()), 1e-12)
        worst = max(worst, float(np.abs(y1 - y2).max()) / denom)
    checks.append(_check("linear_suffix_exact_f32_rel", worst, 1e-5))

    # one-hot selections survive the full PMS+FMS+reparam pipeline
    edge_d = _build_edge("darts_cifar", c, seed + 1, F32)
    vanilla_d = compile_vanilla(edge_d)
    simplified_d, _ = simplify_recursive(vanilla_d)
    m = len(edge_d.candidates)
    worst = 0.0
    for k in range(m):
        onehot = np.zeros(m, dtype=F32)
        onehot[k] = 1.0
        x = Tensor(rng.standard_normal((2, c, 8, 8)).astype(F32))
        y1, y2 = _forward_pair(vanilla_d, simplified_d, x, Tensor(onehot))
        worst = max(worst, float(np.abs(y1 - y2).max()))
        # and both equal the selected chain directly
        cand = edge_d.candidates[k]
        if not cand.is_zero:
            from .graph import chain_forward
            y3 = chain_forward(cand.modules, x, EvalContext(training=True)).data
            worst = max(worst, float(np.abs(y2 - y3).max()))
    checks.append(_check("one_hot_end_to_end_f32", worst, 1e-6))

    # unification: embedded kernels reproduce the original conv (f64)
    from .reparam import unify_kernel
    rng64 = np.random.default_rng(seed + 2)
    worst = 0.0
    for k, d in [(1, 1), (3, 1), (3, 2), (5, 1), (5, 2)]:
        mod = make_module("conv", c, c, rng64, dtype=F64, kernel_size=k, dilation=d)
        target = max(d * (k - 1) + 1, 9)
        uni = unify_kernel(mod, target)
        x = Tensor(rng64.standard_normal((2, c, 9, 9)), dtype=F64)
        y_ref = engine.conv2d(x, mod.kernel.value, dilation=d, padding=mod.padding)
        y_uni = engine.conv2d(x, Tensor(uni.kernel, dtype=F64),
                              padding=(target - 1) // 2)
        denom = max(float(np.abs(y_ref.data).max()), 1e-12)
        worst = max(worst, float(np.abs(y_ref.data - y_uni.data).max()) / denom)
    checks.append(_check("unification_exact_f64_rel", worst, 1e-12))

    # composition: depthwise then pointwise equals the composed dense kernel
    from .reparam import compose_depthwise_pointwise
    worst = 0.0
    for k in (3, 5):
        kdw = rng64.standard_normal((3, 1, k, k))
        kpw = rng64.standard_normal((4, 3, 1, 1))
        dense = compose_depthwise_pointwise(kdw, kpw)
        x = Tensor(rng64.standard_normal((2, 3, 8, 8)), dtype=F64)
        seq = engine.conv2d(engine.conv2d(x, Tensor(kdw, dtype=F64), groups=3,
                                          padding=(k - 1) // 2),
                            Tensor(kpw, dtype=F64))
        comp = engine.conv2d(x, Tensor(dense, dtype=F64), padding=(k - 1) // 2)
        denom = max(float(np.abs(seq.data).max()), 1e-12)
        worst = max(worst, float(np.abs(seq.data - comp.data).max()) / denom)
    checks.append(_check("composition_exact_f64_rel", worst, 1e-10))

    # merging: one conv with the weighted kernel sum equals the branch sum
    from .reparam import UnifiedKernel, merge_branch, unify_kernel as _uk
    worst64 = 0.0
    worst32 = 0.0
    for _ in range(20):
        k1 = rng64.standard_normal((c, c, 3, 3))
        k2 = rng64.standard_normal((c, c, 3, 3))
        b = rng64.random(2)
        b /= b.sum()
        merged = merge_branch([k1, k2], b)
        x64 = rng64.standard_normal((2, c, 8, 8))
        x = Tensor(x64, dtype=F64)
        y_branch = (b[0] * engine.conv2d(x, Tensor(k1, dtype=F64), padding=1).data
                    + b[1] * engine.conv2d(x, Tensor(k2, dtype=F64), padding=1).data)
        y_merged = engine.conv2d(x, Tensor(merged, dtype=F64), padding=1).data
        denom = max(float(np.abs(y_branch).max()), 1e-12)
        worst64 = max(worst64, float(np.abs(y_branch - y_merged).max()) / denom)
        x32 = Tensor(x64.astype(F32))
        yb32 = (F32(b[0]) * engine.conv2d(x32, Tensor(k1.astype(F32)), padding=1).data
                + F32(b[1]) * engine.conv2d(x32, Tensor(k2.astype(F32)), padding=1).data)
        ym32 = engine.conv2d(x32, Tensor(merged.astype(F32)), padding=1).data
        denom32 = max(float(np.abs(yb32).max()), 1e-12)
        worst32 = max(worst32, float(np.abs(yb32 - ym32).max()) / denom32)
    checks.append(_check("merge_exact_f64_rel", worst64, 1e-10))
    checks.append(_check("merge_exact_f32_rel", worst32, 1e-5))
    return _summarize("equivalence", checks)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def suite_gradcheck(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    checks = []

    w = Parameter(Tensor(rng.standard_normal((3, 4)), dtype=F64), name="w")
    checks.append(_check("linear_sum",
                         grad_check(lambda: engine.tsum(w.value), [w]), 1e-10))

    x = Parameter(Tensor(rng.standard_normal((2, 4, 6, 6)), dtype=F64), name="x")
    k = Parameter(Tensor(0.3 * rng.standard_normal((4, 4, 3, 3)), dtype=F64), name="k")
    checks.append(_check("conv2d", grad_check(
        lambda: engine.tsum(engine.relu(engine.conv2d(
            x.value, k.value, padding=1))), [x, k]), 1e-3))

    kd = Parameter(Tensor(0.3 * rng.standard_normal((4, 1, 3, 3)), dtype=F64), name="kd")
    checks.append(_check("conv2d_dilated_grouped", grad_check(
        lambda: engine.tsum(engine.conv2d(x.value, kd.value, dilation=2, groups=4,
                                          padding=2)), [x, kd]), 1e-3))

    bn_state = engine.BNState(4, dtype=F64)
    checks.append(_check("batch_norm_train", grad_check(
        lambda: engine.tsum(engine.relu(engine.batch_norm(
            x.value, bn_state, training=True))), [x]), 1e-3))

    checks.append(_check("avg_pool", grad_check(
        lambda: engine.tsum(engine.relu(engine.avg_pool(x.value, 3))), [x]), 1e-3))
    checks.append(_check("max_pool", grad_check(
        lambda: engine.tsum(engine.max_pool(x.value, 3)), [x]), 1e-3))

    labels = rng.integers(0, 3, size=4)
    logits = Parameter(Tensor(rng.standard_normal((4, 3)), dtype=F64), name="logits")
    checks.append(_check("cross_entropy", grad_check(
        lambda: engine.cross_entropy(logits.value, labels), [logits]), 1e-3))

    # conv-BN-ReLU chain
    state2 = engine.BNState(4, dtype=F64)
    checks.append(_check("conv_bn_relu_chain", grad_check(
        lambda: engine.tsum(engine.relu(engine.batch_norm(
            engine.conv2d(x.value, k.value, padding=1), state2, training=True))),
        [x, k]), 1e-3))

    # softmax-weighted edge: d loss / d alpha through the relaxation
    edge = _build_edge("nasbench201", 4, seed + 1, F64)
    xin = Tensor(rng.standard_normal((2, 4, 6, 6)), dtype=F64)
    checks.append(_check("softmax_weighted_edge_alpha", grad_check(
        lambda: engine.tsum(edge_forward_vanilla(edge, xin)), [edge.alpha]), 1e-3))

    # fully simplified edge with kernel normalization: alpha and kernels
    edge_d = _build_edge("darts_cifar", 4, seed + 2, F64)
    graph, _ = simplify_recursive(compile_vanilla(edge_d))
    kernels = [m.kernel for cand in edge_d.candidates for m in cand.modules
               if m.kernel is not None]
    some_kernels = kernels[:2] + kernels[-2:]
    xd = Tensor(rng.standard_normal((2, 4, 6, 6)), dtype=F64)

    def simplified_loss():
        beta = engine.softmax(edge_d.alpha.value)
        ctx = EvalContext(training=True, kernel_norm=True)
        return engine.tsum(engine.relu(graph.forward(xd, beta, ctx)))

    checks.append(_check("simplified_edge_alpha_and_kernels", grad_check(
        simplified_loss, [edge_d.alpha] + some_kernels), 1e-3))
    return _summarize("gradcheck", checks)


# ---------------------------------------------------------------------------
# degeneracy
# ---------------------------------------------------------------------------

def _degeneracy_setup(n_ops: int, channels: int, seed: int):
    """Edge of n_ops ReLU-Conv-BN candidates, simplified to one merged conv."""
    rng = np.random.default_rng(seed)
    chains = []
    for i in range(n_ops):
        chains.append(OperationChain(f"op{i}", [
            make_module("relu", channels, channels, rng, dtype=F64),
            make_module("conv", channels, channels, rng, dtype=F64, kernel_size=3),
            make_module("bn", channels, channels, rng, dtype=F64),
        ]))
    alpha = Parameter(Tensor(np.zeros(n_ops, dtype=F64)), role="arch")
    edge = SearchableEdge(chains, alpha, stride=1, in_channels=channels,
                          out_channels=channels)
    graph, _ = simplify_recursive(compile_vanilla(edge))
    kernels = [c.modules[1].kernel for c in chains]
    return edge, graph, kernels, rng


def _scaled_kernels(base, alpha_star, alpha_new):
    """Kernel construction that absorbs a weight change in a merged branch:
    K_i = K*_i * exp(a*_i - a_i) * sum(exp(a)) / sum(exp(a*))."""
    ratio = np.exp(alpha_new).sum() / np.exp(alpha_star).sum()
    return [k * np.exp(alpha_star[i] - alpha_new[i]) * ratio
            for i, k in enumerate(base)]


def _local_loss(graph, kernels, kern_values, alpha_vec, x, head, labels,
                kernel_norm: bool):
    for p, v in zip(kernels, kern_values):
        p.set_value(v)
    beta = engine.softmax(Tensor(alpha_vec, dtype=F64))
    ctx = EvalContext(training=True, kernel_norm=kernel_norm)
    out = graph.forward(x, beta, ctx)
    pooled = engine.tmean(out, axis=(2, 3))
    logits = engine.matmul(pooled, head)
    return out.data, float(engine.cross_entropy(logits, labels).data)


def suite_degeneracy(triples: int = 50, seed: int = 0) -> dict:
    n_ops, c = 3, 4
    edge, graph, kernels, rng = _degeneracy_setup(n_ops, c, seed)
    head = Tensor(rng.standard_normal((c, 3)), dtype=F64)
    x_train = Tensor(rng.standard_normal((4, c, 8, 8)), dtype=F64)
    x_val = Tensor(rng.standard_normal((4, c, 8, 8)), dtype=F64)
    y_train = rng.integers(0, 3, size=4)
    y_val = rng.integers(0, 3, size=4)

    out_gap = 0.0
    loss_gap = 0.0
    roundtrip_gap = 0.0
    norm_gaps = []
    for _ in range(triples):
        alpha_star = rng.uniform(-2, 2, size=n_ops)
        alpha_new = rng.uniform(-2, 2, size=n_ops)
        k_star = [0.5 * rng.standard_normal((c, c, 3, 3)) for _ in range(n_ops)]
        k_new = _scaled_kernels(k_star, alpha_star, alpha_new)

        out_s, l_tr_s = _local_loss(graph, kernels, k_star, alpha_star, x_train,
                                    head, y_train, kernel_norm=False)
        _, l_va_s = _local_loss(graph, kernels, k_star, alpha_star, x_val,
                                head, y_val, kernel_norm=False)
        out_n, l_tr_n = _local_loss(graph, kernels, k_new, alpha_new, x_train,
                                    head, y_train, kernel_norm=False)
        _, l_va_n = _local_loss(graph, kernels, k_new, alpha_new, x_val,
                                head, y_val, kernel_norm=False)
        out_gap = max(out_gap, float(np.abs(out_s - out_n).max()))
        loss_gap = max(loss_gap, abs(l_tr_s - l_tr_n), abs(l_va_s - l_va_n))

        # the reverse construction transports any contender back: losses match
        k_hat = [0.5 * rng.standard_normal((c, c, 3, 3)) for _ in range(n_ops)]
        k_bar = _scaled_kernels(k_hat, alpha_new, alpha_star)
        _, l_hat = _local_loss(graph, kernels, k_hat, alpha_new, x_train, head,
                               y_train, kernel_norm=False)
        _, l_bar = _local_loss(graph, kernels, k_bar, alpha_star, x_train, head,
                               y_train, kernel_norm=False)
        roundtrip_gap = max(roundtrip_gap, abs(l_hat - l_bar))

        # with normalization the construction no longer compensates
        out_sn, _ = _local_loss(graph, kernels, k_star, alpha_star, x_train,
                                head, y_train, kernel_norm=True)
        out_nn, _ = _local_loss(graph, kernels, k_new, alpha_new, x_train,
                                head, y_train, kernel_norm=True)
        norm_gaps.append(float(np.abs(out_sn - out_nn).max()))

    checks = [
        _check("construction_output_invariant_f64", out_gap, 1e-9),
        _check("construction_losses_invariant_f64", loss_gap, 1e-9),
        _check("contender_transport_invariant_f64", roundtrip_gap, 1e-9),
        _check("normalized_output_gap_median", float(np.median(norm_gaps)), 1e-3,
               larger_is_better=True),
    ]

    # identical alphas collapse the construction to the original kernels
    a = rng.uniform(-1, 1, size=n_ops)
    ks = [rng.standard_normal((c, c, 3, 3)) for _ in range(n_ops)]
    same = _scaled_kernels(ks, a, a)
    collapse = max(float(np.abs(s - k).max()) for s, k in zip(same, ks))
    checks.append(_check("construction_collapse_same_alpha", collapse, 0.0))
    return _summarize("degeneracy", checks)


SUITES = {
    "counts": suite_counts,
    "equivalence": suite_equivalence,
    "gradcheck": suite_gradcheck,
    "degeneracy": suite_degeneracy,
}


def run_suite(name: str, **kwargs) -> dict:
    if name == "all":
        reports = [SUITES[s]() for s in SUITES]
        return {"suite": "all", "passed": all(r["passed"] for r in reports),
                "suites": reports}
    if name not in SUITES:
        raise engine.ParameterError(f"unknown suite {name!r}")
    return SUITES[name](**kwargs)
