"""Merging weighted sums of parallel linear convolutions into single convs.

Heterogeneous conv branches (different kernel sizes, dilations, separable
pairs) are first rewritten to dense kernels of one common size: separable
pairs compose into a dense kernel, dilated kernels embed onto their tap
lattice inside the target window.  A weighted sum of such branches then
collapses into one convolution whose kernel is the weighted kernel sum.

Kernel normalization standardizes each branch kernel to zero mean / unit
deviation before the merge.  Without it the merged branch is degenerate:
kernels can absorb any rescaling of the branch weights, so every weight
configuration attains the same loss and the outer search stops meaning
anything.  Normalized kernels are insensitive to affine changes of the
originals, which removes that freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ParameterError, Tensor
from .graph import (CONV, ChainNode, Const, EdgeGraph, EvalContext,
                    MergedConvNode, MergedMember, Node, WeightedSumNode,
                    normalize_kernel_tensor, _member_kernel)


@dataclass
class UnifiedKernel:
    """A conv kernel embedded into a common dense window."""
    source_size: int
    source_dilation: int
    form: str
    target: int
    kernel: np.ndarray  # (O, I, target, target)


def unify_kernel(module, target: int) -> UnifiedKernel:
    """Embed a conv module's kernel into a target x target dense window.

    The embedded kernel, run at dilation 1 with padding (target-1)/2, equals
    the original size-preserving convolution exactly.
    """
    if module.kind != CONV:
        raise ParameterError("only conv modules can be unified")
    if module.form == "depthwise":
        k, dilation = _member_kernel([module], EvalContext(kernel_norm=False))
        dense = k.data
    else:
        dense = module.kernel.value.data
        dilation = module.dilation
    embedded = engine.embed_kernel(Tensor(dense, dtype=dense.dtype), target, dilation)
    return UnifiedKernel(source_size=module.kernel_size,
                         source_dilation=module.dilation, form=module.form,
                         target=target, kernel=embedded.data)


def compose_depthwise_pointwise(kdw: np.ndarray, kpw: np.ndarray) -> np.ndarray:
    """Dense kernel equivalent to depthwise conv followed by pointwise conv.

    D[o, c] = kpw[o, c] * kdw[c], so conv(x, D) == pointwise(depthwise(x))
    for bias-free convs.
    """
    kdw = np.asarray(kdw)
    kpw = np.asarray(kpw)
    if kdw.ndim != 4 or kdw.shape[1] != 1:
        raise engine.DimensionError("depthwise kernel must be (C, 1, k, k)")
    if kpw.ndim != 4 or kpw.shape[2:] != (1, 1):
        raise engine.DimensionError("pointwise kernel must be (O, C, 1, 1)")
    c = kdw.shape[0]
    if kpw.shape[1] != c:
        raise engine.DimensionError(
            f"channel mismatch: depthwise has {c}, pointwise expects {kpw.shape[1]}")
    return kpw[:, :, 0, 0][:, :, None, None] * kdw[:, 0][None, :, :, :]


def normalize_kernel(k, eps_std: float = 1e-5):
    """Zero-mean / unit-deviation standardization over all kernel elements.

    Population statistics; a sub-eps_std deviation is floored so constant
    kernels stay finite.  Accepts a Tensor or ndarray and returns the same.
    """
    if isinstance(k, Tensor):
        return normalize_kernel_tensor(k, eps_std=eps_std)
    arr = np.asarray(k, dtype=np.float64 if np.asarray(k).dtype == np.float64
                     else np.float32)
    mu = arr.mean()
    std = arr.std()
    return (arr - mu) / max(std, eps_std)


def merge_branch(kernels, beta, scale: float | None = None) -> np.ndarray:
    """Weighted sum of unified kernels, optionally rescaled by 1/p_s.

    All kernels must already share one target size and channel layout; the
    returned dense kernel run as a single convolution equals the weighted
    sum of the branch convolutions.
    """
    mats = [k.kernel if isinstance(k, UnifiedKernel) else np.asarray(k)
            for k in kernels]
    if not mats:
        raise ParameterError("merge of no kernels")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ParameterError("kernels must be unified to one target size first")
    beta = np.asarray(beta)
    if beta.shape != (len(mats),):
        raise engine.DimensionError("weight vector length mismatch")
    out = np.zeros(shape, dtype=mats[0].dtype)
    for w, m in zip(beta, mats):
        out += w * m
    if scale is not None:
        out *= scale
    return out


def _mergeable_chain(modules) -> bool:
    """Linear conv chains we can fold: single conv, or depthwise->pointwise."""
    if not modules or any(m.kind != CONV for m in modules):
        return False
    if len(modules) == 1:
        return True
    return (len(modules) == 2 and modules[0].form == "depthwise"
            and modules[1].form == "pointwise")


def _chain_effective_size(modules) -> int:
    return max(m.effective_size() for m in modules)


def _chain_stride(modules) -> int:
    s = 1
    for m in modules:
        s *= m.stride
    return s


def reparameterize(graph: EdgeGraph) -> EdgeGraph:
    """Collapse every weighted sum of purely-convolutional branches.

    Eligible children of a weighted-sum node (conv-only chains feeding from
    the same input) are replaced by one MergedConvNode; other children are
    left untouched.  Branch weights are folded into the merged kernel.
    """
    from .simplify import _replace_node

    changed = True
    while changed:
        changed = False
        for node in graph.nodes():
            if not isinstance(node, WeightedSumNode):
                continue
            groups: dict[int, list[int]] = {}
            for i, kid in enumerate(node.kids):
                if isinstance(kid, ChainNode) and _mergeable_chain(kid.modules):
                    groups.setdefault(id(kid.child), []).append(i)
            target_group = None
            for _, idxs in sorted(groups.items(), key=lambda kv: kv[1][0]):
                strides = {_chain_stride(node.kids[i].modules) for i in idxs}
                if len(strides) == 1:
                    target_group = idxs
                    break
            if target_group is None:
                continue
            idxs = target_group
            kids = [node.kids[i] for i in idxs]
            child = kids[0].child
            target = max(_chain_effective_size(k.modules) for k in kids)
            stride = _chain_stride(kids[0].modules)
            members = [MergedMember(k.modules, node.weights[i])
                       for k, i in zip(kids, idxs)]
            merged = MergedConvNode(
                members, child, target, stride,
                out_channels=kids[0].modules[-1].out_channels,
                in_channels=kids[0].modules[0].in_channels)
            if len(idxs) == len(node.kids):
                replacement: Node = merged
            else:
                new_kids = []
                new_weights = []
                member_set = set(idxs)
                inserted = False
                for i, (kid, w) in enumerate(zip(node.kids, node.weights)):
                    if i in member_set:
                        if not inserted:
                            new_kids.append(merged)
                            new_weights.append(Const(1.0))
                            inserted = True
                        continue
                    new_kids.append(kid)
                    new_weights.append(w)
                replacement = WeightedSumNode(new_kids, new_weights)
            graph = _replace_node(graph, node, replacement)
            changed = True
            break
    return graph
