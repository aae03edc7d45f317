"""Dense NCHW tensor arithmetic with tape-based reverse-mode autodiff.

The operator set is exactly what a searchable supernet needs: convolution
with stride/dilation/groups, batch normalization without affine terms,
ReLU, same-padded average/max pooling, softmax, weighted sums and
cross-entropy, plus the small elementwise/reduction vocabulary that merged
convolution kernels are assembled from.

Everything is backed by plain numpy buffers.  Gradients are computed by
replaying a :class:`GradTape` backwards; the tape records primitives in
execution order, which is already a topological order of the compute DAG.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class DimensionError(EngineError):
    """Shape or dtype mismatch between operands."""


class ParameterError(EngineError):
    """Invalid operation argument (stride, padding, empty input, ...)."""


class StateError(EngineError):
    """Operation invoked in an invalid engine state (e.g. backward before forward)."""


F32 = np.float32
F64 = np.float64
DTYPES = {"f32": F32, "f64": F64}
DEFAULT_DTYPE = F32

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard run after every primitive; returns previous value."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise EngineError(f"{op} produced non-finite values")


class MemoryMeter:
    """High-water tracker for live tensor bytes (tape buffers + persistent state)."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, nbytes: int) -> None:
        self.current += int(nbytes)
        if self.current > self.peak:
            self.peak = self.current

    def sub(self, nbytes: int) -> None:
        self.current -= int(nbytes)


_ACTIVE_METER: MemoryMeter | None = None


def set_meter(meter: MemoryMeter | None) -> MemoryMeter | None:
    """Install the allocation meter for subsequent tapes; returns the previous one."""
    global _ACTIVE_METER
    prev = _ACTIVE_METER
    _ACTIVE_METER = meter
    return prev


def get_meter() -> MemoryMeter | None:
    return _ACTIVE_METER


class Tensor:
    """Immutable-by-convention dense array value. ``grad`` is populated by backward()."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (F32, F64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Parameter:
    """Trainable tensor with a role tag: 'weight' (w) or 'arch' (alpha)."""

    __slots__ = ("value", "requires_grad", "role", "name", "version")

    def __init__(self, value, role: str = "weight", name: str = "", dtype=None,
                 requires_grad: bool = True):
        if role not in ("weight", "arch"):
            raise ParameterError(f"unknown parameter role {role!r}")
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.value.requires_grad = requires_grad
        self.requires_grad = requires_grad
        self.role = role
        self.name = name
        self.version = 0

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def set_value(self, data) -> None:
        arr = np.asarray(data, dtype=self.value.data.dtype)
        if arr.shape != self.value.data.shape:
            raise DimensionError("parameter value shape mismatch")
        self.value.data = arr
        self.version += 1

    def bump(self) -> None:
        self.version += 1

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, role={self.role}, shape={self.value.shape})"


class _TapeNode:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of executed primitives; replayed in reverse for gradients.

    Execution order is a topological order of the DAG, so the reverse walk
    visits every node exactly once.  A tape is owned by a single search run
    and is not shared across threads.
    """

    def __init__(self, meter: MemoryMeter | None = None):
        self._nodes: list[_TapeNode] = []
        self._out_ids: set[int] = set()
        self._meter = meter if meter is not None else _ACTIVE_METER
        self._recorded_bytes = 0
        self._grad_bytes = 0
        self._closed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("a GradTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        self.close()
        return False

    def record(self, out: Tensor, inputs, backward) -> None:
        out.requires_grad = True
        self._nodes.append(_TapeNode(out, list(inputs), backward))
        self._out_ids.add(id(out))
        self._recorded_bytes += out.data.nbytes
        if self._meter is not None:
            self._meter.add(out.data.nbytes)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, params=None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every reachable leaf on this tape.

        ``params`` (iterable of Parameter) get their ``.grad`` populated;
        parameters the loss does not reach receive zeros.
        """
        if not self._nodes:
            raise StateError("backward called on an empty tape")
        if loss.data.size != 1:
            raise DimensionError("loss must be a scalar tensor")
        if id(loss) not in self._out_ids:
            raise StateError("loss was not computed under this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        stored: set[int] = set()
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gt in zip(node.inputs, in_grads):
                if t is None or gt is None:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    if id(gt) in stored or not gt.flags.writeable:
                        gt = gt.copy()
                    grads[id(t)] = gt
                    stored.add(id(gt))
                    self._grad_bytes += gt.nbytes
                    if self._meter is not None:
                        self._meter.add(gt.nbytes)
                else:
                    acc += gt
        if params is not None:
            for p in params:
                g = grads.get(id(p.value))
                p.value.grad = g if g is not None else np.zeros_like(p.value.data)
        else:
            for node in self._nodes:
                for t in node.inputs:
                    if isinstance(t, Tensor) and t.requires_grad and id(t) in grads:
                        t.grad = grads[id(t)]
        return grads

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._meter is not None:
            self._meter.sub(self._recorded_bytes + self._grad_bytes)
        self._nodes = []
        self._out_ids = set()


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE


def _make(out_data: np.ndarray, inputs, backward) -> Tensor:
    """Wrap a primitive result, recording it on the active tape when needed."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _ACTIVE_TAPE
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError("mixed f32/f64 operands")
    return dt


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data + b.data
    _check_finite(out, "add")

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, [a, b], bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data - b.data
    _check_finite(out, "sub")

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, [a, b], bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [a], lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data * b.data
    _check_finite(out, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _make(out, [a, b], bw)


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / a.data
    _check_finite(out, "reciprocal")

    def bw(g):
        return (-g * out * out,)

    return _make(out, [a], bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, reciprocal(b))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    _check_finite(out, "sqrt")

    def bw(g):
        return (g * (0.5 / out),)

    return _make(out, [a], bw)


def standardize(a: Tensor, eps_std: float) -> Tensor:
    """(a - mean(a)) / max(std(a), eps_std) over all elements, fused.

    std is the population deviation.  The result is invariant to affine
    changes a -> s*a + b with s > 0 whenever std(a) clears the floor.
    """
    mu = a.data.mean()
    std = a.data.std()
    clamped = std < eps_std
    denom = max(float(std), eps_std)
    out = (a.data - mu) / a.data.dtype.type(denom)
    _check_finite(out, "standardize")
    n = a.data.size

    def bw(g):
        gm = g.mean()
        if clamped:
            return ((g - gm) / denom,)
        proj = (g * out).mean()
        return ((g - gm - out * proj) / denom,)

    return _make(out, [a], bw)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, a.data.dtype.type(floor))
    mask = a.data > floor

    def bw(g):
        return (g * mask,)

    return _make(out, [a], bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(out, [a], bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)
    shape = a.data.shape

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(g, tuple(sorted(a_ % len(shape) for a_ in ax)))
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(out, [a], bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / n)


def scale(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)
    out = a.data * cc
    _check_finite(out, "scale")

    def bw(g):
        return (g * cc,)

    return _make(out, [a], bw)


def add_const(a: Tensor, c: float) -> Tensor:
    out = a.data + a.data.dtype.type(c)

    def bw(g):
        return (g,)

    return _make(out, [a], bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    src = a.data.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(out, [a], bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    _check_finite(out, "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T, ad.T @ g)

    return _make(out, [a, b], bw)


# ---------------------------------------------------------------------------
# vector helpers for architecture weights
# ---------------------------------------------------------------------------

def softmax(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D vector; outputs positive, sum to 1."""
    if v.data.ndim != 1:
        raise DimensionError("softmax expects a 1-D vector")
    if v.data.size == 0:
        raise ParameterError("softmax of an empty vector")
    z = v.data - v.data.max()
    e = np.exp(z)
    out = e / e.sum()
    _check_finite(out, "softmax")

    def bw(g):
        dot = np.dot(g, out)
        return (out * (g - dot),)

    return _make(out, [v], bw)


def index_select(v: Tensor, i: int) -> Tensor:
    if v.data.ndim != 1:
        raise DimensionError("index_select expects a 1-D vector")
    if not 0 <= i < v.data.size:
        raise ParameterError(f"index {i} out of range")
    out = np.asarray(v.data[i], dtype=v.data.dtype)
    n = v.data.size

    def bw(g):
        gv = np.zeros(n, dtype=v.data.dtype)
        gv[i] = g
        return (gv,)

    return _make(out, [v], bw)


def normalized_subset(v: Tensor, num_indices, den_indices, eps: float) -> Tensor:
    """v[num] / max(sum(v[den]), eps) as one fused vector op."""
    if v.data.ndim != 1:
        raise DimensionError("normalized_subset expects a 1-D vector")
    nidx = np.asarray(list(num_indices), dtype=np.intp)
    didx = np.asarray(sorted(den_indices), dtype=np.intp)
    sub = v.data[nidx]
    s = float(v.data[didx].sum())
    clamped = s < eps
    denom = v.data.dtype.type(max(s, eps))
    out = sub / denom
    _check_finite(out, "normalized_subset")
    n = v.data.size

    def bw(g):
        gv = np.zeros(n, dtype=v.data.dtype)
        np.add.at(gv, nidx, g / denom)
        if not clamped:
            gv[didx] -= (g * sub).sum() / (denom * denom)
        return (gv,)

    return _make(out, [v], bw)


def subset_sum(v: Tensor, indices) -> Tensor:
    if v.data.ndim != 1:
        raise DimensionError("subset_sum expects a 1-D vector")
    idx = np.asarray(sorted(indices), dtype=np.intp)
    out = np.asarray(v.data[idx].sum(), dtype=v.data.dtype)
    n = v.data.size

    def bw(g):
        gv = np.zeros(n, dtype=v.data.dtype)
        gv[idx] = g
        return (gv,)

    return _make(out, [v], bw)


def weighted_sum(tensors, weights) -> Tensor:
    """Sum of same-shape tensors scaled by scalar weights.

    ``weights`` is either a 1-D Tensor of length len(tensors) or a sequence
    of scalar Tensors; gradients flow to both tensors and weights.
    """
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("weighted_sum of no tensors")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError("weighted_sum operands must share one shape")
    if isinstance(weights, Tensor):
        if weights.data.ndim != 1 or weights.data.size != len(tensors):
            raise DimensionError("weight vector length mismatch")
        wvals = [weights.data[i] for i in range(len(tensors))]
        _same_dtype(tensors[0], weights)
        out = np.zeros(shape, dtype=tensors[0].data.dtype)
        for w, t in zip(wvals, tensors):
            out += w * t.data
        _check_finite(out, "weighted_sum")
        datas = [t.data for t in tensors]

        def bw(g):
            gw = np.array([(g * d).sum() for d in datas], dtype=g.dtype)
            return [w * g for w in wvals] + [gw]

        return _make(out, list(tensors) + [weights], bw)

    ws = list(weights)
    if len(ws) != len(tensors):
        raise DimensionError("weights length mismatch")
    for w in ws:
        if w.data.size != 1:
            raise DimensionError("weights must be scalars")
    out = np.zeros(shape, dtype=tensors[0].data.dtype)
    for w, t in zip(ws, tensors):
        out += w.data * t.data
    _check_finite(out, "weighted_sum")
    datas = [t.data for t in tensors]
    wvals = [w.data for w in ws]

    def bw(g):
        gx = [w * g for w in wvals]
        gw = [np.asarray((g * d).sum(), dtype=g.dtype) for d in datas]
        return gx + gw

    return _make(out, list(tensors) + ws, bw)


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int):
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return win


def _conv_arrays(x64: np.ndarray, k64: np.ndarray, stride: int, dilation: int,
                 groups: int, padding: int):
    """f64 im2col convolution on plain arrays; returns (out, saved windows).

    Saved windows come back as the im2col matrix (dense/grouped) or the
    window view array (depthwise) so the caller can reuse them for the
    kernel gradient.
    """
    n, c, h, w = x64.shape
    o, i, kh, kw = k64.shape
    eff_h = dilation * (kh - 1) + 1
    h_out = (h + 2 * padding - eff_h) // stride + 1
    w_out = (w + 2 * padding - (dilation * (kw - 1) + 1)) // stride + 1
    xp = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, kw, stride, dilation)  # (N, C, Ho, Wo, kh, kw)
    nhw = n * h_out * w_out
    if groups == c and o == c and i == 1:  # depthwise
        w64 = np.ascontiguousarray(win, dtype=F64)
        kd = k64.reshape(c, kh, kw)
        out = (w64 * kd[None, :, None, None]).sum(axis=(-1, -2))
        return out, (w64, None)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5), dtype=F64)
    cols = cols.reshape(nhw, c * kh * kw)
    if groups == 1:
        km = k64.reshape(o, i * kh * kw)
        out = (cols @ km.T).reshape(n, h_out, w_out, o).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, km)
    cg = c // groups
    og = o // groups
    colsg = cols.reshape(nhw, groups, cg * kh * kw)
    km = k64.reshape(groups, og, cg * kh * kw)
    pieces = [colsg[:, gi] @ km[gi].T for gi in range(groups)]
    out = np.concatenate(pieces, axis=1).reshape(n, h_out, w_out, o)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (colsg, km)


def _flip_kernel(k64: np.ndarray, groups: int) -> np.ndarray:
    """Kernel for the input-gradient correlation: swap in/out, flip taps."""
    o, i, kh, kw = k64.shape
    if groups == 1:
        return np.ascontiguousarray(k64.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    og = o // groups
    kg = k64.reshape(groups, og, i, kh, kw).transpose(0, 2, 1, 3, 4)
    kg = kg[:, :, :, ::-1, ::-1].reshape(groups * i, og, kh, kw)
    return np.ascontiguousarray(kg)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
           groups: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation over NCHW input with an OIkk kernel.

    Output spatial size is floor((H + 2p - d*(kh-1) - 1)/s) + 1.  The op is
    linear in both arguments, which is what makes branch merging exact.
    Reductions accumulate in f64 so a merged branch kernel rounds the same
    way as the sum of its branches.
    """
    if stride < 1 or dilation < 1:
        raise ParameterError("stride and dilation must be positive")
    if padding < 0:
        raise ParameterError("padding must be non-negative")
    if groups < 1:
        raise ParameterError("groups must be positive")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIkk kernel")
    _same_dtype(x, kernel)
    n, c, h, w = x.data.shape
    o, i, kh, kw = kernel.data.shape
    if c % groups != 0 or o % groups != 0:
        raise DimensionError("channels not divisible by groups")
    if i != c // groups:
        raise DimensionError(f"kernel expects {i} input channels/group, input has {c // groups}")
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    h_out = (h + 2 * padding - eff_h) // stride + 1
    w_out = (w + 2 * padding - eff_w) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d output would be empty")

    dtype = x.data.dtype
    depthwise = groups == c and o == c and i == 1
    nhw = n * h_out * w_out
    k64 = kernel.data.astype(F64, copy=False)
    out64, saved = _conv_arrays(x.data.astype(F64, copy=False), k64, stride,
                                dilation, groups, padding)
    out = out64.astype(dtype, copy=False)
    _check_finite(out, "conv2d")

    def bw(g):
        g64 = g.astype(F64)
        if depthwise:
            w64, _ = saved
            dk = (w64 * g64[:, :, :, :, None, None]).sum(axis=(0, 2, 3))
            dk = dk.reshape(o, 1, kh, kw)
        elif groups == 1:
            cols, km = saved
            gt = g64.transpose(0, 2, 3, 1).reshape(nhw, o)
            dk = (gt.T @ cols).reshape(o, i, kh, kw)
        else:
            colsg, km = saved
            og = o // groups
            gtg = g64.transpose(0, 2, 3, 1).reshape(nhw, groups, og)
            dk = np.stack([gtg[:, gi].T @ colsg[:, gi]
                           for gi in range(groups)]).reshape(o, i, kh, kw)

        if stride == 1 and kh == kw and padding <= eff_h - 1:
            # input gradient as a correlation with the flipped kernel
            dx64, _ = _conv_arrays(g64, _flip_kernel(k64, groups), 1, dilation,
                                   groups, eff_h - 1 - padding)
            return (dx64.astype(dtype), dk.astype(dtype))

        if depthwise:
            w64, _ = saved
            kd = k64.reshape(c, kh, kw)
            tmp = g64[:, :, :, :, None, None] * kd[None, :, None, None]
        else:
            if groups == 1:
                cols, km = saved
                gt = g64.transpose(0, 2, 3, 1).reshape(nhw, o)
                dcols = gt @ km
            else:
                colsg, km = saved
                og = o // groups
                gtg = g64.transpose(0, 2, 3, 1).reshape(nhw, groups, og)
                dcols = np.concatenate(
                    [gtg[:, gi] @ km[gi] for gi in range(groups)], axis=1)
            tmp = dcols.reshape(n, h_out, w_out, c, kh, kw)
            tmp = tmp.transpose(0, 3, 1, 2, 4, 5)  # view; scattered below
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=F64)
        for a in range(kh):
            ia = a * dilation
            for b in range(kw):
                jb = b * dilation
                dxp[:, :, ia:ia + stride * h_out:stride,
                    jb:jb + stride * w_out:stride] += tmp[..., a, b]
        dx = dxp[:, :, padding:padding + h, padding:padding + w].astype(dtype)
        return (dx, dk.astype(dtype))

    return _make(out, [x, kernel], bw)


def embed_kernel(kernel: Tensor, target: int, dilation: int = 1) -> Tensor:
    """Embed an OIkk kernel into a target x target dense window.

    Source taps land centered on a lattice with step ``dilation``, so the
    embedded kernel at dilation 1 reproduces the original (possibly dilated)
    convolution exactly.
    """
    if target % 2 == 0:
        raise ParameterError("target size must be odd")
    o, i, kh, kw = kernel.data.shape
    if kh != kw:
        raise DimensionError("only square kernels are embedded")
    eff = dilation * (kh - 1) + 1
    if eff > target:
        raise ParameterError(f"effective size {eff} exceeds target {target}")
    c0 = (target - eff) // 2
    out = np.zeros((o, i, target, target), dtype=kernel.data.dtype)
    sl = slice(c0, c0 + dilation * (kh - 1) + 1, dilation)
    out[:, :, sl, sl] = kernel.data

    def bw(g):
        return (g[:, :, sl, sl].copy(),)

    return _make(out, [kernel], bw)


class BNState:
    """Per-channel running statistics for batch normalization (no affine terms)."""

    __slots__ = ("running_mean", "running_var", "eps", "momentum")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def nbytes(self) -> int:
        return self.running_mean.nbytes + self.running_var.nbytes


def batch_norm(x: Tensor, state: BNState, training: bool = True) -> Tensor:
    """Per-channel standardization over (N, H, W); train mode uses batch stats.

    The normalized output is invariant to positive rescaling of the input,
    which is the degeneracy the kernel-normalization analysis leans on.
    Running statistics are updated as a side effect in train mode.
    """
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects NCHW input")
    n, c, h, w = x.data.shape
    eps = x.data.dtype.type(state.eps)
    if training:
        if n * h * w < 2:
            raise ParameterError("train-mode batch_norm needs N*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(
            state.running_var.dtype)
        denom = np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) / denom[None, :, None, None]
        _check_finite(xhat, "batch_norm")
        cnt = n * h * w

        def bw(g):
            gm = g.mean(axis=(0, 2, 3))[None, :, None, None]
            gx = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            dx = (g - gm - xhat * gx) / denom[None, :, None, None]
            return (dx,)

        return _make(xhat, [x], bw)

    denom = np.sqrt(state.running_var + eps)
    out = (x.data - state.running_mean[None, :, None, None]) / denom[None, :, None, None]
    _check_finite(out, "batch_norm")

    def bw(g):
        return (g / denom[None, :, None, None],)

    return _make(out, [x], bw)


def _pool_prepare(x: Tensor, k: int, stride: int):
    if k < 1 or k % 2 == 0:
        raise ParameterError("pooling kernel must be odd and positive")
    if stride < 1:
        raise ParameterError("stride must be positive")
    if x.data.ndim != 4:
        raise DimensionError("pooling expects NCHW input")
    n, c, h, w = x.data.shape
    p = (k - 1) // 2
    h_out = (h + 2 * p - k) // stride + 1
    w_out = (w + 2 * p - k) // stride + 1
    return n, c, h, w, p, h_out, w_out


def avg_pool(x: Tensor, k: int, stride: int = 1) -> Tensor:
    """Same-padded average pooling; padded cells are excluded from the divisor."""
    n, c, h, w, p, h_out, w_out = _pool_prepare(x, k, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ones = np.pad(np.ones((h, w), dtype=x.data.dtype), ((p, p), (p, p)))
    cnt = sliding_window_view(ones, (k, k))[::stride, ::stride].sum(axis=(-1, -2))
    out = win.sum(axis=(-1, -2)) / cnt
    _check_finite(out, "avg_pool")

    def bw(g):
        gn = g / cnt
        dxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                dxp[:, :, a:a + stride * h_out:stride, b:b + stride * w_out:stride] += gn
        return (dxp[:, :, p:p + h, p:p + w],)

    return _make(out, [x], bw)


def max_pool(x: Tensor, k: int, stride: int = 1) -> Tensor:
    """Same-padded max pooling; ties resolve to the first window position."""
    n, c, h, w, p, h_out, w_out = _pool_prepare(x, k, stride)
    neg = np.finfo(x.data.dtype).min
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=neg)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, h_out, w_out, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    _check_finite(out, "max_pool")

    def bw(g):
        dxp = np.zeros_like(xp)
        for t in range(k * k):
            mask = idx == t
            if not mask.any():
                continue
            a, b = divmod(t, k)
            dxp[:, :, a:a + stride * h_out:stride,
                b:b + stride * w_out:stride] += g * mask
        return (dxp[:, :, p:p + h, p:p + w],)

    return _make(out, [x], bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are an int vector of class indices."""
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects (N, classes) logits")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError("labels length mismatch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)
    _check_finite(loss, "cross_entropy")
    probs = e / se

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _make(loss, [logits], bw)


def zeros_like_output(x: Tensor, channels: int, stride: int = 1) -> Tensor:
    """Zero tensor shaped like a same-padded, possibly strided op applied to x."""
    n, _, h, w = x.data.shape
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    return Tensor(np.zeros((n, channels, h_out, w_out), dtype=x.data.dtype))


def constant(value, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, params, h: float = 1e-5, max_coords: int = 12, rng=None) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``fn`` re-runs the forward pass and returns a scalar Tensor; parameters
    must be f64 for the differences to resolve.  Error per coordinate is
    |analytic - fd| / max(1, |analytic|), maximized over sampled coordinates.
    """
    params = list(params)
    for p in params:
        if p.value.data.dtype != F64:
            raise ParameterError("grad_check requires f64 parameters")
    if rng is None:
        rng = np.random.default_rng(0)
    with GradTape() as tape:
        loss = fn()
        tape.backward(loss, params)
    analytic = {id(p): p.value.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        coords = range(n) if n <= max_coords else sorted(
            rng.choice(n, size=max_coords, replace=False).tolist())
        for cidx in coords:
            orig = flat[cidx]
            flat[cidx] = orig + h
            lp = float(fn().data)
            flat[cidx] = orig - h
            lm = float(fn().data)
            flat[cidx] = orig
            fd = (lp - lm) / (2 * h)
            a = analytic[id(p)].reshape(-1)[cidx]
            err = abs(a - fd) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
