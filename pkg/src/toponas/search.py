"""Bi-level search driver: interleaved weight and architecture updates.

Each iteration takes one adaptive step on the architecture parameters using
a validation batch (first-order approximation), then one SGD step with
momentum, weight decay and a cosine-annealed learning rate on the network
weights using a training batch.  A toy retraining mode builds the
discretized network and trains it from scratch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine
from .costs import RunCost
from .engine import (GradTape, MemoryMeter, Parameter, ParameterError, Tensor,
                     cross_entropy)
from .graph import EvalContext, Genotype, Supernet, discretize


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    w_lr_init: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float | None = None  # resolved per space profile
    alpha_lr: float = 3.0e-4
    alpha_betas: tuple = (0.9, 0.999)
    alpha_eps: float = 1e-8
    alpha_weight_decay: float = 1e-3
    order: str = "first"
    seed: int = 0
    precision: str = "f32"
    kernel_normalization: bool = True
    simplification: str = "full"  # none | full
    grad_clip: float = 5.0
    freeze_alpha: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.w_lr_init <= 0 or self.alpha_lr <= 0:
            raise ParameterError("learning rates must be positive")
        if self.precision not in ("f32", "f64"):
            raise ParameterError(f"unknown precision {self.precision!r}")
        if self.simplification not in ("none", "full"):
            raise ParameterError(f"unknown simplification {self.simplification!r}")
        if self.order != "first":
            raise ParameterError("only the first-order approximation is implemented")

    def resolved_weight_decay(self, space_name: str) -> float:
        if self.w_weight_decay is not None:
            return self.w_weight_decay
        return 1e-2 if space_name == "nasbench201" else 3e-4


@dataclass
class SearchResult:
    genotype_str: str
    alpha_trajectory: list
    train_loss: list
    val_loss: list
    train_acc: list
    val_acc: list
    run_cost: RunCost | None
    rewrite_log: list
    aborted: bool = False
    abort_reason: str = ""
    degenerate_events: int = 0
    split_audit: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "genotype": self.genotype_str,
            "alpha_trajectory": self.alpha_trajectory,
            "curves": {
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "train_acc": self.train_acc,
                "val_acc": self.val_acc,
            },
            "run_cost": None if self.run_cost is None else {
                "memory_bytes_peak": self.run_cost.memory_bytes_peak,
                "wall_time_s": self.run_cost.wall_time_s,
            },
            "rewrite_log": self.rewrite_log,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "degenerate_events": self.degenerate_events,
            "split_audit": {k: sorted(v) for k, v in self.split_audit.items()},
        }
        return d


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    """Cosine annealing from lr_init at step 0 towards 0 at the final step."""
    if total_steps <= 1:
        return lr_init
    t = min(step, total_steps - 1) / (total_steps - 1)
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * t))


class SGDMomentum:
    """v <- momentum*v + grad + wd*w;  w <- w - lr*v (per-step lr supplied)."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value.data) for p in self.params]

    def state_bytes(self) -> int:
        return sum(v.nbytes for v in self.velocity)

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.value.grad
            if g is None:
                g = np.zeros_like(p.value.data)
            v *= self.momentum
            v += g + self.weight_decay * p.value.data
            p.value.data = p.value.data - lr * v
            p.bump()


class Adam:
    """Adam with bias correction; weight decay is added to the gradient."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value.data) for p in self.params]
        self.v = [np.zeros_like(p.value.data) for p in self.params]
        self.t = 0

    def state_bytes(self) -> int:
        return sum(m.nbytes for m in self.m) + sum(v.nbytes for v in self.v)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.value.grad
            if g is None:
                g = np.zeros_like(p.value.data)
            g = g + self.weight_decay * p.value.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.value.data = p.value.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.bump()


def clip_grad_norm(params, max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.value.grad is not None:
            total += float((p.value.grad ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        ratio = max_norm / norm
        for p in params:
            if p.value.grad is not None:
                p.value.grad = p.value.grad * ratio
    return norm


def zero_hook(alpha_params, epoch: int):
    """Default architecture-loss penalty: nothing."""
    return None


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def bilevel_search(supernet: Supernet, train_stream, val_stream,
                   config: TrainConfig, hook=None) -> SearchResult:
    """Run the interleaved search and return curves, genotype and run cost.

    The weight step only ever consumes train-split batches and the
    architecture step only val-split batches; the audit record in the
    result captures which split each step type observed.
    """
    config.validate()
    hook = hook or zero_hook
    dtype = engine.DTYPES[config.precision]

    w_params = supernet.parameters("weight")
    a_params = supernet.parameters("arch")
    wd = config.resolved_weight_decay(supernet.spec.name)
    sgd = SGDMomentum(w_params, config.w_momentum, wd)
    adam = Adam(a_params, config.alpha_lr, config.alpha_betas, config.alpha_eps,
                config.alpha_weight_decay)

    meter = MemoryMeter()
    meter.add(supernet.persistent_bytes())
    meter.add(sgd.state_bytes() + adam.state_bytes())
    prev_meter = engine.set_meter(meter)

    ctx = EvalContext(training=True, kernel_norm=config.kernel_normalization)
    steps_per_epoch = min(train_stream.batches_per_epoch(config.batch_size),
                          val_stream.batches_per_epoch(config.batch_size))
    if steps_per_epoch < 1:
        raise ParameterError("splits are too small for one batch per epoch")
    total_steps = config.epochs * steps_per_epoch

    result = SearchResult(genotype_str="", alpha_trajectory=[], train_loss=[],
                          val_loss=[], train_acc=[], val_acc=[], run_cost=None,
                          rewrite_log=[] if supernet.rewrite_log is None
                          else supernet.rewrite_log.to_json(),
                          split_audit={"w_step": set(), "alpha_step": set()})
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(config.epochs):
            tr_iter = train_stream.epoch_batches(epoch, config.batch_size, dtype)
            va_iter = val_stream.epoch_batches(epoch, config.batch_size, dtype)
            ep_tl, ep_vl, ep_ta, ep_va = [], [], [], []
            for _ in range(steps_per_epoch):
                xb_t, yb_t, tag_t = next(tr_iter)
                xb_v, yb_v, tag_v = next(va_iter)

                # architecture step on the validation split
                result.split_audit["alpha_step"].add(tag_v)
                if not config.freeze_alpha:
                    with GradTape(meter) as tape:
                        logits = supernet.forward(Tensor(xb_v, dtype=dtype), ctx)
                        loss = cross_entropy(logits, yb_v)
                        penalty = hook(a_params, epoch)
                        if penalty is not None:
                            loss = engine.add(loss, penalty)
                        lval = float(loss.data)
                        tape.backward(loss, a_params)
                    adam.step()
                else:
                    logits = supernet.forward(Tensor(xb_v, dtype=dtype), ctx)
                    lval = float(cross_entropy(logits, yb_v).data)
                ep_vl.append(lval)
                ep_va.append(_accuracy(logits.data, yb_v))

                # weight step on the train split
                result.split_audit["w_step"].add(tag_t)
                lr_t = cosine_lr(step, total_steps, config.w_lr_init)
                with GradTape(meter) as tape:
                    logits = supernet.forward(Tensor(xb_t, dtype=dtype), ctx)
                    loss = cross_entropy(logits, yb_t)
                    ltr = float(loss.data)
                    tape.backward(loss, w_params)
                clip_grad_norm(w_params, config.grad_clip)
                sgd.step(lr_t)
                ep_tl.append(ltr)
                ep_ta.append(_accuracy(logits.data, yb_t))

                if not (math.isfinite(ltr) and math.isfinite(lval)):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} step {step}")
                step += 1
            result.train_loss.append(float(np.mean(ep_tl)))
            result.val_loss.append(float(np.mean(ep_vl)))
            result.train_acc.append(float(np.mean(ep_ta)))
            result.val_acc.append(float(np.mean(ep_va)))
            result.alpha_trajectory.append({
                f"{src}->{dst}": engine.softmax(a.value).data.astype(float).tolist()
                for (src, dst), a in supernet.alphas.items()})
    except (FloatingPointError, engine.EngineError) as exc:
        result.aborted = True
        result.abort_reason = str(exc)
    finally:
        engine.set_meter(prev_meter)

    wall = time.perf_counter() - t0
    result.run_cost = RunCost(memory_bytes_peak=meter.peak, wall_time_s=wall)
    result.degenerate_events = ctx.degenerate_events
    if not result.aborted:
        result.genotype_str = discretize(supernet).serialize()
    return result


# ---------------------------------------------------------------------------
# toy retraining of a discretized architecture
# ---------------------------------------------------------------------------

class DiscreteNet:
    """The searched architecture: one chain per edge, no weighted sums."""

    def __init__(self, genotype: Genotype, spec, seed: int = 0,
                 dtype=engine.DEFAULT_DTYPE):
        from .graph import Cell, ReductionBlock, apply_module, make_module
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.dtype = dtype
        self.genotype = genotype
        cand_by_name = {c.name: c for c in spec.candidates}
        self.stem_conv = make_module("conv", spec.in_channels, spec.stem_channels,
                                     rng, dtype=dtype, kernel_size=3)
        self.stem_bn = make_module("bn", spec.stem_channels, spec.stem_channels,
                                   rng, dtype=dtype)
        self.layers = []
        width = spec.stem_channels
        for idx in range(spec.cells):
            chains = {}
            for slot, op_name in genotype.ops.items():
                if op_name not in cand_by_name:
                    raise ParameterError(f"genotype names unknown op {op_name!r}")
                chains[slot] = spec.instantiate_chain(cand_by_name[op_name], width,
                                                      rng, dtype)
            self.layers.append(("cell", chains))
            if idx in spec.reduce_after and idx != spec.cells - 1:
                self.layers.append(("reduce", ReductionBlock(width, width * 2, rng,
                                                             dtype)))
                width *= 2
        bound = float(np.sqrt(1.0 / width))
        self.head_w = Parameter(Tensor(
            rng.uniform(-bound, bound, size=(width, spec.classes)).astype(dtype)),
            role="weight", name="head_w")
        self.head_b = Parameter(Tensor(np.zeros(spec.classes, dtype=dtype)),
                                role="weight", name="head_b")

    def parameters(self):
        params = [self.stem_conv.kernel, self.head_w, self.head_b]
        for kind, payload in self.layers:
            if kind == "cell":
                for chain in payload.values():
                    for m in chain.modules:
                        if m.kernel is not None:
                            params.append(m.kernel)
            else:
                params.extend(payload.parameters())
        return params

    def forward(self, x: Tensor, ctx: EvalContext) -> Tensor:
        from .graph import apply_module, chain_forward
        h = apply_module(self.stem_conv, x, ctx)
        h = apply_module(self.stem_bn, h, ctx)
        for kind, payload in self.layers:
            if kind == "cell":
                states = [h]
                for dst in range(1, self.spec.nodes):
                    acc = None
                    for src in range(dst):
                        chain = payload[(src, dst)]
                        if chain.is_zero:
                            continue
                        term = chain_forward(chain.modules, states[src], ctx)
                        acc = term if acc is None else engine.add(acc, term)
                    if acc is None:
                        acc = engine.zeros_like_output(states[0],
                                                       states[0].data.shape[1], 1)
                    states.append(acc)
                h = states[-1]
            else:
                h = payload.forward(h, ctx)
        pooled = engine.tmean(h, axis=(2, 3))
        logits = engine.matmul(pooled, self.head_w.value)
        return engine.add(logits, self.head_b.value)


@dataclass
class RetrainReport:
    genotype_str: str
    epochs: int
    train_loss: list
    test_accuracy: float
    aborted: bool = False
    abort_reason: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def retrain(genotype: Genotype, spec, train_stream, test_stream,
            config: TrainConfig) -> RetrainReport:
    """Train the discretized network from scratch and report top-1 accuracy.

    No weighted sums and no kernel normalization are involved; this is the
    plain network the search selected, at whatever depth the spec declares.
    """
    config.validate()
    dtype = engine.DTYPES[config.precision]
    net = DiscreteNet(genotype, spec, seed=config.seed, dtype=dtype)
    params = net.parameters()
    sgd = SGDMomentum(params, config.w_momentum,
                      config.resolved_weight_decay(spec.name))
    ctx = EvalContext(training=True, kernel_norm=False)
    steps_per_epoch = train_stream.batches_per_epoch(config.batch_size)
    total = config.epochs * steps_per_epoch
    report = RetrainReport(genotype_str=genotype.serialize(), epochs=config.epochs,
                           train_loss=[], test_accuracy=0.0)
    step = 0
    try:
        for epoch in range(config.epochs):
            losses = []
            for xb, yb, _ in train_stream.epoch_batches(epoch, config.batch_size,
                                                        dtype):
                with GradTape() as tape:
                    logits = net.forward(Tensor(xb, dtype=dtype), ctx)
                    loss = cross_entropy(logits, yb)
                    lval = float(loss.data)
                    tape.backward(loss, params)
                clip_grad_norm(params, config.grad_clip)
                sgd.step(cosine_lr(step, total, config.w_lr_init))
                losses.append(lval)
                if not math.isfinite(lval):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                step += 1
            report.train_loss.append(float(np.mean(losses)))
        eval_ctx = EvalContext(training=False, kernel_norm=False)
        correct = 0
        seen = 0
        for xb, yb, _ in test_stream.epoch_batches(0, config.batch_size, dtype):
            logits = net.forward(Tensor(xb, dtype=dtype), eval_ctx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
        report.test_accuracy = correct / max(seen, 1)
    except (FloatingPointError, engine.EngineError) as exc:
        report.aborted = True
        report.abort_reason = str(exc)
    return report
