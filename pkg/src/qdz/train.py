"""Training procedures: full-precision training, quantized distillation,
differentiable quantization of point locations, and post-training
("post-mortem") quantization baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .model import QuantizedModel, weight_values
from .nn import DistillationConfig, Network
from .quantcore import (
    DETERMINISTIC,
    STOCHASTIC,
    QuantizedVector,
    UniformScheme,
    dequantize,
    linear_scale,
    nonuniform_quantize,
    quant_point_gradient,
    quantile_init,
    uniform_init,
    uniform_quantize,
)
from .rng import stream

log = logging.getLogger(__name__)

MIN_POINTS = 2
MAX_POINTS = 256
COLLAPSE_FRACTION = 0.95


SCHEDULES = ("constant", "halving", "anneal", "cosine")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Schedule:
    """Per-epoch learning rate.

    ``halving`` halves the rate after any epoch whose training loss fails to
    beat the best so far. ``anneal`` halves after the first such epoch and
    then after every epoch. ``cosine`` decays from ``lr`` to zero.
    """

    def __init__(self, kind: str, lr: float, epochs: int):
        if kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {kind!r}")
        self.kind, self.base, self.epochs = kind, lr, epochs
        self.lr = lr
        self.best = math.inf
        self.annealing = False

    def rate(self, epoch: int) -> float:
        if self.kind == "cosine":
            return self.base * 0.5 * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.lr

    def observe(self, loss: float) -> None:
        stalled = not loss < self.best
        self.best = min(self.best, loss)
        if self.kind == "halving" and stalled:
            self.lr /= 2
        elif self.kind == "anneal" and (stalled or self.annealing):
            self.annealing = True
            self.lr /= 2


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    schedule: str = "constant"
    distill: DistillationConfig | None = None


@dataclass
class QDConfig:
    scheme: UniformScheme = field(default_factory=lambda: UniformScheme.from_bits(4))
    bucket_size: int = 256
    lr: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    distill: DistillationConfig | None = field(default_factory=DistillationConfig)
    seed: int = 0
    schedule: str = "constant"
    exclude_ends: bool = False

    def __post_init__(self):
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class DQConfig:
    """``bits_per_layer`` is one width for every layer or a per-layer list;
    a layer with ``b`` bits starts with ``2**b`` points."""

    bits_per_layer: int | list[int] = 2
    bucket_size: int = 256
    lr: float = 0.001
    iterations: int = 1000
    batch_size: int = 32
    loss_kind: str = "distill"
    init: str = "quantile"
    redistribute: bool = True
    redistribute_batches: int = 10
    distill: DistillationConfig = field(default_factory=DistillationConfig)
    seed: int = 0
    exclude_ends: bool = False

    def __post_init__(self):
        bits = [self.bits_per_layer] if isinstance(self.bits_per_layer, int) else self.bits_per_layer
        if any(not 1 <= b <= 8 for b in bits):
            raise ValueError("bits per layer must lie in 1..8")
        if self.loss_kind not in ("task", "distill"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.init not in ("uniform", "quantile"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class Metrics:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float, acc: float) -> None:
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "accuracy": acc})

    def to_csv(self) -> str:
        lines = ["epoch,split,loss,accuracy"]
        lines += [f"{r['epoch']},{r['split']},{r['loss']:.10g},{r['accuracy']:.10g}" for r in self.rows]
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = stream(seed, 0xBA7C, epoch).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _loss(logits, labels, teacher_logits, distill: DistillationConfig | None):
    if distill is None or teacher_logits is None:
        return nn.cross_entropy(logits, labels)
    return nn.distillation_loss(logits, teacher_logits, labels, distill)


def _check_finite(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss ({loss}) during {where}")


def _evaluate(net: Network, data: Dataset, epoch: int, metrics: Metrics | None) -> None:
    if metrics is None:
        return
    for split, x, y in (("train", data.x_train, data.y_train), ("test", data.x_test, data.y_test)):
        if len(x):
            logits = nn.forward(net, x)
            loss, _ = nn.cross_entropy(logits, y)
            metrics.add(epoch, split, loss, float((logits.argmax(axis=1) == y).mean()))


def teacher_outputs(teacher: Network | None, x: np.ndarray) -> np.ndarray | None:
    return None if teacher is None else nn.forward(teacher, x)


def train_full_precision(net: Network, data: Dataset, cfg: TrainConfig,
                         teacher: Network | None = None,
                         metrics: Metrics | None = None) -> Network:
    """Plain mini-batch SGD, in place. With ``teacher`` and ``cfg.distill``
    set, the loss is the distillation loss against the teacher's logits."""
    t_logits = teacher_outputs(teacher, data.x_train) if cfg.distill else None
    sched = Schedule(cfg.schedule, cfg.lr, cfg.epochs)
    for epoch in range(cfg.epochs):
        lr = sched.rate(epoch)
        total = 0.0
        for idx in _batches(len(data.x_train), cfg.batch_size, cfg.seed, epoch):
            cache = nn.ForwardCache()
            logits = nn.forward(net, data.x_train[idx], cache)
            loss, g = _loss(logits, data.y_train[idx], None if t_logits is None else t_logits[idx], cfg.distill)
            _check_finite(loss, f"training epoch {epoch}")
            nn.sgd_step(net, nn.backward(net, cache, g), lr)
            total += loss * len(idx)
        sched.observe(total)
        _evaluate(net, data, epoch, metrics)
    return net


def kept_layers(n_layers: int, exclude_ends: bool) -> set[int]:
    """Layers left in full precision: the first and last when ``exclude_ends``."""
    if not exclude_ends:
        return set()
    if n_layers < 3:
        raise ValueError(f"excluding first and last layer leaves nothing to quantize in {n_layers} layers")
    return {0, n_layers - 1}


def quantize_weights(net: Network, scheme: UniformScheme, bucket_size: int,
                     seed: int = 0, step: int = 0, keep=()) -> list[QuantizedVector | np.ndarray]:
    """Uniformly quantize every weight matrix not in ``keep``; stochastic
    draws use the stream keyed by ``(seed, layer, step)``. Kept layers come
    back as flat full-precision copies."""
    out = []
    for i, w in enumerate(net.weight_vectors()):
        if i in keep:
            out.append(w.copy())
            continue
        rng = stream(seed, 0x0A11, i, step) if scheme.mode == STOCHASTIC else None
        out.append(uniform_quantize(linear_scale(w, bucket_size), scheme, rng))
    return out


def quantized_distillation(student: Network, teacher: Network | None, data: Dataset,
                           cfg: QDConfig, metrics: Metrics | None = None) -> QuantizedModel:
    """Train ``student`` against quantized copies of itself.

    Every step the forward and backward passes run on the quantized weights,
    while the SGD update lands on the full-precision weights, so small
    gradients accumulate until a weight crosses a rounding threshold. With
    ``teacher=None`` or ``cfg.distill=None`` this is quantized training with
    the plain label loss. ``student`` holds the full-precision weights on
    return.
    """
    distill = cfg.distill if teacher is not None else None
    t_logits = teacher_outputs(teacher, data.x_train) if distill else None
    keep = kept_layers(len(student.layers), cfg.exclude_ends)
    sched = Schedule(cfg.schedule, cfg.lr, cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        lr = sched.rate(epoch)
        total = 0.0
        for idx in _batches(len(data.x_train), cfg.batch_size, cfg.seed, epoch):
            qvs = quantize_weights(student, cfg.scheme, cfg.bucket_size, cfg.seed, step, keep)
            q_net = student.with_weights([weight_values(q) for q in qvs])
            cache = nn.ForwardCache()
            logits = nn.forward(q_net, data.x_train[idx], cache)
            loss, g = _loss(logits, data.y_train[idx], None if t_logits is None else t_logits[idx], distill)
            _check_finite(loss, f"quantized distillation step {step}")
            nn.sgd_step(student, nn.backward(q_net, cache, g), lr)
            total += loss * len(idx)
            step += 1
        sched.observe(total)
        if metrics is not None:
            q_final = student.with_weights(
                [weight_values(q) for q in quantize_weights(student, cfg.scheme, cfg.bucket_size, cfg.seed, step, keep)])
            _evaluate(q_final, data, epoch, metrics)
    return QuantizedModel(student.copy(),
                          quantize_weights(student, cfg.scheme, cfg.bucket_size, cfg.seed, step, keep))


def pm_quantize(model: Network, bits: int, bucketing: bool = True,
                bucket_size: int = 256, exclude_ends: bool = False) -> QuantizedModel:
    """Deterministic uniform quantization of a trained model, no retraining.
    Without bucketing each weight matrix is a single bucket."""
    scheme = UniformScheme.from_bits(bits, DETERMINISTIC)
    keep = kept_layers(len(model.layers), exclude_ends)
    qvs = []
    for i, w in enumerate(model.weight_vectors()):
        if i in keep:
            qvs.append(w.copy())
            continue
        k = bucket_size if bucketing else w.size
        qvs.append(uniform_quantize(linear_scale(w, k), scheme))
    return QuantizedModel(model.copy(), qvs)


def _clamped_quotas(g: np.ndarray, total: int, lo: int, hi: int) -> np.ndarray:
    """Real-valued quotas ``clip(lam * g, lo, hi)`` summing to ``total``.

    Zero-norm layers sit at ``lo`` unless the other layers cannot absorb the
    budget even at ``hi``, in which case they share the excess evenly.
    """
    pos = g > 0
    cap = hi * pos.sum() + lo * (~pos).sum()
    if total >= cap:
        return np.where(pos, float(hi), lo + (total - cap) / max(int((~pos).sum()), 1))
    excess = lambda lam: np.clip(lam * g, lo, hi).sum() - total
    a, b = 0.0, 1.0
    while excess(b) < 0:
        b *= 2
    for _ in range(200):
        mid = 0.5 * (a + b)
        if excess(mid) < 0:
            a = mid
        else:
            b = mid
    # the lower end never overshoots, so flooring leaves a shortfall in [0, n]
    return np.clip(a * g, lo, hi)


def allocate_points(norms, total: int, lo: int = MIN_POINTS, hi: int = MAX_POINTS) -> list[int]:
    """Split ``total`` points across layers in proportion to ``norms``.

    Shares are ``clip(lam * norm, lo, hi)`` with ``lam`` chosen so they sum
    to ``total``; integer counts come from largest-remainder rounding (ties
    to the lower layer index). Non-finite or all-zero norms give an even split.
    """
    g = np.asarray(norms, dtype=np.float64)
    n = g.size
    if n == 0:
        return []
    if total < lo * n or total > hi * n:
        raise ValueError(f"cannot place {total} points in {n} layers within [{lo}, {hi}]")
    if not np.all(np.isfinite(g)) or np.any(g < 0) or g.sum() <= 0:
        g = np.ones(n)
    quota = _clamped_quotas(g, total, lo, hi)
    counts = np.floor(quota).astype(np.int64)
    remainder = quota - counts
    short = total - int(counts.sum())
    order = sorted(range(n), key=lambda i: (-remainder[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


def gradient_norms(model: Network, data: Dataset, sample_batches: int, batch_size: int = 32,
                   seed: int = 0, teacher_logits: np.ndarray | None = None,
                   distill: DistillationConfig | None = None) -> list[float]:
    """``|| mean over batches of dLoss/dW ||_2`` per layer.

    The loss is the distillation loss when ``teacher_logits`` (aligned with
    the training rows) and ``distill`` are given, else cross-entropy.
    """
    if sample_batches < 1:
        raise ValueError("need at least one sample batch")
    sums = [np.zeros_like(l.weight) for l in model.layers]
    used = 0
    for idx in _batches(len(data.x_train), batch_size, seed, 0x6A0):
        if used == sample_batches:
            break
        cache = nn.ForwardCache()
        logits = nn.forward(model, data.x_train[idx], cache)
        t = None if teacher_logits is None else teacher_logits[idx]
        _, g = _loss(logits, data.y_train[idx], t, distill)
        for acc, (dw, _) in zip(sums, nn.backward(model, cache, g)):
            acc += dw
        used += 1
    return [float(np.linalg.norm(s / used)) for s in sums]


def initial_points(weights: list[np.ndarray], n_points: list[int], init: str, bucket_size: int) -> list[np.ndarray]:
    if init == "quantile":
        return [quantile_init(w, s, bucket_size) for w, s in zip(weights, n_points)]
    return [uniform_init(s) for s in n_points]


def _layer_bits(base_bits, n_layers: int) -> list[int]:
    bits = [base_bits] * n_layers if isinstance(base_bits, int) else list(base_bits)
    if len(bits) != n_layers:
        raise ValueError(f"got {len(bits)} bit widths for {n_layers} quantized layers")
    return bits


def _with_points(model: Network, scaled: dict, points: dict) -> Network:
    """``model`` with every layer in ``scaled`` snapped to its points."""
    return model.with_weights([dequantize(nonuniform_quantize(scaled[i], points[i])) if i in scaled else w
                               for i, w in enumerate(model.weight_vectors())])


def redistribute_bits(model: Network, data: Dataset, base_bits, sample_batches: int,
                      batch_size: int = 32, seed: int = 0, *, bucket_size: int = 256,
                      init: str = "quantile", loss_kind: str = "task",
                      distill: DistillationConfig | None = None, keep=()) -> list[int]:
    """Points per quantized layer, allocated in proportion to expected-gradient norms.

    Gradients are taken on the model quantized with ``2**b`` starting points
    per layer, i.e. where point optimisation begins, under the same loss it
    will optimise. The total is ``sum(2**b)`` over layers, so a uniform
    ``base_bits`` keeps ``L * 2**b`` points overall. Layers in ``keep`` stay
    in full precision and take no part in the allocation.
    """
    active = [i for i in range(len(model.layers)) if i not in keep]
    base = [2**b for b in _layer_bits(base_bits, len(active))]
    weights = model.weight_vectors()
    scaled = {i: linear_scale(weights[i], bucket_size) for i in active}
    points = dict(zip(active, initial_points([weights[i] for i in active], base, init, bucket_size)))
    t_logits = nn.forward(model, data.x_train) if loss_kind == "distill" else None
    norms = gradient_norms(_with_points(model, scaled, points), data, sample_batches, batch_size, seed,
                           t_logits, distill if loss_kind == "distill" else None)
    norms = [norms[i] for i in active]
    if not any(norms):
        log.warning("all layer gradients are zero; keeping uniform allocation")
    return allocate_points(norms, sum(base))


def point_bits(points: list[int]) -> list[float]:
    """Fractional bit width ``log2(points)`` per layer."""
    return [math.log2(p) for p in points]


def _collapsed(qv: QuantizedVector) -> bool:
    counts = np.bincount(qv.indices, minlength=qv.levels)
    return counts.max() > COLLAPSE_FRACTION * counts.sum()


@dataclass
class DQResult:
    model: QuantizedModel
    points: list[np.ndarray]
    points_per_layer: list[int]
    history: list[float] = field(default_factory=list)


def differentiable_quantization(model: Network, data: Dataset, cfg: DQConfig,
                                metrics: Metrics | None = None) -> DQResult:
    """Learn non-uniform point locations for a trained, frozen model.

    Each step quantizes the weights onto the current points, backpropagates
    the loss to the dequantized weights and maps that gradient onto the
    points. Only the points move; they are clipped to [0, 1] after each step.
    With ``loss_kind='distill'`` the unquantized model acts as teacher.
    ``bits_per_layer``, ``points`` and ``points_per_layer`` cover the
    quantized layers only.
    """
    keep = kept_layers(len(model.layers), cfg.exclude_ends)
    active = [i for i in range(len(model.layers)) if i not in keep]
    bits = _layer_bits(cfg.bits_per_layer, len(active))
    if cfg.redistribute:
        n_points = redistribute_bits(model, data, bits, cfg.redistribute_batches, cfg.batch_size, cfg.seed,
                                     bucket_size=cfg.bucket_size, init=cfg.init, loss_kind=cfg.loss_kind,
                                     distill=cfg.distill, keep=keep)
    else:
        n_points = [2**b for b in bits]

    weights = model.weight_vectors()
    scaled = {i: linear_scale(weights[i], cfg.bucket_size) for i in active}
    points = dict(zip(active, initial_points([weights[i] for i in active], n_points, cfg.init,
                                             cfg.bucket_size)))

    def snapped() -> list[QuantizedVector | np.ndarray]:
        return [nonuniform_quantize(scaled[i], points[i]) if i in scaled else w for i, w in enumerate(weights)]

    t_logits = nn.forward(model, data.x_train) if cfg.loss_kind == "distill" else None
    distill = cfg.distill if cfg.loss_kind == "distill" else None
    history = []
    warned = set()
    n = len(data.x_train)
    epoch = 0
    step = 0
    while step < cfg.iterations:
        for idx in _batches(n, cfg.batch_size, cfg.seed, 0xD0 + epoch):
            if step == cfg.iterations:
                break
            qvs = snapped()
            for i in active:
                if i not in warned and _collapsed(qvs[i]):
                    log.warning("layer %d: over %.0f%% of weights share one point", i, 100 * COLLAPSE_FRACTION)
                    warned.add(i)
            q_net = model.with_weights([weight_values(q) for q in qvs])
            cache = nn.ForwardCache()
            logits = nn.forward(q_net, data.x_train[idx], cache)
            loss, g = _loss(logits, data.y_train[idx], None if t_logits is None else t_logits[idx], distill)
            _check_finite(loss, f"differentiable quantization step {step}")
            history.append(loss)
            grads = nn.backward(q_net, cache, g)
            for i in active:
                grad_p = quant_point_gradient(qvs[i], grads[i][0].ravel())
                points[i] = np.clip(points[i] - cfg.lr * grad_p, 0.0, 1.0)
            step += 1
        if metrics is not None:
            _evaluate(_with_points(model, scaled, points), data, epoch, metrics)
        epoch += 1

    return DQResult(QuantizedModel(model.copy(), snapped()), [points[i] for i in active], n_points, history)
