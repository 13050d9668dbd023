"""Joint training of the segmentation output and the bottleneck head.

The objective is ``L1(sigmoid(seg_logits), onehot(mask)) + lambda * CE(bottleneck_logits,
down_mask)`` where ``down_mask`` is the label map subsampled to bottleneck
resolution. Optimization is plain SGD with momentum on fixed-size minibatches
drawn from seeded epoch permutations.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from supunet import checkpoint, layers, losses
from supunet.data import Sample, downsample_labels, stack
from supunet.model import ConfigError, ForwardOutput, ParamRegistry, UNet, UNetConfig, build
from supunet.rng import SplitMix64, derive_seed
from supunet.tensor import ShapeError

LOG_HEADER = "step\tL_total\tL1\tCE\twallclock_ms"


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 500
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    lambda_bottleneck: float = 1.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_path: Optional[os.PathLike] = None
    log_path: Optional[os.PathLike] = None
    # off by default: wall-clock times would make logs non-reproducible
    record_wallclock: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lambda_bottleneck >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_bottleneck}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class LogRecord:
    step: int
    total: float
    l1: float
    ce: float


def total_loss(output: ForwardOutput, mask: np.ndarray, down_mask: np.ndarray, lam: float):
    """Return ``(LogRecord-like terms, seg_grad, bottleneck_grad)``.

    ``mask`` is (n, H, W), ``down_mask`` is (n, H/2**D, W/2**D). The sigmoid
    is applied here, so ``seg_grad`` is taken with respect to the raw logits.
    """
    seg = output.seg_logits
    n, c, h, w = seg.shape
    if mask.shape != (n, h, w):
        raise ShapeError(f"mask {mask.shape} does not match seg logits {seg.shape}")
    prob = layers.sigmoid(seg)
    l1, g_prob = losses.l1_loss(prob, losses.one_hot(mask, c))
    seg_grad = g_prob * prob * (1.0 - prob)
    ce, g_ce = losses.pixelwise_cross_entropy(output.bottleneck_logits, down_mask)
    return (l1 + lam * ce, l1, ce), seg_grad, lam * g_ce


def sgd_step(registry: ParamRegistry, velocity: Dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """``v <- momentum * v + grad; param <- param - lr * v``; then clear gradients."""
    for p in registry:
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += p.grad
        p.value -= lr * v
    registry.zero_grad()


def check_compatible(config: UNetConfig, samples: Sequence[Sample]) -> None:
    if not samples:
        raise ConfigError("dataset is empty")
    for i, s in enumerate(samples):
        if s.image.shape[1] != config.in_channels or tuple(s.mask.shape) != config.input_size:
            raise ConfigError(
                f"sample {i} has shape {s.image.shape[1:]} but the model expects "
                f"({config.in_channels}, {config.input_size[0]}, {config.input_size[1]})"
            )
        if s.mask.min() < 0 or s.mask.max() >= config.num_classes:
            raise ConfigError(f"sample {i} has labels outside [0, {config.num_classes})")


def _format_log(rec: LogRecord, wall_ms: int) -> str:
    return f"{rec.step}\t{rec.total:.17g}\t{rec.l1:.17g}\t{rec.ce:.17g}\t{wall_ms}"


def _save(model: UNet, path: os.PathLike) -> None:
    # the live model must match what a reload would see
    model.round_to_float32()
    checkpoint.save(path, model)


def train(model: UNet, samples: Sequence[Sample], config: TrainConfig) -> List[LogRecord]:
    """Run ``config.steps`` SGD steps; returns one log record per step."""
    check_compatible(model.config, samples)
    factor = 2**model.config.depth
    shuffler = SplitMix64(derive_seed(config.seed, 0x5348))
    queue: List[int] = []
    velocity: Dict[str, np.ndarray] = {}
    log: List[LogRecord] = []
    log_fh = open(config.log_path, "w") if config.log_path else None
    start = time.perf_counter()
    try:
        if log_fh:
            log_fh.write(LOG_HEADER + "\n")
        model.params.zero_grad()
        for step in range(1, config.steps + 1):
            while len(queue) < config.batch_size:
                queue.extend(int(i) for i in shuffler.permutation(len(samples)))
            batch = [samples[i] for i in queue[: config.batch_size]]
            del queue[: config.batch_size]

            images, masks = stack(batch)
            out = model.forward(images)
            (total, l1, ce), seg_grad, bn_grad = total_loss(
                out, masks, downsample_labels(masks, factor), config.lambda_bottleneck
            )
            if not math.isfinite(total):
                raise DivergenceError(step, total)
            model.backward(out, seg_grad, bn_grad)
            sgd_step(model.params, velocity, config.learning_rate, config.momentum)

            rec = LogRecord(step, total, l1, ce)
            log.append(rec)
            if log_fh:
                wall = int((time.perf_counter() - start) * 1000) if config.record_wallclock else 0
                log_fh.write(_format_log(rec, wall) + "\n")
                log_fh.flush()
            if config.checkpoint_path and config.eval_every and step % config.eval_every == 0:
                _save(model, config.checkpoint_path)
        if config.checkpoint_path:
            _save(model, config.checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return log


def predict(model: UNet, images: np.ndarray) -> np.ndarray:
    """Per-pixel class labels (n, H, W); ties resolve to the lowest class."""
    out = model.forward(images, with_head=tuple(images.shape[2:]) == model.config.input_size)
    return np.argmax(out.seg_logits, axis=1)


def evaluate(model: UNet, samples: Sequence[Sample], batch_size: int = 16) -> dict:
    """Aggregate confusion over every pixel of every sample, then the metrics.

    The bottleneck head's cross-entropy against the downsampled labels is
    reported as a diagnostic (mean over samples).
    """
    check_compatible(model.config, samples)
    ncls = model.config.num_classes
    factor = 2**model.config.depth
    per_sample = []
    ce_values = []
    for lo in range(0, len(samples), batch_size):
        images, masks = stack(samples[lo : lo + batch_size])
        out = model.forward(images)
        pred = np.argmax(out.seg_logits, axis=1)
        down = downsample_labels(masks, factor)
        for k in range(len(masks)):
            counts = losses.confusion_per_class(pred[k], masks[k], ncls)
            ce, _ = losses.pixelwise_cross_entropy(out.bottleneck_logits[k : k + 1], down[k : k + 1])
            ce_values.append(ce)
            per_sample.append(counts)

    totals = [sum((s[c] for s in per_sample), losses.ConfusionCounts()) for c in range(len(per_sample[0]))]
    return {
        "count": len(samples),
        "metrics": losses.report_metrics(totals),
        "counts": [c.as_dict() for c in totals],
        "bottleneck_ce": float(np.mean(ce_values)),
        "per_sample": [
            {
                "index": i,
                "counts": [c.as_dict() for c in counts],
                "metrics": losses.report_metrics(counts),
                "bottleneck_ce": ce_values[i],
            }
            for i, counts in enumerate(per_sample)
        ],
    }


@dataclass
class GradcheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    analytic_max: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    draws: int = 1
    margin: float = float("inf")

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self) -> List[str]:
        width = max(len(k) for k in self.errors)
        return [
            f"{name.ljust(width)}  max_rel_err={err:.3e}  {'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in self.errors.items()
        ]


# denominators below this are treated as absolute error (finite-difference noise floor)
GRADCHECK_FLOOR = 1e-6
KINK_MARGIN = 20
MAX_DRAWS = 200


def kink_margin(output: ForwardOutput) -> float:
    """Distance of the forward pass from the nearest ReLU or max-pool switch.

    Considers every ReLU input and, for pooling windows whose maximum is
    positive, the gap between the winner and the runner-up.
    """
    margin = math.inf
    for op, inputs, _, _, extra in output.tape:
        v = output.values[inputs[0]]
        if op == "relu":
            margin = min(margin, float(np.abs(v).min()))
        elif op == "pool":
            n, c, hh, ww = v.shape
            win = v.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top = np.sort(win, axis=1)
            live = top[:, 3] > 0
            if live.any():
                margin = min(margin, float((top[live, 3] - top[live, 2]).min()))
    return margin


def gradcheck(config: UNetConfig, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
              batch: int = 1) -> GradcheckReport:
    """Compare analytic gradients of the total loss with central differences.

    Every scalar parameter is perturbed by +-eps. Per parameter tensor the
    report holds ``max |a - f| / max(|a|, |f|, GRADCHECK_FLOOR)``.

    Biases are drawn from U(-0.1, 0.1) instead of zero: with zero biases a
    dead ReLU region feeds exact zeros into the next layer, whose
    pre-activations then sit on the kink where central differences disagree
    with any one-sided derivative. For the same reason the input, labels and
    biases are redrawn (deterministically) until every ReLU input and every
    positive max-pool runner-up lies at least ``KINK_MARGIN * eps`` from a
    kink.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    model, params = build(config, seed)
    h, w = config.input_size
    factor = 2**config.depth
    lam = config.lambda_bottleneck
    for attempt in range(1, MAX_DRAWS + 1):
        gen = SplitMix64(derive_seed(seed, 0x4743, attempt))
        for p in params:
            if p.fan_in == 0:
                p.value[...] = gen.uniform(p.value.size, -0.1, 0.1)
        x = gen.uniform(batch * config.in_channels * h * w).reshape(batch, config.in_channels, h, w)
        mask = gen.integers(batch * h * w, config.num_classes).reshape(batch, h, w)
        out = model.forward(x)
        margin = kink_margin(out)
        if margin >= KINK_MARGIN * eps:
            break
    else:
        raise RuntimeError(f"no evaluation point {KINK_MARGIN} * eps away from every kink in {MAX_DRAWS} draws")
    down = downsample_labels(mask, factor)

    def loss() -> float:
        (total, _, _), _, _ = total_loss(model.forward(x), mask, down, lam)
        return total

    _, seg_grad, bn_grad = total_loss(out, mask, down, lam)
    params.zero_grad()
    model.backward(out, seg_grad, bn_grad)

    report = GradcheckReport(tolerance=tol, draws=attempt, margin=margin)
    for p in params:
        analytic = p.grad.ravel().copy()
        flat = p.value.reshape(-1)
        numeric = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            dn = loss()
            flat[i] = orig
            numeric[i] = (up - dn) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADCHECK_FLOOR)
        report.errors[p.name] = float(np.max(np.abs(analytic - numeric) / denom))
        report.analytic_max[p.name] = float(np.max(np.abs(analytic)))
    return report
