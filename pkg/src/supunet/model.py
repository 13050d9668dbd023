"""U-Net with a fully connected head supervising the bottleneck.

Layout for depth ``D`` and base width ``B``::

    enc{s}   conv3x3 -> relu -> conv3x3 -> relu -> maxpool2      s = 0..D-1, B*2**s channels
    mid      conv3x3 -> relu -> conv3x3 -> relu                  B*2**D channels
    head     flatten -> fc1 -> relu -> fc2 -> reshape (C, H/2**D, W/2**D)
    dec{s}   upconv2 -> concat(skip_s, up) -> conv3x3 -> relu -> conv3x3 -> relu
                                                                 s = D-1..0, B*2**s channels
    out      conv1x1 to C channels

The forward pass records a tape of layer applications; ``backward`` replays it
in reverse, summing gradients where a value feeds two consumers (the ``mid``
activation feeds both the head and ``dec{D-1}``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from supunet import layers
from supunet.rng import SplitMix64, derive_seed
from supunet.tensor import ShapeError


class ConfigError(ValueError):
    """Raised for inconsistent architecture or training hyperparameters."""


@dataclass(frozen=True)
class UNetConfig:
    input_size: Tuple[int, int] = (32, 32)
    in_channels: int = 1
    num_classes: int = 2
    depth: int = 2
    base_channels: int = 8
    fc_hidden: int = 256
    lambda_bottleneck: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        for name in ("in_channels", "num_classes", "base_channels", "fc_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if not self.lambda_bottleneck >= 0:
            raise ConfigError(f"lambda_bottleneck must be >= 0, got {self.lambda_bottleneck}")
        f = 2**self.depth
        if h < 1 or w < 1 or h % f or w % f:
            raise ConfigError(
                f"input size {h}x{w} is not divisible by 2**depth = {f}"
            )

    @property
    def bottleneck_size(self) -> Tuple[int, int]:
        f = 2**self.depth
        return self.input_size[0] // f, self.input_size[1] // f

    def width(self, stage: int) -> int:
        return self.base_channels * 2**stage


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray
    fan_in: int


class ParamRegistry:
    """Ordered, uniquely named learnable tensors with gradient buffers.

    Order: encoder stages 0..D-1, the bottleneck conv block, the head's FC
    layers, decoder stages D-1..0, the 1x1 output conv. Within a layer the
    weight precedes the bias.
    """

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, name: str, shape, fan_in: int) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(name, np.zeros(shape), np.zeros(shape), fan_in)
        self._params[name] = p
        return p

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.value.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0.0

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self}


@dataclass
class ForwardOutput:
    seg_logits: np.ndarray
    bottleneck_logits: np.ndarray
    tape: list = field(default_factory=list, repr=False)
    values: dict = field(default_factory=dict, repr=False)


class UNet:
    def __init__(self, config: UNetConfig):
        self.config = config
        self.params = ParamRegistry()
        self._declare()

    def _conv(self, prefix: str, cin: int, cout: int, k: int) -> None:
        self.params.add(f"{prefix}.weight", (cout, cin, k, k), fan_in=cin * k * k)
        self.params.add(f"{prefix}.bias", (cout,), fan_in=0)

    def _declare(self) -> None:
        cfg = self.config
        cin = cfg.in_channels
        for s in range(cfg.depth):
            self._conv(f"enc{s}.conv1", cin, cfg.width(s), 3)
            self._conv(f"enc{s}.conv2", cfg.width(s), cfg.width(s), 3)
            cin = cfg.width(s)
        mid = cfg.width(cfg.depth)
        self._conv("mid.conv1", cin, mid, 3)
        self._conv("mid.conv2", mid, mid, 3)

        hb, wb = cfg.bottleneck_size
        flat = mid * hb * wb
        head_out = cfg.num_classes * hb * wb
        self.params.add("head.fc1.weight", (cfg.fc_hidden, flat), fan_in=flat)
        self.params.add("head.fc1.bias", (cfg.fc_hidden,), fan_in=0)
        self.params.add("head.fc2.weight", (head_out, cfg.fc_hidden), fan_in=cfg.fc_hidden)
        self.params.add("head.fc2.bias", (head_out,), fan_in=0)

        cin = mid
        for s in reversed(range(cfg.depth)):
            wdt = cfg.width(s)
            # each transposed-conv output sees one tap per input channel
            self.params.add(f"dec{s}.up.weight", (wdt, cin, 2, 2), fan_in=cin)
            self.params.add(f"dec{s}.up.bias", (wdt,), fan_in=0)
            self._conv(f"dec{s}.conv1", 2 * wdt, wdt, 3)
            self._conv(f"dec{s}.conv2", wdt, wdt, 3)
            cin = wdt
        self._conv("out", cin, cfg.num_classes, 1)

    def initialize(self, seed: int) -> None:
        """He-normal weights, zero biases.

        Parameter ``i`` in registry order draws from the SplitMix64 stream
        seeded with ``derive_seed(seed, i)``; values are
        ``normal * sqrt(2 / fan_in)`` in row-major order.
        """
        for i, p in enumerate(self.params):
            if p.fan_in == 0:
                p.value[...] = 0.0
                continue
            gen = SplitMix64(derive_seed(seed, i))
            std = np.sqrt(2.0 / p.fan_in)
            p.value[...] = (gen.normal(p.value.size) * std).reshape(p.value.shape)
        self.params.zero_grad()

    def _w(self, prefix: str):
        return self.params[f"{prefix}.weight"].value, self.params[f"{prefix}.bias"].value

    def forward(self, x: np.ndarray, with_head: bool = True) -> ForwardOutput:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (n, {cfg.in_channels}, H, W), got {x.shape}")
        f = 2**cfg.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial size {x.shape[2:]} is not divisible by {f}")
        if with_head and tuple(x.shape[2:]) != cfg.input_size:
            raise ShapeError(
                f"the FC head is built for {cfg.input_size}, got spatial size {tuple(x.shape[2:])}"
            )

        values = {"input": x}
        # entries: (op, input keys, parameter prefix, output key, extra)
        tape = []

        def apply(op, inputs, prefix, out, fn, extra=None):
            values[out] = fn(*[values[k] for k in inputs])
            tape.append((op, tuple(inputs), prefix, out, extra))
            return values[out]

        def conv_block(prefix, src):
            w1, b1 = self._w(f"{prefix}.conv1")
            w2, b2 = self._w(f"{prefix}.conv2")
            apply("conv", [src], f"{prefix}.conv1", f"{prefix}.z1", lambda v: layers.conv2d(v, w1, b1))
            apply("relu", [f"{prefix}.z1"], None, f"{prefix}.a1", layers.relu)
            apply("conv", [f"{prefix}.a1"], f"{prefix}.conv2", f"{prefix}.z2", lambda v: layers.conv2d(v, w2, b2))
            apply("relu", [f"{prefix}.z2"], None, f"{prefix}.a2", layers.relu)
            return f"{prefix}.a2"

        src = "input"
        skips = []
        for s in range(cfg.depth):
            skip = conv_block(f"enc{s}", src)
            skips.append(skip)
            pooled, record = layers.maxpool2(values[skip])
            values[f"enc{s}.pool"] = pooled
            tape.append(("pool", (skip,), None, f"enc{s}.pool", record))
            src = f"enc{s}.pool"
        bottleneck = conv_block("mid", src)

        n = x.shape[0]
        hb, wb = x.shape[2] // f, x.shape[3] // f
        head_logits = None
        if with_head:
            fw1, fb1 = self._w("head.fc1")
            fw2, fb2 = self._w("head.fc2")
            apply("flatten", [bottleneck], None, "head.flat", lambda v: v.reshape(n, -1))
            apply("fc", ["head.flat"], "head.fc1", "head.f1", lambda v: layers.fc(v, fw1, fb1))
            apply("relu", ["head.f1"], None, "head.r1", layers.relu)
            apply("fc", ["head.r1"], "head.fc2", "head.f2", lambda v: layers.fc(v, fw2, fb2))
            head_logits = apply(
                "reshape", ["head.f2"], None, "head.logits",
                lambda v: v.reshape(n, cfg.num_classes, hb, wb),
            )

        src = bottleneck
        for s in reversed(range(cfg.depth)):
            uw, ub = self._w(f"dec{s}.up")
            apply("upconv", [src], f"dec{s}.up", f"dec{s}.up", lambda v: layers.upconv2(v, uw, ub))
            apply("concat", [skips[s], f"dec{s}.up"], None, f"dec{s}.cat", layers.concat_channels)
            src = conv_block(f"dec{s}", f"dec{s}.cat")

        ow, ob = self._w("out")
        seg = apply("conv", [src], "out", "seg", lambda v: layers.conv2d(v, ow, ob))
        return ForwardOutput(seg_logits=seg, bottleneck_logits=head_logits, tape=tape, values=values)

    def backward(
        self,
        output: ForwardOutput,
        seg_grad: np.ndarray,
        bottleneck_grad: Optional[np.ndarray] = None,
    ) -> Dict[str, np.ndarray]:
        """Accumulate parameter gradients into the registry's buffers.

        Gradients are added (not assigned); call ``params.zero_grad()`` between
        steps. Returns the gradient with respect to every taped value, which
        includes the network input under the key ``"input"``.
        """
        if seg_grad.shape != output.seg_logits.shape:
            raise ShapeError(f"seg gradient {seg_grad.shape} != logits {output.seg_logits.shape}")
        grads: Dict[str, np.ndarray] = {"seg": np.asarray(seg_grad, dtype=np.float64)}
        if bottleneck_grad is not None:
            if output.bottleneck_logits is None:
                raise ShapeError("forward pass ran without the bottleneck head")
            if bottleneck_grad.shape != output.bottleneck_logits.shape:
                raise ShapeError(
                    f"bottleneck gradient {bottleneck_grad.shape} != logits {output.bottleneck_logits.shape}"
                )
            grads["head.logits"] = np.asarray(bottleneck_grad, dtype=np.float64)

        values = output.values

        def send(key, g):
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        def accumulate(prefix, gw, gb):
            self.params[f"{prefix}.weight"].grad += gw
            self.params[f"{prefix}.bias"].grad += gb

        for op, inputs, prefix, out, extra in reversed(output.tape):
            g = grads.get(out)
            if g is None:
                continue
            src = values[inputs[0]]
            if op == "conv":
                w = self.params[f"{prefix}.weight"].value
                gx, gw, gb = layers.conv2d_backward(src, w, g)
                accumulate(prefix, gw, gb)
                send(inputs[0], gx)
            elif op == "relu":
                send(inputs[0], layers.relu_backward(src, g))
            elif op == "pool":
                send(inputs[0], layers.maxpool2_backward(extra, g))
            elif op == "upconv":
                w = self.params[f"{prefix}.weight"].value
                gx, gw, gb = layers.upconv2_backward(src, w, g)
                accumulate(prefix, gw, gb)
                send(inputs[0], gx)
            elif op == "concat":
                ga, gb_ = layers.concat_backward(src.shape[1], g)
                send(inputs[0], ga)
                send(inputs[1], gb_)
            elif op == "fc":
                w = self.params[f"{prefix}.weight"].value
                gx, gw, gb = layers.fc_backward(src, w, g)
                accumulate(prefix, gw, gb)
                send(inputs[0], gx)
            elif op in ("flatten", "reshape"):
                send(inputs[0], g.reshape(src.shape))
            else:  # pragma: no cover
                raise RuntimeError(f"unknown tape op {op!r}")
        return grads

    def round_to_float32(self) -> None:
        """Snap parameters to float32-representable values (checkpoint precision)."""
        for p in self.params:
            p.value[...] = p.value.astype(np.float32).astype(np.float64)


def build(config: UNetConfig, seed: int):
    """Construct and initialize a model; returns ``(model, registry)``."""
    model = UNet(config)
    model.initialize(seed)
    return model, model.params

