"""Inception-style regression network for count maps, run fully convolutionally.

Layout of the reference instantiation for ``r = 32`` (every convolution is
followed by batch normalization and a leaky ReLU)::

    stem      3x3 valid, 64            -2
    inc1      1x1:16 | 3x3:16   -> 32
    inc2      1x1:16 | 3x3:32   -> 48
    down1     14x14 valid, 16          -13
    inc3      1x1:112 | 3x3:48  -> 160
    inc4      1x1:64 | 3x3:32   -> 96
    inc5      1x1:40 | 3x3:40   -> 80
    inc6      1x1:32 | 3x3:96   -> 128
    down2     17x17 valid, 32          -16
    fc1       1x1, 64
    head      1x1, 1

Receptive field ``1 + 2 + 13 + 16 = 32``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .tensorcore import BatchNormParams, Tensor, batchnorm2d, concat_channels, conv2d, glorot_init, leaky_relu

LEAKY_SLOPE = 0.01
STEM_FILTERS = 64
DOWN1_FILTERS = 16
DOWN2_FILTERS = 32
# (1x1 filters, 3x3 filters) per inception block, before and after the first down-conv
INCEPTION_EARLY = ((16, 16), (16, 32))
INCEPTION_LATE = ((112, 48), (64, 32), (40, 40), (32, 96))
HEAD_HIDDEN = 64


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    pad: int = 0
    kind: str = "conv"

    @property
    def reduction(self) -> int:
        return self.kernel - 1 - 2 * self.pad


@dataclass(frozen=True)
class InceptionSpec:
    name: str
    in_ch: int
    ch_1x1: int
    ch_3x3: int
    kind: str = "inception"

    @property
    def out_ch(self) -> int:
        return self.ch_1x1 + self.ch_3x3

    def branches(self) -> tuple[ConvSpec, ConvSpec]:
        return (
            ConvSpec(f"{self.name}.b1", self.in_ch, self.ch_1x1, 1, 0),
            ConvSpec(f"{self.name}.b3", self.in_ch, self.ch_3x3, 3, 1),
        )

    @property
    def reduction(self) -> int:
        return 0


Layer = Union[ConvSpec, InceptionSpec]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    in_channels: int
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        prev = self.in_channels
        for layer in self.layers:
            if layer.in_ch != prev:
                raise ValueError(f"{layer.name}: expects {layer.in_ch} channels, previous layer gives {prev}")
            prev = layer.out_ch
        if prev != 1:
            raise ValueError("the last layer must produce a single count channel")

    @property
    def receptive_field(self) -> int:
        return receptive_field_of(self)

    def convs(self) -> list[ConvSpec]:
        out = []
        for layer in self.layers:
            out.extend(layer.branches() if isinstance(layer, InceptionSpec) else (layer,))
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for c in self.convs():
            shapes[f"{c.name}.weight"] = (c.out_ch, c.in_ch, c.kernel, c.kernel)
            shapes[f"{c.name}.bias"] = (c.out_ch,)
            shapes[f"{c.name}.bn.gamma"] = (c.out_ch,)
            shapes[f"{c.name}.bn.beta"] = (c.out_ch,)
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def output_size(self, input_size: int) -> int:
        return input_size - sum(layer.reduction for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "leaky_slope": self.leaky_slope,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = item.pop("kind")
            layers.append(ConvSpec(**item) if kind == "conv" else InceptionSpec(**item))
        return cls(layers=tuple(layers), in_channels=d["in_channels"], leaky_slope=d["leaky_slope"])

    def layer_table(self, input_size: int | None = None) -> str:
        """Plain-text table: name, kernel, pad, filters and (optionally) output size."""
        rows = [("layer", "kernel", "pad", "filters", "out")]
        size = input_size
        for layer in self.layers:
            if size is not None:
                size -= layer.reduction
            out = "-" if size is None else f"{size}x{size}"
            if isinstance(layer, InceptionSpec):
                rows.append((layer.name, "1x1|3x3", "0|1", f"{layer.ch_1x1}+{layer.ch_3x3}={layer.out_ch}", out))
            else:
                k = layer.kernel
                rows.append((layer.name, f"{k}x{k}", str(layer.pad), str(layer.out_ch), out))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        side, lead = input_window(self)
        lines.append(f"receptive field {self.receptive_field}, parameters {self.parameter_count()}")
        lines.append(f"input window {side}x{side} (padded convs add {lead} px of context on each side)")
        return "\n".join(lines)


def receptive_field_of(spec: NetworkSpec) -> int:
    """``1 + sum(k - 1 - 2*pad)`` over the stride-1 convolutions of the trunk."""
    return 1 + sum(layer.reduction for layer in spec.layers)


def input_window(spec: NetworkSpec) -> tuple[int, int]:
    """Side and leading offset of the input block one output value actually depends on.

    Zero-padded convolutions do not shrink the map but still widen what each
    output sees, so the window exceeds the nominal receptive field by twice the
    total padding. Output ``(i, j)`` reads padded-input rows
    ``i - lead .. i - lead + side - 1`` (same for columns).
    """
    side, lead = 1, 0
    for layer in spec.layers:
        convs = layer.branches() if isinstance(layer, InceptionSpec) else (layer,)
        widest = max(convs, key=lambda c: c.kernel)
        side += widest.kernel - 1
        lead += widest.pad
    return side, lead


def down_kernels(r: int) -> tuple[int, int]:
    """Split the kernel budget left after the 3x3 stem between the two down-convs."""
    budget = r - 1 - 2  # (a - 1) + (b - 1) = r - 1 - 2  with a, b the two kernel sides
    if budget < 2:
        raise ValueError(
            f"receptive field {r} is too small: after the 3x3 stem the two down-sampling "
            f"convolutions need kernels of side >= 2, i.e. r >= 5"
        )
    first = max(1, round(budget * 13 / 29))
    first = min(first, budget - 1)
    return first + 1, budget - first + 1


def countception_spec(r: int = 32, channels_in: int = 1) -> NetworkSpec:
    k1, k2 = down_kernels(r)
    layers: list[Layer] = [ConvSpec("stem", channels_in, STEM_FILTERS, 3, 0)]
    ch = STEM_FILTERS
    for i, (a, b) in enumerate(INCEPTION_EARLY, start=1):
        layers.append(InceptionSpec(f"inc{i}", ch, a, b))
        ch = a + b
    layers.append(ConvSpec("down1", ch, DOWN1_FILTERS, k1, 0))
    ch = DOWN1_FILTERS
    for i, (a, b) in enumerate(INCEPTION_LATE, start=len(INCEPTION_EARLY) + 1):
        layers.append(InceptionSpec(f"inc{i}", ch, a, b))
        ch = a + b
    layers.append(ConvSpec("down2", ch, DOWN2_FILTERS, k2, 0))
    layers.append(ConvSpec("fc1", DOWN2_FILTERS, HEAD_HIDDEN, 1, 0))
    layers.append(ConvSpec("head", HEAD_HIDDEN, 1, 1, 0))
    spec = NetworkSpec(layers=tuple(layers), in_channels=channels_in)
    assert receptive_field_of(spec) == r
    return spec


@dataclass
class NetworkState:
    """Learned parameters and batchnorm statistics, keyed by layer name."""

    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormParams] = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, b in self.bn.items():
            out[f"{name}.gamma"] = b.gamma
            out[f"{name}.beta"] = b.beta
        return out

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkState":
        new = self.copy()
        for t in new.trainable().values():
            t.data = t.data.astype(dtype)
        for b in new.bn.values():
            b.running_mean = b.running_mean.astype(dtype)
            b.running_var = b.running_var.astype(dtype)
        return new

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None

    def all_finite(self) -> bool:
        arrays = [t.data for t in self.trainable().values()]
        arrays += [a for b in self.bn.values() for a in (b.running_mean, b.running_var)]
        return all(np.isfinite(a).all() for a in arrays)


def init_state(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> NetworkState:
    """Glorot-uniform weights with ReLU gain, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    state = NetworkState()
    gain = math.sqrt(2.0)
    for c in spec.convs():
        w = glorot_init((c.out_ch, c.in_ch, c.kernel, c.kernel), gain=gain, rng=rng, dtype=dtype)
        state.params[f"{c.name}.weight"] = Tensor(w, requires_grad=True, name=f"{c.name}.weight")
        state.params[f"{c.name}.bias"] = Tensor(np.zeros(c.out_ch, dtype=dtype), requires_grad=True,
                                                name=f"{c.name}.bias")
        state.bn[f"{c.name}.bn"] = BatchNormParams.create(c.out_ch, dtype=dtype, name=f"{c.name}.bn")
    return state


def build_countception(r: int = 32, channels_in: int = 1, seed: int = 0, dtype=np.float32):
    """Reference network spec for receptive field ``r`` plus freshly initialized state."""
    spec = countception_spec(r, channels_in)
    return spec, init_state(spec, seed, dtype)


def _conv_block(x: Tensor, c: ConvSpec, state: NetworkState, training: bool, slope: float,
                method: str = "auto") -> Tensor:
    y = conv2d(x, state.params[f"{c.name}.weight"], state.params[f"{c.name}.bias"], pad=c.pad, method=method)
    y = batchnorm2d(y, state.bn[f"{c.name}.bn"], training)
    return leaky_relu(y, slope)


def forward_full(state: NetworkState, spec: NetworkSpec, padded_image, mode: str = "eval",
                 conv_method: str = "auto") -> Tensor:
    """Count map ``(B, 1, H - r + 1, W - r + 1)`` for a padded ``(B, C, H, W)`` batch.

    A single ``(C, H, W)`` image is promoted to a batch of one. ``conv_method``
    is forwarded to every convolution; ``"gemm"`` keeps each output value a
    function of its own window only, bit for bit, at some cost for the large kernels.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = padded_image if isinstance(padded_image, Tensor) else Tensor(np.asarray(padded_image))
    if x.ndim == 3:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected (B, {spec.in_channels}, H, W) input, got {x.shape}")
    r = spec.receptive_field
    if min(x.shape[2:]) < r:
        raise ValueError(f"input {x.shape[2:]} is smaller than the receptive field {r}")
    training = mode == "train"
    slope = spec.leaky_slope
    for layer in spec.layers:
        if isinstance(layer, InceptionSpec):
            b1, b3 = layer.branches()
            x = concat_channels(_conv_block(x, b1, state, training, slope, conv_method),
                                _conv_block(x, b3, state, training, slope, conv_method))
        else:
            x = _conv_block(x, layer, state, training, slope, conv_method)
    return x
