"""UNet-style depth completion network with a residual head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .preproc import PreprocessedInput
from .synth import make_rng

IN_CHANNELS = 5  # D_NNI, E, R, G, B


@dataclass(frozen=True)
class ModelConfig:
    n_f: int = 64
    n_s: int = 5
    in_channels: int = IN_CHANNELS
    zero_last: bool = True

    def __post_init__(self):
        if self.n_s < 2:
            raise ValueError(f"n_s must be >= 2, got {self.n_s}")
        if self.n_f < 4:
            raise ValueError(f"n_f must be >= 4, got {self.n_f}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    def channels(self, scale: int) -> int:
        """Feature maps at scale 1..n_s (doubling per scale)."""
        return self.n_f * 2 ** (scale - 1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.n_s - 1)


@dataclass
class Layer:
    name: str
    weight: T.Tensor
    bias: T.Tensor
    scale: int  # 1 = full resolution

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def layer_specs(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, scale) in forward order."""
    ch = config.channels
    specs = []
    c_in = config.in_channels
    for s in range(1, config.n_s + 1):
        specs.append((f"enc{s}a", c_in, ch(s), s))
        specs.append((f"enc{s}b", ch(s), ch(s), s))
        c_in = ch(s)
    for s in range(config.n_s - 1, 0, -1):
        specs.append((f"dec{s}a", ch(s + 1) + ch(s), ch(s), s))
        specs.append((f"dec{s}b", ch(s), ch(s), s))
    specs.append(("out", ch(1), 1, 1))
    return specs


class DepthCompletionNet:
    """Encoder/decoder over (D_NNI, E, C); predicts D_NNI + residual.

    Encoder scales run two conv+ReLU layers and max-pool in between. Each
    decoder scale upsamples by 2, concatenates the matching encoder output
    and runs two conv+ReLU layers. A final 3x3 conv to one channel (no ReLU)
    produces the residual. Optional quantizers are applied to layer weights
    and to post-ReLU activations; the output layer is never quantized.
    """

    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers
        self.weight_quant: dict = {}
        self.act_quant: dict = {}
        self.meta: dict = {}

    # -- bookkeeping ------------------------------------------------------
    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def last_layer(self) -> str:
        return self.layers[-1].name

    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def mparams(self) -> float:
        return self.n_params() / 1e6

    def parameters(self) -> list[T.Tensor]:
        params = [t for l in self.layers for t in (l.weight, l.bias)]
        for q in list(self.weight_quant.values()) + list(self.act_quant.values()):
            params.extend(q.parameters())
        return params

    def clone(self) -> "DepthCompletionNet":
        layers = [Layer(l.name, T.parameter(l.weight.data.copy()), T.parameter(l.bias.data.copy()), l.scale)
                  for l in self.layers]
        net = DepthCompletionNet(self.config, layers)
        net.weight_quant = {k: q.clone() for k, q in self.weight_quant.items()}
        net.act_quant = {k: q.clone() for k, q in self.act_quant.items()}
        net.meta = dict(self.meta)
        return net

    @property
    def is_quantized(self) -> bool:
        return bool(self.weight_quant or self.act_quant)

    # -- forward ----------------------------------------------------------
    def _conv(self, name: str, x: T.Tensor, act: bool = True) -> T.Tensor:
        l = self.layer(name) if name != "out" else self.layers[-1]
        w = l.weight
        b = l.bias
        wq = self.weight_quant.get(name)
        if wq is not None:
            w, b = wq.apply_weight(w, b)
        y = T.conv2d(x, w, b)
        if not act:
            return y
        y = T.relu(y)
        aq = self.act_quant.get(name)
        return aq(y) if aq is not None else y

    def residual(self, x: T.Tensor) -> T.Tensor:
        cfg = self.config
        skips = []
        h = x
        for s in range(1, cfg.n_s + 1):
            if s > 1:
                h = T.maxpool2(h)
            h = self._conv(f"enc{s}a", h)
            h = self._conv(f"enc{s}b", h)
            skips.append(h)
        for s in range(cfg.n_s - 1, 0, -1):
            h = T.upsample2_nearest(h)
            h = T.concat_channels(h, skips[s - 1])
            h = self._conv(f"dec{s}a", h)
            h = self._conv(f"dec{s}b", h)
        return self._conv("out", h, act=False)

    def forward(self, inputs) -> T.Tensor:
        """Normalized prediction N x 1 x H x W from N x 5 x H x W inputs."""
        x = _as_batch(inputs)
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise T.ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        m = self.config.multiple
        if h % m or w % m:
            raise ValueError(
                f"input resolution {w}x{h} must be divisible by {m} (2^(n_s-1) for n_s={self.config.n_s})"
            )
        d_nni = x[:, 0:1]
        return d_nni + self.residual(x)

    __call__ = forward

    def activation_counts(self, height: int, width: int) -> dict[str, int]:
        """Output element count per layer for one H x W frame."""
        return {l.name: l.c_out * (height >> (l.scale - 1)) * (width >> (l.scale - 1)) for l in self.layers}


def _as_batch(inputs) -> T.Tensor:
    if isinstance(inputs, PreprocessedInput):
        return T.Tensor(inputs.stacked()[None])
    if isinstance(inputs, T.Tensor):
        x = inputs
    else:
        x = T.Tensor(np.asarray(inputs, dtype=np.float32))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise T.ShapeError(f"expected N x C x H x W input, got {x.shape}")
    return x


def build(config: ModelConfig, seed: int = 0) -> DepthCompletionNet:
    """Kaiming-uniform (fan-in) weights, zero biases; optionally a zero output layer."""
    rng = make_rng(seed)
    layers = []
    for name, c_in, c_out, scale in layer_specs(config):
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(np.float32)
        if name == "out" and config.zero_last:
            w[:] = 0.0
        layers.append(Layer(name, T.parameter(w), T.parameter(np.zeros(c_out, np.float32)), scale))
    return DepthCompletionNet(config, layers)


def forward(net: DepthCompletionNet, inputs) -> T.Tensor:
    return net.forward(inputs)


def predict(net: DepthCompletionNet, inputs) -> np.ndarray:
    """Inference without graph construction; returns N x H x W normalized depth."""
    with T.no_grad():
        return net.forward(inputs).data[:, 0]


def zero_last_layer(net: DepthCompletionNet) -> DepthCompletionNet:
    """Copy of ``net`` whose residual head outputs exactly zero (the NNI baseline)."""
    out = net.clone()
    last = out.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.zeros_like(last.bias.data)
    return out


# -- size accounting -------------------------------------------------------------
@dataclass
class LayerSize:
    name: str
    n_w: int
    b_w: int
    n_a: int
    b_a: int

    @property
    def s_w(self) -> int:
        return self.n_w * self.b_w

    @property
    def s_a(self) -> int:
        return self.n_a * self.b_a


@dataclass
class SizeReport:
    rows: list[LayerSize]
    resolution: tuple[int, int] = (0, 0)  # H, W
    quantized_w: set = field(default_factory=set)
    quantized_a: set = field(default_factory=set)

    @property
    def weight_bits(self) -> int:
        return sum(r.s_w for r in self.rows)

    @property
    def activation_bits(self) -> int:
        return sum(r.s_a for r in self.rows)

    @property
    def weight_mb(self) -> float:
        return bits_to_mb(self.weight_bits)

    @property
    def activation_mb(self) -> float:
        return bits_to_mb(self.activation_bits)

    @property
    def mparams(self) -> float:
        return sum(r.n_w for r in self.rows) / 1e6

    def average_bits(self, kind: str = "w", quantized_only: bool = True) -> float:
        """Size-weighted mean bit width, by default over the quantized layers only."""
        chosen = self.quantized_w if kind == "w" else self.quantized_a
        rows = [r for r in self.rows if not quantized_only or r.name in chosen] or self.rows
        if kind == "w":
            return sum(r.s_w for r in rows) / sum(r.n_w for r in rows)
        return sum(r.s_a for r in rows) / sum(r.n_a for r in rows)

    def table(self) -> str:
        lines = ["layer, N_W, b_W, N_A, b_A, S^l_W, S^l_A"]
        for r in self.rows:
            lines.append(f"{r.name}, {r.n_w}, {r.b_w}, {r.n_a}, {r.b_a}, {r.s_w}, {r.s_a}")
        lines.append(
            f"total, {sum(r.n_w for r in self.rows)}, -, {sum(r.n_a for r in self.rows)}, -, "
            f"{self.weight_bits}, {self.activation_bits}"
        )
        lines.append(f"weights: {self.weight_bits} bits = {self.weight_mb:.6f} MB")
        lines.append(f"activations: {self.activation_bits} bits = {self.activation_mb:.6f} MB")
        if self.quantized_w:
            lines.append(f"b_W average (quantized layers): {self.average_bits('w'):.4f}")
        if self.quantized_a:
            lines.append(f"b_A average (quantized layers): {self.average_bits('a'):.4f}")
        return "\n".join(lines)


def bits_to_mb(bits: float) -> float:
    """Decimal megabytes (10^6 bytes)."""
    return bits / 8.0 / 1e6


def size_bits(counts, bits) -> int:
    return int(sum(int(n) * int(b) for n, b in zip(counts, bits)))


def count_sizes(net: DepthCompletionNet, resolution: tuple[int, int], bitwidths: Optional[dict] = None) -> SizeReport:
    """Weight/activation sizes at ``resolution`` = (H, W).

    ``bitwidths`` maps layer name to ``(b_w, b_a)``; missing layers and
    ``None`` entries count as 32-bit. Without it the net's own quantizers
    decide (integer bit widths), and everything else is 32-bit.
    """
    h, w = resolution
    counts = net.activation_counts(h, w)
    rows = []
    qw, qa = set(), set()
    for l in net.layers:
        if bitwidths is not None:
            bw, ba = bitwidths.get(l.name, (None, None))
        else:
            wq, aq = net.weight_quant.get(l.name), net.act_quant.get(l.name)
            bw = wq.bits() if wq is not None else None
            ba = aq.bits() if aq is not None else None
        if bw is not None:
            qw.add(l.name)
        if ba is not None:
            qa.add(l.name)
        rows.append(LayerSize(l.name, l.n_params, bw or 32, counts[l.name], ba or 32))
    return SizeReport(rows, (h, w), qw, qa)

