"""Symmetric uniform fake-quantization with straight-through gradients.

Two quantizer flavours share the same forward rule:

* ``UniformQuantizer`` keeps the bit width fixed and learns the threshold in
  the log domain, ``t = log2(x_max)``; the step follows as
  ``d = x_max / (2^(b-1) - 1)``.
* ``MixedQuantizer`` learns step and threshold independently; the bit
  width is inferred from their ratio.

Forward (for d, x_max > 0)::

    Q(x) = sign(x) * min(d * floor(|x|/d + 1/2), x_max)   if |x| < x_max
    Q(x) = sign(x) * x_max                                otherwise

The clip branch is taken for ``|x| >= x_max`` (not only ``>``) so that
``Q(Q(x)) == Q(x)`` also holds when ``x_max`` is not a multiple of ``d``.
All arithmetic runs in float64 before casting back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T

LN2 = math.log(2.0)
LAMBDA_W = 2.66e-7
LAMBDA_A = 1.73e-6
MIN_BITS = 2
MAX_RATIO = 2.0**31 - 1  # keeps integer codes inside int32


def _check_positive(d, x_max) -> None:
    if not (np.all(np.asarray(d) > 0) and np.all(np.asarray(x_max) > 0)):
        raise ValueError(f"quantizer needs d > 0 and x_max > 0, got d={d}, x_max={x_max}")


def quantize(x, d: float, x_max: float) -> np.ndarray:
    """Elementwise quantizer on arrays; keeps float64 input as float64, else float32."""
    _check_positive(d, x_max)
    arr = np.asarray(x)
    out_dtype = np.float64 if arr.dtype == np.float64 else np.float32
    a = np.abs(arr.astype(np.float64))
    d, x_max = float(d), float(x_max)
    inner = np.minimum(d * np.floor(a / d + 0.5), x_max)
    mag = np.where(a < x_max, inner, x_max)
    return (np.sign(arr) * mag).astype(out_dtype)


def infer_bitwidth(d: float, x_max: float) -> tuple[int, float]:
    """(b_int, b_cont) with b_cont = 1 + log2(x_max/d + 1) and b_int = max(2, ceil(b_cont))."""
    _check_positive(d, x_max)
    b_cont = 1.0 + math.log2(float(x_max) / float(d) + 1.0)
    return max(MIN_BITS, math.ceil(b_cont)), b_cont


def step_for_bits(x_max: float, bits: int) -> float:
    """Step that puts 2^(b-1) - 1 positive levels below x_max."""
    if bits < MIN_BITS:
        raise ValueError(f"bit width must be >= {MIN_BITS}, got {bits}")
    return float(x_max) / (2.0 ** (bits - 1) - 1.0)


def level_count(d: float, x_max: float) -> int:
    """Distinct outputs of the quantizer: 2 * ceil(x_max/d) + 1."""
    return 2 * math.ceil(float(x_max) / float(d)) + 1


@dataclass
class QuantizerParams:
    d: float
    x_max: float
    b: int
    mode: str  # "UP" | "MP"
    target: str  # "weights" | "activations"
    learn_d: bool = True
    learn_x_max: bool = True

    def __post_init__(self):
        _check_positive(self.d, self.x_max)
        if self.d > self.x_max * (1 + 1e-6):
            raise ValueError(f"d ({self.d}) must not exceed x_max ({self.x_max})")


def _fake_quant(x: T.Tensor, d: float, x_max: float, bw_params):
    """Forward values and backward closure; ``bw_params`` yields the parameter gradients."""
    x64 = x.data.astype(np.float64)
    q64 = quantize(x64, d, x_max)
    inside = np.abs(x64) < x_max

    def bw(g):
        g64 = g.astype(np.float64)
        gx = np.where(np.abs(x64) <= x_max, g, 0.0).astype(np.float32)
        return (gx, *bw_params(g64, x64, q64, inside))

    return q64.astype(np.float32), bw


class UniformQuantizer:
    """Fixed bit width, learned threshold t = log2(x_max) with the TQT surrogate.

    dq/dt = ln2 * (q - x) inside the range and ln2 * sign(x) * x_max when
    clipped; ``clip_grad=False`` zeroes the clipped-region term (ablation).
    """

    mode = "UP"

    def __init__(self, bits: int, x_max: float, target: str = "weights", learn: bool = True, clip_grad: bool = True):
        if bits < MIN_BITS:
            raise ValueError(f"bit width must be >= {MIN_BITS}, got {bits}")
        _check_positive(1.0, x_max)
        self.b = int(bits)
        self.t = T.Tensor(np.float32(math.log2(x_max)), requires_grad=learn)
        self.target = target
        self.clip_grad = clip_grad

    @property
    def x_max(self) -> float:
        return 2.0 ** float(self.t.data)

    @property
    def d(self) -> float:
        return step_for_bits(self.x_max, self.b)

    def bits(self) -> int:
        return self.b

    def bits_cont(self) -> float:
        return float(self.b)

    def parameters(self) -> list[T.Tensor]:
        return [self.t] if self.t.requires_grad else []

    def project(self) -> None:
        pass

    def clone(self) -> "UniformQuantizer":
        q = UniformQuantizer(self.b, 1.0, self.target, self.t.requires_grad, self.clip_grad)
        q.t = T.Tensor(self.t.data.copy(), requires_grad=self.t.requires_grad)
        return q

    def params(self) -> QuantizerParams:
        return QuantizerParams(self.d, self.x_max, self.b, "UP", self.target, False, self.t.requires_grad)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        x = T.as_tensor(x)
        x_max = self.x_max
        clip_grad = self.clip_grad

        def bw_params(g64, x64, q64, inside):
            dq = np.where(inside, LN2 * (q64 - x64), LN2 * np.sign(x64) * x_max if clip_grad else 0.0)
            return (np.float32((g64 * dq).sum()),)

        q, bw = _fake_quant(x, self.d, x_max, bw_params)
        return T.custom_op(q, (x, self.t), bw, "quant_up", custom_backward=True)

    def apply_weight(self, w: T.Tensor, b: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        return self(w), self(b)


class MixedQuantizer:
    """Learned step d and threshold x_max; the bit width is inferred.

    Straight-through surrogates: dq/dd = (q - x)/d inside the range, 0 when
    clipped; dq/dx_max = 0 inside, sign(x) when clipped.
    """

    mode = "MP"

    def __init__(self, d: float, x_max: float, target: str = "weights", learn_d: bool = True, learn_x_max: bool = True):
        _check_positive(d, x_max)
        self.d_t = T.Tensor(np.float32(d), requires_grad=learn_d)
        self.x_max_t = T.Tensor(np.float32(x_max), requires_grad=learn_x_max)
        self.target = target
        self.project()

    @classmethod
    def with_bits(cls, x_max: float, bits: int, target: str = "weights") -> "MixedQuantizer":
        """Quantizer whose inferred width is exactly ``bits`` despite float32 storage."""
        ratio = 2.0 ** (bits - 1) - 1.0
        xm = np.float32(x_max)
        d = np.float32(float(xm) / ratio)
        while float(xm) / float(d) > ratio:
            d = np.nextafter(d, np.float32(np.inf))
        return cls(float(d), float(xm), target)

    @property
    def d(self) -> float:
        return float(self.d_t.data)

    @property
    def x_max(self) -> float:
        return float(self.x_max_t.data)

    def bits(self) -> int:
        return infer_bitwidth(self.d, self.x_max)[0]

    def bits_cont(self) -> float:
        return infer_bitwidth(self.d, self.x_max)[1]

    def bits_tensor(self) -> T.Tensor:
        """Differentiable b_cont = 1 + log2(x_max/d + 1)."""
        d, x_max = self.d, self.x_max
        r = x_max / d

        def bw(g):
            s = float(g) / ((r + 1.0) * LN2)
            return (np.float32(-s * x_max / (d * d)), np.float32(s / d))

        return T.custom_op(np.float32(1.0 + math.log2(r + 1.0)), (self.d_t, self.x_max_t), bw, "bits")

    def parameters(self) -> list[T.Tensor]:
        return [p for p in (self.d_t, self.x_max_t) if p.requires_grad]

    def project(self) -> None:
        """Enforce 0 < d <= x_max and x_max/d <= 2^31 - 1 after an update."""
        x_max = max(self.x_max, 1e-12)
        d = min(max(self.d, x_max / MAX_RATIO), x_max)
        self.x_max_t.data = np.asarray(x_max, dtype=np.float32)
        self.d_t.data = np.asarray(min(np.float32(d), self.x_max_t.data), dtype=np.float32)

    def clone(self) -> "MixedQuantizer":
        return MixedQuantizer(self.d, self.x_max, self.target, self.d_t.requires_grad, self.x_max_t.requires_grad)

    def params(self) -> QuantizerParams:
        return QuantizerParams(
            self.d, self.x_max, self.bits(), "MP", self.target, self.d_t.requires_grad, self.x_max_t.requires_grad
        )

    def __call__(self, x: T.Tensor) -> T.Tensor:
        x = T.as_tensor(x)
        d, x_max = self.d, self.x_max

        def bw_params(g64, x64, q64, inside):
            gd = np.where(inside, (q64 - x64) / d, 0.0)
            gx = np.where(inside, 0.0, np.sign(x64))
            return (np.float32((g64 * gd).sum()), np.float32((g64 * gx).sum()))

        q, bw = _fake_quant(x, d, x_max, bw_params)
        return T.custom_op(q, (x, self.d_t, self.x_max_t), bw, "quant_mp", custom_backward=True)

    def apply_weight(self, w: T.Tensor, b: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        return self(w), self(b)


# -- size constraints ------------------------------------------------------------
@dataclass
class SizeConstraint:
    """Budget on total bits of one tensor family (weights or activations)."""

    counts: Sequence[int]  # N_{x,l} per quantized layer
    lam: float = LAMBDA_W
    target_avg: Optional[float] = None  # b-bar
    target_bits: Optional[float] = None  # absolute S°

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be >= 0")
        if (self.target_avg is None) == (self.target_bits is None):
            raise ValueError("give exactly one of target_avg or target_bits")

    @classmethod
    def from_target_mb(cls, counts: Sequence[int], megabytes: float, lam: float = LAMBDA_W) -> "SizeConstraint":
        return cls(counts, lam, target_bits=megabytes * 8e6)

    @property
    def budget_bits(self) -> float:
        if self.target_bits is not None:
            return float(self.target_bits)
        return float(self.target_avg) * float(sum(self.counts))

    @property
    def average_target(self) -> float:
        return self.budget_bits / float(sum(self.counts))


def size_excess(bits: Sequence, constraint: SizeConstraint):
    """S_x = sum_l N_l * b_l - S°; tensors in, tensor out (floats give a float)."""
    if len(bits) != len(constraint.counts):
        raise ValueError(f"{len(bits)} bit widths for {len(constraint.counts)} layers")
    if all(not isinstance(b, T.Tensor) for b in bits):
        return float(sum(float(n) * float(b) for n, b in zip(constraint.counts, bits))) - constraint.budget_bits
    total = None
    for n, b in zip(constraint.counts, bits):
        term = T.as_tensor(b) * float(n)
        total = term if total is None else total + term
    return total - constraint.budget_bits


def size_penalty(bits: Sequence, constraint: SizeConstraint):
    """lam * max(0, S_x)^2. Accepts floats (reporting) or bit-width tensors (training)."""
    s = size_excess(bits, constraint)
    if not isinstance(s, T.Tensor):
        return constraint.lam * max(0.0, s) ** 2
    return T.relu(s) * T.relu(s) * constraint.lam


def penalty_bits(q: MixedQuantizer, relaxation: str = "ste_ceil") -> T.Tensor:
    """Bit width fed to the penalty: continuous, or integer forward with continuous gradient."""
    b = q.bits_tensor()
    if relaxation == "continuous":
        return b
    if relaxation == "ste_ceil":
        return T.ceil_ste(b)
    raise ValueError(f"unknown penalty relaxation {relaxation!r}")


# -- attaching quantizers to a model --------------------------------------------
@dataclass
class QuantPlan:
    """Which tensors to quantize and how.

    UP: ``weight_bits``/``act_bits`` are the fixed widths. MP: they are the
    average targets b-bar (``weight_target_mb`` overrides the weight budget
    with an absolute size); initial widths default to ceil(target).
    ``act_bits=None`` leaves activations in float.
    """

    mode: str = "MP"
    weight_bits: Optional[float] = 4
    act_bits: Optional[float] = None
    weight_target_mb: Optional[float] = None
    layers: Optional[list[str]] = None  # default: all but the output layer
    lambda_w: float = LAMBDA_W
    lambda_a: float = LAMBDA_A
    init_weight_bits: Optional[int] = None
    init_act_bits: Optional[int] = None
    penalty: str = "ste_ceil"
    clip_grad: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("UP", "MP"):
            raise ValueError(f"mode must be UP or MP, got {self.mode!r}")
        if self.weight_bits is None and self.weight_target_mb is None and self.act_bits is None:
            raise ValueError("quantization plan has nothing to quantize")
        if self.mode == "UP":
            for b in (self.weight_bits, self.act_bits):
                if b is not None and (int(b) != b or b < MIN_BITS):
                    raise ValueError(f"UP bit widths must be integers >= {MIN_BITS}, got {b}")
        if self.penalty not in ("ste_ceil", "continuous"):
            raise ValueError(f"unknown penalty relaxation {self.penalty!r}")

    @property
    def quantize_weights(self) -> bool:
        return self.weight_bits is not None or self.weight_target_mb is not None

    def initial_weight_bits(self) -> int:
        if self.init_weight_bits is not None:
            return int(self.init_weight_bits)
        return max(MIN_BITS, math.ceil(self.weight_bits if self.weight_bits is not None else 8))

    def initial_act_bits(self) -> int:
        if self.init_act_bits is not None:
            return int(self.init_act_bits)
        return max(MIN_BITS, math.ceil(self.act_bits))


class _MaxRecorder:
    """Stand-in activation quantizer that records max |x| during calibration."""

    def __init__(self):
        self.value = 0.0

    def __call__(self, x: T.Tensor) -> T.Tensor:
        self.value = max(self.value, float(np.abs(x.data).max()))
        return x


def _max_abs(*arrays) -> float:
    m = max(float(np.abs(a).max()) for a in arrays if a.size)
    return m if m > 0 else 1.0


def calibrate_activations(net, names: Sequence[str], batch) -> dict[str, float]:
    """Max |activation| per layer over a calibration batch, float forward."""
    probe = net.clone()
    probe.weight_quant = {}
    recorders = {n: _MaxRecorder() for n in names}
    probe.act_quant = dict(recorders)
    with T.no_grad():
        probe.forward(batch)
    return {n: (r.value if r.value > 0 else 1.0) for n, r in recorders.items()}


def attach(net, plan: QuantPlan, calibration=None):
    """Copy of ``net`` with fake-quantizers on the planned layers.

    Thresholds start at the max |value| of each tensor; activations need a
    ``calibration`` batch (N x 5 x H x W) for that.
    """
    names = plan.layers if plan.layers is not None else net.layer_names[:-1]
    known = set(net.layer_names)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise KeyError(f"quantization plan references unknown layers: {unknown}")
    if net.last_layer in names:
        raise ValueError(f"the output layer {net.last_layer!r} stays in float32")
    out = net.clone()
    out.weight_quant, out.act_quant = {}, {}
    if plan.quantize_weights:
        for n in names:
            layer = out.layer(n)
            x_max = _max_abs(layer.weight.data, layer.bias.data)
            if plan.mode == "UP":
                out.weight_quant[n] = UniformQuantizer(int(plan.weight_bits), x_max, "weights", clip_grad=plan.clip_grad)
            else:
                out.weight_quant[n] = MixedQuantizer.with_bits(x_max, plan.initial_weight_bits(), "weights")
    if plan.act_bits is not None:
        if calibration is None:
            raise ValueError("activation quantization needs a calibration batch")
        ranges = calibrate_activations(net, names, calibration)
        for n in names:
            if plan.mode == "UP":
                out.act_quant[n] = UniformQuantizer(int(plan.act_bits), ranges[n], "activations", clip_grad=plan.clip_grad)
            else:
                out.act_quant[n] = MixedQuantizer.with_bits(ranges[n], plan.initial_act_bits(), "activations")
    return out


def detach(net):
    """Copy of ``net`` with every quantizer removed."""
    out = net.clone()
    out.weight_quant, out.act_quant = {}, {}
    return out


def constraints_for(net, plan: QuantPlan, resolution: tuple[int, int]) -> dict[str, SizeConstraint]:
    """Weight/activation budgets for an MP plan; activation counts at ``resolution``."""
    out = {}
    wnames = list(net.weight_quant)
    if wnames and plan.mode == "MP":
        counts = [net.layer(n).n_params for n in wnames]
        if plan.weight_target_mb is not None:
            out["weights"] = SizeConstraint.from_target_mb(counts, plan.weight_target_mb, plan.lambda_w)
        else:
            out["weights"] = SizeConstraint(counts, plan.lambda_w, target_avg=plan.weight_bits)
    anames = list(net.act_quant)
    if anames and plan.mode == "MP":
        act = net.activation_counts(*resolution)
        out["activations"] = SizeConstraint([act[n] for n in anames], plan.lambda_a, target_avg=plan.act_bits)
    return out


def total_penalty(net, constraints: dict[str, SizeConstraint], relaxation: str = "ste_ceil") -> Optional[T.Tensor]:
    total = None
    for kind, quants in (("weights", net.weight_quant), ("activations", net.act_quant)):
        c = constraints.get(kind)
        if c is None or not quants:
            continue
        p = size_penalty([penalty_bits(q, relaxation) for q in quants.values()], c)
        total = p if total is None else total + p
    return total


# -- fixed-point export ----------------------------------------------------------
def to_codes(x, d: float, x_max: float) -> np.ndarray:
    """Integer codes of quantized values; +-ceil(x_max/d) encodes +-x_max."""
    q = quantize(np.asarray(x, dtype=np.float64), d, x_max)
    sentinel = math.ceil(float(x_max) / float(d))
    clipped = np.abs(q) >= float(x_max)
    codes = np.where(clipped, np.sign(q) * sentinel, np.rint(q / float(d)))
    return codes.astype(np.int32)


def from_codes(codes, d: float, x_max: float) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    sentinel = math.ceil(float(x_max) / float(d))
    vals = np.where(np.abs(codes) == sentinel, np.sign(codes) * float(x_max), codes * float(d))
    return vals.astype(np.float32)
