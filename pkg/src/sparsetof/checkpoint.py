"""Checkpoint directories: a plain-text manifest plus one DTB1 blob per tensor."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import dtb
from . import tensor as T
from .data import DataError
from .model import DepthCompletionNet, Layer, ModelConfig, layer_specs
from .quant import MixedQuantizer, UniformQuantizer, from_codes, to_codes

MANIFEST = "checkpoint.txt"


def _kv(tokens) -> dict[str, str]:
    return dict(t.split("=", 1) for t in tokens)


def _shape(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split("x"))


def _shape_str(shape) -> str:
    return "x".join(str(x) for x in shape)


def _quant_line(kind: str, name: str, q) -> str:
    if isinstance(q, UniformQuantizer):
        return (
            f"quant kind={kind} layer={name} mode=UP bits={q.b} t={float(q.t.data)!r} "
            f"learn={int(q.t.requires_grad)} clip_grad={int(q.clip_grad)} d={q.d!r} x_max={q.x_max!r}"
        )
    return (
        f"quant kind={kind} layer={name} mode=MP d={q.d!r} x_max={q.x_max!r} bits={q.bits()} "
        f"b_cont={q.bits_cont()!r} learn_d={int(q.d_t.requires_grad)} learn_x_max={int(q.x_max_t.requires_grad)}"
    )


def save(net: DepthCompletionNet, path: str | os.PathLike, meta: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    c = net.config
    lines = [
        "format=sparsetof-checkpoint-1",
        f"config n_f={c.n_f} n_s={c.n_s} in_channels={c.in_channels} zero_last={int(c.zero_last)}",
    ]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key}={value}")
    for l in net.layers:
        wq, aq = net.weight_quant.get(l.name), net.act_quant.get(l.name)
        b_w = wq.bits() if wq is not None else 32
        b_a = aq.bits() if aq is not None else 32
        lines.append(
            f"layer name={l.name} weight={_shape_str(l.weight.shape)} bias={_shape_str(l.bias.shape)} "
            f"scale={l.scale} b_w={b_w} b_a={b_a}"
        )
        dtb.save(root / f"{l.name}.weight.dtb", l.weight.data)
        dtb.save(root / f"{l.name}.bias.dtb", l.bias.data)
    for kind, quants in (("weights", net.weight_quant), ("activations", net.act_quant)):
        for name, q in quants.items():
            lines.append(_quant_line(kind, name, q))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


def _restore_quant(kv: dict[str, str]):
    target = kv["kind"]
    if kv["mode"] == "UP":
        q = UniformQuantizer(int(kv["bits"]), 1.0, target, bool(int(kv["learn"])), bool(int(kv["clip_grad"])))
        q.t = T.Tensor(np.float32(float(kv["t"])), requires_grad=bool(int(kv["learn"])))
        return q
    return MixedQuantizer(
        float(kv["d"]), float(kv["x_max"]), target, bool(int(kv["learn_d"])), bool(int(kv["learn_x_max"]))
    )


def load(path: str | os.PathLike) -> DepthCompletionNet:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DataError(f"no checkpoint manifest at {mpath}")
    config = None
    layers, wq, aq, meta = [], {}, {}, {}
    try:
        for line in mpath.read_text().splitlines():
            if not line.strip() or line.startswith("format="):
                continue
            head, *rest = line.split()
            if head == "config":
                kv = _kv(rest)
                config = ModelConfig(int(kv["n_f"]), int(kv["n_s"]), int(kv["in_channels"]), bool(int(kv["zero_last"])))
            elif head == "meta":
                k, v = rest[0].split("=", 1)
                meta[k] = v
            elif head == "layer":
                kv = _kv(rest)
                name = kv["name"]
                w = dtb.load(root / f"{name}.weight.dtb")
                b = dtb.load(root / f"{name}.bias.dtb")
                if w.shape != _shape(kv["weight"]) or b.shape != _shape(kv["bias"]):
                    raise DataError(f"checkpoint tensor shape mismatch for layer {name}")
                layers.append(Layer(name, T.parameter(w), T.parameter(b), int(kv["scale"])))
            elif head == "quant":
                kv = _kv(rest)
                (wq if kv["kind"] == "weights" else aq)[kv["layer"]] = _restore_quant(kv)
    except (KeyError, ValueError, OSError, dtb.DTBError) as exc:
        raise DataError(f"malformed checkpoint {root}: {exc}") from exc
    if config is None:
        raise DataError(f"checkpoint {root} lacks a config line")
    expected = [s[0] for s in layer_specs(config)]
    if [l.name for l in layers] != expected:
        raise DataError(f"checkpoint {root} layers do not match config n_f={config.n_f}, n_s={config.n_s}")
    net = DepthCompletionNet(config, layers)
    net.weight_quant, net.act_quant = wq, aq
    net.meta = meta
    return net


def export_fixed_point(net: DepthCompletionNet, path: str | os.PathLike) -> Path:
    """Integer codes (int32 DTB) plus (d, x_max) for every weight-quantized layer."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["format=sparsetof-fixed-point-1"]
    for name, q in net.weight_quant.items():
        l = net.layer(name)
        d, x_max = q.d, q.x_max
        dtb.save(root / f"{name}.weight.codes.dtb", to_codes(l.weight.data, d, x_max))
        dtb.save(root / f"{name}.bias.codes.dtb", to_codes(l.bias.data, d, x_max))
        lines.append(f"tensor layer={name} d={d!r} x_max={x_max!r} bits={q.bits()}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


def load_fixed_point(path: str | os.PathLike) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Dequantized (weight, bias) per exported layer."""
    root = Path(path)
    out = {}
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.startswith("tensor "):
            continue
        kv = _kv(line.split()[1:])
        name, d, x_max = kv["layer"], float(kv["d"]), float(kv["x_max"])
        w = from_codes(dtb.load(root / f"{name}.weight.codes.dtb"), d, x_max)
        b = from_codes(dtb.load(root / f"{name}.bias.codes.dtb"), d, x_max)
        out[name] = (w, b)
    return out
