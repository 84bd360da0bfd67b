"""Float pretraining and uniform/mixed-precision quantization-aware training."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import dump_kv
from .data import Sample
from .losses import loss_lp, loss_normals
from .model import DepthCompletionNet, ModelConfig, build, count_sizes
from .normals import estimate_normals, normals_array
from .optim import cosine_lr, make_optimizer
from .preproc import D_MAX, EmptySparseInput, preprocess
from .quant import QuantPlan, attach, constraints_for, total_penalty
from .synth import make_rng, sample_seed

DEFAULT_PHASES = {
    "float": [("rmsprop", 40)],
    "UP": [("rmsprop", 32), ("adam", 20)],
    "MP": [("adam", 60)],
}


class NumericFailure(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    regime: str = "float"  # float | UP | MP
    n_f: int = 8
    n_s: int = 3
    lr: float = 1e-4
    epochs: Optional[int] = None  # rescales the default phases
    phases: str = ""  # e.g. "rmsprop:32,adam:20"
    batch_size: int = 8
    patch: int = 160
    p: int = 1
    lambda_n: float = 1e-3
    lp_reduction: str = "sum"
    normals: str = "analytic"  # analytic | consistent
    seed: int = 0
    # quantization (UP: fixed widths, MP: average targets)
    weight_bits: Optional[float] = 4.0
    act_bits: Optional[float] = None
    weight_target_mb: Optional[float] = None
    lambda_w: float = 2.66e-7
    lambda_a: float = 1.73e-6
    penalty: str = "ste_ceil"
    init_weight_bits: Optional[int] = None
    init_act_bits: Optional[int] = None
    clip_grad: bool = True
    # bookkeeping
    checkpoint_every: int = 0
    early_stop: int = 0  # patience in epochs on validation RMSE; 0 disables

    def __post_init__(self):
        if self.regime not in DEFAULT_PHASES:
            raise ValueError(f"regime must be float, UP or MP, got {self.regime!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.patch < 1:
            raise ValueError("lr, batch_size and patch must be positive")
        if self.normals not in ("analytic", "consistent"):
            raise ValueError(f"normals must be analytic or consistent, got {self.normals!r}")
        self.phase_list()

    def phase_list(self) -> list[tuple[str, int]]:
        if self.phases:
            out = []
            for part in self.phases.split(","):
                name, n = part.split(":")
                out.append((name.strip().lower(), int(n)))
            return out
        base = DEFAULT_PHASES[self.regime]
        if self.epochs is None:
            return list(base)
        total = sum(n for _, n in base)
        if len(base) == 1:
            return [(base[0][0], self.epochs)]
        first = max(1, round(self.epochs * base[0][1] / total))
        return [(base[0][0], first), (base[1][0], max(1, self.epochs - first))]

    @property
    def total_epochs(self) -> int:
        return sum(n for _, n in self.phase_list())

    def plan(self) -> QuantPlan:
        return QuantPlan(
            mode=self.regime,
            weight_bits=self.weight_bits,
            act_bits=self.act_bits,
            weight_target_mb=self.weight_target_mb,
            lambda_w=self.lambda_w,
            lambda_a=self.lambda_a,
            init_weight_bits=self.init_weight_bits,
            init_act_bits=self.init_act_bits,
            penalty=self.penalty,
            clip_grad=self.clip_grad,
        )


# -- samples ------------------------------------------------------------------
@dataclass
class Patch:
    dsparse: np.ndarray
    dgt: np.ndarray
    ngt: np.ndarray
    color: np.ndarray
    origin: tuple[int, int]  # (row, col) of the top-left pixel


def extract_patches(sample, patch: int, count: Optional[int] = None) -> list[Patch]:
    """Non-overlapping ``patch`` x ``patch`` tiles in row-major order."""
    h, w = sample.dgt.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than frame {w}x{h}")
    out = []
    for r in range(0, h - patch + 1, patch):
        for c in range(0, w - patch + 1, patch):
            sl = (slice(r, r + patch), slice(c, c + patch))
            out.append(
                Patch(
                    sample.dsparse[sl].copy(),
                    sample.dgt[sl].copy(),
                    sample.ngt[(slice(None),) + sl].copy(),
                    sample.color[(slice(None),) + sl].copy(),
                    (r, c),
                )
            )
    return out if count is None else out[:count]


@dataclass
class Examples:
    """Stacked network inputs and targets (normalized units)."""

    x: np.ndarray  # N x 5 x H x W
    gt: np.ndarray  # N x 1 x H x W
    ngt: np.ndarray  # N x 3 x H x W
    mask: np.ndarray  # N x 1 x H x W bool

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Examples":
        return Examples(self.x[idx], self.gt[idx], self.ngt[idx], self.mask[idx])


def make_examples(items: Sequence, normals: str = "analytic", d_max: float = D_MAX) -> tuple[Examples, int]:
    """Preprocess patches or full frames; returns the examples and how many were skipped (no samples)."""
    xs, gts, ns, masks = [], [], [], []
    skipped = 0
    for it in items:
        try:
            inp = preprocess(it.dsparse, it.color, d_max=d_max)
        except EmptySparseInput:
            skipped += 1
            continue
        gt = (it.dgt / np.float32(d_max)).astype(np.float32)
        xs.append(inp.stacked())
        gts.append(gt[None])
        ns.append(normals_array(gt) if normals == "consistent" else it.ngt.astype(np.float32))
        masks.append((it.dgt > 0)[None])
    if not xs:
        raise EmptySparseInput()
    return Examples(np.stack(xs), np.stack(gts), np.stack(ns), np.stack(masks)), skipped


def training_examples(samples: Sequence[Sample], cfg: TrainConfig) -> tuple[Examples, int]:
    patches = [p for s in samples for p in extract_patches(s, cfg.patch)]
    return make_examples(patches, cfg.normals)


# -- loss -----------------------------------------------------------------------
def loss_terms(net: DepthCompletionNet, ex: Examples, cfg: TrainConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    pred = net.forward(ex.x)
    lp = loss_lp(pred, ex.gt, ex.mask, cfg.p, cfg.lp_reduction)
    ln = loss_normals(estimate_normals(pred), ex.ngt, ex.mask)
    return pred, lp, ln


def evaluate_examples(net: DepthCompletionNet, ex: Examples, cfg: TrainConfig, chunk: int = 8) -> dict:
    """Validation loss terms (per-sample averaged) and pooled RMSE/MNS."""
    lp_sum = ln_sum = 0.0
    sq = cos = 0.0
    count = 0
    with T.no_grad():
        for i in range(0, len(ex), chunk):
            part = ex.take(slice(i, i + chunk))
            pred, lp, ln = loss_terms(net, part, cfg)
            n = len(part)
            lp_sum += float(lp.data) * n
            ln_sum += float(ln.data) * n
            m = part.mask
            err = (pred.data.astype(np.float64) - part.gt) * D_MAX * 1000.0
            sq += float((err[m] ** 2).sum())
            c = (estimate_normals(pred).data.astype(np.float64) * part.ngt).sum(axis=1, keepdims=True)
            cos += float(c[m].sum())
            count += int(m.sum())
    return {
        "val_lp": lp_sum / len(ex),
        "val_n": ln_sum / len(ex),
        "val_rmse_mm": math.sqrt(sq / count),
        "val_mns": cos / count,
    }


# -- training -------------------------------------------------------------------
@dataclass
class TrainResult:
    net: DepthCompletionNet
    history: list[dict]
    bits: list[dict] = field(default_factory=list)
    stopped_early: bool = False


HISTORY_COLUMNS = (
    "epoch", "phase", "optimizer", "lr", "train_loss", "train_lp", "train_n", "train_penalty",
    "val_lp", "val_n", "val_rmse_mm", "val_mns", "b_w_avg", "b_a_avg", "size_w_bits", "size_a_bits",
)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _average_bits(net: DepthCompletionNet, resolution) -> tuple[float, float, int, int]:
    rep = count_sizes(net, resolution)
    rows_w = [r for r in rep.rows if r.name in net.weight_quant]
    rows_a = [r for r in rep.rows if r.name in net.act_quant]
    bw = sum(r.s_w for r in rows_w) / sum(r.n_w for r in rows_w) if rows_w else 32.0
    ba = sum(r.s_a for r in rows_a) / sum(r.n_a for r in rows_a) if rows_a else 32.0
    return bw, ba, rep.weight_bits, rep.activation_bits


def _bit_rows(net: DepthCompletionNet, epoch: int) -> list[dict]:
    rows = []
    for name in net.layer_names:
        wq, aq = net.weight_quant.get(name), net.act_quant.get(name)
        if wq is None and aq is None:
            continue
        rows.append({
            "epoch": epoch,
            "layer": name,
            "b_w": wq.bits() if wq else 32,
            "b_w_cont": wq.bits_cont() if wq else 32.0,
            "b_a": aq.bits() if aq else 32,
            "b_a_cont": aq.bits_cont() if aq else 32.0,
        })
    return rows


def prepare_model(cfg: TrainConfig, train_ex: Examples, init: Optional[DepthCompletionNet]) -> DepthCompletionNet:
    if cfg.regime == "float":
        if init is not None:
            return init.clone()
        return build(ModelConfig(cfg.n_f, cfg.n_s), seed=cfg.seed)
    if init is None:
        raise ValueError(f"{cfg.regime} training requires a float checkpoint to initialize from (--init)")
    if init.is_quantized:
        raise ValueError(f"{cfg.regime} training must start from a float (unquantized) checkpoint")
    calib = train_ex.x[: cfg.batch_size] if cfg.act_bits is not None else None
    return attach(init, cfg.plan(), calibration=calib)


def train(
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    init: Optional[DepthCompletionNet] = None,
    out_dir: Optional[str | os.PathLike] = None,
    log=None,
) -> TrainResult:
    """Run every configured phase; writes history/checkpoints when ``out_dir`` is given."""
    log = log or (lambda msg: None)
    train_ex, skipped = training_examples(train_samples, cfg)
    if skipped:
        log(f"skipped {skipped} patches without sparse samples")
    val_ex, _ = make_examples(val_samples, cfg.normals) if val_samples else (None, 0)
    net = prepare_model(cfg, train_ex, init)
    res = (cfg.patch, cfg.patch)
    constraints = constraints_for(net, cfg.plan(), res) if cfg.regime == "MP" else {}
    params = net.parameters()
    quants = list(net.weight_quant.values()) + list(net.act_quant.values())

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_kv(cfg))

    history: list[dict] = []
    bits_hist: list[dict] = _bit_rows(net, 0) if net.is_quantized else []
    n = len(train_ex)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    best, since_best = math.inf, 0
    epoch = 0
    stopped = False
    for phase_idx, (opt_name, n_epochs) in enumerate(cfg.phase_list()):
        opt = make_optimizer(opt_name)
        state = opt.init(params)
        total_steps = n_epochs * steps_per_epoch
        step = 0
        for _ in range(n_epochs):
            epoch += 1
            order = make_rng(sample_seed(cfg.seed, epoch)).permutation(n)
            sums = np.zeros(4)
            lr_epoch = cosine_lr(cfg.lr, step, total_steps)
            for b in range(steps_per_epoch):
                idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
                batch = train_ex.take(idx)
                lr = cosine_lr(cfg.lr, step, total_steps)
                _, lp, ln = loss_terms(net, batch, cfg)
                loss = lp + ln * cfg.lambda_n if cfg.lambda_n else lp
                pen = total_penalty(net, constraints, cfg.penalty) if constraints else None
                if pen is not None:
                    loss = loss + pen
                terms = (float(loss.data), float(lp.data), float(ln.data), float(pen.data) if pen is not None else 0.0)
                if not all(math.isfinite(t) for t in terms):
                    raise NumericFailure(
                        f"non-finite loss at epoch {epoch}, step {b}: total={terms[0]}, lp={terms[1]}, "
                        f"normals={terms[2]}, penalty={terms[3]}"
                    )
                grads = T.backward(loss)
                g = [T.grad_of(grads, p) for p in params]
                bad = [i for i, gi in enumerate(g) if not np.all(np.isfinite(gi))]
                if bad:
                    raise NumericFailure(f"non-finite gradient at epoch {epoch}, step {b} for {len(bad)} tensors")
                opt.step(params, g, state, lr)
                for q in quants:
                    q.project()
                sums += np.array(terms) * len(idx)
                step += 1
            row = {
                "epoch": epoch,
                "phase": phase_idx,
                "optimizer": opt_name,
                "lr": lr_epoch,
                "train_loss": sums[0] / n,
                "train_lp": sums[1] / n,
                "train_n": sums[2] / n,
                "train_penalty": sums[3] / n,
            }
            if val_ex is not None:
                row.update(evaluate_examples(net, val_ex, cfg))
            else:
                row.update({"val_lp": math.nan, "val_n": math.nan, "val_rmse_mm": math.nan, "val_mns": math.nan})
            bw, ba, sw, sa = _average_bits(net, res)
            row.update({"b_w_avg": bw, "b_a_avg": ba, "size_w_bits": sw, "size_a_bits": sa})
            history.append(row)
            if net.is_quantized:
                bits_hist.extend(_bit_rows(net, epoch))
            log(
                f"epoch {epoch:3d} {opt_name} loss={row['train_loss']:.5g} lp={row['train_lp']:.5g} "
                f"n={row['train_n']:.4f} pen={row['train_penalty']:.4g} val_rmse={row['val_rmse_mm']:.2f}mm "
                f"val_mns={row['val_mns']:.4f}" + (f" b_w={bw:.3f} b_a={ba:.3f}" if net.is_quantized else "")
            )
            if out is not None:
                _write_history(out, history, bits_hist)
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    checkpoint.save(net, out / "checkpoints" / f"epoch_{epoch:04d}")
            if cfg.early_stop and val_ex is not None:
                if row["val_rmse_mm"] < best:
                    best, since_best = row["val_rmse_mm"], 0
                else:
                    since_best += 1
                    if since_best >= cfg.early_stop:
                        stopped = True
                        break
        if stopped:
            break

    net.meta = {"regime": cfg.regime, "epochs": str(epoch), "lp_reduction": cfg.lp_reduction}
    if out is not None:
        _write_history(out, history, bits_hist)
        checkpoint.save(net, out / "final", meta=net.meta)
        (out / "bitwidths.txt").write_text(count_sizes(net, res).table() + "\n")
    return TrainResult(net, history, bits_hist, stopped)


def _write_history(out: Path, history: list[dict], bits: list[dict]) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    lines += [",".join(_fmt(r[c]) for c in HISTORY_COLUMNS) for r in history]
    (out / "history.csv").write_text("\n".join(lines) + "\n")
    if bits:
        cols = ("epoch", "layer", "b_w", "b_w_cont", "b_a", "b_a_cont")
        blines = [",".join(cols)] + [",".join(_fmt(r[c]) for c in cols) for r in bits]
        (out / "bits.csv").write_text("\n".join(blines) + "\n")
