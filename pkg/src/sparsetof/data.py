"""Synthetic dataset on disk: one directory of DTB1 tensors per scene."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dtb
from .preproc import SparseDepthMap, sparsity_level
from .synth import DotPattern, generate_scene, make_rng, sample_seed, subsample

MANIFEST = "manifest.txt"
RUN_MANIFEST = "run_manifest.txt"
FILES = ("dgt", "ngt", "color", "dsparse")


class DataError(Exception):
    """Missing or malformed dataset / checkpoint content."""


@dataclass
class Sample:
    name: str
    seed: int
    split: str
    dgt: np.ndarray  # H x W meters
    ngt: np.ndarray  # 3 x H x W
    color: np.ndarray  # 3 x H x W, 0-255
    dsparse: np.ndarray  # H x W meters, <= 0 invalid

    @property
    def sparse(self) -> SparseDepthMap:
        return SparseDepthMap(self.dsparse)


@dataclass
class Dataset:
    root: Path
    width: int
    height: int
    samples: list[Sample]
    meta: dict

    def split(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        return [s for s in self.samples if s.split == name]


def val_indices(n: int, seed: int, fraction: float = 0.1) -> set[int]:
    """Scene indices held out for validation, fixed by the dataset seed."""
    k = int(round(n * fraction))
    if n > 1:
        k = min(max(k, 1), n - 1)
    else:
        k = 0
    perm = make_rng(sample_seed(seed, 0xFFFF_FFFF)).permutation(n)
    return set(int(i) for i in perm[:k])


def generate_dataset(
    out: str | os.PathLike,
    scenes: int,
    width: int,
    height: int,
    dots: float,
    seed: int,
    jitter: float = 0.5,
    val_fraction: float = 0.1,
) -> dict:
    """Write ``scenes`` scenes and the manifest; returns summary statistics."""
    if scenes < 1:
        raise ValueError("need at least one scene")
    if width < 32 or height < 32:
        raise ValueError(f"width and height must be >= 32, got {width}x{height}")
    if dots < 1:
        raise ValueError("dots must be >= 1")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    pattern = DotPattern.for_target(width, height, dots, jitter)
    held_out = val_indices(scenes, seed, val_fraction)
    lines = [
        f"width={width}",
        f"height={height}",
        f"scenes={scenes}",
        f"dots={dots!r}",
        f"pitch={pattern.pitch!r}",
        f"jitter={jitter!r}",
        f"seed={seed}",
    ]
    ks = []
    for i in range(scenes):
        s = sample_seed(seed, i)
        scene = generate_scene(s, width, height)
        sparse = subsample(scene, pattern, seed=s)
        name = f"scene_{i:06d}"
        d = root / name
        d.mkdir(exist_ok=True)
        dtb.save(d / "dgt.dtb", scene.depth)
        dtb.save(d / "ngt.dtb", scene.normals)
        dtb.save(d / "color.dtb", scene.color)
        dtb.save(d / "dsparse.dtb", sparse.depth)
        k = sparsity_level(sparse)
        ks.append(k)
        split = "test" if i in held_out else "train"
        lines.append(f"{name} seed={s} split={split} valid={int(np.count_nonzero(sparse.valid))}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return {"scenes": scenes, "mean_k": float(np.mean(ks)), "pitch": pattern.pitch, "val": len(held_out)}


def _parse_manifest(path: Path) -> tuple[dict, list[tuple[str, dict]]]:
    meta, entries = {}, []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("scene_"):
            name, *kvs = line.split()
            entries.append((name, dict(kv.split("=", 1) for kv in kvs)))
        else:
            k, v = line.split("=", 1)
            meta[k] = v
    return meta, entries


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DataError(f"no dataset manifest at {mpath}")
    try:
        meta, entries = _parse_manifest(mpath)
        width, height = int(meta["width"]), int(meta["height"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed dataset manifest {mpath}: {exc}") from exc
    samples = []
    for name, kv in entries:
        arrays = {}
        for f in FILES:
            p = root / name / f"{f}.dtb"
            if not p.is_file():
                raise DataError(f"missing tensor {p}")
            try:
                arrays[f] = dtb.load(p)
            except dtb.DTBError as exc:
                raise DataError(f"{p}: {exc}") from exc
        if arrays["dgt"].shape != (height, width):
            raise DataError(f"{name}: depth shape {arrays['dgt'].shape} does not match {height}x{width}")
        samples.append(Sample(name, int(kv.get("seed", 0)), kv.get("split", "train"), **arrays))
    if not samples:
        raise DataError(f"dataset {root} has no scenes")
    return Dataset(root, width, height, samples, meta)


def directory_checksum(root: str | os.PathLike, exclude: tuple[str, ...] = (RUN_MANIFEST,)) -> str:
    """SHA-256 over relative paths and contents of every file, run manifests excluded."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name in exclude:
            continue
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def mean_sparsity(dataset: Dataset, split: Optional[str] = None) -> float:
    samples = dataset.samples if split is None else dataset.split(split)
    return float(np.mean([sparsity_level(s.dsparse) for s in samples]))
