"""Sparse depth preprocessing: nearest-site EDT/NNI and normalization.

The distance transform is the two-pass lower-envelope algorithm of
Felzenszwalb and Huttenlocher on integer squared distances. Each pass also
carries the label of the nearest valid pixel so NNI falls out of the same
sweep. Ties between equidistant sites go to the smallest row-major index;
in the row pass this is enforced exactly by giving every parabola an
infinitesimal offset proportional to its site index, so all envelope
comparisons are done on pairs ``(value, epsilon coefficient)`` in integer
arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

D_MAX = 15.0  # meters
E_MAX = 40.0  # pixels

_INF = np.iinfo(np.int64).max


class EmptySparseInput(ValueError):
    def __init__(self):
        super().__init__("empty sparse input: no valid depth samples")


@dataclass
class SparseDepthMap:
    """Depth samples on an H x W grid; values <= 0 mark invalid pixels."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.ndim != 2:
            raise ValueError(f"sparse depth must be 2-D, got shape {self.depth.shape}")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def _depth_array(d) -> np.ndarray:
    if isinstance(d, SparseDepthMap):
        return d.depth
    arr = np.asarray(d, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"sparse depth must be 2-D, got shape {arr.shape}")
    return arr


def sparsity_level(d) -> float:
    """Percentage of valid pixels, K = 100 * #valid / (n_h * n_v)."""
    arr = _depth_array(d)
    return 100.0 * np.count_nonzero(arr > 0) / arr.size


@numba.njit(cache=True)
def _column_pass(valid):
    h, w = valid.shape
    f = np.full((h, w), _INF, dtype=np.int64)
    row = np.full((h, w), -1, dtype=np.int64)
    for x in range(w):
        last = -1
        for y in range(h):
            if valid[y, x]:
                last = y
            if last >= 0:
                f[y, x] = (y - last) * (y - last)
                row[y, x] = last
        nxt = -1
        for y in range(h - 1, -1, -1):
            if valid[y, x]:
                nxt = y
            if nxt >= 0:
                dd = (nxt - y) * (nxt - y)
                # strict: the upper site keeps vertical ties
                if dd < f[y, x]:
                    f[y, x] = dd
                    row[y, x] = nxt
    return f, row


@numba.njit(cache=True)
def _less_equal(a0, a1, ad, b0, b1, bd):
    # (a0 + eps*a1)/ad <= (b0 + eps*b1)/bd, denominators positive
    lhs = a0 * bd
    rhs = b0 * ad
    if lhs != rhs:
        return lhs < rhs
    return a1 * bd <= b1 * ad


@numba.njit(cache=True)
def _row_pass(f, row):
    h, w = f.shape
    sq = np.empty((h, w), dtype=np.int64)
    label = np.empty((h, w), dtype=np.int64)
    v = np.empty(w, dtype=np.int64)
    z0 = np.empty(w + 1, dtype=np.int64)
    z1 = np.empty(w + 1, dtype=np.int64)
    zd = np.empty(w + 1, dtype=np.int64)
    for y in range(h):
        k = -1
        for q in range(w):
            fq = f[y, q]
            if fq == _INF:
                continue
            kq = row[y, q] * w + q
            if k < 0:
                k = 0
                v[0] = q
                continue
            while True:
                p = v[k]
                s0 = (fq + q * q) - (f[y, p] + p * p)
                s1 = kq - (row[y, p] * w + p)
                sd = 2 * (q - p)
                if k > 0 and _less_equal(s0, s1, sd, z0[k], z1[k], zd[k]):
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z0[k] = s0
            z1[k] = s1
            zd[k] = sd
        n_env = k + 1
        k = 0
        for x in range(w):
            while k + 1 < n_env:
                # advance while the next breakpoint lies strictly left of x
                n0 = z0[k + 1]
                xd = x * zd[k + 1]
                if n0 < xd or (n0 == xd and z1[k + 1] < 0):
                    k += 1
                else:
                    break
            p = v[k]
            sq[y, x] = (x - p) * (x - p) + f[y, p]
            label[y, x] = row[y, p] * w + p
    return sq, label


def nearest_sites(d) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance (int64) and row-major index of the nearest valid pixel."""
    arr = _depth_array(d)
    valid = np.ascontiguousarray(arr > 0)
    if not valid.any():
        raise EmptySparseInput()
    f, row = _column_pass(valid)
    return _row_pass(f, row)


def edt(d) -> np.ndarray:
    """Euclidean distance (pixels) from every pixel to the nearest valid one."""
    sq, _ = nearest_sites(d)
    return np.sqrt(sq).astype(np.float32)


def nni(d) -> np.ndarray:
    """Nearest-neighbour interpolation of the valid samples."""
    arr = _depth_array(d)
    _, label = nearest_sites(arr)
    return arr.ravel()[label].astype(np.float32)


def edt_nni(d) -> tuple[np.ndarray, np.ndarray]:
    arr = _depth_array(d)
    sq, label = nearest_sites(arr)
    return np.sqrt(sq).astype(np.float32), arr.ravel()[label].astype(np.float32)


@dataclass
class PreprocessedInput:
    """Normalized network inputs: dense depth, distance map and color."""

    d_nni: np.ndarray  # H x W, depth / d_max
    edt: np.ndarray  # H x W, distance / e_max (not clamped)
    color: np.ndarray  # 3 x H x W in [0, 1]
    d_max: float = D_MAX
    e_max: float = E_MAX

    def stacked(self) -> np.ndarray:
        """5 x H x W array in channel order (D_NNI, E, R, G, B)."""
        return np.concatenate([self.d_nni[None], self.edt[None], self.color], axis=0).astype(np.float32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d_nni.shape


def preprocess(d, color, d_max: float = D_MAX, e_max: float = E_MAX) -> PreprocessedInput:
    """Build the normalized (D_NNI, E, C) triple from a sparse map and a 0-255 color image.

    ``color`` is 3 x H x W or H x W x 3.
    """
    arr = _depth_array(d)
    c = np.asarray(color, dtype=np.float32)
    if c.ndim == 3 and c.shape[0] != 3 and c.shape[-1] == 3:
        c = c.transpose(2, 0, 1)
    if c.shape != (3,) + arr.shape:
        raise ValueError(f"color shape {np.shape(color)} does not match sparse depth {arr.shape}")
    dist, dense = edt_nni(arr)
    return PreprocessedInput(
        d_nni=(dense / np.float32(d_max)).astype(np.float32),
        edt=(dist / np.float32(e_max)).astype(np.float32),
        color=(c / np.float32(255.0)).astype(np.float32),
        d_max=d_max,
        e_max=e_max,
    )
