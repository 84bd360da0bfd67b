"""Surface normals from a depth map by centered differences."""
from __future__ import annotations

import numpy as np

from . import tensor as T


def estimate_normals(depth) -> T.Tensor:
    """Differentiable normals of an N x 1 x H x W (or H x W) depth tensor.

    Derivatives use the fixed kernel [-1/2, 0, 1/2] along x and y with edge
    replication, and ``N = (dD/dx, dD/dy, -1) / sqrt(dD/dx^2 + dD/dy^2 + 1)``.
    The z component is always negative, i.e. normals face the camera.
    """
    d = T.as_tensor(depth)
    if d.ndim == 2:
        d = d.reshape(1, 1, *d.shape)
    if d.ndim != 4 or d.shape[1] != 1:
        raise T.ShapeError(f"estimate_normals expects N x 1 x H x W depth, got {d.shape}")
    if d.shape[2] < 3 or d.shape[3] < 3:
        raise T.ShapeError(f"estimate_normals needs H, W >= 3, got {d.shape[2]}x{d.shape[3]}")
    p = T.pad_replicate(d, 1)
    dx = (p[:, :, 1:-1, 2:] - p[:, :, 1:-1, :-2]) * 0.5
    dy = (p[:, :, 2:, 1:-1] - p[:, :, :-2, 1:-1]) * 0.5
    inv = T.power(dx * dx + dy * dy + 1.0, -0.5)
    return T.concat([dx * inv, dy * inv, -inv], axis=1)


def normals_array(depth: np.ndarray) -> np.ndarray:
    """Non-differentiable convenience wrapper returning 3 x H x W (or N x 3 x H x W)."""
    arr = np.asarray(depth, dtype=np.float32)
    with T.no_grad():
        out = estimate_normals(arr[:, None] if arr.ndim == 3 else arr).data
    return out[0] if arr.ndim == 2 else out
