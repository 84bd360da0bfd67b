"""Procedural RGB-D scenes and triangular dot-pattern subsampling.

Scenes are rendered under a pinhole camera looking down +z (x right,
y down) from a handful of analytic surfaces: a back wall, an optional floor
and side wall, and axis-aligned boxes. Depth is the z coordinate of the
first hit. Ground-truth normals are expressed in the same image-space
convention as the centered-difference estimator, i.e. the normal of the
normalized depth surface ``(dD/du, dD/dv, -1) / norm``, computed
analytically from the plane of each hit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .preproc import D_MAX, SparseDepthMap

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 output mixer."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(dataset_seed: int, index: int) -> int:
    return splitmix64(splitmix64(dataset_seed & _MASK64) ^ (index & _MASK64))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


# -- surfaces ----------------------------------------------------------------
@dataclass
class Plane:
    """Points X with normal . X = offset; normal faces the camera."""

    normal: tuple[float, float, float]
    offset: float
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cx: float
    cy: float

    @classmethod
    def default(cls, width: int, height: int) -> "Camera":
        # roughly 65 degrees horizontal field of view
        return cls(width, height, 0.78 * width, (width - 1) / 2.0, (height - 1) / 2.0)

    def rays(self) -> np.ndarray:
        """3 x H x W ray directions with unit z component."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones_like(u)])


@dataclass
class Scene:
    depth: np.ndarray  # H x W meters
    normals: np.ndarray  # 3 x H x W image-space unit normals
    color: np.ndarray  # 3 x H x W in [0, 255]
    seed: int = 0
    surfaces: list = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


_LIGHT = np.array([0.3, -0.6, -0.74])
_LIGHT /= np.linalg.norm(_LIGHT)


def _hit_plane(plane: Plane, rays: np.ndarray):
    n = np.asarray(plane.normal, dtype=np.float64)
    denom = np.tensordot(n, rays, axes=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = plane.offset / denom
    t = np.where((denom < 0) & (t > 0), t, np.inf)
    normal = np.broadcast_to(n[:, None, None], rays.shape)
    offset = np.full(t.shape, plane.offset)
    return t, normal, offset


def _hit_box(box: Box, rays: np.ndarray):
    lo = np.asarray(box.lo, dtype=np.float64)[:, None, None]
    hi = np.asarray(box.hi, dtype=np.float64)[:, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / rays
        t2 = hi / rays
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=0)
    t_far = tmax.min(axis=0)
    axis = tmin.argmax(axis=0)
    hit = (t_near <= t_far) & (t_near > 0)
    t = np.where(hit, t_near, np.inf)
    r_axis = np.take_along_axis(rays, axis[None], axis=0)[0]
    sign = -np.sign(r_axis)
    normal = np.zeros(rays.shape)
    np.put_along_axis(normal, axis[None], sign[None], axis=0)
    # the face plane passes through the entry point
    face_coord = np.where(r_axis > 0, np.take_along_axis(np.broadcast_to(lo, rays.shape), axis[None], 0)[0],
                          np.take_along_axis(np.broadcast_to(hi, rays.shape), axis[None], 0)[0])
    offset = sign * face_coord
    return t, normal, offset


def render(surfaces: Sequence, camera: Camera, d_max: float = D_MAX) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffer composite of ``surfaces``; returns depth, image normals and color."""
    rays = camera.rays()
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    normal3 = np.zeros((3, h, w))
    offset = np.zeros((h, w))
    albedo = np.zeros((3, h, w))
    for s in surfaces:
        if isinstance(s, Plane):
            t, n, c = _hit_plane(s, rays)
        elif isinstance(s, Box):
            t, n, c = _hit_box(s, rays)
        else:
            raise TypeError(f"unknown surface {type(s).__name__}")
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal3 = np.where(closer, n, normal3)
        offset = np.where(closer, c, offset)
        albedo = np.where(closer, np.asarray(s.albedo, dtype=np.float64)[:, None, None], albedo)
    if not np.isfinite(depth).all():
        raise ValueError("scene leaves pixels without a surface")

    # image-space normal of the normalized depth D = offset / (d_max * n.r(u, v))
    lin = (normal3 * rays).sum(axis=0)
    dnorm = depth / d_max
    du = -dnorm * normal3[0] / (camera.focal * lin)
    dv = -dnorm * normal3[1] / (camera.focal * lin)
    inv = 1.0 / np.sqrt(du * du + dv * dv + 1.0)
    normals = np.stack([du * inv, dv * inv, -inv])

    shade = 0.35 + 0.65 * np.clip(-(normal3 * _LIGHT[:, None, None]).sum(axis=0), 0.0, 1.0)
    color = np.clip(albedo * shade * 255.0, 0.0, 255.0)
    return depth.astype(np.float32), normals.astype(np.float32), color.astype(np.float32)


def _unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return tuple(float(x) for x in v)


def random_surfaces(rng: np.random.Generator, camera: Camera, d_max: float = D_MAX) -> list:
    count = int(rng.integers(3, 9))
    # back wall, slightly tilted; its farthest corner stays inside the range
    n = np.array(_unit([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), -1.0]))
    corners = np.array([[(u - camera.cx) / camera.focal, (v - camera.cy) / camera.focal, 1.0]
                        for u in (0, camera.width - 1) for v in (0, camera.height - 1)])
    wall_z = rng.uniform(5.0, 12.0)
    offset = float(n @ np.array([0.0, 0.0, wall_z]))
    far = (offset / (corners @ n)).max()
    if far > 0.97 * d_max:
        offset *= 0.97 * d_max / far
    wall_z = offset / n[2]
    surfaces: list = [Plane(tuple(n), offset, tuple(rng.uniform(0.3, 1.0, 3)))]

    if count > 3 and rng.random() < 0.8:
        cam_h = rng.uniform(1.0, 1.8)
        surfaces.append(Plane((0.0, -1.0, 0.0), -cam_h, tuple(rng.uniform(0.3, 1.0, 3))))
    else:
        cam_h = 1.5
    if len(surfaces) < count - 1 and rng.random() < 0.5:
        side = rng.choice([-1.0, 1.0])
        xw = rng.uniform(1.5, 3.5)
        surfaces.append(Plane((-side, 0.0, 0.0), -xw, tuple(rng.uniform(0.3, 1.0, 3))))

    while len(surfaces) < count:
        z = rng.uniform(1.5, max(2.0, wall_z - 1.0))
        half_w = 0.5 * camera.width / camera.focal * z
        half_h = 0.5 * camera.height / camera.focal * z
        cx = rng.uniform(-0.8, 0.8) * half_w
        size = rng.uniform(0.2, 1.2, 3) * np.array([1.0, 1.0, 0.8])
        if rng.random() < 0.6:
            y_hi = cam_h
        else:
            y_hi = rng.uniform(-0.6, 0.6) * half_h + size[1] / 2
        lo = (cx - size[0] / 2, y_hi - size[1], z)
        hi = (cx + size[0] / 2, y_hi, z + size[2])
        surfaces.append(Box(tuple(map(float, lo)), tuple(map(float, hi)), tuple(rng.uniform(0.2, 1.0, 3))))
    return surfaces


def generate_scene(seed: int, width: int, height: int, d_max: float = D_MAX) -> Scene:
    """Random scene with 3-8 surfaces, fully determined by ``seed``."""
    if width < 32 or height < 32:
        raise ValueError(f"scene must be at least 32x32, got {width}x{height}")
    camera = Camera.default(width, height)
    surfaces = random_surfaces(make_rng(seed), camera, d_max)
    depth, normals, color = render(surfaces, camera, d_max)
    return Scene(depth, normals, color, seed, surfaces)


def plane_scene(depth_m: float, width: int, height: int) -> Scene:
    """A single fronto-parallel plane, mostly for checks."""
    camera = Camera.default(width, height)
    surfaces = [Plane((0.0, 0.0, -1.0), -depth_m)]
    d, n, c = render(surfaces, camera)
    return Scene(d, n, c, 0, surfaces)


# -- dot pattern ---------------------------------------------------------------
_SIN60 = math.sin(math.pi / 3)


def pitch_for_target_count(width: int, height: int, target_dots: float) -> float:
    """Triangular-lattice pitch whose density gives ``target_dots`` in the frame."""
    if target_dots < 1:
        raise ValueError("target_dots must be >= 1")
    return math.sqrt(width * height / (target_dots * _SIN60))


@dataclass
class DotPattern:
    """Triangular lattice with horizontal rows; odd rows shifted by half a pitch."""

    pitch: float
    offset: tuple[float, float] | None = None  # (x0, y0); defaults to a centered phase
    jitter: float = 0.5

    @classmethod
    def for_target(cls, width: int, height: int, target_dots: float, jitter: float = 0.5) -> "DotPattern":
        return cls(pitch_for_target_count(width, height, target_dots), jitter=jitter)

    def lattice(self, width: int, height: int) -> np.ndarray:
        """Float (x, y) lattice positions inside [0, width) x [0, height)."""
        p = self.pitch
        row_step = p * _SIN60
        x0, y0 = self.offset if self.offset is not None else (p / 4.0, row_step / 2.0)
        pts = []
        r = 0
        while y0 + r * row_step < height:
            y = y0 + r * row_step
            xs = np.arange(x0 + (p / 2.0 if r % 2 else 0.0), width, p)
            pts.append(np.stack([xs, np.full_like(xs, y)], axis=1))
            r += 1
        return np.concatenate(pts) if pts else np.zeros((0, 2))

    def sample_coords(self, width: int, height: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Unique integer (row, col) sample coordinates, sorted row-major."""
        pts = self.lattice(width, height)
        if self.jitter > 0:
            if rng is None:
                raise ValueError("jittered pattern needs an rng")
            pts = pts + rng.uniform(-self.jitter, self.jitter, pts.shape)
        cols = np.clip(np.rint(pts[:, 0]), 0, width - 1).astype(np.int64)
        rows = np.clip(np.rint(pts[:, 1]), 0, height - 1).astype(np.int64)
        flat = np.unique(rows * width + cols)
        return np.stack([flat // width, flat % width], axis=1)


def subsample(scene: Scene, pattern: DotPattern, seed: int = 0) -> SparseDepthMap:
    """Keep ground-truth depth at the pattern's dots; everything else invalid."""
    h, w = scene.shape
    coords = pattern.sample_coords(w, h, make_rng(seed) if pattern.jitter > 0 else None)
    sparse = np.zeros((h, w), dtype=np.float32)
    sparse[coords[:, 0], coords[:, 1]] = scene.depth[coords[:, 0], coords[:, 1]]
    return SparseDepthMap(sparse)
