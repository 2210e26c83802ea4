"""Pinhole cameras, triangulation rows and the epipolar field.

Image coordinates follow the continuous convention in which pixel ``(j, i)``
covers ``[j, j+1) x [i, i+1)`` and has its centre at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateBaseline,
    DegenerateRay,
    DepthDegenerate,
    DimensionMismatch,
    RankDeficient,
    ValidationError,
)

DEPTH_EPS = 1e-9
RANK_RTOL = 1e-6
BASELINE_EPS = 1e-6
RAY_EPS = 1e-12


class ImagePoint(NamedTuple):
    u: float
    v: float
    confidence: float = 1.0


def camera_center(projection: np.ndarray) -> np.ndarray:
    """Camera centre as the right null vector of a 3x4 projection matrix.

    Raises
    ------
    RankDeficient
        If the third singular value is below ``1e-6`` of the first.
    """
    P = np.asarray(projection, dtype=float)
    if P.shape != (3, 4):
        raise DimensionMismatch(f"projection must be 3x4, got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise DimensionMismatch("projection contains non-finite entries")
    # balance the translation column so the rank test does not depend on world units
    m, t = np.linalg.norm(P[:, :3]), np.linalg.norm(P[:, 3])
    scale = m / t if t > 0 and m > 0 else 1.0
    Pb = P * np.array([1.0, 1.0, 1.0, scale])
    _, s, vt = np.linalg.svd(Pb)
    if s[2] <= RANK_RTOL * s[0]:
        raise RankDeficient(f"projection has rank < 3 (singular values {s})")
    h = vt[-1] * np.array([1.0, 1.0, 1.0, scale])
    if abs(h[3]) <= RAY_EPS * np.linalg.norm(h[:3]):
        raise RankDeficient("camera centre lies at infinity")
    return h[:3] / h[3]


@dataclass(frozen=True, eq=False)
class CameraParams:
    """A projective camera ``P`` (world mm -> homogeneous pixels)."""

    projection: np.ndarray
    image_size: tuple[int, int] = (1000, 1000)
    id: int = 0
    center: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.projection, dtype=float)
        P.setflags(write=False)
        object.__setattr__(self, "projection", P)
        c = camera_center(P)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def from_krt(cls, K, R, t, image_size=(1000, 1000), id=0) -> "CameraParams":
        """Build ``P = K [R | t]``."""
        K = np.asarray(K, dtype=float)
        Rt = np.hstack([np.asarray(R, dtype=float), np.asarray(t, dtype=float).reshape(3, 1)])
        return cls(K @ Rt, image_size=image_size, id=id)

    def ray_direction(self, uv) -> np.ndarray:
        """Unnormalised direction of the back-projected ray(s) through ``uv``."""
        uv = np.asarray(uv, dtype=float)
        M = self.projection[:, :3]
        xh = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        return np.linalg.solve(M, xh.reshape(-1, 3).T).T.reshape(uv.shape[:-1] + (3,))


def _homogeneous(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    # explicit summation order so scalar and batched projections agree bitwise
    x, y, z = X[..., 0:1], X[..., 1:2], X[..., 2:3]
    return P[:, 0] * x + P[:, 1] * y + P[:, 2] * z + P[:, 3]


def project_points(projection: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Vectorised projection of ``(..., 3)`` points to ``(..., 2)`` pixels.

    No depth check; see :func:`project` for the guarded scalar version.
    """
    P = np.asarray(projection, dtype=float)
    xh = _homogeneous(P, np.asarray(points, dtype=float))
    return xh[..., :2] / xh[..., 2:3]


def project(camera: CameraParams, point) -> ImagePoint:
    y = np.asarray(point, dtype=float).reshape(3)
    xh = _homogeneous(camera.projection, y)
    w = xh[2]
    if abs(w) <= DEPTH_EPS:
        raise DepthDegenerate(f"point {y} lies on the principal plane of camera {camera.id}")
    return ImagePoint(float(xh[0] / w), float(xh[1] / w), 1.0)


def triangulation_rows(camera: CameraParams, obs) -> tuple[np.ndarray, np.ndarray]:
    """Two DLT rows ``u P3 - P1`` and ``v P3 - P2`` split as ``(A, b)``.

    ``A @ y + b == 0`` holds exactly when ``obs`` is the projection of ``y``.
    """
    P = camera.projection
    u, v = float(obs[0]), float(obs[1])
    rows = np.stack([u * P[2] - P[0], v * P[2] - P[1]])
    return rows[:, :3].copy(), rows[:, 3].copy()


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= RAY_EPS):
        raise DegenerateRay(f"{what} has (near) zero length")
    return x / n


def epipolar_normal(cam_ref: CameraParams, cam_src: CameraParams, p_src) -> np.ndarray:
    """Unit normal of the plane through both centres and the source ray of ``p_src``."""
    baseline = cam_src.center - cam_ref.center
    if np.linalg.norm(baseline) <= BASELINE_EPS:
        raise DegenerateBaseline("camera centres coincide")
    d_src = _unit(cam_src.ray_direction(np.asarray(p_src[:2], dtype=float)), "source ray")
    n = np.cross(d_src, _unit(baseline, "baseline"))
    return _unit(n, "epipolar plane normal")


def field_from_rays(unit_rays: np.ndarray, normal: np.ndarray, gamma: float) -> np.ndarray:
    """``(1 - |d . n|)^gamma`` for precomputed unit reference rays ``(..., 3)``."""
    t = np.abs(unit_rays @ normal)
    return np.clip(1.0 - t, 0.0, 1.0) ** gamma


def grid_rays(camera: CameraParams, width: int, height: int, stride: float = 1.0) -> np.ndarray:
    """Unit rays through the cell centres ``((j + .5) * stride, (i + .5) * stride)``; ``(H, W, 3)``."""
    if width < 1 or height < 1:
        raise ValidationError("mask grid must be at least 1x1")
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    uv = np.stack([(jj + 0.5) * stride, (ii + 0.5) * stride], axis=-1)
    return _unit(camera.ray_direction(uv), "reference ray")


def epipolar_field(cam_ref: CameraParams, cam_src: CameraParams, p_src, pixel, gamma: float = 10.0) -> float:
    """Soft indicator that ``pixel`` (reference view) lies on the epipolar line of ``p_src``.

    The source ray, the baseline and the reference ray are all normalised, so
    the triple product is the sine of the angle between the reference ray and
    the epipolar plane and the result lies in ``[0, 1]``.
    """
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    n = epipolar_normal(cam_ref, cam_src, p_src)
    d = _unit(cam_ref.ray_direction(np.asarray(pixel[:2], dtype=float)), "reference ray")
    return float(field_from_rays(d, n, gamma))


def epipolar_mask(
    cam_ref: CameraParams,
    cam_src: CameraParams,
    p_src,
    width: int,
    height: int,
    gamma: float = 10.0,
    stride: float = 1.0,
) -> np.ndarray:
    """Epipolar field on a ``height x width`` grid of cell centres.

    Cell ``(i, j)`` is evaluated at image point ``((j + .5) * stride, (i + .5) * stride)``.
    Returns an array of shape ``(height, width)``.
    """
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    rays = grid_rays(cam_ref, width, height, stride)
    return field_from_rays(rays, epipolar_normal(cam_ref, cam_src, p_src), gamma)
