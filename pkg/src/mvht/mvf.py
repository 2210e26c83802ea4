"""Multi-view fusion of 2D keypoint heatmaps.

Heatmaps are ``(H, W)`` arrays and feature maps ``(H, W, N)`` arrays. Inside
this module points are expressed in cell-index coordinates ``(x, y)`` with
``x`` along the width; cell ``(i, j)`` covers image pixels centred at
``((j + .5) * stride, (i + .5) * stride)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NonFinite, OutOfBounds, ValidationError
from .geometry import CameraParams, ImagePoint, epipolar_normal, field_from_rays, grid_rays

STRATEGIES = ("dot", "fcl")
FUSIONS = ("all", "most-conf")


def image_to_grid(uv, stride: float) -> np.ndarray:
    """Image pixels to cell-index coordinates."""
    return np.asarray(uv, dtype=float) / stride - 0.5


def grid_to_image(xy, stride: float) -> np.ndarray:
    return (np.asarray(xy, dtype=float) + 0.5) * stride


@dataclass(eq=False)
class Heatmap:
    grid: np.ndarray
    joint: int = -1
    view: int = -1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise DimensionMismatch(f"heatmap must be a nonempty 2D grid, got {self.grid.shape}")


@dataclass(eq=False)
class FeatureMap:
    grid: np.ndarray
    view: int = -1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 3 or self.grid.shape[-1] < 1:
            raise DimensionMismatch(f"feature map must be (H, W, N) with N >= 1, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise NonFinite("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.grid.shape[-1]


def _grid(x) -> np.ndarray:
    return np.asarray(x.grid if hasattr(x, "grid") else x, dtype=float)


@dataclass(frozen=True, eq=False)
class FusionConfig:
    """Matching, masking and aggregation settings.

    ``aggregation_weights`` (initial first, then sources) default to uniform;
    ``initial_weight`` is a shorthand that splits the remainder evenly.
    """

    strategy: str = "dot"
    fcl_weights: np.ndarray | None = None
    gamma: float = 10.0
    aggregation_weights: tuple[float, ...] | None = None
    initial_weight: float | None = None
    temperature: float = 1.0
    fusion: str = "all"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown matching strategy {self.strategy!r}")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"unknown fusion mode {self.fusion!r}")
        if self.strategy == "fcl":
            if self.fcl_weights is None:
                raise ValidationError("fcl strategy needs a weight vector")
            object.__setattr__(self, "fcl_weights", np.asarray(self.fcl_weights, dtype=float).ravel())
        if not self.gamma > 0 or not self.temperature > 0:
            raise ValidationError("gamma and temperature must be positive")
        if self.aggregation_weights is not None:
            w = tuple(float(x) for x in self.aggregation_weights)
            if abs(sum(w) - 1.0) > 1e-9:
                raise ValidationError(f"aggregation weights sum to {sum(w)}, not 1")
            object.__setattr__(self, "aggregation_weights", w)
        if self.initial_weight is not None and not 0.0 <= self.initial_weight <= 1.0:
            raise ValidationError("initial_weight must lie in [0, 1]")

    def weights(self, n_sources: int) -> np.ndarray:
        if self.aggregation_weights is not None:
            if len(self.aggregation_weights) != n_sources + 1:
                raise DimensionMismatch(
                    f"{len(self.aggregation_weights)} aggregation weights for {n_sources} sources"
                )
            return np.asarray(self.aggregation_weights)
        if self.initial_weight is not None and n_sources:
            rest = (1.0 - self.initial_weight) / n_sources
            return np.array([self.initial_weight] + [rest] * n_sources)
        return np.full(n_sources + 1, 1.0 / (n_sources + 1))


# ---------------------------------------------------------------------------
# Keypoint extraction and sampling
# ---------------------------------------------------------------------------


def soft_argmax_batch(grids, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Soft-argmax over the last two axes of ``(..., H, W)``.

    Returns ``(xy, confidence)`` with ``xy`` of shape ``(..., 2)``.
    """
    G = np.asarray(grids, dtype=float)
    if G.ndim < 2 or G.shape[-1] == 0 or G.shape[-2] == 0:
        raise DimensionMismatch(f"heatmap grid must be nonempty, got {G.shape}")
    if not np.all(np.isfinite(G)):
        raise NonFinite("heatmap contains non-finite entries")
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    z = G / temperature
    z = z - z.max(axis=(-2, -1), keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=(-2, -1), keepdims=True)
    H, W = G.shape[-2:]
    x = p.sum(axis=-2) @ np.arange(W, dtype=float)
    y = p.sum(axis=-1) @ np.arange(H, dtype=float)
    return np.stack([x, y], axis=-1), p.max(axis=(-2, -1))


def soft_argmax(heatmap, temperature: float = 1.0) -> ImagePoint:
    """Softmax-weighted centroid (cell-index coordinates); confidence is the softmax peak."""
    g = _grid(heatmap)
    if g.ndim != 2:
        raise DimensionMismatch(f"heatmap must be 2D, got {g.shape}")
    xy, conf = soft_argmax_batch(g, temperature)
    return ImagePoint(float(xy[0]), float(xy[1]), float(conf))


def sample_feature(feature_map, point) -> np.ndarray:
    """Bilinear interpolation of an ``(H, W, N)`` map at cell-index ``(x, y)``."""
    F = _grid(feature_map)
    H, W = F.shape[:2]
    x, y = float(point[0]), float(point[1])
    tol = 1e-9
    if not (-tol <= x <= W - 1 + tol and -tol <= y <= H - 1 + tol):
        raise OutOfBounds(f"point ({x}, {y}) outside [0, {W - 1}] x [0, {H - 1}]")
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0 = min(int(np.floor(x)), max(W - 2, 0))
    y0 = min(int(np.floor(y)), max(H - 2, 0))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    return (
        (1 - fx) * (1 - fy) * F[y0, x0]
        + fx * (1 - fy) * F[y0, x1]
        + (1 - fx) * fy * F[y1, x0]
        + fx * fy * F[y1, x1]
    )


# ---------------------------------------------------------------------------
# Matching and fusion
# ---------------------------------------------------------------------------


def match_heatmap(feature_map, feat, config: FusionConfig | None = None) -> np.ndarray:
    """Per-pixel matching score of ``feat`` against a reference feature map.

    ``dot``: ``F(i,j) . f / N``; ``fcl``: ``w[:N] . F(i,j) + w[N:] . f``.
    """
    config = config or FusionConfig()
    F = _grid(feature_map)
    f = np.asarray(feat, dtype=float).ravel()
    N = F.shape[-1]
    if f.shape[0] != N:
        raise DimensionMismatch(f"feature has {f.shape[0]} channels, map has {N}")
    if config.strategy == "dot":
        return F @ f / N
    w = config.fcl_weights
    if w.shape[0] != 2 * N:
        raise DimensionMismatch(f"fcl weights need length {2 * N}, got {w.shape[0]}")
    return F @ w[:N] + float(w[N:] @ f)


def pseudo_heatmap(match, mask) -> np.ndarray:
    m, k = _grid(match), _grid(mask)
    if m.shape != k.shape:
        raise DimensionMismatch(f"match {m.shape} vs mask {k.shape}")
    return m * k


def fuse_and_refine(
    initial,
    pseudos: Sequence,
    config: FusionConfig | None = None,
    source_confidences: Sequence[float] | None = None,
) -> tuple[np.ndarray, ImagePoint]:
    """Weighted sum of the initial and pseudo heatmaps followed by soft-argmax.

    With ``fusion="most-conf"`` only the source with the highest confidence
    is kept (its heatmap peak after softmax unless ``source_confidences`` is
    given). No sources leaves the initial heatmap unchanged.
    """
    config = config or FusionConfig()
    base = _grid(initial)
    maps = [_grid(p) for p in pseudos]
    for m in maps:
        if m.shape != base.shape:
            raise DimensionMismatch(f"pseudo heatmap {m.shape} vs initial {base.shape}")
    if not maps:
        return base.copy(), soft_argmax(base, config.temperature)
    if config.fusion == "most-conf":
        if source_confidences is None:
            source_confidences = soft_argmax_batch(np.stack(maps), config.temperature)[1]
        if len(source_confidences) != len(maps):
            raise DimensionMismatch(f"{len(source_confidences)} confidences for {len(maps)} sources")
        maps = [maps[int(np.argmax(source_confidences))]]
    w = config.weights(len(maps))
    fused = np.tensordot(w, np.stack([base] + maps), axes=1)
    return fused, soft_argmax(fused, config.temperature)


@dataclass
class RefinedKeypoints:
    """Per-view, per-joint keypoints in image pixels before and after fusion."""

    initial_uv: np.ndarray  # (C, K, 2)
    initial_confidence: np.ndarray  # (C, K)
    uv: np.ndarray  # (C, K, 2)
    confidence: np.ndarray  # (C, K)
    fused: np.ndarray | None = field(default=None, repr=False)  # (C, K, H, W)


def refine_keypoints(
    cameras: Sequence[CameraParams],
    heatmaps,
    features,
    config: FusionConfig | None = None,
    stride: float = 1.0,
    keep_fused: bool = False,
) -> RefinedKeypoints:
    """Refine every view's keypoints with pseudo heatmaps from all other views.

    ``heatmaps`` is ``(C, K, H, W)`` and ``features`` ``(C, H, W, N)``; every
    other view acts as a source whose soft-argmax keypoint is matched into
    the reference view and masked by its epipolar field.
    """
    config = config or FusionConfig()
    Hm = np.asarray(heatmaps, dtype=float)
    Fm = np.asarray(features, dtype=float)
    C, K, H, W = Hm.shape
    if Fm.shape[:3] != (C, H, W):
        raise DimensionMismatch(f"features {Fm.shape} do not match heatmaps {Hm.shape}")
    if len(cameras) != C:
        raise DimensionMismatch(f"{len(cameras)} cameras for {C} views")
    xy0, conf0 = soft_argmax_batch(Hm, config.temperature)
    src_img = grid_to_image(xy0, stride)
    feats = np.stack([[sample_feature(Fm[c], xy0[c, k]) for k in range(K)] for c in range(C)])
    out_xy = np.empty_like(xy0)
    out_conf = np.empty_like(conf0)
    fused_all = np.empty_like(Hm) if keep_fused else None
    for c in range(C):
        rays = grid_rays(cameras[c], W, H, stride)
        others = [s for s in range(C) if s != c]
        for k in range(K):
            pseudos = []
            for s in others:
                mask = field_from_rays(rays, epipolar_normal(cameras[c], cameras[s], src_img[s, k]), config.gamma)
                pseudos.append(match_heatmap(Fm[c], feats[s, k], config) * mask)
            fused, pt = fuse_and_refine(Hm[c, k], pseudos, config, conf0[others, k])
            out_xy[c, k] = (pt.u, pt.v)
            out_conf[c, k] = pt.confidence
            if keep_fused:
                fused_all[c, k] = fused
    return RefinedKeypoints(
        initial_uv=src_img,
        initial_confidence=conf0,
        uv=grid_to_image(out_xy, stride),
        confidence=out_conf,
        fused=fused_all,
    )
