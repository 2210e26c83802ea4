"""Linear, algebraic and holistic triangulation.

Holistic triangulation solves the whole pose at once from the normal equations

    (A^T A + sum_s lam_s H_s^T H_s) Y = sum_s lam_s H_s^T H_s (Y_root + Y_mean_s) - A^T B

where ``A``/``B`` stack the confidence-weighted DLT rows of every joint and
``H_s = G_s (I - M_s^T M_s) C_s`` is the hop-``s`` reconstruction operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .anatomy import AnatomyPrior, stack_root, yaw_rotation
from .errors import (
    AllZeroConfidence,
    DegenerateHips,
    DimensionMismatch,
    InsufficientViews,
    RankDeficient,
    SingularSystem,
    ValidationError,
)
from .geometry import CameraParams

COND_LIMIT = 1e12
BLOCK_RANK_RTOL = 1e-10


@dataclass(eq=False)
class MultiViewObservation:
    """2D keypoints of one frame: ``uv`` is ``(C, K, 2)``, ``confidence`` is ``(C, K)``.

    A joint missing from a view is encoded with confidence 0.
    """

    uv: np.ndarray
    confidence: np.ndarray | None = None
    views: tuple[int, ...] | None = None

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        if self.uv.ndim != 3 or self.uv.shape[-1] != 2:
            raise DimensionMismatch(f"uv must be (C, K, 2), got {self.uv.shape}")
        C, K = self.uv.shape[:2]
        if self.confidence is None:
            self.confidence = np.ones((C, K))
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.confidence.shape != (C, K):
            raise DimensionMismatch(f"confidence must be {(C, K)}, got {self.confidence.shape}")
        if np.any(self.confidence < 0) or np.any(~np.isfinite(self.confidence)):
            raise ValidationError("confidences must be finite and nonnegative")
        if self.views is None:
            self.views = tuple(range(C))
        self.views = tuple(int(v) for v in self.views)

    @property
    def n_views(self) -> int:
        return self.uv.shape[0]

    @property
    def n_joints(self) -> int:
        return self.uv.shape[1]


@dataclass(eq=False)
class HolisticSystem:
    """Block-diagonal ``A`` (``2CK x 3K``) and stacked ``B`` (``2CK``), both confidence weighted."""

    blocks: np.ndarray  # (K, 2C, 3)
    rhs: np.ndarray  # (K, 2C)
    weights: np.ndarray  # (K, 2C)

    @property
    def K(self) -> int:
        return self.blocks.shape[0]

    @property
    def A(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.blocks)

    @property
    def B(self) -> np.ndarray:
        return self.rhs.reshape(-1)

    def gram(self) -> np.ndarray:
        """``A^T A`` as a dense ``3K x 3K`` matrix."""
        return scipy.linalg.block_diag(*np.einsum("kri,krj->kij", self.blocks, self.blocks))

    def at_b(self) -> np.ndarray:
        return np.einsum("kri,kr->ki", self.blocks, self.rhs).reshape(-1)


@dataclass
class SolverReport:
    reprojection_residual: float
    reconstruction_residual: dict[int, float] = field(default_factory=dict)
    condition_estimate: float = float("nan")
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "reprojection_residual": self.reprojection_residual,
            "reconstruction_residual": {str(k): v for k, v in self.reconstruction_residual.items()},
            "condition_estimate": self.condition_estimate,
            "status": self.status,
        }


# ---------------------------------------------------------------------------
# DLT rows and per-joint solves
# ---------------------------------------------------------------------------


def _projections(cameras: Sequence[CameraParams]) -> np.ndarray:
    return np.stack([c.projection for c in cameras])


def dlt_rows(projections: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DLT rows for every joint.

    ``projections`` is ``(C, 3, 4)`` and ``uv`` is ``(..., C, K, 2)``. Returns
    ``A`` of shape ``(..., K, 2C, 3)`` and ``b`` of shape ``(..., K, 2C)``; rows
    are ordered ``(u_1, v_1, u_2, v_2, ...)``.
    """
    P = np.asarray(projections, dtype=float)
    uv = np.asarray(uv, dtype=float)
    # (..., C, K, 2, 4): coordinate * P3 - P_row
    rows = uv[..., :, :, :, None] * P[:, None, None, 2, :] - P[:, None, :2, :]
    rows = np.moveaxis(rows, -4, -3)  # (..., K, C, 2, 4)
    rows = rows.reshape(rows.shape[:-3] + (-1, 4))
    return rows[..., :3], rows[..., 3]


def _row_weights(confidence: np.ndarray) -> np.ndarray:
    # (..., C, K) -> (..., K, 2C) with each view's weight on its u- and v-row
    w = np.moveaxis(np.asarray(confidence, dtype=float), -2, -1)
    return np.repeat(w, 2, axis=-1)


def _check_views(confidence: np.ndarray) -> None:
    C = confidence.shape[-2]
    if C < 2:
        raise InsufficientViews(f"need at least 2 views, got {C}")
    positive = (confidence > 0).sum(axis=-2)
    if np.any(positive == 0):
        raise AllZeroConfidence("a joint has zero confidence in every view")
    if np.any(positive < 2):
        raise InsufficientViews("a joint is observed with positive confidence in fewer than 2 views")


def solve_blocks(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least-squares minimiser of ``||A y + b||`` for a stack of ``(2C, 3)`` blocks via SVD."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if np.any(s[..., 2] <= BLOCK_RANK_RTOL * s[..., 0]):
        raise RankDeficient("triangulation block has rank < 3 (collinear geometry)")
    coef = -np.einsum("...ri,...r->...i", U, b) / s
    return np.einsum("...ij,...i->...j", Vt, coef)


def linear_triangulate(cameras: Sequence[CameraParams], points) -> np.ndarray:
    """Unweighted DLT triangulation of one joint seen as ``points[c]`` in ``cameras[c]``."""
    pts = np.asarray(points, dtype=float)[..., :2].reshape(-1, 2)
    if len(cameras) != len(pts):
        raise DimensionMismatch("one point per camera is required")
    if len(cameras) < 2:
        raise InsufficientViews(f"need at least 2 views, got {len(cameras)}")
    A, b = dlt_rows(_projections(cameras), pts[:, None, :])
    return solve_blocks(A[0], b[0])


def algebraic_triangulate(cameras: Sequence[CameraParams], obs: MultiViewObservation) -> np.ndarray:
    """Per-joint confidence-weighted DLT; returns a ``(K, 3)`` pose."""
    system = assemble_holistic_system(cameras, obs)
    return solve_blocks(system.blocks, system.rhs)


def assemble_holistic_system(cameras: Sequence[CameraParams], obs: MultiViewObservation) -> HolisticSystem:
    if len(cameras) != obs.n_views:
        raise DimensionMismatch(f"{len(cameras)} cameras for {obs.n_views} views")
    _check_views(obs.confidence)
    A, b = dlt_rows(_projections(cameras), obs.uv)
    w = _row_weights(obs.confidence)
    return HolisticSystem(blocks=A * w[..., None], rhs=b * w, weights=w)


# ---------------------------------------------------------------------------
# Holistic triangulation
# ---------------------------------------------------------------------------


def _world_prior(prior: AnatomyPrior, root: np.ndarray, rotation: np.ndarray | None):
    """Prior quadratic and linear terms expressed in the world frame."""
    K = prior.topology.K
    Q, q = prior.quadratic, prior.linear
    if rotation is None:
        return Q, Q @ stack_root(root, K) + q
    R = np.asarray(rotation, dtype=float)
    Q4 = Q.reshape(K, 3, K, 3)
    Qw = np.einsum("ca,icjd,db->iajb", R, Q4, R).reshape(3 * K, 3 * K)
    inner = Q @ stack_root(R @ root, K) + q
    rhs = np.einsum("ca,kc->ka", R, inner.reshape(K, 3)).reshape(-1)
    return Qw, rhs


def _hop_targets(prior: AnatomyPrior, root: np.ndarray, rotation: np.ndarray | None):
    K = prior.topology.K
    out = []
    for h in prior.hops:
        mean = h.mean_pose.reshape(K, 3)
        if rotation is not None:
            mean = mean @ np.asarray(rotation)
        out.append((h, stack_root(root, K) + mean.reshape(-1)))
    return out


def reconstruction_residuals(
    Y, prior: AnatomyPrior, root, rotation: np.ndarray | None = None
) -> dict[int, float]:
    """``||H_s (Y - Y_root - Y_mean_s)||`` per hop, in the (optionally yawed) world frame."""
    y = np.asarray(Y, dtype=float).reshape(-1)
    K = prior.topology.K
    out = {}
    for h, t in _hop_targets(prior, np.asarray(root, dtype=float), rotation):
        d = (y - t).reshape(K, 3)
        if rotation is not None:
            d = d @ np.asarray(rotation).T
        out[h.hop] = float(np.linalg.norm(h.H @ d.reshape(-1)))
    return out


def holistic_triangulate(
    system: HolisticSystem,
    prior: AnatomyPrior | None,
    root,
    rotation: np.ndarray | None = None,
) -> tuple[np.ndarray, SolverReport]:
    """Closed-form whole-pose triangulation.

    Parameters
    ----------
    system : HolisticSystem
        Confidence-weighted DLT system of the frame.
    prior : AnatomyPrior or None
        Reconstruction terms. ``None`` or all-zero weights reduce to
        algebraic triangulation and take the blockwise path.
    root : array_like, shape (3,)
        Pelvis position, normally from unweighted linear triangulation.
    rotation : ndarray, shape (3, 3), optional
        Yaw that maps the world-frame root-relative pose into the canonical
        frame the prior was fitted in. ``None`` means the frames coincide.

    Returns
    -------
    pose : ndarray, shape (K, 3)
    report : SolverReport
    """
    K = system.K
    root = np.asarray(root, dtype=float).reshape(3)
    if prior is not None and prior.topology.K != K:
        raise DimensionMismatch(f"prior has {prior.topology.K} joints, system has {K}")

    if prior is None or not prior.active:
        Y = solve_blocks(system.blocks, system.rhs)
        res = np.einsum("kri,ki->kr", system.blocks, Y) + system.rhs
        report = SolverReport(float(np.linalg.norm(res)), status="blockwise")
        if prior is not None:
            report.reconstruction_residual = reconstruction_residuals(Y, prior, root, rotation)
        return Y, report

    Qw, prior_rhs = _world_prior(prior, root, rotation)
    normal = system.gram() + Qw
    rhs = prior_rhs - system.at_b()
    cond = float(np.linalg.cond(normal))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(f"normal matrix is numerically singular (condition {cond:.3g})")
    try:
        y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(normal), rhs)
        status = "cholesky"
    except np.linalg.LinAlgError:
        y = np.linalg.lstsq(normal, rhs, rcond=None)[0]
        status = "lstsq"
    Y = y.reshape(K, 3)
    res = np.einsum("kri,ki->kr", system.blocks, Y) + system.rhs
    report = SolverReport(
        reprojection_residual=float(np.linalg.norm(res)),
        reconstruction_residual=reconstruction_residuals(Y, prior, root, rotation),
        condition_estimate=cond,
        status=status,
    )
    return Y, report


# ---------------------------------------------------------------------------
# Batched solvers (many frames, same rig)
# ---------------------------------------------------------------------------


def triangulate_frames(
    cameras: Sequence[CameraParams],
    uv: np.ndarray,
    confidence: np.ndarray | None = None,
    mode: str = "ht",
    prior: AnatomyPrior | None = None,
    root_index: int = 0,
    align_yaw: bool = True,
) -> np.ndarray:
    """Triangulate ``T`` frames at once.

    ``uv`` is ``(T, C, K, 2)``, ``confidence`` ``(T, C, K)``. ``mode`` is one
    of ``"lt"`` (unweighted), ``"at"`` (confidence weighted) or ``"ht"``
    (holistic with ``prior``). For ``"ht"`` the pelvis comes from ``"lt"``
    and, when ``align_yaw`` is set, the prior is yawed to the hip line of
    the ``"at"`` solution. Returns ``(T, K, 3)``.
    """
    uv = np.asarray(uv, dtype=float)
    if uv.ndim != 4:
        raise DimensionMismatch(f"uv must be (T, C, K, 2), got {uv.shape}")
    T, C, K, _ = uv.shape
    if len(cameras) != C:
        raise DimensionMismatch(f"{len(cameras)} cameras for {C} views")
    conf = np.ones((T, C, K)) if confidence is None else np.asarray(confidence, dtype=float)
    if mode == "lt":
        conf = np.ones_like(conf)
    _check_views(conf)
    A, b = dlt_rows(_projections(cameras), uv)  # (T, K, 2C, 3)
    if mode == "lt":
        return solve_blocks(A, b)
    w = _row_weights(conf)
    Aw, bw = A * w[..., None], b * w
    Y_at = solve_blocks(Aw, bw)
    if mode == "at" or prior is None or not prior.active:
        if mode not in ("at", "ht"):
            raise ValidationError(f"unknown mode {mode!r}")
        return Y_at
    if mode != "ht":
        raise ValidationError(f"unknown mode {mode!r}")
    if prior.topology.K != K:
        raise DimensionMismatch(f"prior has {prior.topology.K} joints, observations have {K}")

    root = solve_blocks(A[:, root_index], b[:, root_index])  # (T, 3)
    n = 3 * K
    gram = np.einsum("tkri,tkrj->tkij", Aw, Aw)
    normal = np.zeros((T, K, 3, K, 3))
    idx = np.arange(K)
    normal[:, idx, :, idx, :] = np.moveaxis(gram, 0, 1)
    Q4 = prior.quadratic.reshape(K, 3, K, 3)
    if align_yaw:
        R = _safe_yaw(Y_at, prior)
        normal += np.einsum("tca,icjd,tdb->tiajb", R, Q4, R, optimize=True)
        Rroot = np.einsum("tij,tj->ti", R, root)
        inner = np.einsum("mn,tn->tm", prior.quadratic, np.tile(Rroot, K)) + prior.linear
        prior_rhs = np.einsum("tca,tkc->tka", R, inner.reshape(T, K, 3)).reshape(T, n)
    else:
        normal += Q4
        prior_rhs = np.tile(root, K) @ prior.quadratic.T + prior.linear
    rhs = prior_rhs - np.einsum("tkri,tkr->tki", Aw, bw).reshape(T, n)
    normal = normal.reshape(T, n, n)
    ev = np.linalg.eigvalsh(normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(ev[:, 0] > 0, ev[:, -1] / ev[:, 0], np.inf)
    bad = ~(cond <= COND_LIMIT)
    if np.any(bad):
        t = int(np.argmax(bad))
        raise SingularSystem(f"normal matrix of frame {t} is numerically singular (condition {cond[t]:.3g})")
    try:
        L = np.linalg.cholesky(normal)
        z = _forward(L, rhs)
        y = _backward(L, z)
    except np.linalg.LinAlgError:
        y = np.linalg.solve(normal, rhs[..., None])[..., 0]
    if not np.all(np.isfinite(y)):
        raise SingularSystem("holistic normal equations produced non-finite values")
    return y.reshape(T, K, 3)


def _forward(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = b.shape[-1]
    x = np.empty_like(b)
    for i in range(n):
        x[:, i] = (b[:, i] - np.einsum("tj,tj->t", L[:, i, :i], x[:, :i])) / L[:, i, i]
    return x


def _backward(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = b.shape[-1]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[:, i] = (b[:, i] - np.einsum("tj,tj->t", L[:, i + 1 :, i], x[:, i + 1 :])) / L[:, i, i]
    return x


def _safe_yaw(Y: np.ndarray, prior: AnatomyPrior) -> np.ndarray:
    try:
        return yaw_rotation(Y, prior.topology)
    except DegenerateHips:
        R = np.empty((len(Y), 3, 3))
        for t, y in enumerate(Y):
            try:
                R[t] = yaw_rotation(y, prior.topology)
            except DegenerateHips:
                R[t] = np.eye(3)
        return R


def estimate_root_and_yaw(
    cameras: Sequence[CameraParams],
    obs: MultiViewObservation,
    topology,
    align_yaw: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Pelvis from unweighted LT and (optionally) prior yaw from the AT hip line."""
    A, b = dlt_rows(_projections(cameras), obs.uv)
    root = solve_blocks(A[topology.root], b[topology.root])
    if not align_yaw:
        return root, None
    Y_at = algebraic_triangulate(cameras, obs)
    try:
        return root, yaw_rotation(Y_at, topology)
    except DegenerateHips:
        return root, None


def triangulate_frame(
    cameras: Sequence[CameraParams],
    obs: MultiViewObservation,
    mode: str = "ht",
    prior: AnatomyPrior | None = None,
    align_yaw: bool = True,
) -> tuple[np.ndarray, SolverReport]:
    """Single-frame convenience wrapper that also returns a :class:`SolverReport`."""
    if mode == "lt":
        obs = MultiViewObservation(obs.uv, np.ones_like(obs.confidence), obs.views)
    system = assemble_holistic_system(cameras, obs)
    if mode in ("lt", "at"):
        Y = solve_blocks(system.blocks, system.rhs)
        res = np.einsum("kri,ki->kr", system.blocks, Y) + system.rhs
        return Y, SolverReport(float(np.linalg.norm(res)), status=mode)
    if mode != "ht":
        raise ValidationError(f"unknown mode {mode!r}")
    if prior is None:
        raise ValidationError("holistic triangulation needs an anatomy prior")
    root, R = estimate_root_and_yaw(cameras, obs, prior.topology, align_yaw)
    return holistic_triangulate(system, prior, root, R)
