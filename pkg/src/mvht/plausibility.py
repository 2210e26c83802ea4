"""Joint-angle models, the plausible-pose protocol and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit, logsumexp

from .anatomy import SkeletonTopology, as_poses, bone_lengths
from .errors import (
    CountMismatch,
    EmptyInput,
    MissingJointModel,
    NoParentBone,
    TooFewSamples,
    ValidationError,
    ZeroLengthBone,
)
from .geometry import CameraParams, project_points

BONE_EPS = 1e-6
COV_FLOOR = 1e-6
BORDER_PERCENTILE = 0.27
LOSS_WEIGHTS = {"pj": 0.1, "bl": 0.01, "ja": 0.01}


# ---------------------------------------------------------------------------
# Local spherical joint angles
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n[..., 0]


def _reference_pair(topology: SkeletonTopology, joint: int) -> tuple[int, int] | None:
    if joint in topology.angle_reference:
        return topology.angle_reference[joint]
    p = topology.parents[joint]
    g = topology.parents[p] if p >= 0 else -1
    return (g, p) if g >= 0 else None


def joint_angles(poses, topology: SkeletonTopology, joints: Sequence[int] | None = None) -> np.ndarray:
    """Polar and azimuth angles of the outgoing bone at each joint.

    The local frame at joint ``k`` has ``z`` pointing from ``k`` to its
    parent, ``x`` along the part of the reference bone orthogonal to ``z``
    (the grandparent bone unless the topology overrides it; a fixed world
    axis when degenerate) and ``y = z x x``. Returns ``(..., len(joints), 2)``
    holding ``theta`` in ``[0, pi]`` and ``phi`` in ``(-pi, pi]``.
    """
    Y = as_poses(poses, topology.K)
    joints = list(topology.selected_angle_joints if joints is None else joints)
    out = np.empty(Y.shape[:-2] + (len(joints), 2))
    for n, k in enumerate(joints):
        p = topology.parents[k]
        kids = topology.children(k)
        if p < 0 or not kids:
            raise NoParentBone(f"joint {topology.names[k]} needs a parent and a child bone")
        z, lz = _unit(Y[..., p, :] - Y[..., k, :])
        d, ld = _unit(Y[..., kids[0], :] - Y[..., k, :])
        if np.any(lz < BONE_EPS) or np.any(ld < BONE_EPS):
            raise ZeroLengthBone(f"zero-length bone at joint {topology.names[k]}")
        ref = _reference_pair(topology, k)
        if ref is None:
            r = np.broadcast_to([1.0, 0.0, 0.0], z.shape)
        else:
            r = Y[..., ref[1], :] - Y[..., ref[0], :]
        x = r - np.sum(r * z, axis=-1, keepdims=True) * z
        x, lx = _unit(x)
        bad = lx <= 1e-9 * np.maximum(np.linalg.norm(r, axis=-1), 1.0)
        if np.any(bad):
            fallback = np.where(np.abs(z[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
            fb = fallback - np.sum(fallback * z, axis=-1, keepdims=True) * z
            x = np.where(bad[..., None], _unit(fb)[0], x)
        y = np.cross(z, x)
        theta = np.arccos(np.clip(np.sum(d * z, axis=-1), -1.0, 1.0))
        phi = np.arctan2(np.sum(d * y, axis=-1), np.sum(d * x, axis=-1))
        phi = np.where(phi <= -np.pi, np.pi, phi)
        out[..., n, 0] = theta
        out[..., n, 1] = phi
    return out


def local_spherical_angles(pose, topology: SkeletonTopology, joint: int) -> tuple[float, float]:
    a = joint_angles(pose, topology, [joint])[0]
    return float(a[0]), float(a[1])


def angle_features(angles: np.ndarray) -> np.ndarray:
    """``[sin(theta), sin(phi), cos(phi)]`` from ``(..., 2)`` angles."""
    th, ph = angles[..., 0], angles[..., 1]
    return np.stack([np.sin(th), np.sin(ph), np.cos(ph)], axis=-1)


# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GaussianMixture:
    weights: np.ndarray  # (n,)
    means: np.ndarray  # (n, d)
    covariances: np.ndarray  # (n, d, d)
    log_likelihood: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return logsumexp(_component_log_prob(x.reshape(-1, x.shape[-1]), self), axis=1).reshape(x.shape[:-1])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GaussianMixture":
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float), np.asarray(d["covariances"], float))


def _component_log_prob(X: np.ndarray, gmm: GaussianMixture) -> np.ndarray:
    """``log alpha_i + log N(x | mu_i, Sigma_i)``, shape ``(m, n)``."""
    m, d = X.shape
    out = np.empty((m, gmm.n_components))
    for i in range(gmm.n_components):
        L = np.linalg.cholesky(gmm.covariances[i])
        z = np.linalg.solve(L, (X - gmm.means[i]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, i] = -0.5 * (np.sum(z * z, axis=0) + d * np.log(2 * np.pi) + logdet)
    with np.errstate(divide="ignore"):
        return out + np.log(gmm.weights)


def _floor_cov(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= COV_FLOOR:
        return S
    return (V * np.maximum(w, COV_FLOOR)) @ V.T


def _kmeanspp(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, n):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.stack(centers)


def _m_step(X: np.ndarray, resp: np.ndarray) -> GaussianMixture:
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = resp.T @ X / nk[:, None]
    covs = np.empty((len(nk), X.shape[1], X.shape[1]))
    for i in range(len(nk)):
        D = X - means[i]
        covs[i] = _floor_cov((resp[:, i, None] * D).T @ D / nk[i])
    return GaussianMixture(nk / nk.sum(), means, covs)


def _em(X: np.ndarray, n_components: int, rng: np.random.Generator, max_iter: int, tol: float) -> GaussianMixture:
    centers = _kmeanspp(X, n_components, rng)
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
    resp = np.zeros((len(X), n_components))
    resp[np.arange(len(X)), np.argmin(d2, axis=1)] = 1.0
    gmm = _m_step(X, resp)
    history: list[float] = []
    converged = False
    for _ in range(max_iter):
        logp = _component_log_prob(X, gmm)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.mean())
        if history and abs(ll - history[-1]) < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        gmm = _m_step(X, np.exp(logp - lse[:, None]))
    gmm.log_likelihood = history
    gmm.converged = converged
    return gmm


def fit_gmm(
    samples,
    n_components: int = 4,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-8,
    n_init: int = 5,
) -> GaussianMixture:
    """Expectation-maximisation with k-means++ seeding.

    Each of the ``n_init`` restarts stops when the mean log-likelihood changes
    by less than ``tol`` or after ``max_iter`` iterations; the restart with
    the highest final log-likelihood is returned. Covariance eigenvalues are
    floored at ``1e-6``. The winning run's per-iteration mean log-likelihood
    is kept in ``log_likelihood``.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < 10 * n_components:
        raise TooFewSamples(f"need at least {10 * n_components} samples, got {len(X)}")
    if n_init < 1:
        raise ValidationError("n_init must be at least 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        gmm = _em(X, n_components, rng, max_iter, tol)
        if best is None or gmm.log_likelihood[-1] > best.log_likelihood[-1]:
            best = gmm
    return best


def gmm_density(model: GaussianMixture, x) -> np.ndarray | float:
    """Mixture density ``sum_i alpha_i N(x | mu_i, Sigma_i)``."""
    x = np.asarray(x, dtype=float)
    p = np.exp(model.log_density(x))
    return float(p) if p.ndim == 0 else p


def angle_penalty(p, a) -> np.ndarray:
    """``sigmoid((p - a/2) * (-10/a))``: maps densities ``0 .. a`` onto logits ``5 .. -5``."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    return expit((p - a / 2.0) * (-10.0 / a))


@dataclass(eq=False)
class JointAngleModel:
    joints: tuple[int, ...]
    mixtures: dict[int, GaussianMixture]
    borders: dict[int, float]

    def to_dict(self, topology: SkeletonTopology) -> dict:
        n = topology.names
        return {
            "joints": [n[k] for k in self.joints],
            "mixtures": {n[k]: g.to_dict() for k, g in self.mixtures.items()},
            "borders": {n[k]: a for k, a in self.borders.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping, topology: SkeletonTopology) -> "JointAngleModel":
        idx = topology.index
        return cls(
            joints=tuple(idx(j) for j in d["joints"]),
            mixtures={idx(j): GaussianMixture.from_dict(g) for j, g in d["mixtures"].items()},
            borders={idx(j): float(a) for j, a in d["borders"].items()},
        )


def fit_angle_model(poses, topology: SkeletonTopology, n_components: int = 4, seed: int = 0) -> JointAngleModel:
    """GMM per selected joint; the border ``a_k`` is the 0.27th-percentile training density."""
    joints = tuple(topology.selected_angle_joints)
    feats = angle_features(joint_angles(np.asarray(poses).reshape(-1, topology.K, 3), topology, joints))
    mixtures, borders = {}, {}
    for n, k in enumerate(joints):
        g = fit_gmm(feats[:, n], n_components=n_components, seed=seed + n)
        mixtures[k] = g
        borders[k] = float(np.percentile(gmm_density(g, feats[:, n]), BORDER_PERCENTILE))
    return JointAngleModel(joints, mixtures, borders)


def joint_angle_penalty(pose, model: JointAngleModel, topology: SkeletonTopology) -> np.ndarray | float:
    """Mean over selected joints of the low-probability penalty; in ``[0, 1]``."""
    for k in topology.selected_angle_joints:
        if k not in model.mixtures:
            raise MissingJointModel(f"no angle model for joint {topology.names[k]}")
    joints = list(topology.selected_angle_joints)
    feats = angle_features(joint_angles(pose, topology, joints))
    pen = np.stack(
        [angle_penalty(gmm_density(model.mixtures[k], feats[..., n, :]), model.borders[k]) for n, k in enumerate(joints)],
        axis=-1,
    )
    out = pen.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Occupancy and plausibility
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class OccupancyGrid:
    """Binary ``(theta, phi)`` occupancy; ``grid`` is ``(180/bin, 360/bin)``."""

    grid: np.ndarray
    bin_width_deg: float = 5.0
    dilation_radius: int = 1

    def bins(self, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        deg = np.degrees(np.asarray(angles, dtype=float))
        nt, nphi = self.grid.shape
        it = np.clip(np.floor(deg[..., 0] / self.bin_width_deg).astype(int), 0, nt - 1)
        ip = np.clip(np.floor((deg[..., 1] + 180.0) / self.bin_width_deg).astype(int), 0, nphi - 1)
        return it, ip

    def contains(self, angles: np.ndarray) -> np.ndarray:
        it, ip = self.bins(angles)
        return self.grid[it, ip]


def _check_bin(bin_width_deg: float) -> tuple[int, int]:
    nt, nphi = 180.0 / bin_width_deg, 360.0 / bin_width_deg
    if bin_width_deg <= 0 or abs(nt - round(nt)) > 1e-9:
        raise ValidationError(f"bin width {bin_width_deg} must divide 180 degrees")
    return int(round(nt)), int(round(nphi))


def dilate(grid: np.ndarray, radius: int) -> np.ndarray:
    """Square binary dilation; the azimuth axis wraps around."""
    if radius <= 0:
        return grid.copy()
    padded = np.pad(grid, ((0, 0), (radius, radius)), mode="wrap")
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(padded, structure=se)[:, radius:-radius]


def build_occupancy(angles, bin_width_deg: float = 5.0, dilation_radius: int = 1) -> OccupancyGrid:
    """Occupancy of ``(theta, phi)`` pairs (radians, ``(n, 2)``), dilated by ``dilation_radius`` bins."""
    nt, nphi = _check_bin(bin_width_deg)
    occ = OccupancyGrid(np.zeros((nt, nphi), dtype=bool), bin_width_deg, int(dilation_radius))
    a = np.asarray(angles, dtype=float).reshape(-1, 2)
    if len(a):
        it, ip = occ.bins(a)
        occ.grid[it, ip] = True
    occ.grid = dilate(occ.grid, int(dilation_radius))
    return occ


@dataclass(eq=False)
class PlausibilityModel:
    reference_lengths: np.ndarray  # (J,)
    occupancy: dict[int, OccupancyGrid]
    R: float = 0.2
    angle_model: JointAngleModel | None = None

    def __post_init__(self):
        self.reference_lengths = np.asarray(self.reference_lengths, dtype=float)
        if np.any(self.reference_lengths <= 0):
            raise ValidationError("reference bone lengths must be positive")
        if not self.R > 0:
            raise ValidationError("R must be positive")


def fit_plausibility_model(
    poses,
    topology: SkeletonTopology,
    bin_width_deg: float = 5.0,
    dilation_radius: int = 1,
    R: float = 0.2,
    n_components: int | None = 4,
    seed: int = 0,
) -> PlausibilityModel:
    """Reference lengths (corpus medians), occupancy grids and, optionally, angle GMMs."""
    Y = np.asarray(poses, dtype=float).reshape(-1, topology.K, 3)
    ang = joint_angles(Y, topology)
    occ = {
        k: build_occupancy(ang[:, n], bin_width_deg, dilation_radius)
        for n, k in enumerate(topology.selected_angle_joints)
    }
    gm = fit_angle_model(Y, topology, n_components, seed) if n_components else None
    return PlausibilityModel(np.median(bone_lengths(Y, topology), axis=0), occ, R, gm)


@dataclass
class PlausibilityResult:
    plausible: bool
    bone_ok: np.ndarray
    angle_ok: np.ndarray
    failed_bones: list[str]
    failed_joints: list[str]

    def __bool__(self) -> bool:
        return self.plausible


def _checks(poses, model: PlausibilityModel, topology: SkeletonTopology, reference_lengths=None):
    Y = np.asarray(poses, dtype=float).reshape(-1, topology.K, 3)
    ref = model.reference_lengths if reference_lengths is None else np.asarray(reference_lengths, float)
    ratio = np.abs(bone_lengths(Y, topology) / ref - 1.0)
    ang = joint_angles(Y, topology)
    angle_ok = np.stack([model.occupancy[k].contains(ang[:, n]) for n, k in enumerate(topology.selected_angle_joints)], -1)
    return ratio, angle_ok


def pose_plausibility(
    pose,
    model: PlausibilityModel,
    topology: SkeletonTopology,
    R: float | None = None,
    reference_lengths=None,
) -> PlausibilityResult:
    """All bones within ``R`` of their reference length and every selected angle inside its occupancy."""
    R = model.R if R is None else R
    ratio, angle_ok = _checks(pose, model, topology, reference_lengths)
    bone_ok = ratio[0] < R
    angle_ok = angle_ok[0]
    names = topology.names
    return PlausibilityResult(
        plausible=bool(bone_ok.all() and angle_ok.all()),
        bone_ok=bone_ok,
        angle_ok=angle_ok,
        failed_bones=[f"{names[c]}-{names[p]}" for (c, p), ok in zip(topology.bones, bone_ok) if not ok],
        failed_joints=[names[k] for k, ok in zip(topology.selected_angle_joints, angle_ok) if not ok],
    )


def ppp_metric(
    poses,
    model: PlausibilityModel,
    topology: SkeletonTopology,
    R_values: Sequence[float] = (0.2,),
    reference_lengths=None,
) -> dict[float, float]:
    """Fraction of plausible poses for each bone-length threshold ``R``.

    ``reference_lengths`` may be ``(J,)`` or per pose ``(T, J)`` (e.g. ground truth).
    """
    Y = np.asarray(poses, dtype=float).reshape(-1, topology.K, 3)
    if len(Y) == 0:
        raise EmptyInput("no poses to score")
    ratio, angle_ok = _checks(Y, model, topology, reference_lengths)
    worst = ratio.max(axis=1)
    angles = angle_ok.all(axis=1)
    return {float(R): float(np.mean((worst < R) & angles)) for R in R_values}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mpjpe(est, gt, root: int = 0) -> np.ndarray:
    """Per-frame root-relative mean per-joint position error (mm)."""
    E, G = np.asarray(est, float), np.asarray(gt, float)
    if E.shape != G.shape:
        raise CountMismatch(f"estimate {E.shape} vs ground truth {G.shape}")
    Er = E - E[..., root : root + 1, :]
    Gr = G - G[..., root : root + 1, :]
    return np.linalg.norm(Er - Gr, axis=-1).mean(axis=-1)


def jdr(est_2d, gt_2d, head_pair: tuple[int, int]) -> np.ndarray:
    """Per-frame fraction of 2D joints within half the ground-truth head segment. ``(..., C, K, 2)``."""
    E, G = np.asarray(est_2d, float), np.asarray(gt_2d, float)
    if E.shape != G.shape:
        raise CountMismatch(f"estimate {E.shape} vs ground truth {G.shape}")
    head = np.linalg.norm(G[..., head_pair[0], :] - G[..., head_pair[1], :], axis=-1)
    hit = np.linalg.norm(E - G, axis=-1) <= 0.5 * head[..., None]
    return hit.reshape(hit.shape[:-2] + (-1,)).mean(axis=-1)


def reprojection_loss(est_2d, poses, cameras: Sequence[CameraParams]) -> np.ndarray:
    """Per-frame mean distance between 2D estimates ``(T, C, K, 2)`` and reprojected poses."""
    X = np.asarray(est_2d, float)
    proj = np.stack([project_points(c.projection, poses) for c in cameras], axis=-3)
    if proj.shape != X.shape:
        raise CountMismatch(f"2D estimates {X.shape} vs reprojections {proj.shape}")
    return np.linalg.norm(X - proj, axis=-1).mean(axis=(-2, -1))


def bone_length_loss(est, gt, topology: SkeletonTopology) -> np.ndarray:
    """Per-frame mean absolute bone-length difference (mm)."""
    return np.abs(bone_lengths(est, topology) - bone_lengths(gt, topology)).mean(axis=-1)


@dataclass
class MetricReport:
    per_frame: dict[str, np.ndarray]
    summary: dict[str, float]


def eval_metrics(
    est,
    gt,
    est_2d,
    cameras: Sequence[CameraParams],
    topology: SkeletonTopology,
) -> MetricReport:
    """MPJPE, JDR, reprojection loss and bone-length loss.

    ``est``/``gt`` are ``(T, K, 3)``; ``est_2d`` is ``(T, C, K, 2)`` or ``None``
    (then only the 3D metrics are computed).
    """
    E = as_poses(est, topology.K).reshape(-1, topology.K, 3)
    G = as_poses(gt, topology.K).reshape(-1, topology.K, 3)
    if len(E) != len(G):
        raise CountMismatch(f"{len(E)} estimates vs {len(G)} ground-truth poses")
    per = {"mpjpe": mpjpe(E, G, topology.root), "l_bl": bone_length_loss(E, G, topology)}
    if est_2d is not None:
        X = np.asarray(est_2d, float)
        if X.shape[0] != len(E) or X.shape[1] != len(cameras):
            raise CountMismatch(f"2D estimates {X.shape} for {len(E)} frames and {len(cameras)} cameras")
        gt_2d = np.stack([project_points(c.projection, G) for c in cameras], axis=1)
        per["jdr"] = jdr(X, gt_2d, topology.head_pair)
        per["l_pj"] = reprojection_loss(X, E, cameras)
    return MetricReport(per, {k: float(np.mean(v)) for k, v in per.items()})


def total_loss(
    est,
    gt,
    est_2d,
    cameras: Sequence[CameraParams],
    topology: SkeletonTopology,
    angle_model: JointAngleModel | None = None,
    weights: Mapping[str, float] = LOSS_WEIGHTS,
) -> float:
    """``L_MSE + b_pj L_pj + b_bl L_bl + b_ja L_ja`` as one evaluation scalar (terms averaged over frames)."""
    E = np.asarray(est, float).reshape(-1, topology.K, 3)
    G = np.asarray(gt, float).reshape(-1, topology.K, 3)
    loss = float(np.mean(np.sum((E - G) ** 2, axis=-1)))
    if est_2d is not None:
        loss += weights["pj"] * float(np.mean(reprojection_loss(est_2d, E, cameras)))
    loss += weights["bl"] * float(np.mean(bone_length_loss(E, G, topology)))
    if angle_model is not None:
        loss += weights["ja"] * float(np.mean(joint_angle_penalty(E, angle_model, topology)))
    return loss
