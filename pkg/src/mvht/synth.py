"""Synthetic ground truth: camera rigs, poses, corrupted detections and MVF inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .anatomy import AnatomyPrior, SkeletonTopology, h36m_topology, rigidify
from .errors import ValidationError
from .geometry import CameraParams, project_points
from .mvf import image_to_grid
from .rng import stream

# Human3.6M-like segment lengths in mm
DEFAULT_SEGMENTS = {
    "hip": 132.0,
    "thigh": 442.0,
    "shank": 454.0,
    "spine": 233.0,
    "chest": 257.0,
    "nose": 120.0,
    "head": 115.0,
    "shoulder": 151.0,
    "upper_arm": 278.0,
    "forearm": 251.0,
}

# joint-angle sampling ranges in degrees
DEFAULT_RANGES = {
    "pelvis_pitch": (-10, 20),
    "pelvis_roll": (-8, 8),
    "spine_bend": (-10, 35),
    "spine_lean": (-12, 12),
    "spine_twist": (-25, 25),
    "chest_bend": (-5, 20),
    "chest_lean": (-8, 8),
    "chest_twist": (-15, 15),
    "head_pitch": (-25, 35),
    "head_yaw": (-45, 45),
    "hip_flex": (-25, 100),
    "hip_abd": (-8, 35),
    "hip_twist": (-20, 20),
    "knee": (0, 130),
    "shoulder_flex": (-40, 150),
    "shoulder_abd": (0, 100),
    "shoulder_twist": (-60, 60),
    "elbow": (0, 145),
}


def _rot(axis: str, deg) -> np.ndarray:
    return Rotation.from_euler(axis, deg, degrees=True).as_matrix()


def _sample(rng, ranges, name, n):
    lo, hi = ranges[name]
    return rng.uniform(lo, hi, n)


def sample_kinematic_poses(
    n: int,
    rng: np.random.Generator,
    topology: SkeletonTopology | None = None,
    segments: dict | None = None,
    ranges: dict | None = None,
) -> np.ndarray:
    """Root-relative poses from forward kinematics with fixed segment lengths.

    Canonical frame: +x towards the right hip, +y forward, +z up. The returned
    array has shape ``(n, K, 3)`` in the joint order of ``topology``.
    """
    topo = topology or h36m_topology()
    seg = {**DEFAULT_SEGMENTS, **(segments or {})}
    rg = {**DEFAULT_RANGES, **(ranges or {})}
    j = {name: topo.index(name) for name in topo.names}
    down, up = np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0])
    out = np.zeros((n, topo.K, 3))

    R0 = _rot("x", _sample(rng, rg, "pelvis_pitch", n)) @ _rot("y", _sample(rng, rg, "pelvis_roll", n))

    for side, sign in (("r", 1.0), ("l", -1.0)):
        hip = R0 @ np.array([sign * seg["hip"], 0.0, 0.0])
        Rt = (
            R0
            @ _rot("z", sign * _sample(rng, rg, "hip_twist", n))
            @ _rot("x", _sample(rng, rg, "hip_flex", n))
            @ _rot("y", -sign * _sample(rng, rg, "hip_abd", n))
        )
        knee = hip + Rt @ (down * seg["thigh"])
        Rs = Rt @ _rot("x", -_sample(rng, rg, "knee", n))
        ankle = knee + Rs @ (down * seg["shank"])
        out[:, j[side + "hip"]] = hip
        out[:, j[side + "knee"]] = knee
        out[:, j[side + "ankle"]] = ankle

    Rsp = (
        R0
        @ _rot("z", _sample(rng, rg, "spine_twist", n))
        @ _rot("x", -_sample(rng, rg, "spine_bend", n))
        @ _rot("y", _sample(rng, rg, "spine_lean", n))
    )
    belly = Rsp @ (up * seg["spine"])
    Rch = (
        Rsp
        @ _rot("z", _sample(rng, rg, "chest_twist", n))
        @ _rot("x", -_sample(rng, rg, "chest_bend", n))
        @ _rot("y", _sample(rng, rg, "chest_lean", n))
    )
    neck = belly + Rch @ (up * seg["chest"])
    Rhd = Rch @ _rot("z", _sample(rng, rg, "head_yaw", n)) @ _rot("x", -_sample(rng, rg, "head_pitch", n))
    nose_dir = np.array([0.0, 0.35, 1.0]) / np.linalg.norm([0.0, 0.35, 1.0])
    nose = neck + Rhd @ (nose_dir * seg["nose"])
    head = nose + Rhd @ (np.array([0.0, -0.2, 1.0]) / np.linalg.norm([0.0, -0.2, 1.0]) * seg["head"])
    out[:, j["belly"]] = belly
    out[:, j["neck"]] = neck
    out[:, j["nose"]] = nose
    out[:, j["head"]] = head

    for side, sign in (("r", 1.0), ("l", -1.0)):
        sh_dir = np.array([sign, 0.0, -0.08]) / np.linalg.norm([1.0, 0.0, -0.08])
        shoulder = neck + Rch @ (sh_dir * seg["shoulder"])
        Ru = (
            Rch
            @ _rot("x", _sample(rng, rg, "shoulder_flex", n))
            @ _rot("y", -sign * _sample(rng, rg, "shoulder_abd", n))
            @ _rot("z", sign * _sample(rng, rg, "shoulder_twist", n))
        )
        elbow = shoulder + Ru @ (down * seg["upper_arm"])
        Rf = Ru @ _rot("x", _sample(rng, rg, "elbow", n))
        wrist = elbow + Rf @ (down * seg["forearm"])
        out[:, j[side + "shoulder"]] = shoulder
        out[:, j[side + "elbow"]] = elbow
        out[:, j[side + "wrist"]] = wrist
    return out


def place_poses(poses_re: np.ndarray, rng: np.random.Generator, root_range_mm: float = 500.0, yaw: bool = True):
    """Apply a random yaw and a random horizontal root position to root-relative poses."""
    n = len(poses_re)
    ang = rng.uniform(-180.0, 180.0, n) if yaw else np.zeros(n)
    R = _rot("z", ang)
    root = np.zeros((n, 3))
    root[:, :2] = rng.uniform(-root_range_mm, root_range_mm, (n, 2))
    root[:, 2] = rng.normal(0.0, 30.0, n)
    return np.einsum("nij,nkj->nki", R, poses_re) + root[:, None, :]


def gen_poses(
    prior: AnatomyPrior | None,
    n_frames: int,
    seed: int,
    topology: SkeletonTopology | None = None,
    latent_scale: float = 1.0,
    root_range_mm: float = 500.0,
    yaw: bool = True,
    rigid: bool = True,
) -> np.ndarray:
    """World-frame poses ``(n_frames, K, 3)``.

    With a prior, latent codes are drawn from ``N(0, latent_scale^2 * eigenvalue)``
    and decoded through the hop-0 entry; with ``rigid`` the decoded bones are
    then rescaled to the prior's reference lengths (a linear decode alone
    shortens rotating limbs). Without a prior, poses come from
    :func:`sample_kinematic_poses`. A random root and yaw are attached in both
    cases.
    """
    rng = stream(seed, "poses")
    if prior is None:
        Y_re = sample_kinematic_poses(n_frames, rng, topology)
    else:
        hop0 = [h for h in prior.hops if h.hop == 0]
        if not hop0:
            raise ValidationError("pose sampling needs a hop-0 prior")
        pca = hop0[0].pca
        z = rng.standard_normal((n_frames, pca.D)) * np.sqrt(pca.eigenvalues) * latent_scale
        V = pca.decode(z)
        Y_re = (V @ hop0[0].G.T).reshape(n_frames, -1, 3)
        Y_re = Y_re - Y_re[:, prior.topology.root : prior.topology.root + 1]
        if rigid and prior.reference_lengths is not None:
            Y_re = rigidify(Y_re, prior.topology, prior.reference_lengths)
    return place_poses(Y_re, stream(seed, "placement"), root_range_mm, yaw)


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def gen_rig(
    n_cameras: int = 4,
    radius_mm: float = 4000.0,
    height_range_mm: tuple[float, float] = (-400.0, 1200.0),
    image_size: tuple[int, int] = (1000, 1000),
    seed: int = 0,
    focal_range: tuple[float, float] = (0.9, 1.1),
    target=(0.0, 0.0, 0.0),
) -> list[CameraParams]:
    """Cameras on a horizontal circle around the vertical axis, all looking at ``target``.

    Heights are spread evenly over ``height_range_mm`` (shuffled), which varies
    the pitch. Focal lengths are ``image width * U(focal_range)``.
    """
    if n_cameras < 1:
        raise ValidationError("need at least one camera")
    rng = stream(seed, "rig")
    W, H = image_size
    base = rng.uniform(0.0, 2 * np.pi)
    angles = base + 2 * np.pi * np.arange(n_cameras) / n_cameras + rng.uniform(-0.15, 0.15, n_cameras)
    heights = np.linspace(*height_range_mm, n_cameras) if n_cameras > 1 else np.array([np.mean(height_range_mm)])
    heights = rng.permutation(heights)
    cams = []
    for i in range(n_cameras):
        c = np.array([radius_mm * np.cos(angles[i]), radius_mm * np.sin(angles[i]), heights[i]])
        R = _look_at(c, np.asarray(target, dtype=float))
        f = W * rng.uniform(*focal_range)
        K = np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])
        cams.append(CameraParams.from_krt(K, R, -R @ c, image_size=image_size, id=i))
    return cams


def rig_centers(cameras: Sequence[CameraParams]) -> np.ndarray:
    return np.stack([c.center for c in cameras])


def project_all(cameras: Sequence[CameraParams], poses: np.ndarray) -> np.ndarray:
    """``(T, K, 3)`` poses to ``(T, C, K, 2)`` pixels."""
    return np.stack([project_points(c.projection, poses) for c in cameras], axis=1)


@dataclass
class CorruptionSpec:
    sigma: float = 0.0
    outlier_rate: float = 0.0
    outlier_magnitude: float = 20.0
    occlusion_rate: float = 0.0
    occlusion_magnitude: float = 20.0
    occluded_confidence: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("sigma must be nonnegative")
        for name in ("outlier_rate", "occlusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")


def _random_offsets(rng, shape, magnitude):
    ang = rng.uniform(0.0, 2 * np.pi, shape)
    r = magnitude * rng.uniform(0.5, 1.5, shape)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)


def corrupt_observations(true_uv: np.ndarray, spec: CorruptionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noisy detections and confidences from exact projections.

    Every point gets Gaussian noise; an ``outlier_rate`` fraction is displaced
    by roughly ``outlier_magnitude`` pixels keeping full confidence; an
    ``occlusion_rate`` fraction gets ``occluded_confidence`` and an extra
    displacement of roughly ``occlusion_magnitude`` pixels.
    """
    uv = np.array(true_uv, dtype=float)
    shape = uv.shape[:-1]
    rng = stream(spec.seed, "corruption")
    noise = rng.standard_normal(uv.shape) * spec.sigma
    out_mask = rng.random(shape) < spec.outlier_rate
    out_off = _random_offsets(rng, shape, spec.outlier_magnitude)
    occ_mask = rng.random(shape) < spec.occlusion_rate
    occ_off = _random_offsets(rng, shape, spec.occlusion_magnitude)
    uv = uv + noise + out_mask[..., None] * out_off + occ_mask[..., None] * occ_off
    conf = np.where(occ_mask, spec.occluded_confidence, 1.0)
    return uv, conf


@dataclass(eq=False)
class SyntheticScene:
    cameras: list[CameraParams]
    poses: np.ndarray  # (T, K, 3)
    true_uv: np.ndarray = field(init=False)  # (T, C, K, 2)
    descriptors: np.ndarray | None = None  # (T, K, N)
    seed: int = 0
    topology: SkeletonTopology = field(default_factory=h36m_topology)

    def __post_init__(self):
        self.true_uv = project_all(self.cameras, self.poses)


def make_scene(
    n_frames: int,
    seed: int,
    n_cameras: int = 4,
    prior: AnatomyPrior | None = None,
    image_size: tuple[int, int] = (1000, 1000),
    n_channels: int = 0,
    radius_mm: float = 4000.0,
) -> SyntheticScene:
    cams = gen_rig(n_cameras, radius_mm=radius_mm, image_size=image_size, seed=seed)
    topo = prior.topology if prior is not None else h36m_topology()
    poses = gen_poses(prior, n_frames, seed, topo)
    desc = None
    if n_channels:
        rng = stream(seed, "descriptors")
        desc = rng.standard_normal((n_frames, topo.K, n_channels))
        desc /= np.linalg.norm(desc, axis=-1, keepdims=True)
    return SyntheticScene(cams, poses, descriptors=desc, seed=seed, topology=topo)


# ---------------------------------------------------------------------------
# MVF inputs
# ---------------------------------------------------------------------------


def render_heatmap(center_grid, shape: tuple[int, int], sigma: float = 1.5, amplitude: float = 30.0) -> np.ndarray:
    """Gaussian logit map peaking at ``center_grid`` (cell-index ``(x, y)``); shape ``(H, W)``."""
    H, W = shape
    x, y = np.meshgrid(np.arange(W), np.arange(H))
    d2 = (x - center_grid[0]) ** 2 + (y - center_grid[1]) ** 2
    return amplitude * np.exp(-d2 / (2 * sigma**2))


def render_feature_map(
    points_grid: np.ndarray,
    descriptors: np.ndarray,
    shape: tuple[int, int],
    footprint: float = 1.5,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    scale: float = 1.0,
) -> np.ndarray:
    """Splat one descriptor per scene point with a Gaussian footprint; shape ``(H, W, N)``.

    Where footprints overlap, the nearest point wins (``max`` of the weights).
    Descriptors are multiplied by ``scale`` before splatting.
    """
    H, W = shape
    N = descriptors.shape[-1]
    x, y = np.meshgrid(np.arange(W), np.arange(H))
    d2 = (x[None] - points_grid[:, 0, None, None]) ** 2 + (y[None] - points_grid[:, 1, None, None]) ** 2
    wts = np.exp(-d2 / (2 * footprint**2))  # (P, H, W)
    owner = np.argmax(wts, axis=0)
    w = np.take_along_axis(wts, owner[None], axis=0)[0]
    F = scale * descriptors[owner] * w[..., None]
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        F = F + rng.standard_normal((H, W, N)) * noise
    return F


def grid_shape(image_size: tuple[int, int], stride: float) -> tuple[int, int]:
    """``(H, W)`` of a heatmap grid covering an image of ``(width, height)`` pixels."""
    return int(np.ceil(image_size[1] / stride)), int(np.ceil(image_size[0] / stride))


def mvf_inputs(
    scene: SyntheticScene,
    frame: int,
    uv,
    confidence,
    stride: float = 8.0,
    sigma: float = 1.5,
    amplitude: float = 30.0,
    footprint: float = 1.5,
    noise: float = 0.05,
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Detector-like heatmaps and view-invariant feature maps for one frame.

    The heatmap of each ``(view, joint)`` peaks at the observed keypoint with
    height ``amplitude * confidence``. Feature maps splat the scene's
    descriptors at the true projections, scaled so a perfect ``dot`` match
    scores ``amplitude``, plus Gaussian channel noise.
    Returns ``(heatmaps (C, K, H, W), features (C, H, W, N))``.
    """
    if scene.descriptors is None:
        raise ValidationError("scene has no descriptors; build it with n_channels > 0")
    uv = np.asarray(uv, dtype=float)
    conf = np.asarray(confidence, dtype=float)
    C, K = uv.shape[:2]
    desc = scene.descriptors[frame]
    N = desc.shape[-1]
    rng = stream(scene.seed if seed is None else seed, "features", frame)
    heat, feat = [], []
    for c, cam in enumerate(scene.cameras):
        shape = grid_shape(cam.image_size, stride)
        g = image_to_grid(uv[c], stride)
        heat.append([render_heatmap(g[k], shape, sigma, amplitude * conf[c, k]) for k in range(K)])
        pts = image_to_grid(scene.true_uv[frame, c], stride)
        feat.append(render_feature_map(pts, desc, shape, footprint, noise, rng, scale=np.sqrt(N * amplitude)))
    return np.asarray(heat), np.asarray(feat)
