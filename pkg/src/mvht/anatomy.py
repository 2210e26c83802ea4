"""Skeleton topology, kinematic-chain-space maps and PCA anatomy priors.

Poses are ``(K, 3)`` arrays in millimetres. The stacked ``3K`` vector used by
the solvers is ``pose.reshape(-1)`` (``[x1, y1, z1, x2, ...]``).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateHips,
    DimensionMismatch,
    IndexOutOfRange,
    InsufficientSamples,
    UnsupportedHop,
    ValidationError,
)

SUPPORTED_HOPS = (0, 1, 2)
DEFAULT_DIMS = {0: 25, 1: 20, 2: 15}
DEFAULT_LAMBDAS = {0: 8000.0, 1: 4000.0, 2: 4000.0}
HIP_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    names: tuple[str, ...]
    parents: tuple[int, ...]
    selected_angle_joints: tuple[int, ...] = ()
    head_pair: tuple[int, int] = (0, 0)
    hip_pair: tuple[int, int] = (0, 0)
    angle_reference: Mapping[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        K = len(self.names)
        if len(self.parents) != K:
            raise ValidationError("parents and joints differ in length")
        roots = [k for k, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValidationError(f"expected exactly one root, found {len(roots)}")
        # every joint must reach the root without cycles
        for k in range(K):
            seen, j = set(), k
            while j >= 0:
                if j in seen or j >= K:
                    raise ValidationError(f"parent relation is not a tree (joint {self.names[k]})")
                seen.add(j)
                j = self.parents[j]

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def J(self) -> int:
        return self.K - 1

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    @property
    def bones(self) -> list[tuple[int, int]]:
        """``(child, parent)`` pairs in joint order."""
        return [(k, p) for k, p in enumerate(self.parents) if p >= 0]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def children(self, k: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == k]

    def is_ancestor(self, a: int, b: int) -> bool:
        j = self.parents[b]
        while j >= 0:
            if j == a:
                return True
            j = self.parents[j]
        return False

    def distances(self) -> np.ndarray:
        K = self.K
        adj = [[] for _ in range(K)]
        for c, p in self.bones:
            adj[c].append(p)
            adj[p].append(c)
        dist = np.full((K, K), -1, dtype=int)
        for s in range(K):
            dist[s, s] = 0
            queue = deque([s])
            while queue:
                a = queue.popleft()
                for b in adj[a]:
                    if dist[s, b] < 0:
                        dist[s, b] = dist[s, a] + 1
                        queue.append(b)
        return dist

    def hop_pairs(self, hop: int) -> list[tuple[int, int]]:
        """Joint pairs ``(l, r)`` whose difference ``y_l - y_r`` forms the hop feature.

        Hop 1 pairs are ``(child, parent)``. Longer hops orient each pair from
        descendant to ancestor, or from the higher to the lower index for
        pairs that are not on one chain.
        """
        if hop not in SUPPORTED_HOPS:
            raise UnsupportedHop(f"hop must be one of {SUPPORTED_HOPS}, got {hop}")
        if hop == 0:
            return [(k, k) for k in range(self.K)]
        if hop == 1:
            return self.bones
        dist = self.distances()
        pairs = []
        for a in range(self.K):
            for b in range(a + 1, self.K):
                if dist[a, b] != hop:
                    continue
                if self.is_ancestor(a, b):
                    pairs.append((b, a))
                elif self.is_ancestor(b, a):
                    pairs.append((a, b))
                else:
                    pairs.append((b, a))
        return sorted(pairs)

    def to_dict(self) -> dict:
        n = self.names
        return {
            "joints": list(n),
            "parents": list(self.parents),
            "selected_angle_joints": [n[k] for k in self.selected_angle_joints],
            "head_pair": [n[k] for k in self.head_pair],
            "hip_pair": [n[k] for k in self.hip_pair],
            "angle_reference": {n[k]: [n[a], n[b]] for k, (a, b) in self.angle_reference.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SkeletonTopology":
        names = tuple(d["joints"])
        idx = {name: i for i, name in enumerate(names)}

        def lookup(name):
            try:
                return idx[name]
            except KeyError:
                raise ValidationError(f"unknown joint name {name!r}") from None

        head = tuple(lookup(x) for x in d.get("head_pair", [names[0], names[0]]))
        hips = tuple(lookup(x) for x in d.get("hip_pair", [names[0], names[0]]))
        ref = {lookup(k): (lookup(a), lookup(b)) for k, (a, b) in d.get("angle_reference", {}).items()}
        return cls(
            names=names,
            parents=tuple(int(p) for p in d["parents"]),
            selected_angle_joints=tuple(lookup(x) for x in d.get("selected_angle_joints", [])),
            head_pair=head,
            hip_pair=hips,
            angle_reference=ref,
        )


def load_topology(path: str | Path | None = None) -> SkeletonTopology:
    """Load a topology file; ``None`` gives the bundled 17-joint Human3.6M skeleton."""
    if path is None:
        text = resources.files("mvht").joinpath("data/h36m17.json").read_text()
    else:
        text = Path(path).read_text()
    return SkeletonTopology.from_dict(json.loads(text))


def h36m_topology() -> SkeletonTopology:
    return load_topology(None)


def as_poses(poses, K: int) -> np.ndarray:
    """Coerce a pose or a batch of poses (``3K`` vectors or ``(K, 3)``) to ``(..., K, 3)``."""
    Y = np.asarray(poses, dtype=float)
    if Y.shape[-1] == 3 * K and Y.shape[-2:] != (K, 3):
        Y = Y.reshape(Y.shape[:-1] + (K, 3))
    if Y.shape[-2:] != (K, 3):
        raise DimensionMismatch(f"expected poses with {K} joints, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("pose contains non-finite coordinates")
    return Y


# ---------------------------------------------------------------------------
# KCS maps
# ---------------------------------------------------------------------------


def build_kcs(topology: SkeletonTopology, hop: int) -> np.ndarray:
    """Selection-difference matrix ``C_s`` of shape ``(3 J_s, 3K)``."""
    K = topology.K
    if hop == 0:
        topology.hop_pairs(0)
        return np.eye(3 * K)
    pairs = topology.hop_pairs(hop)
    c = np.zeros((len(pairs), K))
    for j, (l, r) in enumerate(pairs):
        c[j, l] += 1.0
        c[j, r] -= 1.0
    return np.kron(c, np.eye(3))


def backmap(C: np.ndarray) -> np.ndarray:
    """Map from hop features back to keypoints (Moore-Penrose pseudoinverse of ``C``)."""
    return np.linalg.pinv(C)


def orientation_normalize(pose, topology: SkeletonTopology) -> tuple[np.ndarray, np.ndarray]:
    """Root-relative pose yawed about +z so the left->right hip line points along +x.

    Returns ``(normalized, R)`` with ``normalized = (pose - root) @ R.T``.
    """
    Y = as_poses(pose, topology.K)
    Y_re = Y - Y[..., topology.root : topology.root + 1, :]
    R = yaw_rotation(Y, topology)
    return np.einsum("...ij,...kj->...ki", R, Y_re), R


def yaw_rotation(pose, topology: SkeletonTopology) -> np.ndarray:
    """Rotation(s) about +z that bring the hip line onto +x."""
    Y = as_poses(pose, topology.K)
    lh, rh = topology.hip_pair
    h = Y[..., rh, :2] - Y[..., lh, :2]
    n = np.linalg.norm(h, axis=-1)
    if np.any(n < HIP_EPS):
        raise DegenerateHips("horizontal hip component is degenerate")
    c, s = h[..., 0] / n, h[..., 1] / n
    R = np.zeros(h.shape[:-1] + (3, 3))
    R[..., 0, 0], R[..., 0, 1] = c, s
    R[..., 1, 0], R[..., 1, 1] = -s, c
    R[..., 2, 2] = 1.0
    return R


# ---------------------------------------------------------------------------
# PCA priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaPrior:
    hop: int
    M: np.ndarray  # (D, 3 J_s), orthonormal rows
    mean: np.ndarray  # (3 J_s,)
    eigenvalues: np.ndarray  # (D,), nonincreasing
    explained_variance: float
    residual_variance: float = 0.0

    @property
    def D(self) -> int:
        return self.M.shape[0]

    def encode(self, V) -> np.ndarray:
        return (np.asarray(V) - self.mean) @ self.M.T

    def decode(self, z) -> np.ndarray:
        return np.asarray(z) @ self.M + self.mean


def hop_features(poses, topology: SkeletonTopology, hop: int, normalize: bool = True) -> np.ndarray:
    """Stacked hop features ``C_s Y_re`` for a batch of poses, shape ``(n, 3 J_s)``."""
    Y = as_poses(poses, topology.K).reshape(-1, topology.K, 3)
    if normalize:
        Y, _ = orientation_normalize(Y, topology)
    else:
        Y = Y - Y[:, topology.root : topology.root + 1]
    C = build_kcs(topology, hop)
    return Y.reshape(len(Y), -1) @ C.T


def _deterministic_signs(vecs: np.ndarray) -> np.ndarray:
    # flip each row so its largest-magnitude entry is positive
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def fit_pca_features(V: np.ndarray, hop: int, D: int) -> PcaPrior:
    V = np.asarray(V, dtype=float)
    n, F = V.shape
    if not 1 <= D <= F:
        raise ValidationError(f"D must lie in 1..{F}, got {D}")
    if n < D:
        raise InsufficientSamples(f"need at least D={D} samples, got {n}")
    mean = V.mean(axis=0)
    X = V - mean
    cov = X.T @ X / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    M = _deterministic_signs(evecs[:, :D].T)
    total = evals.sum()
    explained = float(evals[:D].sum() / total) if total > 0 else 1.0
    return PcaPrior(
        hop=hop,
        M=M,
        mean=mean,
        eigenvalues=evals[:D].copy(),
        explained_variance=explained,
        residual_variance=float(evals[D:].sum()),
    )


def fit_pca(poses, topology: SkeletonTopology, hop: int, D: int, normalize: bool = True) -> PcaPrior:
    """Fit a PCA prior on root-relative, orientation-normalised hop features."""
    V = hop_features(poses, topology, hop, normalize=normalize)
    return fit_pca_features(V, hop, D)


@dataclass(frozen=True, eq=False)
class HopPrior:
    """One reconstruction term: KCS maps, PCA prior, weight and ``H_s = G_s N_s C_s``."""

    C: np.ndarray
    G: np.ndarray
    pca: PcaPrior
    lam: float
    H: np.ndarray = field(init=False, repr=False)
    mean_pose: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        if self.C.shape[0] != self.pca.M.shape[1]:
            raise DimensionMismatch(
                f"hop-{self.pca.hop} prior has feature size {self.pca.M.shape[1]}, KCS map gives {self.C.shape[0]}"
            )
        N = np.eye(self.pca.M.shape[1]) - self.pca.M.T @ self.pca.M
        object.__setattr__(self, "H", self.G @ N @ self.C)
        # G V_mean expressed in keypoint space (root-relative)
        object.__setattr__(self, "mean_pose", self.G @ self.pca.mean)

    @property
    def hop(self) -> int:
        return self.pca.hop


def make_hop_prior(topology: SkeletonTopology, pca: PcaPrior, lam: float) -> HopPrior:
    C = build_kcs(topology, pca.hop)
    return HopPrior(C=C, G=backmap(C), pca=pca, lam=float(lam))


@dataclass(frozen=True, eq=False)
class AnatomyPrior:
    topology: SkeletonTopology
    hops: tuple[HopPrior, ...]
    reference_lengths: np.ndarray | None = None  # median bone lengths of the fitting corpus
    quadratic: np.ndarray = field(init=False, repr=False)
    linear: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = 3 * self.topology.K
        Q = np.zeros((n, n))
        q = np.zeros(n)
        for h in self.hops:
            if h.H.shape != (n, n):
                raise DimensionMismatch(f"hop-{h.hop} operator is {h.H.shape}, expected {(n, n)}")
            HtH = h.H.T @ h.H
            Q += h.lam * HtH
            q += h.lam * HtH @ h.mean_pose
        object.__setattr__(self, "quadratic", Q)
        object.__setattr__(self, "linear", q)

    @property
    def lambdas(self) -> dict[int, float]:
        return {h.hop: h.lam for h in self.hops}

    @property
    def active(self) -> bool:
        return any(h.lam > 0 for h in self.hops)

    def with_lambdas(self, lambdas: Mapping[int, float]) -> "AnatomyPrior":
        hops = tuple(
            HopPrior(C=h.C, G=h.G, pca=h.pca, lam=float(lambdas.get(h.hop, h.lam))) for h in self.hops
        )
        return AnatomyPrior(self.topology, hops, self.reference_lengths)


def fit_prior(
    poses,
    topology: SkeletonTopology,
    dims: Mapping[int, int] | None = None,
    lambdas: Mapping[int, float] | None = None,
    normalize: bool = True,
) -> AnatomyPrior:
    """Fit one PCA prior per hop (defaults: D = 25/20/15, lambda = 8000/4000/4000)."""
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    lambdas = dict(DEFAULT_LAMBDAS if lambdas is None else lambdas)
    hops = []
    for s in sorted(dims):
        pca = fit_pca(poses, topology, s, dims[s], normalize=normalize)
        hops.append(make_hop_prior(topology, pca, lambdas.get(s, 0.0)))
    ref = np.median(bone_lengths(np.asarray(poses, dtype=float), topology).reshape(-1, topology.J), axis=0)
    return AnatomyPrior(topology, tuple(hops), ref)


def reconstruct_pose(entry: HopPrior, Y_re) -> tuple[np.ndarray, np.ndarray]:
    """PCA round trip in hop-feature space.

    Returns ``(V', G V')`` with ``V' = M^T M (V - V_mean) + V_mean`` and ``V = C Y_re``.
    """
    y = np.asarray(Y_re, dtype=float).reshape(-1)
    if y.shape[0] != entry.C.shape[1]:
        raise DimensionMismatch(f"pose has {y.shape[0]} coordinates, prior expects {entry.C.shape[1]}")
    V = entry.C @ y
    M = entry.pca.M
    V_rec = M.T @ (M @ (V - entry.pca.mean)) + entry.pca.mean
    return V_rec, entry.G @ V_rec


def reconstruction_operator(entry: HopPrior) -> np.ndarray:
    return entry.H


def latent_traverse(entry: HopPrior, component_index: int, steps: int, step_size: float) -> list[np.ndarray]:
    """Decode poses along one principal direction.

    Returns ``2 * steps + 1`` root-relative ``(K, 3)`` poses for offsets
    ``i * step_size * sqrt(eigenvalue)``, ``i = -steps .. steps``.
    """
    pca = entry.pca
    if not 0 <= component_index < pca.D:
        raise IndexOutOfRange(f"component {component_index} outside 0..{pca.D - 1}")
    sd = np.sqrt(pca.eigenvalues[component_index])
    out = []
    for i in range(-steps, steps + 1):
        V = pca.mean + i * step_size * sd * pca.M[component_index]
        out.append((entry.G @ V).reshape(-1, 3))
    return out


def bone_lengths(poses, topology: SkeletonTopology) -> np.ndarray:
    Y = as_poses(poses, topology.K)
    ch = [c for c, _ in topology.bones]
    pa = [p for _, p in topology.bones]
    return np.linalg.norm(Y[..., ch, :] - Y[..., pa, :], axis=-1)


def rigidify(poses, topology: SkeletonTopology, lengths) -> np.ndarray:
    """Rescale every bone to ``lengths`` (one per bone) keeping its direction, from the root outwards."""
    Y = as_poses(poses, topology.K)
    out = Y.copy()
    lengths = np.asarray(lengths, dtype=float)
    order = np.argsort(topology.distances()[topology.root], kind="stable")
    bone_of = {c: j for j, (c, _) in enumerate(topology.bones)}
    for c in order:
        p = topology.parents[c]
        if p < 0:
            continue
        d = Y[..., c, :] - Y[..., p, :]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(n <= HIP_EPS):
            raise ValidationError("cannot rigidify a zero-length bone")
        out[..., c, :] = out[..., p, :] + lengths[bone_of[c]] * d / n
    return out


def stack_root(root, K: int) -> np.ndarray:
    """Repeat a root position for every joint (``3K`` vector)."""
    return np.tile(np.asarray(root, dtype=float).reshape(3), K)


def block_rotate(R: np.ndarray, K: int) -> np.ndarray:
    """Block-diagonal ``3K x 3K`` matrix with ``R`` on every diagonal block."""
    return np.kron(np.eye(K), R)


def check_lambda_map(lambdas: Mapping[int, float]) -> dict[int, float]:
    out = {}
    for k, v in lambdas.items():
        if int(k) not in SUPPORTED_HOPS:
            raise UnsupportedHop(f"unsupported hop {k}")
        if v < 0:
            raise ValidationError("lambda must be nonnegative")
        out[int(k)] = float(v)
    return out

