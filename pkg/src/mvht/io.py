"""File formats: cameras, observations, poses, priors, plausibility models, tensors and reports.

All JSON is written by :func:`dumps`, which emits keys in insertion order and
floats with 17 significant digits so identical inputs give identical bytes.

Binary tensors (heatmaps, feature maps) use a 16-byte little-endian header::

    offset  size  field
    0       2     magic b"MV"
    2       2     uint16 dtype code (1 = float32)
    4       4     uint32 W
    8       4     uint32 H
    12      4     uint32 N
    16      ...   float32 data, row-major (H, W, N)

followed by a JSON sidecar ``<name>.json`` holding free-form metadata.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .anatomy import AnatomyPrior, PcaPrior, SkeletonTopology, h36m_topology, make_hop_prior
from .errors import DimensionMismatch, NonFinite, ValidationError
from .geometry import CameraParams
from .plausibility import JointAngleModel, MetricReport, OccupancyGrid, PlausibilityModel

TENSOR_MAGIC = b"MV"
TENSOR_HEADER = struct.Struct("<2sHIII")
DTYPE_CODES = {1: np.dtype("<f4")}


# ---------------------------------------------------------------------------
# Deterministic JSON
# ---------------------------------------------------------------------------


def _encode(obj: Any) -> str:
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise NonFinite("cannot serialise a non-finite float")
        s = format(x, ".17g")
        return s if any(ch in s for ch in ".e") else s + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """JSON text with fixed 17-significant-digit floats."""
    return _encode(obj) + "\n"


def write_json(path, obj: Any) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from e


def _require(d: Mapping, *keys: str, where: str = "file"):
    missing = [k for k in keys if k not in d]
    if missing:
        raise ValidationError(f"{where} is missing {', '.join(missing)}")


# ---------------------------------------------------------------------------
# Cameras, observations, poses
# ---------------------------------------------------------------------------


def cameras_to_list(cameras: Sequence[CameraParams]) -> list[dict]:
    return [
        {"id": c.id, "P": c.projection, "width": c.image_size[0], "height": c.image_size[1]} for c in cameras
    ]


def cameras_from_list(items: Sequence[Mapping]) -> list[CameraParams]:
    if not isinstance(items, list):
        raise ValidationError("camera file must hold a JSON array")
    out = []
    for c in items:
        _require(c, "P", where="camera entry")
        size = (int(c.get("width", 1000)), int(c.get("height", 1000)))
        out.append(CameraParams(np.asarray(c["P"], float), size, int(c.get("id", len(out)))))
    return out


def write_cameras(path, cameras: Sequence[CameraParams]) -> None:
    write_json(path, cameras_to_list(cameras))


def read_cameras(path) -> list[CameraParams]:
    return cameras_from_list(read_json(path))


def _frames(d: Any, what: str) -> list[Mapping]:
    if not isinstance(d, list) or not d:
        raise ValidationError(f"{what} must be a nonempty JSON array of frames")
    for f in d:
        _require(f, "frame", where=what)
    return sorted(d, key=lambda f: f["frame"])


def write_observations(path, uv, confidence, camera_ids: Sequence[int] | None = None) -> None:
    """``uv`` ``(T, C, K, 2)`` and ``confidence`` ``(T, C, K)`` as one JSON object per frame."""
    uv, conf = np.asarray(uv, float), np.asarray(confidence, float)
    T, C, K, _ = uv.shape
    ids = list(range(C)) if camera_ids is None else list(camera_ids)
    pts = np.concatenate([uv, conf[..., None]], axis=-1)
    write_json(
        path,
        [{"frame": t, "views": [{"camera": ids[c], "points": pts[t, c]} for c in range(C)]} for t in range(T)],
    )


def read_observations(path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Returns ``(uv (T, C, K, 2), confidence (T, C, K), camera ids)``."""
    frames = _frames(read_json(path), "observation file")
    ids = [v["camera"] for v in frames[0]["views"]]
    try:
        pts = np.asarray([[v["points"] for v in f["views"]] for f in frames], dtype=float)
    except (ValueError, KeyError) as e:
        raise DimensionMismatch(f"malformed observation file: {e}") from e
    if pts.ndim != 4 or pts.shape[-1] != 3:
        raise DimensionMismatch(f"observations must be [u, v, confidence] triples, got shape {pts.shape}")
    return pts[..., :2], pts[..., 2], ids


def write_poses(path, poses, reports: Sequence[Mapping] | None = None) -> None:
    Y = np.asarray(poses, float)
    frames = []
    for t, y in enumerate(Y):
        f: dict = {"frame": t, "joints": y}
        if reports is not None:
            f["report"] = dict(reports[t])
        frames.append(f)
    write_json(path, frames)


def read_poses(path) -> np.ndarray:
    frames = _frames(read_json(path), "pose file")
    try:
        Y = np.asarray([f["joints"] for f in frames], dtype=float)
    except (ValueError, KeyError) as e:
        raise DimensionMismatch(f"malformed pose file: {e}") from e
    if Y.ndim != 3 or Y.shape[-1] != 3:
        raise DimensionMismatch(f"poses must be (T, K, 3), got {Y.shape}")
    return Y


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def prior_to_dict(prior: AnatomyPrior) -> dict:
    d: dict = {"topology": prior.topology.to_dict(), "hops": []}
    if prior.reference_lengths is not None:
        d["reference_lengths"] = prior.reference_lengths
    for h in prior.hops:
        p = h.pca
        d["hops"].append(
            {
                "hop": p.hop,
                "D": p.D,
                "lambda": h.lam,
                "explained_variance": p.explained_variance,
                "residual_variance": p.residual_variance,
                "eigenvalues": p.eigenvalues,
                "mean": p.mean,
                "M": p.M,
            }
        )
    return d


def prior_from_dict(d: Any, topology: SkeletonTopology | None = None) -> AnatomyPrior:
    """Accepts the full prior object, a bare list of hop entries or a single entry."""
    if isinstance(d, list):
        d = {"hops": d}
    elif isinstance(d, Mapping) and "hop" in d:
        d = {"hops": [d]}
    _require(d, "hops", where="prior file")
    if topology is None:
        topology = SkeletonTopology.from_dict(d["topology"]) if "topology" in d else h36m_topology()
    hops = []
    for e in d["hops"]:
        _require(e, "hop", "mean", "M", "eigenvalues", where="prior entry")
        pca = PcaPrior(
            hop=int(e["hop"]),
            M=np.asarray(e["M"], float).reshape(-1, len(e["mean"])),
            mean=np.asarray(e["mean"], float),
            eigenvalues=np.asarray(e["eigenvalues"], float),
            explained_variance=float(e.get("explained_variance", float("nan"))),
            residual_variance=float(e.get("residual_variance", 0.0)),
        )
        hops.append(make_hop_prior(topology, pca, float(e.get("lambda", 0.0))))
    ref = d.get("reference_lengths")
    return AnatomyPrior(topology, tuple(hops), None if ref is None else np.asarray(ref, float))


def write_prior(path, prior: AnatomyPrior) -> None:
    write_json(path, prior_to_dict(prior))


def read_prior(path, topology: SkeletonTopology | None = None) -> AnatomyPrior:
    return prior_from_dict(read_json(path), topology)


# ---------------------------------------------------------------------------
# Plausibility models
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a flattened (row-major) bitmap, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        out[pos : pos + r] = val
        pos += r
        val = not val
    if pos != out.size:
        raise DimensionMismatch(f"run lengths cover {pos} cells, grid has {out.size}")
    return out.reshape(shape)


def plausibility_to_dict(model: PlausibilityModel, topology: SkeletonTopology) -> dict:
    grids = list(model.occupancy.values())
    d: dict = {
        "R": model.R,
        "bin_width_deg": grids[0].bin_width_deg if grids else 5.0,
        "dilation_radius": grids[0].dilation_radius if grids else 1,
        "reference_lengths": model.reference_lengths,
        "occupancy": {
            topology.names[k]: {"shape": list(g.grid.shape), "rle": rle_encode(g.grid)}
            for k, g in model.occupancy.items()
        },
    }
    if model.angle_model is not None:
        d["angle_model"] = model.angle_model.to_dict(topology)
    return d


def plausibility_from_dict(d: Mapping, topology: SkeletonTopology) -> PlausibilityModel:
    _require(d, "reference_lengths", "occupancy", where="plausibility model")
    bw, rad = float(d.get("bin_width_deg", 5.0)), int(d.get("dilation_radius", 1))
    occ = {
        topology.index(name): OccupancyGrid(rle_decode(g["rle"], tuple(g["shape"])), bw, rad)
        for name, g in d["occupancy"].items()
    }
    am = JointAngleModel.from_dict(d["angle_model"], topology) if "angle_model" in d else None
    return PlausibilityModel(np.asarray(d["reference_lengths"], float), occ, float(d.get("R", 0.2)), am)


def write_plausibility(path, model: PlausibilityModel, topology: SkeletonTopology) -> None:
    write_json(path, plausibility_to_dict(model, topology))


def read_plausibility(path, topology: SkeletonTopology) -> PlausibilityModel:
    return plausibility_from_dict(read_json(path), topology)


# ---------------------------------------------------------------------------
# Binary tensors
# ---------------------------------------------------------------------------


def write_tensor(path, array, meta: Mapping | None = None) -> None:
    """Write an ``(H, W)`` or ``(H, W, N)`` array as float32 plus a JSON sidecar."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise DimensionMismatch(f"tensor must be (H, W) or (H, W, N), got {a.shape}")
    H, W, N = a.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(TENSOR_HEADER.pack(TENSOR_MAGIC, 1, W, H, N))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    write_json(path.with_suffix(".json"), dict(meta or {}))


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Returns ``(array (H, W, N) float32, sidecar metadata)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < TENSOR_HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, code, W, H, N = TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise ValidationError(f"{path}: unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    body = raw[TENSOR_HEADER.size :]
    if len(body) != H * W * N * dt.itemsize:
        raise DimensionMismatch(f"{path}: payload holds {len(body)} bytes, header implies {H * W * N * dt.itemsize}")
    arr = np.frombuffer(body, dtype=dt).reshape(H, W, N)
    side = path.with_suffix(".json")
    return arr, (read_json(side) if side.exists() else {})


# ---------------------------------------------------------------------------
# Metric reports
# ---------------------------------------------------------------------------


def write_metric_report(csv_path, json_path, report: MetricReport, extra: Mapping | None = None) -> None:
    """CSV with one ``(frame, metric, value)`` row per entry and a JSON summary."""
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "metric", "value"])
        T = len(next(iter(report.per_frame.values()))) if report.per_frame else 0
        for t in range(T):
            for name, vals in report.per_frame.items():
                w.writerow([t, name, format(float(vals[t]), ".17g")])
    summary = dict(report.summary)
    if extra:
        summary.update(extra)
    write_json(json_path, summary)
