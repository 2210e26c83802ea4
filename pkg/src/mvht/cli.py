"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .anatomy import (
    DEFAULT_DIMS,
    DEFAULT_LAMBDAS,
    SUPPORTED_HOPS,
    SkeletonTopology,
    bone_lengths,
    check_lambda_map,
    fit_prior,
    load_topology,
)
from .errors import NumericalError, UnsupportedHop, ValidationError
from .mvf import FusionConfig, refine_keypoints
from .pipeline import triangulate
from .plausibility import eval_metrics, fit_plausibility_model, mpjpe, ppp_metric
from .synth import CorruptionSpec, corrupt_observations, make_scene, mvf_inputs

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def parse_lambdas(text: str, hops: Sequence[int]) -> dict[int, float]:
    """``"8000,4000,4000"`` (one per hop, in order) or ``"0=8000,2=0"`` (per-hop overrides)."""
    items = [x.strip() for x in text.split(",") if x.strip()]
    if items and all("=" in x for x in items):
        out = {int(k): float(v) for k, v in (x.split("=", 1) for x in items)}
    else:
        vals = [float(x) for x in items]
        if len(vals) != len(hops):
            raise ValidationError(f"{len(vals)} lambda values for hops {list(hops)}")
        out = dict(zip(hops, vals))
    return check_lambda_map(out)


def _topology(args) -> SkeletonTopology:
    return load_topology(args.topology)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    topo = _topology(args)
    prior = io.read_prior(args.prior, topo) if args.prior else None
    channels = args.channels or (32 if args.mvf_frames else 0)
    scene = make_scene(args.frames, args.seed, args.cameras, prior=prior, n_channels=channels, radius_mm=args.radius)
    if prior is None and topo.K != scene.topology.K:
        raise ValidationError("synthetic poses without a prior use the bundled 17-joint skeleton")
    spec = CorruptionSpec(
        sigma=args.sigma,
        outlier_rate=args.outlier_rate,
        outlier_magnitude=args.outlier_mag,
        occlusion_rate=args.occlusion_rate,
        seed=args.seed,
    )
    uv, conf = corrupt_observations(scene.true_uv, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [c.id for c in scene.cameras]
    io.write_cameras(out / "cameras.json", scene.cameras)
    io.write_poses(out / "gt_poses.json", scene.poses)
    io.write_observations(out / "truth_2d.json", scene.true_uv, np.ones(conf.shape), ids)
    io.write_observations(out / "observations.json", uv, conf, ids)
    for t in range(min(args.mvf_frames, args.frames)):
        heat, feat = mvf_inputs(scene, t, uv[t], conf[t], stride=args.stride)
        d = out / "mvf" / f"frame_{t:05d}"
        d.mkdir(parents=True, exist_ok=True)
        for c in range(len(scene.cameras)):
            meta = {"frame": t, "view": ids[c], "stride": args.stride}
            io.write_tensor(d / f"heatmaps_v{c}.bin", np.moveaxis(heat[c], 0, -1), {**meta, "kind": "heatmaps"})
            io.write_tensor(d / f"features_v{c}.bin", feat[c], {**meta, "kind": "features"})
    print(f"wrote {args.frames} frames x {len(scene.cameras)} views to {out}")
    return EXIT_OK


def cmd_fit_prior(args) -> int:
    topo = _topology(args)
    poses = io.read_poses(args.poses)
    hops = _ints(args.hop)
    bad = [h for h in hops if h not in SUPPORTED_HOPS]
    if bad:
        raise UnsupportedHop(f"unsupported hop(s) {bad}; choose from {list(SUPPORTED_HOPS)}")
    dims = _ints(args.dim) if args.dim else [DEFAULT_DIMS[h] for h in hops]
    if len(dims) != len(hops):
        raise ValidationError(f"{len(dims)} dims for hops {hops}")
    lambdas = parse_lambdas(args.lambda_, hops) if args.lambda_ else {h: DEFAULT_LAMBDAS[h] for h in hops}
    prior = fit_prior(poses, topo, dict(zip(hops, dims)), lambdas, normalize=not args.no_normalize)
    io.write_prior(args.out, prior)
    for h in prior.hops:
        print(f"hop {h.hop}: D={h.pca.D} explained={h.pca.explained_variance:.6f} lambda={h.lam:g}")
    return EXIT_OK


def cmd_fit_angle_model(args) -> int:
    topo = _topology(args)
    poses = io.read_poses(args.poses)
    model = fit_plausibility_model(
        poses,
        topo,
        bin_width_deg=args.bin_deg,
        dilation_radius=args.dilate,
        R=args.R,
        n_components=args.components,
        seed=args.seed,
    )
    io.write_plausibility(args.out, model, topo)
    print(f"angle model over {len(poses)} poses written to {args.out}")
    return EXIT_OK


def cmd_triangulate(args) -> int:
    topo = _topology(args)
    cams = io.read_cameras(args.cameras)
    uv, conf, _ = io.read_observations(args.obs)
    prior = None
    if args.mode == "ht":
        if not args.prior:
            raise ValidationError("--mode ht needs --prior")
        prior = io.read_prior(args.prior, topo)
        if args.lambda_:
            prior = prior.with_lambdas(parse_lambdas(args.lambda_, [h.hop for h in prior.hops]))
    poses = triangulate(cams, uv, conf, args.mode, prior, align_yaw=not args.no_yaw, threads=args.threads)
    io.write_poses(args.out, poses)
    print(f"triangulated {len(poses)} frames ({args.mode})")
    return EXIT_OK


def cmd_refine(args) -> int:
    cams = io.read_cameras(args.cameras)
    weights = None
    if args.fcl_weights:
        weights = np.asarray(io.read_json(args.fcl_weights), float)
    config = FusionConfig(
        strategy=args.strategy,
        fcl_weights=weights,
        gamma=args.gamma,
        fusion=args.fusion,
        temperature=args.temperature,
        initial_weight=args.initial_weight,
    )
    frames = sorted(p for p in Path(args.mvf).iterdir() if p.is_dir())
    if not frames:
        raise ValidationError(f"no frame directories under {args.mvf}")
    uv, conf = [], []
    stride = None
    for d in frames:
        heat, feat = [], []
        for c in range(len(cams)):
            h, meta = io.read_tensor(d / f"heatmaps_v{c}.bin")
            f, _ = io.read_tensor(d / f"features_v{c}.bin")
            heat.append(np.moveaxis(h, -1, 0))
            feat.append(f)
            stride = float(meta.get("stride", args.stride))
        r = refine_keypoints(cams, np.asarray(heat, float), np.asarray(feat, float), config, stride)
        uv.append(r.uv)
        conf.append(r.confidence)
    io.write_observations(args.out, np.asarray(uv), np.asarray(conf), [c.id for c in cams])
    print(f"refined {len(frames)} frames ({config.strategy}, {config.fusion})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    topo = _topology(args)
    est = io.read_poses(args.poses)
    gt = io.read_poses(args.gt)
    cams = io.read_cameras(args.cameras) if args.cameras else []
    est_2d = None
    if args.obs:
        if not cams:
            raise ValidationError("--obs needs --cameras")
        est_2d = io.read_observations(args.obs)[0]
    report = eval_metrics(est, gt, est_2d, cams, topo)
    extra = {}
    if args.model:
        model = io.read_plausibility(args.model, topo)
        for R, v in ppp_metric(est, model, topo, _floats(args.R), bone_lengths(gt, topo)).items():
            extra[f"ppp@{R:g}"] = v
    io.write_metric_report(args.csv, args.json, report, extra)
    print(json.dumps({**report.summary, **extra}, indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = io.read_poses(args.a), io.read_poses(args.b)
    topo = _topology(args)
    diff = np.linalg.norm(a - b, axis=-1)
    out = {
        "frames": len(a),
        "mean_joint_distance": float(diff.mean()),
        "max_joint_distance": float(diff.max()),
        "root_relative_mpjpe": float(mpjpe(a, b, topo.root).mean()),
    }
    if args.gt:
        gt = io.read_poses(args.gt)
        ea, eb = mpjpe(a, gt, topo.root), mpjpe(b, gt, topo.root)
        out.update(mpjpe_a=float(ea.mean()), mpjpe_b=float(eb.mean()), mpjpe_delta=float((eb - ea).mean()))
    text = io.dumps(out)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvht", description="Multi-view holistic triangulation toolkit")
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--threads", type=int, default=1, help="frame-parallel worker threads")
    p.add_argument("--topology", default=None, help="skeleton topology JSON (default: bundled 17-joint)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene and corrupted observations")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--cameras", type=int, default=4)
    s.add_argument("--radius", type=float, default=4000.0)
    s.add_argument("--prior", help="sample poses from this prior instead of the kinematic generator")
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--outlier-rate", type=float, default=0.1)
    s.add_argument("--outlier-mag", type=float, default=20.0)
    s.add_argument("--occlusion-rate", type=float, default=0.15)
    s.add_argument("--channels", type=int, default=0, help="descriptor channels for feature maps")
    s.add_argument("--mvf-frames", type=int, default=0, help="emit heatmaps/features for the first N frames")
    s.add_argument("--stride", type=float, default=8.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-prior", help="fit per-hop PCA priors")
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hop", default="0,1,2", help="comma-separated hops")
    s.add_argument("--dim", default="", help="comma-separated PCA dimensions, one per hop")
    s.add_argument("--lambda", dest="lambda_", default="", help="weights, one per hop or hop=value")
    s.add_argument("--no-normalize", action="store_true", help="skip yaw normalisation before PCA")
    s.set_defaults(func=cmd_fit_prior)

    s = sub.add_parser("fit-angle-model", help="fit joint-angle GMMs and occupancy grids")
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=int, default=4)
    s.add_argument("--bin-deg", type=float, default=5.0)
    s.add_argument("--dilate", type=int, default=1)
    s.add_argument("--R", type=float, default=0.2)
    s.set_defaults(func=cmd_fit_angle_model)

    s = sub.add_parser("triangulate", help="observations -> 3D poses")
    s.add_argument("--cameras", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("lt", "at", "ht"), default="ht")
    s.add_argument("--prior")
    s.add_argument("--lambda", dest="lambda_", default="", help="override weights, one per hop or hop=value")
    s.add_argument("--no-yaw", action="store_true", help="do not yaw-align the prior")
    s.set_defaults(func=cmd_triangulate)

    s = sub.add_parser("refine", help="multi-view fusion of heatmaps -> refined observations")
    s.add_argument("--cameras", required=True)
    s.add_argument("--mvf", required=True, help="directory of frame_* folders with heatmap/feature tensors")
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=("dot", "fcl"), default="dot")
    s.add_argument("--fcl-weights", help="JSON list of 2N weights for the fcl strategy")
    s.add_argument("--gamma", type=float, default=10.0)
    s.add_argument("--fusion", choices=("all", "most-conf"), default="all")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--initial-weight", type=float, default=None)
    s.add_argument("--stride", type=float, default=8.0, help="used when a sidecar lacks it")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("evaluate", help="metrics of estimated poses against ground truth")
    s.add_argument("--poses", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--model", help="plausibility model for PPP")
    s.add_argument("--cameras")
    s.add_argument("--obs", help="2D estimates for JDR and reprojection loss")
    s.add_argument("--R", default="0.05,0.1,0.2,0.3,0.5")
    s.add_argument("--csv", default="metrics.csv")
    s.add_argument("--json", default="metrics.json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="differences between two pose files")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--gt")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
