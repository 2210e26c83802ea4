from __future__ import annotations

import numpy as np
import pytest

from mvht import io
from mvht.anatomy import h36m_topology
from mvht.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Training poses, a prior, an angle model and a small corrupted scene with MVF tensors."""
    d = tmp_path_factory.mktemp("cli")
    assert run("--seed", 1, "synth", "--out", d / "train", "--frames", 2000) == EXIT_OK
    assert run("fit-prior", "--poses", d / "train" / "gt_poses.json", "--out", d / "prior.json") == EXIT_OK
    assert (
        run(
            "fit-angle-model",
            "--poses", d / "train" / "gt_poses.json",
            "--out", d / "model.json",
            "--components", 2,
        )
        == EXIT_OK
    )
    assert (
        run("--seed", 2, "synth", "--out", d / "scene", "--frames", 12, "--mvf-frames", 2, "--channels", 16)
        == EXIT_OK
    )
    return d


def triangulate(ws, out, *extra):
    s = ws / "scene"
    return run("triangulate", "--cameras", s / "cameras.json", "--obs", s / "observations.json", "--out", out, *extra)


def test_synth_outputs(workspace):
    s = workspace / "scene"
    for name in ("cameras.json", "gt_poses.json", "truth_2d.json", "observations.json"):
        assert (s / name).exists()
    uv, conf, ids = io.read_observations(s / "observations.json")
    assert uv.shape == (12, 4, 17, 2) and ids == [0, 1, 2, 3]
    h, meta = io.read_tensor(s / "mvf" / "frame_00001" / "heatmaps_v3.bin")
    assert h.shape == (125, 125, 17) and meta["kind"] == "heatmaps" and meta["view"] == 3
    assert not (s / "mvf" / "frame_00002").exists()


def test_synth_is_byte_deterministic(workspace, tmp_path):
    assert run("--seed", 2, "synth", "--out", tmp_path, "--frames", 12, "--mvf-frames", 2, "--channels", 16) == 0
    for name in ("cameras.json", "gt_poses.json", "observations.json", "mvf/frame_00000/features_v1.bin"):
        assert (tmp_path / name).read_bytes() == (workspace / "scene" / name).read_bytes()


def test_prior_file_contents(workspace):
    d = io.read_json(workspace / "prior.json")
    assert [(h["hop"], h["D"], h["lambda"]) for h in d["hops"]] == [(0, 25, 8000.0), (1, 20, 4000.0), (2, 15, 4000.0)]


@pytest.mark.parametrize("mode", ["lt", "at", "ht"])
def test_triangulate_modes(workspace, tmp_path, mode):
    extra = ["--prior", workspace / "prior.json"] if mode == "ht" else []
    assert triangulate(workspace, tmp_path / "p.json", "--mode", mode, *extra) == EXIT_OK
    Y = io.read_poses(tmp_path / "p.json")
    gt = io.read_poses(workspace / "scene" / "gt_poses.json")
    assert Y.shape == gt.shape
    assert np.linalg.norm(Y - gt, axis=-1).mean() < 60


def test_zero_lambda_ht_is_byte_identical_to_at(workspace, tmp_path):
    assert triangulate(workspace, tmp_path / "at.json", "--mode", "at") == 0
    assert triangulate(workspace, tmp_path / "ht.json", "--prior", workspace / "prior.json", "--lambda", "0,0,0") == 0
    assert (tmp_path / "at.json").read_bytes() == (tmp_path / "ht.json").read_bytes()


def test_threads_do_not_change_output(workspace, tmp_path):
    args = ("--prior", workspace / "prior.json")
    assert triangulate(workspace, tmp_path / "one.json", *args) == 0
    s = workspace / "scene"
    assert (
        run(
            "--threads", 3,
            "triangulate", "--cameras", s / "cameras.json", "--obs", s / "observations.json",
            "--out", tmp_path / "three.json", *args,
        )
        == 0
    )
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "three.json").read_bytes()


def test_evaluate_and_compare(workspace, tmp_path):
    s = workspace / "scene"
    assert triangulate(workspace, tmp_path / "at.json", "--mode", "at") == 0
    assert triangulate(workspace, tmp_path / "ht.json", "--prior", workspace / "prior.json") == 0
    rc = run(
        "evaluate",
        "--poses", tmp_path / "ht.json",
        "--gt", s / "gt_poses.json",
        "--model", workspace / "model.json",
        "--cameras", s / "cameras.json",
        "--obs", s / "observations.json",
        "--csv", tmp_path / "m.csv",
        "--json", tmp_path / "m.json",
    )
    assert rc == EXIT_OK
    summary = io.read_json(tmp_path / "m.json")
    assert {"mpjpe", "l_bl", "jdr", "l_pj", "ppp@0.2", "ppp@0.5"} <= set(summary)
    assert summary["ppp@0.05"] <= summary["ppp@0.5"]
    assert (tmp_path / "m.csv").read_text().startswith("frame,metric,value")
    rc = run("compare", tmp_path / "at.json", tmp_path / "ht.json", "--gt", s / "gt_poses.json", "--out", tmp_path / "c.json")
    assert rc == EXIT_OK
    c = io.read_json(tmp_path / "c.json")
    assert c["frames"] == 12 and c["mpjpe_delta"] == pytest.approx(c["mpjpe_b"] - c["mpjpe_a"])


@pytest.mark.parametrize("fusion", ["all", "most-conf"])
def test_refine(workspace, tmp_path, fusion):
    s = workspace / "scene"
    rc = run("refine", "--cameras", s / "cameras.json", "--mvf", s / "mvf", "--out", tmp_path / "r.json", "--fusion", fusion)
    assert rc == EXIT_OK
    uv, conf, _ = io.read_observations(tmp_path / "r.json")
    assert uv.shape == (2, 4, 17, 2) and np.all((conf > 0) & (conf <= 1))


def test_refine_fcl_weights(workspace, tmp_path):
    s = workspace / "scene"
    io.write_json(tmp_path / "w.json", [1.0 / 16] * 16 + [0.0] * 16)
    rc = run(
        "refine", "--cameras", s / "cameras.json", "--mvf", s / "mvf", "--out", tmp_path / "r.json",
        "--strategy", "fcl", "--fcl-weights", tmp_path / "w.json",
    )
    assert rc == EXIT_OK


def test_topology_file(workspace, tmp_path):
    io.write_json(tmp_path / "topo.json", h36m_topology().to_dict())
    assert run("--topology", tmp_path / "topo.json", "compare", workspace / "scene" / "gt_poses.json",
               workspace / "scene" / "gt_poses.json") == 0


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_unsupported_hop(workspace, tmp_path, capsys):
    rc = run("fit-prior", "--poses", workspace / "train" / "gt_poses.json", "--out", tmp_path / "p.json", "--hop", 3)
    assert rc == EXIT_INVALID
    assert "hop" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert run("fit-prior", "--poses", tmp_path / "nope.json", "--out", tmp_path / "p.json") == EXIT_INVALID


def test_ht_needs_prior(workspace, tmp_path):
    assert triangulate(workspace, tmp_path / "p.json", "--mode", "ht") == EXIT_INVALID


def test_bad_lambda_count(workspace, tmp_path):
    assert triangulate(workspace, tmp_path / "p.json", "--prior", workspace / "prior.json", "--lambda", "1,2") == 2


def test_negative_lambda(workspace, tmp_path):
    rc = triangulate(workspace, tmp_path / "p.json", "--prior", workspace / "prior.json", "--lambda", "0=-1")
    assert rc == EXIT_INVALID


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["triangulate", "--mode", "xt"])
    assert e.value.code == 2


def test_singular_system_exit_three(workspace, tmp_path):
    s = workspace / "scene"
    uv, conf, ids = io.read_observations(s / "observations.json")
    conf[:, :, 16] = 1e-12
    io.write_observations(tmp_path / "o.json", uv, conf, ids)
    rc = run(
        "triangulate", "--cameras", s / "cameras.json", "--obs", tmp_path / "o.json", "--out", tmp_path / "p.json",
        "--prior", workspace / "prior.json", "--lambda", "0=0,1=1e-6,2=0",
    )
    assert rc == EXIT_NUMERICAL
