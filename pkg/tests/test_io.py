from __future__ import annotations

import csv
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvht import io
from mvht.errors import DimensionMismatch, NonFinite, ValidationError
from mvht.geometry import project_points
from mvht.plausibility import MetricReport, fit_plausibility_model, pose_plausibility
from mvht.triangulation import (
    MultiViewObservation,
    assemble_holistic_system,
    estimate_root_and_yaw,
    holistic_triangulate,
)


# ---------------------------------------------------------------------------
# JSON encoding
# ---------------------------------------------------------------------------


def test_float_formatting():
    assert io.dumps(0.1) == "0.10000000000000001\n"
    assert io.dumps(2.0) == "2.0\n"
    assert io.dumps(np.float32(1.5)) == "1.5\n"
    assert io.dumps(1e-20) == "9.9999999999999995e-21\n"
    assert io.dumps({"a": [1, 2.5, True, None]}) == '{"a": [1, 2.5, true, null]}\n'


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_roundtrip_exactly(x):
    assert json.loads(io.dumps(x)) == x


def test_non_finite_rejected():
    with pytest.raises(NonFinite):
        io.dumps([1.0, float("nan")])
    with pytest.raises(TypeError):
        io.dumps(object())


def test_invalid_json_is_validation_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValidationError):
        io.read_json(p)


# ---------------------------------------------------------------------------
# cameras, observations, poses
# ---------------------------------------------------------------------------


def test_cameras_roundtrip(tmp_path, rig):
    io.write_cameras(tmp_path / "c.json", rig)
    back = io.read_cameras(tmp_path / "c.json")
    for a, b in zip(rig, back):
        np.testing.assert_array_equal(a.projection, b.projection)
        assert a.image_size == b.image_size and a.id == b.id
    raw = io.read_json(tmp_path / "c.json")
    assert set(raw[0]) == {"id", "P", "width", "height"}


def test_observations_roundtrip(tmp_path, rng):
    uv = rng.uniform(0, 1000, (3, 4, 17, 2))
    conf = rng.uniform(0, 1, (3, 4, 17))
    io.write_observations(tmp_path / "o.json", uv, conf, [10, 11, 12, 13])
    uv2, conf2, ids = io.read_observations(tmp_path / "o.json")
    np.testing.assert_array_equal(uv2, uv)
    np.testing.assert_array_equal(conf2, conf)
    assert ids == [10, 11, 12, 13]


def test_observations_sorted_by_frame(tmp_path):
    frames = [
        {"frame": 1, "views": [{"camera": 0, "points": [[1.0, 2.0, 0.5]]}]},
        {"frame": 0, "views": [{"camera": 0, "points": [[3.0, 4.0, 1.0]]}]},
    ]
    io.write_json(tmp_path / "o.json", frames)
    uv, conf, _ = io.read_observations(tmp_path / "o.json")
    assert uv[0, 0, 0].tolist() == [3.0, 4.0] and conf[1, 0, 0] == 0.5


def test_malformed_observations(tmp_path):
    io.write_json(tmp_path / "o.json", [{"frame": 0, "views": [{"camera": 0, "points": [[1.0, 2.0]]}]}])
    with pytest.raises(DimensionMismatch):
        io.read_observations(tmp_path / "o.json")
    io.write_json(tmp_path / "e.json", [])
    with pytest.raises(ValidationError):
        io.read_observations(tmp_path / "e.json")


def test_poses_roundtrip(tmp_path, train_poses):
    io.write_poses(tmp_path / "p.json", train_poses[:5], reports=[{"status": "cholesky"}] * 5)
    np.testing.assert_array_equal(io.read_poses(tmp_path / "p.json"), train_poses[:5])
    assert io.read_json(tmp_path / "p.json")[2]["report"] == {"status": "cholesky"}


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def test_prior_roundtrip_preserves_solution(tmp_path, prior, rig, train_poses, rng):
    io.write_prior(tmp_path / "prior.json", prior)
    back = io.read_prior(tmp_path / "prior.json")
    assert [h.hop for h in back.hops] == [h.hop for h in prior.hops]
    for a, b in zip(prior.hops, back.hops):
        np.testing.assert_array_equal(a.pca.M, b.pca.M)
        assert a.lam == b.lam and a.pca.D == b.pca.D
    np.testing.assert_array_equal(back.reference_lengths, prior.reference_lengths)
    uv = np.stack([project_points(c.projection, train_poses[3]) for c in rig])
    obs = MultiViewObservation(uv + rng.normal(0, 2, uv.shape))
    system = assemble_holistic_system(rig, obs)
    root, R = estimate_root_and_yaw(rig, obs, prior.topology)
    np.testing.assert_array_equal(
        holistic_triangulate(system, prior, root, R)[0], holistic_triangulate(system, back, root, R)[0]
    )


def test_prior_file_is_byte_deterministic(tmp_path, prior):
    io.write_prior(tmp_path / "a.json", prior)
    io.write_prior(tmp_path / "b.json", io.read_prior(tmp_path / "a.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_prior_accepts_bare_entries(prior):
    d = io.prior_to_dict(prior)
    assert len(io.prior_from_dict(d["hops"]).hops) == 3
    assert io.prior_from_dict(d["hops"][1]).hops[0].hop == 1
    with pytest.raises(ValidationError):
        io.prior_from_dict({"hops": [{"hop": 0}]})


# ---------------------------------------------------------------------------
# plausibility models
# ---------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_rle_roundtrip(bits):
    m = np.array(bits).reshape(1, -1)
    runs = io.rle_encode(m)
    np.testing.assert_array_equal(io.rle_decode(runs, m.shape), m)
    assert sum(runs) == m.size


def test_rle_starts_with_zeros():
    assert io.rle_encode(np.array([[True, True, False]])) == [0, 2, 1]
    assert io.rle_encode(np.array([[False, True, True]])) == [1, 2]
    with pytest.raises(DimensionMismatch):
        io.rle_decode([1, 2], (2, 2))


def test_plausibility_roundtrip(tmp_path, train_poses, topo):
    model = fit_plausibility_model(train_poses[:600], topo, n_components=2, seed=1)
    io.write_plausibility(tmp_path / "m.json", model, topo)
    back = io.read_plausibility(tmp_path / "m.json", topo)
    for k, g in model.occupancy.items():
        np.testing.assert_array_equal(back.occupancy[k].grid, g.grid)
        assert back.occupancy[k].bin_width_deg == 5.0 and back.occupancy[k].dilation_radius == 1
    assert back.angle_model.borders == model.angle_model.borders
    for pose in train_poses[600:620]:
        assert bool(pose_plausibility(pose, back, topo)) == bool(pose_plausibility(pose, model, topo))
    raw = io.read_json(tmp_path / "m.json")
    assert {"R", "bin_width_deg", "dilation_radius", "reference_lengths", "occupancy", "angle_model"} <= set(raw)


# ---------------------------------------------------------------------------
# binary tensors
# ---------------------------------------------------------------------------


def test_tensor_header_layout(tmp_path, rng):
    a = rng.normal(size=(5, 7, 3)).astype(np.float32)
    io.write_tensor(tmp_path / "t.bin", a, {"view": 2})
    raw = (tmp_path / "t.bin").read_bytes()
    assert len(raw) == 16 + a.size * 4
    assert struct.unpack("<2sHIII", raw[:16]) == (b"MV", 1, 7, 5, 3)
    assert np.frombuffer(raw[16:20], "<f4")[0] == a[0, 0, 0]
    back, meta = io.read_tensor(tmp_path / "t.bin")
    np.testing.assert_array_equal(back, a)
    assert meta == {"view": 2}


def test_tensor_2d_and_errors(tmp_path):
    io.write_tensor(tmp_path / "h.bin", np.ones((4, 6)))
    assert io.read_tensor(tmp_path / "h.bin")[0].shape == (4, 6, 1)
    with pytest.raises(DimensionMismatch):
        io.write_tensor(tmp_path / "x.bin", np.ones(3))
    (tmp_path / "bad.bin").write_bytes(b"XX" + bytes(14))
    with pytest.raises(ValidationError):
        io.read_tensor(tmp_path / "bad.bin")
    raw = (tmp_path / "h.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-4])
    with pytest.raises(DimensionMismatch):
        io.read_tensor(tmp_path / "cut.bin")


# ---------------------------------------------------------------------------
# metric reports
# ---------------------------------------------------------------------------


def test_metric_report_files(tmp_path):
    rep = MetricReport({"mpjpe": np.array([1.0, 3.0]), "l_bl": np.array([0.5, 0.25])}, {"mpjpe": 2.0, "l_bl": 0.375})
    io.write_metric_report(tmp_path / "m.csv", tmp_path / "m.json", rep, {"ppp@0.2": 0.5})
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["frame", "metric", "value"]
    assert rows[1:] == [["0", "mpjpe", "1"], ["0", "l_bl", "0.5"], ["1", "mpjpe", "3"], ["1", "l_bl", "0.25"]]
    assert io.read_json(tmp_path / "m.json") == {"mpjpe": 2.0, "l_bl": 0.375, "ppp@0.2": 0.5}
