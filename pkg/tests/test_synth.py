from __future__ import annotations

import numpy as np
import pytest

from mvht import synth
from mvht.anatomy import bone_lengths, fit_pca, fit_prior, orientation_normalize
from mvht.errors import InsufficientViews, ValidationError
from mvht.geometry import camera_center, project, triangulation_rows
from mvht.plausibility import fit_plausibility_model, ppp_metric
from mvht.rng import stream
from mvht.triangulation import MultiViewObservation, algebraic_triangulate


# ---------------------------------------------------------------------------
# rigs
# ---------------------------------------------------------------------------


def test_rig_on_circle():
    cams = synth.gen_rig(4, radius_mm=4000, seed=3)
    assert len(cams) == 4
    c = synth.rig_centers(cams)
    np.testing.assert_allclose(np.hypot(c[:, 0], c[:, 1]), 4000, atol=1)
    assert len(set(np.round(c[:, 2]))) == 4


def test_rig_centres_roundtrip():
    for seed in range(5):
        for cam in synth.gen_rig(6, radius_mm=5000, seed=seed):
            direct = camera_center(cam.projection)
            assert np.linalg.norm(direct - cam.center) < 1e-6
            # the camera looks at the origin: it projects near the principal point
            p = project(cam, np.zeros(3))
            assert abs(p.u - cam.image_size[0] / 2) < 1e-6 and abs(p.v - cam.image_size[1] / 2) < 1e-6


def test_rig_deterministic():
    a, b = synth.gen_rig(4, seed=11), synth.gen_rig(4, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.projection, y.projection)
    assert not np.array_equal(a[0].projection, synth.gen_rig(4, seed=12)[0].projection)


def test_single_camera_rejected_downstream(train_poses):
    cams = synth.gen_rig(1, seed=0)
    uv = synth.project_all(cams, train_poses[:1])[0]
    with pytest.raises(InsufficientViews):
        algebraic_triangulate(cams, MultiViewObservation(uv))


def test_rig_rejects_no_cameras():
    with pytest.raises(ValidationError):
        synth.gen_rig(0)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


def test_kinematic_poses_have_fixed_segments(train_poses, topo):
    bl = bone_lengths(train_poses, topo)
    np.testing.assert_allclose(bl, np.broadcast_to(bl[0], bl.shape), rtol=1e-9)


def test_zero_latent_noise_gives_mean_pose(prior, topo):
    poses = synth.gen_poses(prior, 20, seed=4, topology=topo, latent_scale=0.0, rigid=False)
    mean = prior.hops[0].mean_pose.reshape(17, 3)
    for pose in poses:
        canon, _ = orientation_normalize(pose, topo)
        np.testing.assert_allclose(canon, orientation_normalize(mean, topo)[0], atol=1e-9)
        # poses differ only by a yaw and a translation
        rel = pose - pose[topo.root]
        assert np.allclose(np.linalg.norm(rel, axis=-1), np.linalg.norm(mean - mean[topo.root], axis=-1))


def test_refit_explained_variance(prior, topo):
    poses = synth.gen_poses(prior, 4000, seed=8, topology=topo, rigid=False)
    pca = fit_pca(poses, topo, 0, prior.hops[0].pca.D)
    assert pca.explained_variance >= 0.999


def test_generated_bone_lengths_within_one_percent(prior, topo, train_poses):
    poses = synth.gen_poses(prior, 2000, seed=9, topology=topo)
    med = np.median(bone_lengths(train_poses, topo), axis=0)
    assert np.abs(bone_lengths(poses, topo) / med - 1).max() < 0.01


def test_generated_poses_plausible_under_generating_model(prior, topo):
    poses = synth.gen_poses(prior, 1500, seed=10, topology=topo)
    model = fit_plausibility_model(poses, topo, n_components=None)
    model.reference_lengths = np.asarray(prior.reference_lengths)
    assert ppp_metric(poses, model, topo, [0.2]) == {0.2: 1.0}


def test_gen_poses_deterministic(prior, topo):
    a = synth.gen_poses(prior, 50, seed=3, topology=topo)
    np.testing.assert_array_equal(a, synth.gen_poses(prior, 50, seed=3, topology=topo))
    np.testing.assert_array_equal(synth.gen_poses(None, 30, 2), synth.gen_poses(None, 30, 2))


def test_prior_needs_hop0(train_poses, topo):
    no_root = fit_prior(train_poses[:500], topo, dims={1: 10}, lambdas={1: 1.0})
    with pytest.raises(ValidationError):
        synth.gen_poses(no_root, 5, seed=0, topology=topo)


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def test_identity_corruption(rig, train_poses):
    true_uv = synth.project_all(rig, train_poses[:10])
    uv, conf = synth.corrupt_observations(true_uv, synth.CorruptionSpec())
    np.testing.assert_array_equal(uv, true_uv)
    assert np.all(conf == 1.0)


def test_gaussian_noise_level():
    true_uv = np.zeros((2500, 4, 1, 2))
    uv, _ = synth.corrupt_observations(true_uv, synth.CorruptionSpec(sigma=2.0, seed=1))
    assert abs(np.std(uv - true_uv) - 2.0) < 0.1
    for axis in (0, 1):
        assert abs(np.std(uv[..., axis]) - 2.0) < 0.1


def test_full_occlusion():
    uv, conf = synth.corrupt_observations(np.zeros((10, 4, 17, 2)), synth.CorruptionSpec(occlusion_rate=1.0))
    assert np.all(conf == 0.1)
    assert np.all(np.linalg.norm(uv, axis=-1) >= 10.0 - 1e-9)


def test_outlier_fraction_and_magnitude():
    uv, conf = synth.corrupt_observations(
        np.zeros((1000, 4, 17, 2)), synth.CorruptionSpec(outlier_rate=0.1, outlier_magnitude=20.0, seed=2)
    )
    d = np.linalg.norm(uv, axis=-1)
    moved = d > 0
    assert abs(moved.mean() - 0.1) < 0.01
    assert d[moved].min() >= 10.0 - 1e-9 and d.max() <= 30.0 + 1e-9
    assert np.all(conf == 1.0)


def test_corruption_deterministic_and_validated():
    spec = synth.CorruptionSpec(sigma=1.0, outlier_rate=0.2, occlusion_rate=0.2, seed=5)
    a = synth.corrupt_observations(np.zeros((5, 3, 4, 2)), spec)
    b = synth.corrupt_observations(np.zeros((5, 3, 4, 2)), spec)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValidationError):
        synth.CorruptionSpec(sigma=-1)
    with pytest.raises(ValidationError):
        synth.CorruptionSpec(outlier_rate=1.5)


# ---------------------------------------------------------------------------
# scenes and MVF inputs
# ---------------------------------------------------------------------------


def test_scene_true_2d_is_exact_projection():
    scene = synth.make_scene(5, seed=6)
    for t in range(5):
        for c, cam in enumerate(scene.cameras):
            for k in range(17):
                p = project(cam, scene.poses[t, k])
                assert scene.true_uv[t, c, k].tolist() == [p.u, p.v]


def test_scene_passes_row_duality():
    scene = synth.make_scene(5, seed=7)
    for t in range(5):
        for c, cam in enumerate(scene.cameras):
            for k in range(17):
                A, b = triangulation_rows(cam, scene.true_uv[t, c, k])
                y = scene.poses[t, k]
                assert np.linalg.norm(A @ y + b) <= 1e-9 * (1 + np.linalg.norm(y)) * np.linalg.norm(cam.projection)


def test_mvf_inputs_shapes_and_peaks():
    scene = synth.make_scene(1, seed=8, n_channels=16)
    conf = np.full((4, 17), 0.5)
    heat, feat = synth.mvf_inputs(scene, 0, scene.true_uv[0], conf, stride=8)
    assert heat.shape == (4, 17, 125, 125) and feat.shape == (4, 125, 125, 16)
    assert heat.max() == pytest.approx(15.0, rel=0.05)
    with pytest.raises(ValidationError):
        synth.mvf_inputs(synth.make_scene(1, seed=8), 0, scene.true_uv[0], conf)


def test_feature_scale_gives_unit_amplitude_match():
    scene = synth.make_scene(1, seed=9, n_channels=32)
    _, feat = synth.mvf_inputs(scene, 0, scene.true_uv[0], np.ones((4, 17)), stride=1, noise=0.0, amplitude=30.0)
    from mvht.mvf import image_to_grid, match_heatmap, sample_feature

    # the splat at an exact lattice point has weight 1, so self-match equals the amplitude
    uv = scene.true_uv[0, 0, 3]
    g = np.round(image_to_grid(uv, 1))
    f = sample_feature(feat[0], g)
    assert match_heatmap(feat[0], f).max() <= 30.0 + 1e-9


def test_streams_independent_and_reproducible():
    a = stream(5, "poses").standard_normal(4)
    np.testing.assert_array_equal(a, stream(5, "poses").standard_normal(4))
    assert not np.array_equal(a, stream(5, "rig").standard_normal(4))
    assert not np.array_equal(stream(5, "x", 1).random(3), stream(5, "x", 2).random(3))
