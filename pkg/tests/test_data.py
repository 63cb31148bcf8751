import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import generic_cloud
from pointdiffuse.data import (ClassGenerator, FormatError, SceneSpec, augment, generate_scene, grid_subsample,
                               load_cloud, perturb, preset, save_cloud, training_views)
from pointdiffuse.geometry import PointCloud


def nearest_centroid_accuracy(cloud, labels):
    cents = np.stack([cloud.positions[labels == c].mean(axis=0) for c in np.unique(labels)])
    d = ((cloud.positions[:, None] - cents[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == labels))


def test_separable_scene_is_centroid_separable():
    for seed in range(5):
        cloud, labels = generate_scene(preset("separable", 3, 256, seed=seed))
        assert nearest_centroid_accuracy(cloud, labels) == 1.0


def test_scene_deterministic_and_balanced():
    a, la = generate_scene(preset("separable", 3, 256, seed=4))
    b, lb = generate_scene(preset("separable", 3, 256, seed=4))
    assert a.positions.tobytes() == b.positions.tobytes() and np.array_equal(la, lb)
    assert np.bincount(la).tolist() == [86, 85, 85]
    spec = SceneSpec([ClassGenerator((0, 0, 0), 0.3, 5, "plane"), ClassGenerator((2, 0, 0), 0.3, 9, "box")])
    _, labels = generate_scene(spec)
    assert np.bincount(labels).tolist() == [5, 9]


def test_hard_preset_overlaps():
    cloud, labels = generate_scene(preset("hard", 3, 300, seed=0))
    assert nearest_centroid_accuracy(cloud, labels) < 1.0


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec([ClassGenerator((0, 0, 0), 1, 5)])
    with pytest.raises(ValueError):
        SceneSpec([ClassGenerator((0, 0, 0), 1, 5), ClassGenerator((1, 0, 0), 1, 0)])
    with pytest.raises(ValueError):
        SceneSpec([ClassGenerator((0, 0, 0), 1, 5, "cone"), ClassGenerator((1, 0, 0), 1, 2)])
    with pytest.raises(ValueError):
        preset("easy")


def test_grid_subsample_examples():
    line = PointCloud(np.array([[0.0, 0, 0], [0.03, 0, 0], [0.05, 0, 0]]) + [0, 0.01, 0.01])
    out, labels = grid_subsample(line, np.array([7, 8, 9]), 0.04)
    np.testing.assert_array_equal(out.positions[:, 0], [0.03, 0.05])
    assert labels.tolist() == [8, 9]
    two = PointCloud(np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]]))
    assert grid_subsample(two, None, 1.0)[0].n_points == 1
    cloud = generic_cloud(50)
    out, _ = grid_subsample(cloud, None, 1e-4)
    assert sorted(map(tuple, out.positions)) == sorted(map(tuple, cloud.positions))
    with pytest.raises(ValueError):
        grid_subsample(cloud, None, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_grid_subsample_is_subset(seed, cell):
    cloud = generic_cloud(80, seed)
    labels = np.arange(80)
    out, lab = grid_subsample(cloud, labels, cell)
    assert out.n_points <= 80
    np.testing.assert_array_equal(out.positions, cloud.positions[lab])
    vox = np.floor(out.positions / cell).astype(np.int64)
    assert len({tuple(v) for v in vox}) == out.n_points
    assert [tuple(v) for v in vox] == sorted(tuple(v) for v in vox)


def test_grid_subsample_cap():
    out, _ = grid_subsample(generic_cloud(200), None, 1e-4, max_points=50)
    assert out.n_points == 50


def test_augment_examples():
    cloud, labels = generate_scene(preset("separable", 3, 64, seed=0))
    same, lab = augment(cloud, labels, [], seed=3)
    assert np.array_equal(same.positions, cloud.positions) and lab is labels
    twice, _ = augment(*augment(cloud, labels, ["flip_x"]), ["flip_x"])
    assert np.array_equal(twice.positions, cloud.positions)
    scaled, _ = augment(cloud, labels, ["scale"], seed=5)
    s = np.random.default_rng(5).uniform(0.8, 1.2)

    def mean_pair(p):
        return np.mean(np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1)))

    assert mean_pair(scaled.positions) / mean_pair(cloud.positions) == pytest.approx(s, rel=1e-6)
    jit, _ = augment(cloud, labels, ["jitter"], seed=1)
    assert np.abs(jit.positions - cloud.positions).max() <= 0.05
    a, _ = augment(cloud, labels, ["scale", "jitter", "flip_y"], seed=9)
    b, _ = augment(cloud, labels, ["scale", "jitter", "flip_y"], seed=9)
    assert np.array_equal(a.positions, b.positions)
    with pytest.raises(ValueError):
        augment(cloud, labels, ["rotate"])


def test_training_views():
    cloud, labels = generate_scene(preset("separable", 3, 32, seed=0))
    views = training_views(cloud, labels, 3, seed=1)
    assert len(views) == 3 and views[0][0] is cloud
    assert not np.array_equal(views[1][0].positions, views[2][0].positions)


def test_perturb_examples():
    cloud, labels = generate_scene(preset("separable", 3, 64, seed=1))
    turned, _ = perturb(cloud, "rotate_z", 2 * math.pi)
    np.testing.assert_allclose(turned.positions, cloud.positions, atol=1e-6)
    same, lab = perturb(cloud, "permute", np.arange(64), labels=labels)
    assert same.positions.tobytes() == cloud.positions.tobytes() and np.array_equal(lab, labels)
    back, _ = perturb(perturb(cloud, "shift", 0.2)[0], "shift", -0.2)
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-9)
    quarter, _ = perturb(cloud, "rotate_z", math.pi / 2)
    np.testing.assert_allclose(quarter.positions[:, 0], -cloud.positions[:, 1], atol=1e-12)
    np.testing.assert_allclose(quarter.positions[:, 1], cloud.positions[:, 0], atol=1e-12)
    zero, _ = perturb(cloud, "jitter", 0.0)
    assert zero.positions.tobytes() == cloud.positions.tobytes()
    np.testing.assert_allclose(perturb(cloud, "scale", 1.2)[0].positions, 1.2 * cloud.positions)
    with pytest.raises(ValueError):
        perturb(cloud, "twist", 1.0)
    with pytest.raises(ValueError):
        perturb(cloud, "permute", np.zeros(64, dtype=int))


@given(st.integers(0, 10_000))
def test_permute_then_inverse_is_identity(seed):
    cloud, labels = generate_scene(preset("separable", 3, 30, seed=0))
    moved, lab = perturb(cloud, "permute", None, labels=labels, seed=seed)
    perm = np.random.default_rng(seed).permutation(30)
    back, lab2 = perturb(moved, "permute", np.argsort(perm), labels=lab)
    assert np.array_equal(back.positions, cloud.positions) and np.array_equal(lab2, labels)


def test_pdpc_round_trip(tmp_path):
    cloud, labels = generate_scene(preset("separable", 4, 100, seed=2))
    path = tmp_path / "s.pdpc"
    save_cloud(path, cloud, labels)
    back, lab, m = load_cloud(path, return_classes=True)
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert np.array_equal(lab, labels) and m == 4
    save_cloud(path, cloud)
    assert load_cloud(path)[1] is None


def test_pdpc_layout(tmp_path):
    path = tmp_path / "s.pdpc"
    save_cloud(path, PointCloud(np.array([[1.0, 2.0, 3.0]])), np.array([2]), n_classes=5)
    blob = path.read_bytes()
    assert blob[:4] == b"PDPC"
    assert blob[4:8] == (1).to_bytes(4, "little") and blob[8:16] == (1).to_bytes(8, "little")
    assert blob[16:20] == (5).to_bytes(4, "little") and blob[20:24] == (1).to_bytes(4, "little")
    assert np.frombuffer(blob[24:36], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert blob[36:] == (2).to_bytes(2, "little")


def test_pdpc_errors(tmp_path):
    cloud, labels = generate_scene(preset("separable", 3, 20, seed=0))
    path = tmp_path / "s.pdpc"
    save_cloud(path, cloud, labels)
    blob = path.read_bytes()
    bad = tmp_path / "bad.pdpc"
    bad.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated payload") as e:
        load_cloud(bad)
    assert e.value.code == "truncated"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="bad magic") as e:
        load_cloud(bad)
    assert e.value.code == "bad_magic"
    bad.write_bytes(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(FormatError) as e:
        load_cloud(bad)
    assert e.value.code == "bad_version"
    bad.write_bytes(blob[:10])
    with pytest.raises(FormatError, match="truncated payload"):
        load_cloud(bad)
