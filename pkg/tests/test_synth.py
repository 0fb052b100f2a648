import dataclasses

import numpy as np
import pytest

from hicontrast import synth
from hicontrast.synth import (CanvasTooSmall, DatasetError, DatasetSpec, Skeleton, SourceSpec,
                              default_skeleton, make_dataset, render, sample_pose, split)


def _bone_lengths(skel, xy):
    return np.array([np.linalg.norm(xy[c] - xy[p]) for p, c in skel.bones()])


def test_zero_ranges_give_identical_t_pose():
    skel = default_skeleton().with_ranges(0.0)
    a = sample_pose(skel, np.random.default_rng(1), root_jitter=0.0, depth_noise=0.0)
    b = sample_pose(skel, np.random.default_rng(99), root_jitter=0.0, depth_noise=0.0)
    assert np.array_equal(a.joint_xy, b.joint_xy)
    assert np.array_equal(a.joint_depth, b.joint_depth)


def test_pose_is_seed_deterministic():
    skel = default_skeleton()
    a = sample_pose(skel, np.random.default_rng(5))
    b = sample_pose(skel, np.random.default_rng(5))
    assert a.joint_xy.tobytes() == b.joint_xy.tobytes()
    assert a.joint_depth.tobytes() == b.joint_depth.tobytes()


def test_thousand_poses_in_bounds_with_exact_bones():
    skel = default_skeleton()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pose = sample_pose(skel, rng)
        xy = pose.joint_xy
        assert (xy >= 1).all() and (xy[:, 0] <= 30).all() and (xy[:, 1] <= 30).all()
        assert np.abs(_bone_lengths(skel, xy) - skel.bone_length).max() <= 1e-9
        assert ((pose.joint_depth >= 0) & (pose.joint_depth <= 1)).all()


def test_canvas_too_small():
    with pytest.raises(CanvasTooSmall):
        sample_pose(default_skeleton(), np.random.default_rng(0), canvas=(8, 8))


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton(parent=[-1, -1], bone_length=[1.0], rest_angle=[0.0], angle_range=[0.0],
                 base_depth=[0.5, 0.5], part_of_bone=[1])
    with pytest.raises(ValueError):
        Skeleton(parent=[-1, 0], bone_length=[0.0], rest_angle=[0.0], angle_range=[0.0],
                 base_depth=[0.5, 0.5], part_of_bone=[1])


def _single_bone(xy_a, xy_b, depth=(0.3, 0.7)):
    skel = Skeleton(parent=[-1, 0], bone_length=[np.linalg.norm(np.subtract(xy_b, xy_a))],
                    rest_angle=[0.0], angle_range=[0.0], base_depth=list(depth), part_of_bone=[1])
    pose = synth.PoseInstance(joint_xy=np.array([xy_a, xy_b], float), joint_depth=np.array(depth))
    return skel, pose


def _noise_free(**kw):
    return DatasetSpec(height=16, width=16, sigma_rgb=0.0, sigma_depth=0.0, sigma_kp=0.0, **kw)


def test_vertical_bone_capsule():
    skel, pose = _single_bone((8.0, 4.0), (8.0, 11.0))
    s = render(pose, skel, _noise_free(), np.random.default_rng(0))
    rows, cols = np.mgrid[0:16, 0:16]
    # brute-force capsule membership
    ty = np.clip(rows, 4, 11)
    inside = np.hypot(cols - 8.0, rows - ty) <= 1.5
    assert np.array_equal(s.part_labels > 0, inside)
    assert np.array_equal(s.rgb.any(axis=2), inside)
    assert np.array_equal(s.depth[..., 0] > 0, inside)


def test_zero_keypoint_jitter():
    skel, pose = _single_bone((8.0, 4.0), (8.0, 11.0))
    s = render(pose, skel, _noise_free(), np.random.default_rng(0))
    assert np.array_equal(s.keypoints[:, :2], pose.joint_xy)
    assert np.array_equal(s.keypoints[:, 2], [1.0, 1.0])


def test_overlap_labels_by_nearest_bone_with_low_index_ties():
    # two bones leaving the same joint at right angles overlap around it
    skel = Skeleton(parent=[-1, 0, 0], bone_length=[5.0, 5.0], rest_angle=[0.0, 0.0],
                    angle_range=[0.0, 0.0], base_depth=[0.5, 0.5, 0.5], part_of_bone=[1, 2])
    xy = np.array([[7.0, 7.0], [12.0, 7.0], [7.0, 12.0]])
    pose = synth.PoseInstance(joint_xy=xy, joint_depth=np.full(3, 0.5))
    s = render(pose, skel, _noise_free(), np.random.default_rng(0))
    for r in range(16):
        for c in range(16):
            p = np.array([c, r], float)
            d = []
            for a, b in ((xy[0], xy[1]), (xy[0], xy[2])):
                t = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
                d.append(np.linalg.norm(p - (a + t * (b - a))))
            want = 0 if min(d) > 1.5 else (1 if d[0] <= d[1] else 2)
            assert s.part_labels[r, c] == want, (r, c)
    assert s.part_labels[7, 7] == 1  # exact tie at the shared joint


def test_make_dataset_masks():
    spec = DatasetSpec(sources=[SourceSpec(4), SourceSpec(4, ("rgb", "keypoints"))], seed=0)
    ds = make_dataset(spec)
    assert len(ds) == 8
    assert sum(not s.has("depth") for s in ds) == 4
    assert all(s.depth is None for s in ds if not s.has("depth"))
    assert len({s.sample_id for s in ds}) == 8


def test_single_modality_source_rejected():
    with pytest.raises(DatasetError):
        SourceSpec(4, ("rgb",))


def test_same_seed_byte_identical():
    spec = DatasetSpec(sources=[SourceSpec(5), SourceSpec(3, ("depth", "keypoints"))], seed=11)
    assert synth.dumps_dataset(make_dataset(spec)) == synth.dumps_dataset(make_dataset(spec))


def test_serialization_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    synth.save_dataset(small_dataset, path)
    back = synth.load_dataset(path)
    assert synth.dumps_dataset(back) == path.read_bytes()
    for a, b in zip(small_dataset, back):
        assert a.sample_id == b.sample_id and a.modality_mask == b.modality_mask
        assert np.array_equal(a.part_labels, b.part_labels)
        if a.has("rgb"):
            assert np.array_equal(a.rgb, b.rgb)


def test_truncated_dataset_rejected(small_dataset):
    buf = synth.dumps_dataset(small_dataset)
    with pytest.raises(DatasetError):
        synth.loads_dataset(buf[:-7])


def test_every_part_appears_over_256_samples():
    ds = make_dataset(DatasetSpec(sources=[SourceSpec(256)], seed=4))
    counts = np.bincount(np.concatenate([s.part_labels.ravel() for s in ds]), minlength=13)
    assert (counts[1:] > 0).all()


def test_split_sizes_and_union(small_dataset):
    tr, va, te = split(small_dataset, (0.5, 0.25, 0.25), seed=1)
    assert (len(tr), len(va), len(te)) == (4, 2, 2)
    ids = [s.sample_id for s in tr + va + te]
    assert sorted(ids) == sorted(s.sample_id for s in small_dataset)
    assert len(set(ids)) == len(ids)
    assert [s.sample_id for s in split(small_dataset, seed=1)[0]] == [s.sample_id for s in tr]


def test_split_errors(small_dataset):
    with pytest.raises(DatasetError):
        split(small_dataset, (0.5, 0.5, 0.5))
    with pytest.raises(DatasetError):
        split(small_dataset[:2], (0.5, 0.5, 0.0))


def test_stride_subsample():
    assert synth.stride_indices(100, 0.1) == list(range(0, 100, 10))
    with pytest.raises(DatasetError):
        synth.stride_indices(3, 0.1)


def test_noise_free_pixel_alignment_and_correspondences():
    spec = dataclasses.replace(DatasetSpec(sources=[SourceSpec(32)], seed=8), sigma_rgb=0.0, sigma_depth=0.0)
    for s in make_dataset(spec):
        body = s.part_labels > 0
        assert np.array_equal(s.rgb.any(axis=2), body)
        assert np.array_equal(s.depth[..., 0] > 0, body)
        r, c = s.correspondences.T
        assert (s.part_labels[r, c] > 0).all()
