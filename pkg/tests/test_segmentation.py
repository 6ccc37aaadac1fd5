import numpy as np
import pytest
from scipy import ndimage

from models import SegmentationError
from phantomgen import LabelMask, rotate90
from segmentation import (
    STRUCT6, Segmentation, boundary_shell, dice, full_segmentation, load_segmentation, observer_variant,
    partial_segmentation, rotated_segmentation, save_segmentation,
)


def gt_segmentation(scan):
    return full_segmentation(scan.ground_truth_mask, scan.volume, "A", 0, percentile=100.0)


def per_label_dice(a, b):
    return [dice(a.labels == k, b.labels == k) for k in range(1, 17)]


def test_accept_all_returns_ground_truth(base_scan):
    for variant in ("A", "B"):
        seg = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, variant, 11, percentile=100.0)
        assert np.array_equal(seg.labels, base_scan.ground_truth_mask.labels)
        assert seg.seg_type == f"full_{variant}"


def test_variants_differ_only_on_the_boundary_band(base_scan):
    gt = base_scan.ground_truth_mask.labels
    a = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 1)
    b = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "B", 1)
    band = np.zeros(gt.shape, dtype=bool)
    for k in range(1, 17):
        region = gt == k
        band |= ndimage.binary_dilation(region, STRUCT6) & ~ndimage.binary_erosion(region, STRUCT6)
    diff = a.labels != b.labels
    assert diff.any()
    assert not np.any(diff & ~band)


def test_variant_a_tighter_than_b(base_scan):
    a = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 1)
    b = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "B", 1)
    gt_counts = np.bincount(base_scan.ground_truth_mask.labels.ravel(), minlength=17)[1:]
    ca = np.array([a.voxel_counts()[k] for k in range(1, 17)])
    cb = np.array([b.voxel_counts()[k] for k in range(1, 17)])
    assert np.all(ca <= gt_counts)
    assert np.all(cb >= gt_counts)


def test_interior_always_kept(base_scan):
    gt = base_scan.ground_truth_mask.labels
    seg = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 4, percentile=0.0)
    for k in (1, 8, 16):
        deep = ndimage.binary_erosion(gt == k, STRUCT6)
        assert np.all(seg.labels[deep] == k)


def test_observer_seeds_agree(base_scan):
    one = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 1)
    two = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 2)
    assert min(per_label_dice(one, two)) >= 0.90


def test_full_segmentation_rejects_mismatched_dims(base_scan):
    small = LabelMask(np.ones((2, 2, 2), dtype=np.uint16))
    with pytest.raises(SegmentationError):
        full_segmentation(small, base_scan.volume, "A", 0)
    with pytest.raises(SegmentationError):
        full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "C", 0)


def test_partial_keeps_middle_slices():
    labels = np.zeros((4, 4, 14), dtype=np.uint16)
    labels[1:3, 1:3, 2:12] = 1              # ten equal slices, z = 2..11
    seg = partial_segmentation(Segmentation(LabelMask(labels), "full_A", "obs1"), 0.5)
    kept = np.nonzero(seg.labels.sum(axis=(0, 1)))[0]
    assert kept.tolist() == [5, 6, 7, 8, 9] or kept.tolist() == [4, 5, 6, 7, 8]
    assert int((seg.labels == 1).sum()) == 20
    assert seg.seg_type == "partial"


def test_partial_fraction_one_is_identity(base_scan):
    full = gt_segmentation(base_scan)
    assert np.array_equal(partial_segmentation(full, 1.0).labels, full.labels)


def test_partial_keeps_about_half_and_is_subset(base_scan):
    full = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 3)
    part = partial_segmentation(full, 0.5)
    gt_counts = np.bincount(base_scan.ground_truth_mask.labels.ravel(), minlength=17)[1:]
    counts = np.bincount(part.labels.ravel(), minlength=17)[1:]
    assert np.all(counts / gt_counts >= 0.35) and np.all(counts / gt_counts <= 0.65)
    kept = part.labels > 0
    assert np.array_equal(part.labels[kept], full.labels[kept])
    assert part.info["single_slice_labels"] == []


def test_single_slice_label_kept_whole_and_flagged():
    labels = np.zeros((5, 5, 3), dtype=np.uint16)
    labels[1:4, 1:4, 1] = 2
    seg = partial_segmentation(Segmentation(LabelMask(labels), "full_A", "obs1"), 0.5)
    assert np.array_equal(seg.labels, labels)
    assert seg.info["single_slice_labels"] == [2]


def test_partial_rejects_bad_fraction(base_scan):
    with pytest.raises(SegmentationError):
        partial_segmentation(gt_segmentation(base_scan), 0.0)


def test_observer_p_zero_is_identity(base_scan):
    seg = gt_segmentation(base_scan)
    out = observer_variant(seg, 5, p_obs=0.0, observer="obs2")
    assert np.array_equal(out.labels, seg.labels)
    assert out.observer == "obs2"


def test_observer_flips_stay_on_boundary_band(base_scan):
    seg = gt_segmentation(base_scan)
    out = observer_variant(seg, 5)
    gt = seg.labels
    outside = ndimage.binary_dilation(gt > 0, STRUCT6) & (gt == 0)
    changed = out.labels != gt
    assert changed.any()
    assert not np.any(changed & ~(boundary_shell(gt) | outside))


def test_observer_both_grows_and_shrinks(base_scan):
    seg = gt_segmentation(base_scan)
    gt = seg.labels
    out = observer_variant(seg, 7).labels
    dropped = (gt > 0) & (out == 0)
    added = (gt == 0) & (out > 0)
    assert dropped.any() and added.any()
    assert not np.any((gt > 0) & (out > 0) & (out != gt))
    # an added voxel always touches the label it joined
    for k in np.unique(out[added]):
        assert np.all(ndimage.binary_dilation(gt == k, STRUCT6)[added & (out == k)])


def test_observer_leaves_contested_background_alone():
    gt = np.zeros((5, 3, 3), dtype=np.uint16)
    gt[0:2] = 1
    gt[3:5] = 2
    seg = Segmentation(LabelMask(gt), "full_A", "obs1")
    out = observer_variant(seg, 3, p_obs=1.0).labels
    assert np.all(out[2] == 0)


def test_observer_dice_over_seeds(base_scan):
    seg = gt_segmentation(base_scan)
    scores = np.array([per_label_dice(seg, observer_variant(seg, s)) for s in range(1, 6)])
    assert scores.mean() >= 0.93
    assert scores.min() >= 0.90


def test_rotated_segmentation_requires_rotated_scan(base_scan):
    with pytest.raises(SegmentationError, match="not rotated"):
        rotated_segmentation(base_scan, "A", 0)


def test_rotated_segmentation_commutes_with_accept_all(base_scan):
    rot = rotate90(base_scan, "z")
    seg_then_rot = np.rot90(gt_segmentation(base_scan).labels, 1, axes=(0, 1))
    rot_then_seg = rotated_segmentation(rot, "A", 0, percentile=100.0)
    assert rot_then_seg.seg_type == "rotated_full"
    assert np.array_equal(rot_then_seg.labels, rot.ground_truth_mask.labels)
    assert np.array_equal(rot_then_seg.labels, seg_then_rot)


def test_rotated_counts_close_to_unrotated(base_scan):
    rot = rotate90(base_scan, "z")
    plain = full_segmentation(base_scan.ground_truth_mask, base_scan.volume, "A", 8)
    turned = rotated_segmentation(rot, "A", 8)
    for k, n in plain.voxel_counts().items():
        assert abs(turned.voxel_counts()[k] - n) <= 0.05 * n


def test_save_and_load_segmentation(tmp_path, base_scan):
    seg = observer_variant(gt_segmentation(base_scan), 2, observer="obs2")
    stem = tmp_path / "seg" / "T2-TSE_scan1_obs2_full_A"
    save_segmentation(seg, stem, base_scan.volume.spacing)
    back = load_segmentation(stem)
    assert np.array_equal(back.labels, seg.labels)
    assert (back.seg_type, back.observer) == ("full_A", "obs2")
    assert back.info["p_obs"] == 0.25


def test_dice_edge_cases():
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert dice(np.array([1, 1, 0], bool), np.array([1, 0, 0], bool)) == pytest.approx(2 / 3)
