import itertools
import math

import numpy as np
import pytest

from models import DataError, ExtractionConfig
from phantomgen import LabelMask, VoxelVolume
from radiomics import (
    CLASS_NAMES, COARSENESS_CAP, DIRECTIONS, FEATURE_NAMES, NEIGHBOURS26, DiscretizedROI, build_matrix,
    discretize, discretize_values, extract_all, features_frame, first_order, load_manifest, read_feature_table,
    shape_features, texture_features, write_feature_table,
)
from segmentation import Segmentation


def roi_of(levels) -> DiscretizedROI:
    levels = np.asarray(levels, dtype=np.int32)
    return DiscretizedROI(levels, int(levels.max()), (1.0, 1.0, 1.0), np.array([]))


def seg_of(labels) -> Segmentation:
    return Segmentation(LabelMask(np.asarray(labels, dtype=np.uint16)), "full_A", "obs1")


# ── brute-force matrix enumerators ────────────────────────────────────────────

def _inside(shape, p):
    return all(0 <= c < n for c, n in zip(p, shape))


def _add(p, d, k=1):
    return tuple(a + k * b for a, b in zip(p, d))


def naive_glcm(lv, ng):
    out = []
    for d in DIRECTIONS:
        m = np.zeros((ng, ng), dtype=np.int64)
        for p in itertools.product(*map(range, lv.shape)):
            q = _add(p, d)
            if lv[p] > 0 and _inside(lv.shape, q) and lv[q] > 0:
                m[lv[p] - 1, lv[q] - 1] += 1
                m[lv[q] - 1, lv[p] - 1] += 1
        out.append(m)
    return out


def naive_glrlm(lv, ng):
    out = []
    for d in DIRECTIONS:
        m = np.zeros((ng, max(lv.shape)), dtype=np.int64)
        for p in itertools.product(*map(range, lv.shape)):
            if lv[p] == 0:
                continue
            prev = _add(p, d, -1)
            if _inside(lv.shape, prev) and lv[prev] == lv[p]:
                continue
            n = 1
            while _inside(lv.shape, _add(p, d, n)) and lv[_add(p, d, n)] == lv[p]:
                n += 1
            m[lv[p] - 1, n - 1] += 1
        out.append(m)
    return out


def naive_glszm(lv, ng):
    n_vox = int(np.count_nonzero(lv))
    m = np.zeros((ng, n_vox), dtype=np.int64)
    seen = set()
    for p in itertools.product(*map(range, lv.shape)):
        if lv[p] == 0 or p in seen:
            continue
        stack, size = [p], 0
        seen.add(p)
        while stack:
            cur = stack.pop()
            size += 1
            for d in NEIGHBOURS26:
                q = _add(cur, d)
                if _inside(lv.shape, q) and q not in seen and lv[q] == lv[p]:
                    seen.add(q)
                    stack.append(q)
        m[lv[p] - 1, size - 1] += 1
    return m


def naive_gldm(lv, ng):
    m = np.zeros((ng, 27), dtype=np.int64)
    for p in itertools.product(*map(range, lv.shape)):
        if lv[p] == 0:
            continue
        dep = sum(1 for d in NEIGHBOURS26 if _inside(lv.shape, _add(p, d)) and lv[_add(p, d)] == lv[p])
        m[lv[p] - 1, dep] += 1
    return m


def naive_ngtdm(lv, ng):
    n = np.zeros(ng)
    diffs = [[] for _ in range(ng)]
    for p in itertools.product(*map(range, lv.shape)):
        if lv[p] == 0:
            continue
        nb = [int(lv[_add(p, d)]) for d in NEIGHBOURS26 if _inside(lv.shape, _add(p, d)) and lv[_add(p, d)] > 0]
        if nb:
            n[lv[p] - 1] += 1
            diffs[lv[p] - 1].append(abs(lv[p] - sum(nb) / len(nb)))
    s = np.array([math.fsum(v) for v in diffs])
    p = n / n.sum() if n.sum() > 0 else np.zeros(ng)
    return np.column_stack([n, p, s])


def assert_matrices_match(lv):
    ng = int(lv.max())
    roi = roi_of(lv)
    for got, want in zip(build_matrix("GLCM", roi).table, naive_glcm(lv, ng)):
        assert np.array_equal(got, want)
    for got, want in zip(build_matrix("GLRLM", roi).table, naive_glrlm(lv, ng)):
        assert np.array_equal(got, want)
    assert np.array_equal(build_matrix("GLSZM", roi).table, naive_glszm(lv, ng))
    assert np.array_equal(build_matrix("GLDM", roi).table, naive_gldm(lv, ng))
    assert np.array_equal(build_matrix("NGTDM", roi).table, naive_ngtdm(lv, ng))


def test_matrices_match_enumeration_on_every_full_2x2x2_volume():
    for values in itertools.product((1, 2), repeat=8):
        assert_matrices_match(np.array(values, dtype=np.int32).reshape(2, 2, 2))


def test_matrices_match_enumeration_on_sampled_masked_2x2x2_volumes():
    # level 0 marks voxels outside the ROI
    rng = np.random.default_rng(7)
    for _ in range(300):
        lv = rng.integers(0, 3, size=(2, 2, 2)).astype(np.int32)
        if lv.max() == 0:
            continue
        assert_matrices_match(lv)


def test_matrices_match_enumeration_on_sampled_3x3x3_volumes():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        lv = rng.integers(0, 4, size=(3, 3, 3)).astype(np.int32)
        if lv.max() == 0:
            continue
        assert_matrices_match(lv)


@pytest.mark.study
def test_matrices_match_enumeration_on_ten_thousand_3x3x3_volumes():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        lv = rng.integers(0, 4, size=(3, 3, 3)).astype(np.int32)
        if lv.max() == 0:
            continue
        assert_matrices_match(lv)


# ── worked examples ───────────────────────────────────────────────────────────

def test_glcm_alternating_row():
    roi = roi_of(np.array([1, 2, 1, 2]).reshape(1, 4, 1))
    along = DIRECTIONS.index((0, 1, 0))
    P = build_matrix("GLCM", roi).table[along]
    assert P.tolist() == [[0, 3], [3, 0]]
    # every other direction leaves the 1-voxel-thick row
    assert all(m.sum() == 0 for i, m in enumerate(build_matrix("GLCM", roi).table) if i != along)
    assert texture_features("GLCM", build_matrix("GLCM", roi))["Contrast"] == pytest.approx(1.0)


def test_glrlm_single_run():
    roi = roi_of(np.ones((1, 4, 1)))
    P = build_matrix("GLRLM", roi).table[DIRECTIONS.index((0, 1, 0))]
    assert P.tolist() == [[0, 0, 0, 1]]


def test_constant_roi_matrices_and_features():
    roi = roi_of(np.ones((3, 3, 3)))
    glcm = build_matrix("GLCM", roi)
    assert all(np.count_nonzero(P) == 1 and P[0, 0] > 0 for P in glcm.table)
    glszm = build_matrix("GLSZM", roi).table
    assert glszm[0, 26] == 1 and glszm.sum() == 1
    assert texture_features("GLCM", glcm)["Contrast"] == 0.0
    assert texture_features("NGTDM", build_matrix("NGTDM", roi))["Coarseness"] == COARSENESS_CAP


def test_glcm_features_ignore_transposition():
    rng = np.random.default_rng(0)
    lv = rng.integers(1, 4, size=(4, 4, 4)).astype(np.int32)
    a = texture_features("GLCM", build_matrix("GLCM", roi_of(lv)))
    b = texture_features("GLCM", build_matrix("GLCM", roi_of(lv[::-1, ::-1, ::-1].copy())))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_texture_feature_counts():
    roi = roi_of(np.random.default_rng(1).integers(1, 4, size=(4, 4, 4)))
    sizes = {k: len(texture_features(k, build_matrix(k, roi))) for k in ("GLCM", "GLRLM", "GLSZM", "GLDM", "NGTDM")}
    assert sizes == {"GLCM": 24, "GLRLM": 16, "GLSZM": 16, "GLDM": 14, "NGTDM": 5}


def test_single_voxel_roi_gives_finite_texture():
    roi = roi_of(np.ones((1, 1, 1)))
    for kind in ("GLCM", "GLRLM", "GLSZM", "GLDM", "NGTDM"):
        values = texture_features(kind, build_matrix(kind, roi))
        assert all(math.isfinite(v) for v in values.values())


# ── discretization ────────────────────────────────────────────────────────────

def test_fixed_width_levels():
    levels, ng, _ = discretize_values(np.arange(8.0), "width", bin_width=2.0)
    assert levels.tolist() == [1, 1, 2, 2, 3, 3, 4, 4]
    assert ng == 4


def test_fixed_count_levels():
    levels, ng, _ = discretize_values(np.arange(4.0), "count", bins=2)
    assert levels.tolist() == [1, 1, 2, 2]
    assert ng == 2


def test_constant_values_single_level():
    for binning in ("count", "width"):
        levels, ng, _ = discretize_values(np.full(5, 3.5), binning)
        assert ng == 1 and levels.tolist() == [1] * 5


def test_discretize_empty_label_errors():
    vol = VoxelVolume(np.zeros((3, 3, 3), dtype=np.float32), (1.0, 1.0, 1.0))
    with pytest.raises(DataError):
        discretize(vol, seg_of(np.zeros((3, 3, 3))), 1)


def test_discretize_rejects_bad_parameters():
    with pytest.raises(DataError):
        discretize_values(np.arange(4.0), "width", bin_width=0.0)
    with pytest.raises(DataError):
        discretize_values(np.arange(4.0), "count", bins=0)


# ── first order ───────────────────────────────────────────────────────────────

def test_first_order_constant_roi():
    f = first_order(np.full(10, 4.0), np.ones(10, dtype=np.int32))
    assert f["Mean"] == 4.0
    assert f["Variance"] == 0.0
    assert f["Entropy"] == 0.0
    assert f["Energy"] == 160.0
    assert f["Uniformity"] == 1.0


def test_first_order_two_values():
    f = first_order(np.array([0.0, 2.0]), np.array([1, 2]))
    assert (f["Mean"], f["Range"], f["Variance"]) == (1.0, 2.0, 1.0)
    assert f["Entropy"] == pytest.approx(1.0)


def test_first_order_symmetric_values_have_zero_skew():
    f = first_order(np.array([-3.0, 0.0, 3.0]), np.array([1, 2, 3]))
    assert f["Skewness"] == pytest.approx(0.0, abs=1e-15)


def test_first_order_against_direct_formulas():
    x = np.random.default_rng(5).normal(100.0, 15.0, size=400)
    levels, _, _ = discretize_values(x, "count", bins=16)
    f = first_order(x, levels, voxel_volume=2.0)
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    assert f["Mean"] == pytest.approx(mean, rel=1e-12)
    assert f["Variance"] == pytest.approx(var, rel=1e-10)
    assert f["TotalEnergy"] == pytest.approx(2.0 * sum(v * v for v in x), rel=1e-12)
    assert f["RootMeanSquared"] == pytest.approx(math.sqrt(sum(v * v for v in x) / len(x)), rel=1e-12)
    assert f["InterquartileRange"] == pytest.approx(np.percentile(x, 75) - np.percentile(x, 25))
    assert len(f) == 18


# ── shape ─────────────────────────────────────────────────────────────────────

def test_single_voxel_shape():
    labels = np.zeros((3, 3, 3))
    labels[1, 1, 1] = 1
    f = shape_features(labels, 1, (1.0, 1.0, 1.0))
    assert f["VoxelVolume"] == 1.0 and f["MeshVolume"] == 1.0
    assert f["SurfaceArea"] == 6.0
    assert f["Flatness"] == 0.0 and f["LeastAxisLength"] == 0.0
    assert len(f) == 14


def test_anisotropic_single_voxel_surface():
    f = shape_features(np.ones((1, 1, 1)), 1, (1.0, 2.0, 3.0))
    assert f["SurfaceArea"] == 2 * (2 * 3 + 1 * 3 + 1 * 2)
    assert f["VoxelVolume"] == 6.0


def test_ball_is_round():
    r = 8
    g = np.arange(-r - 1, r + 2)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    ball = (x ** 2 + y ** 2 + z ** 2 <= r ** 2).astype(np.uint16)
    f = shape_features(ball, 1, (1.0, 1.0, 1.0))
    assert f["Elongation"] == pytest.approx(1.0, abs=0.05)
    assert f["Flatness"] == pytest.approx(1.0, abs=0.05)
    assert f["Maximum3DDiameter"] == pytest.approx(2 * r, abs=1.0)
    assert 0.55 < f["Sphericity"] <= 1.0


def test_coplanar_region_has_zero_flatness():
    labels = np.zeros((5, 5, 3), dtype=np.uint16)
    labels[:, :, 1] = 1
    f = shape_features(labels, 1, (1.0, 1.0, 1.0))
    assert f["Flatness"] == 0.0
    assert f["LeastAxisLength"] == 0.0


def test_2d_diameters_follow_turns_about_z_only():
    box = np.ones((6, 4, 2), dtype=np.uint16)
    sp = (1.0, 1.0, 1.0)
    base = shape_features(box, 1, sp)
    about_z = shape_features(np.ascontiguousarray(np.rot90(box, 1, axes=(0, 1))), 1, sp)
    about_x = shape_features(np.ascontiguousarray(np.rot90(box, 1, axes=(1, 2))), 1, sp)
    names = ("Maximum2DDiameterSlice", "Maximum2DDiameterColumn", "Maximum2DDiameterRow")
    assert [about_z[n] for n in names] == pytest.approx([base[n] for n in names])
    assert base["Maximum2DDiameterSlice"] == pytest.approx(math.hypot(5, 3))
    assert about_x["Maximum2DDiameterSlice"] == pytest.approx(math.hypot(5, 1))
    assert about_x["Maximum3DDiameter"] == pytest.approx(base["Maximum3DDiameter"])


# ── full vector ───────────────────────────────────────────────────────────────

def blob_case(seed=3):
    rng = np.random.default_rng(seed)
    g = np.arange(12) - 5.5
    x, y, z = np.meshgrid(g, g * 0.8, g * 1.3, indexing="ij")
    labels = ((x / 5) ** 2 + (y / 4) ** 2 + (z / 6) ** 2 <= 1).astype(np.uint16)
    data = rng.integers(50, 120, size=labels.shape).astype(np.float32)
    return data, labels


def test_extract_all_length_and_order():
    data, labels = blob_case()
    fv = extract_all(VoxelVolume(data, (1.0, 1.0, 1.0)), seg_of(labels), 1, provenance={"sample_id": 1})
    assert fv.values.shape == (107,)
    assert np.all(np.isfinite(fv.values))
    assert list(fv.as_dict()) == list(FEATURE_NAMES)
    assert fv.as_row()["sample_id"] == 1
    assert fv.as_dict()["shape_VoxelVolume"] == float(labels.sum())


def test_extract_all_survives_90_degree_rotation():
    data, labels = blob_case()
    spacing = (1.0, 1.0, 1.0)
    base = extract_all(VoxelVolume(data, spacing), seg_of(labels), 1).values
    for axes in ((0, 1), (1, 2), (2, 0)):
        rd = np.ascontiguousarray(np.rot90(data, 1, axes=axes))
        rl = np.ascontiguousarray(np.rot90(labels, 1, axes=axes))
        turned = extract_all(VoxelVolume(rd, spacing), seg_of(rl), 1).values
        if axes == (0, 1):
            assert np.allclose(turned, base, rtol=1e-9, atol=1e-9)
        else:
            # 2D diameters are plane-specific for x/y turns; everything else holds
            keep = [i for i, n in enumerate(FEATURE_NAMES) if "2DDiameter" not in n]
            assert np.allclose(turned[keep], base[keep], rtol=1e-9, atol=1e-9)


def test_extract_all_width_binning():
    data, labels = blob_case()
    fv = extract_all(VoxelVolume(data, (1.0, 1.0, 1.0)), seg_of(labels), 1,
                     ExtractionConfig(binning="width", bin_width=10.0))
    assert np.all(np.isfinite(fv.values))



def test_glcm_is_a_distribution_and_correlation_matches_the_pairs():
    rng = np.random.default_rng(12)
    lv = rng.integers(1, 5, size=(5, 4, 3)).astype(np.int32)
    glcm = build_matrix("GLCM", roi_of(lv))
    direct = []
    for d, P in zip(DIRECTIONS, glcm.table):
        p = P / P.sum()
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(P, P.T)
        pairs = []
        for a in itertools.product(*map(range, lv.shape)):
            b = _add(a, d)
            if _inside(lv.shape, b):
                pairs += [(lv[a], lv[b]), (lv[b], lv[a])]
        left, right = np.array(pairs, dtype=np.float64).T
        direct.append(np.corrcoef(left, right)[0, 1])
    feats = texture_features("GLCM", glcm)
    assert feats["Correlation"] == pytest.approx(float(np.mean(direct)), rel=1e-9, abs=1e-12)


def test_fixed_count_binning_ignores_an_intensity_offset():
    data, labels = blob_case()
    spacing = (1.0, 1.0, 1.0)
    config = ExtractionConfig(binning="count", bins=16)
    base = extract_all(VoxelVolume(data, spacing), seg_of(labels), 1, config).as_dict()
    moved = extract_all(VoxelVolume(data + np.float32(1000.0), spacing), seg_of(labels), 1, config).as_dict()
    located = {f"firstorder_{n}" for n in ("10Percentile", "90Percentile", "Energy", "Maximum", "Mean", "Median",
                                            "Minimum", "RootMeanSquared", "TotalEnergy")}
    for name in FEATURE_NAMES:
        if name not in located:
            assert moved[name] == pytest.approx(base[name], rel=1e-9, abs=1e-9), name
    for name in ("Mean", "Median", "Minimum", "Maximum", "10Percentile", "90Percentile"):
        assert moved[f"firstorder_{name}"] == pytest.approx(base[f"firstorder_{name}"] + 1000.0, rel=1e-12), name


def test_manifest_matches_canonical_names():
    names = load_manifest()
    assert names == list(FEATURE_NAMES)
    assert len(names) == 107 and len(set(names)) == 107
    assert {c: len(v) for c, v in CLASS_NAMES.items()} == {
        "shape": 14, "firstorder": 18, "glcm": 24, "glrlm": 16, "glszm": 16, "gldm": 14, "ngtdm": 5}


def test_feature_table_round_trip(tmp_path):
    data, labels = blob_case()
    vectors = [extract_all(VoxelVolume(data, (1.0, 1.0, 1.0)), seg_of(labels), 1,
                           provenance={"sample_id": i, "class": "kiwi", "sequence": "T2-TSE", "scan_id": "1",
                                       "observer": "obs1", "seg_type": "partial"}) for i in (1, 2)]
    path = write_feature_table(vectors, tmp_path / "features.csv")
    back = read_feature_table(path)
    assert back[list(FEATURE_NAMES)].to_numpy().tolist() == features_frame(vectors)[list(FEATURE_NAMES)].to_numpy().tolist()
    assert back["scan_id"].tolist() == ["1", "1"]
    first = path.read_bytes()
    write_feature_table(vectors, path)
    assert path.read_bytes() == first


def test_feature_table_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("sample_id,class\n1,kiwi\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        read_feature_table(path)
