import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from core.gridfield import DenseField
from core.metrics import (
    MetricReport,
    benjamini_hochberg,
    centroid_distance,
    dice_score,
    evaluate_registration,
    jacobian_determinant,
    jacobian_stats,
    landmark_transfer,
    load_case_scores,
    paired_t,
    paired_tests,
    save_report,
    student_t_sf,
)
from core.volume import LandmarkSet, MaskVolume
from utils.errors import ConfigError, GeometryError


def _linear_field(dims, component, slope):
    u = np.zeros((3,) + dims)
    coords = np.arange(dims[component], dtype=np.float64) * slope
    shape = [1, 1, 1]
    shape[component] = dims[component]
    u[component] = np.broadcast_to(coords.reshape(shape), dims)
    return DenseField(u)


class TestDice:
    def test_identical_and_disjoint(self, cube_mask):
        assert dice_score(cube_mask, cube_mask) == 1.0
        other = np.zeros((8, 8, 8))
        other[0, 0, 0] = 1.0
        assert dice_score(cube_mask, other) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4))
        b = np.zeros((4, 4, 4))
        a[:2, :2, :2] = 1
        b[:2, :2, 1:3] = 1
        assert dice_score(a, b) == 0.5
        assert dice_score(b, a) == 0.5

    def test_soft_masks_are_binarized(self):
        a = np.full((2, 2, 2), 0.6)
        b = np.full((2, 2, 2), 0.4)
        assert dice_score(a, a) == 1.0
        assert dice_score(a, b) == 0.0

    def test_two_empty_masks(self):
        assert dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0


class TestCentroid:
    def test_identical_is_zero(self, cube_mask):
        assert centroid_distance(cube_mask, cube_mask) == 0.0

    def test_translation(self):
        a = np.zeros((8, 8, 8))
        b = np.zeros((8, 8, 8))
        a[0:3, 2:5, 2:5] = 1.0
        b[3:6, 2:5, 2:5] = 1.0
        fixed = MaskVolume((8, 8, 8), (1.0, 1.0, 1.0), a)
        moved = MaskVolume((8, 8, 8), (1.0, 1.0, 1.0), b)
        assert centroid_distance(fixed, moved) == pytest.approx(3.0)

    def test_spacing_scales_distance(self, cube_mask):
        moved = MaskVolume((8, 8, 8), (2.0, 1.0, 1.0), np.roll(cube_mask.data, 1, axis=0))
        assert centroid_distance(moved, cube_mask) == pytest.approx(2.0)

    def test_landmark_mode(self):
        a = LandmarkSet(np.array([[0, 0, 0], [1, 1, 1]]), ("a", "b"))
        b = LandmarkSet(np.array([[3, 4, 0], [1, 1, 1]]), ("a", "b"))
        assert centroid_distance(a, b, mode="landmark") == pytest.approx(2.5)

    def test_empty_mask(self, cube_mask):
        with pytest.raises(GeometryError):
            centroid_distance(cube_mask, np.zeros((8, 8, 8)))


class TestLandmarkTransfer:
    def test_zero_field(self):
        points = LandmarkSet(np.array([[1.0, 2.0, 3.0]]), ("a",))
        moved = landmark_transfer(points, DenseField.zeros((5, 5, 5)))
        assert np.array_equal(moved.points, points.points)

    def test_constant_field(self):
        points = LandmarkSet(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]), ("a", "b"))
        u = np.zeros((3, 5, 5, 5))
        u[0] = 1.0
        moved = landmark_transfer(points, DenseField(u))
        np.testing.assert_allclose(moved.points, points.points + [1.0, 0.0, 0.0])
        assert moved.ids == points.ids

    def test_half_voxel_on_linear_field(self):
        points = LandmarkSet(np.array([[2.5, 1.0, 1.0]]), ("a",))
        moved = landmark_transfer(points, _linear_field((5, 5, 5), 0, 0.5))
        np.testing.assert_allclose(moved.points, [[3.75, 1.0, 1.0]])

    def test_out_of_bounds(self):
        points = LandmarkSet(np.array([[5.0, 1.0, 1.0]]), ("far",))
        with pytest.raises(GeometryError, match="far"):
            landmark_transfer(points, DenseField.zeros((5, 5, 5)))


class TestJacobian:
    def test_zero_field(self):
        report = jacobian_stats(DenseField.zeros((6, 6, 6)))
        assert report.mean_log_det == 0.0
        assert report.folding_percent == 0.0
        assert report.interior_voxels == 64

    def test_stretch(self):
        det = jacobian_determinant(_linear_field((6, 6, 6), 0, 0.1))
        np.testing.assert_allclose(det, 1.1)
        report = jacobian_stats(_linear_field((6, 6, 6), 0, 0.1))
        assert report.mean_log_det == pytest.approx(0.09531, abs=1e-5)
        assert report.std_log_det == pytest.approx(0.0, abs=1e-12)

    def test_full_folding(self):
        report = jacobian_stats(_linear_field((6, 6, 6), 0, -2.0))
        assert report.folding_percent == 100.0
        assert report.excluded == report.interior_voxels
        assert math.isnan(report.mean_log_det)

    def test_shear_has_unit_determinant(self):
        u = np.zeros((3, 6, 6, 6))
        u[0] = 0.3 * np.arange(6.0)[None, :, None]
        np.testing.assert_allclose(jacobian_determinant(u), 1.0)

    def test_small_field(self):
        with pytest.raises(GeometryError):
            jacobian_stats(DenseField.zeros((2, 6, 6)))


class TestPairedTests:
    def test_matches_reference_t_test(self, rng):
        a = rng.normal(0.8, 0.05, 12)
        b = a - rng.normal(0.02, 0.03, 12)
        mean, t_stat, p = paired_t(a, b, "greater")
        ref = stats.ttest_rel(a, b, alternative="greater")
        assert t_stat == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-8)
        two = paired_t(a, b, "two-sided")[2]
        assert two == pytest.approx(stats.ttest_rel(a, b).pvalue, rel=1e-8)

    def test_constant_positive_differences(self):
        a = np.arange(10.0) + 0.5
        assert paired_t(a, a - 0.5)[2] < 1e-6

    def test_identical_samples(self):
        a = np.arange(10.0)
        assert paired_t(a, a)[2] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            paired_t([1.0, 2.0, 3.0], [1.0, 2.0])

    def test_student_t_sf_symmetry(self):
        assert student_t_sf(0.0, 7) == pytest.approx(0.5)
        assert student_t_sf(1.3, 7) + student_t_sf(-1.3, 7) == pytest.approx(1.0)
        assert student_t_sf(2.0, 9) == pytest.approx(stats.t.sf(2.0, 9), rel=1e-10)

    def test_benjamini_hochberg(self):
        reject, q = benjamini_hochberg([0.01, 0.02, 0.04])
        np.testing.assert_allclose(q, [0.03, 0.03, 0.04])
        assert reject.tolist() == [True, True, True]

    def test_fdr_is_applied_within_families(self, rng):
        base = rng.normal(0.0, 1.0, 10)
        scores_a = {"dice": base + 2.0 + rng.normal(0, 0.1, 10), "tre": base + rng.normal(0, 1.0, 10)}
        scores_b = {"dice": base, "tre": base}
        rows = paired_tests(scores_a, scores_b, {"dice": "dice", "tre": "tre"})
        by_name = {r.name: r for r in rows}
        assert by_name["dice"].q_value == pytest.approx(by_name["dice"].p_value)
        assert by_name["tre"].q_value == pytest.approx(by_name["tre"].p_value)
        assert by_name["dice"].reject

    def test_comparisons_must_match(self):
        with pytest.raises(ConfigError):
            paired_tests({"a": [1.0, 2.0]}, {"b": [1.0, 2.0]})


def test_load_case_scores(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text("case,dice,tre\nc1,0.8,2.0\nc2,0.9,1.5\n")
    scores = load_case_scores(str(path))
    assert scores["dice"].tolist() == [0.8, 0.9]
    assert scores["tre"].tolist() == [2.0, 1.5]


def test_evaluate_registration_and_report(tmp_path, cube_mask):
    fixed_lm = LandmarkSet(np.array([[3.0, 3.0, 3.0]]), ("a",))
    moving_lm = LandmarkSet(np.array([[4.0, 3.0, 3.0]]), ("a",))
    report = evaluate_registration(DenseField.zeros((8, 8, 8)), cube_mask, cube_mask, fixed_lm, moving_lm)
    assert report.dice == 1.0
    assert report.mask_distance_mm == 0.0
    assert report.landmark_distance_mm == pytest.approx(1.0)
    assert report.jacobian.folding_percent == 0.0

    save_report(report, str(tmp_path / "report.json"))
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["dice"] == 1.0
    assert doc["jacobian"]["interior_voxels"] == 216

    save_report(report, str(tmp_path / "report.csv"), "csv")
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.startswith("dice,landmark_distance_mm,mask_distance_mm")


def test_report_writes_nan_as_null(tmp_path):
    report = MetricReport(jacobian=jacobian_stats(_linear_field((5, 5, 5), 0, -2.0)))
    save_report(report, str(tmp_path / "r.json"))
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["jacobian"]["mean_log_det"] is None
    assert doc["dice"] is None


def test_paired_rows_are_strict_json(tmp_path):
    rows = paired_tests({"NaN_cmp": [1.5, 2.5, 3.5]}, {"NaN_cmp": [1.0, 2.0, 3.0]})
    assert math.isinf(rows[0].t_stat)
    save_report(rows, str(tmp_path / "tests.json"))

    def reject(token):
        raise ValueError(f"non-standard JSON constant {token}")

    doc = json.loads((tmp_path / "tests.json").read_text(), parse_constant=reject)
    assert doc[0]["name"] == "NaN_cmp"
    assert doc[0]["t_stat"] is None
    assert doc[0]["p_value"] == 0.0


def test_report_format_is_validated(tmp_path):
    with pytest.raises(ConfigError):
        save_report(MetricReport(), str(tmp_path / "r.xml"), "xml")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**16), fill=st.floats(min_value=0.05, max_value=0.95))
def test_dice_is_symmetric(seed, fill):
    gen = np.random.default_rng(seed)
    a = (gen.random((5, 5, 5)) < fill).astype(np.float64)
    b = (gen.random((5, 5, 5)) < fill).astype(np.float64)
    assert dice_score(a, b) == dice_score(b, a)
    assert 0.0 <= dice_score(a, b) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=1, max_size=12))
def test_bh_q_values_are_monotone_in_p(p_values):
    _, q = benjamini_hochberg(p_values)
    order = np.argsort(p_values, kind="stable")
    assert np.all(np.diff(np.asarray(q)[order]) >= -1e-12)
    assert np.all(np.asarray(q) >= np.asarray(p_values) - 1e-12)
    assert np.all(np.asarray(q) <= 1.0)
