"""Distance, folding, and statistics oracles, plus report assembly."""

import numpy as np
import pytest

from meshdir.metrics import (
    CaseStats,
    EvalReport,
    PAPER_THRESHOLDS,
    build_report,
    case_stats,
    change_class,
    cluster_cases,
    dice,
    folded_volume,
    hausdorff95,
    jacobian_field,
    mann_whitney_u,
    median_iqr,
    relative_median_difference,
    render_contour_overlay,
)
from meshdir.volumes import Dvf, LabelVolume, voxel_centers


def _labels(data, spacing=3.0):
    return LabelVolume(np.asarray(data, dtype=np.uint8), (spacing,) * 3)


def _single_voxel(dims, at, spacing=3.0):
    data = np.zeros(dims[::-1], dtype=np.uint8)
    data[at[2], at[1], at[0]] = 1
    return _labels(data, spacing)


def _linear_dvf(dims, matrix, spacing=3.0):
    # u(x) = A x, evaluated at voxel centers
    nx, ny, nz = dims
    grid = Dvf(
        np.zeros((nz, ny, nx, 3), dtype=np.float32), (spacing,) * 3, (0.0, 0.0, 0.0)
    )
    centers = voxel_centers(grid)
    vec = centers @ np.asarray(matrix, dtype=np.float64).T
    return Dvf(
        vec.reshape(nz, ny, nx, 3).astype(np.float32), grid.spacing, grid.origin
    )


class TestHausdorff95:
    def test_identical_masks_zero(self):
        m = _single_voxel((8, 8, 8), (3, 3, 3))
        assert hausdorff95(m, m, label=1) == 0.0

    def test_two_voxels_two_apart(self):
        a = _single_voxel((10, 8, 8), (2, 4, 4))
        b = _single_voxel((10, 8, 8), (4, 4, 4))
        assert hausdorff95(a, b, label=1) == pytest.approx(6.0, abs=1e-12)

    def test_monotone_in_separation(self):
        a = _single_voxel((12, 8, 8), (2, 4, 4))
        b2 = _single_voxel((12, 8, 8), (4, 4, 4))
        b3 = _single_voxel((12, 8, 8), (5, 4, 4))
        assert hausdorff95(a, b3, label=1) == pytest.approx(9.0, abs=1e-12)
        assert hausdorff95(a, b2, label=1) < hausdorff95(a, b3, label=1)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_symmetric_and_bounded_by_max(self, seed):
        r = np.random.default_rng(seed)
        a = _labels(r.random((8, 8, 8)) > 0.6)
        b = _labels(r.random((8, 8, 8)) > 0.6)
        ab = hausdorff95(a, b, label=1)
        assert ab == hausdorff95(b, a, label=1)
        from meshdir.volumes import boundary_face_centers
        from scipy.spatial import cKDTree

        pa = boundary_face_centers(a, 1)
        pb = boundary_face_centers(b, 1)
        full = max(
            cKDTree(pb).query(pa)[0].max(), cKDTree(pa).query(pb)[0].max()
        )
        assert ab <= full + 1e-12

    def test_empty_surface_raises(self):
        a = _single_voxel((8, 8, 8), (3, 3, 3))
        empty = _labels(np.zeros((8, 8, 8)))
        with pytest.raises(ValueError):
            hausdorff95(a, empty, label=1)


class TestDice:
    def test_identical(self):
        m = _single_voxel((6, 6, 6), (2, 2, 2))
        assert dice(m, m, label=1) == 1.0

    def test_disjoint(self):
        a = _single_voxel((6, 6, 6), (1, 1, 1))
        b = _single_voxel((6, 6, 6), (4, 4, 4))
        assert dice(a, b, label=1) == 0.0

    def test_partial_overlap(self):
        # 4 shared voxels against 8: 2*4 / (4 + 8)
        small = np.zeros((6, 6, 6), dtype=np.uint8)
        small[2, 2, 1:5] = 1
        big = small.copy()
        big[3, 2, 1:5] = 1
        assert dice(_labels(small), _labels(big), label=1) == pytest.approx(2 / 3)

    def test_both_empty_is_one(self):
        empty = _labels(np.zeros((4, 4, 4)))
        assert dice(empty, empty, label=1) == 1.0

    def test_grid_mismatch_raises(self):
        a = _labels(np.zeros((4, 4, 4)))
        b = _labels(np.zeros((5, 4, 4)))
        with pytest.raises(ValueError):
            dice(a, b, label=1)


class TestJacobian:
    def test_zero_field_is_unity(self):
        dvf = _linear_dvf((6, 6, 6), np.zeros((3, 3)))
        np.testing.assert_allclose(jacobian_field(dvf).data, 1.0, atol=1e-12)

    def test_translation_is_unity(self):
        dvf = Dvf(
            np.full((6, 6, 6, 3), 4.25, dtype=np.float32), (3.0,) * 3, (0.0,) * 3
        )
        np.testing.assert_allclose(jacobian_field(dvf).data, 1.0, atol=1e-6)

    def test_inverting_field_hits_minus_one(self):
        # u_x = -2x gives I + A = diag(-1, 1, 1)
        A = np.diag([-2.0, 0.0, 0.0])
        dvf = _linear_dvf((10, 10, 10), A)
        np.testing.assert_allclose(jacobian_field(dvf).data, -1.0, atol=1e-6)

    def test_uniform_expansion(self):
        dvf = _linear_dvf((8, 8, 8), 0.5 * np.eye(3))
        np.testing.assert_allclose(jacobian_field(dvf).data, 1.5**3, atol=1e-6)

    def test_shear_has_unit_determinant(self):
        A = np.zeros((3, 3))
        A[0, 1] = 0.7
        dvf = _linear_dvf((8, 8, 8), A)
        np.testing.assert_allclose(jacobian_field(dvf).data, 1.0, atol=1e-6)


class TestFoldedVolume:
    def _inverting(self, dims, flags=None):
        dvf = _linear_dvf(dims, np.diag([-2.0, 0.0, 0.0]))
        if flags is None:
            return dvf
        return Dvf(dvf.vectors, dvf.spacing, dvf.origin, extrapolated=flags)

    def test_zero_field(self):
        dvf = _linear_dvf((6, 6, 6), np.zeros((3, 3)))
        assert folded_volume(dvf) == 0.0

    def test_inverted_interior_oracle(self):
        # 10^3 grid at 3 mm, the one-voxel shell flagged: 8^3 * 0.027 ml
        flags = np.ones((10, 10, 10), dtype=bool)
        flags[1:-1, 1:-1, 1:-1] = False
        dvf = self._inverting((10, 10, 10), flags)
        assert folded_volume(dvf) == pytest.approx(13.824, abs=1e-9)
        assert folded_volume(dvf, exclude_extrapolated=False) == pytest.approx(27.0)

    def test_no_flags_counts_all(self):
        dvf = self._inverting((10, 10, 10))
        assert folded_volume(dvf) == pytest.approx(27.0)


class TestMannWhitney:
    def test_separated_small_samples(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert u == 0.0
        assert p == pytest.approx(0.1, abs=1e-12)

    def test_identical_samples(self):
        _, p = mann_whitney_u([5, 5], [5, 5])
        assert p == 1.0

    def test_constant_separation_with_ties(self):
        u, p = mann_whitney_u([1, 1, 1, 1, 1], [9, 9, 9, 9, 9])
        assert u == 0.0
        assert p == pytest.approx(2 / 252, abs=1e-12)

    def test_swap_symmetry(self):
        a, b = [1.5, 2.2, 7.1], [0.3, 4.4, 5.0, 6.1]
        ua, pa = mann_whitney_u(a, b)
        ub, pb = mann_whitney_u(b, a)
        assert pa == pytest.approx(pb, abs=1e-12)
        assert ua + ub == len(a) * len(b)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_exact_close_to_approx_at_six(self, seed):
        r = np.random.default_rng(seed)
        a = r.normal(0, 1, 6)
        b = r.normal(0.5, 1, 6)
        _, pe = mann_whitney_u(a, b, method="exact")
        _, pa = mann_whitney_u(a, b, method="approx")
        assert abs(pe - pa) <= 0.02

    def test_exact_beyond_limit_raises(self):
        with pytest.raises(ValueError):
            mann_whitney_u(np.arange(8), np.arange(8) + 0.5, method="exact")

    def test_large_samples_use_approximation(self):
        r = np.random.default_rng(6)
        _, p = mann_whitney_u(r.normal(0, 1, 30), r.normal(2, 1, 30))
        assert 0.0 <= p < 1e-4

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            mann_whitney_u([1], [2], method="bootstrap")


class TestRelativeMedianDifference:
    def test_equal_is_zero(self):
        assert relative_median_difference([4, 5, 6], [4, 5, 6]) == 0.0

    def test_reported_direction(self):
        # baseline median 6.0 against 5.2 improves by 13.3 percent
        assert relative_median_difference([6.0], [5.2]) == pytest.approx(13.333, abs=1e-3)

    def test_perfect_other(self):
        assert relative_median_difference([2.0, 4.0], [0.0, 0.0]) == 100.0

    def test_zero_baseline_raises(self):
        with pytest.raises(ValueError):
            relative_median_difference([0.0], [1.0])


class TestMedianIqr:
    def test_five_values(self):
        assert median_iqr([1, 2, 3, 4, 5]) == (3.0, 2.0, 4.0)

    def test_constant(self):
        assert median_iqr([4.2] * 5) == (4.2, 4.2, 4.2)

    def test_single(self):
        assert median_iqr([7.0]) == (7.0, 7.0, 7.0)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            median_iqr([])


def _brute_force_1d_kmeans(values, k):
    """Best contiguous partition of the sorted values by total within-cluster
    sum of squares, found by exhaustive split enumeration."""
    from itertools import combinations

    s = np.sort(np.asarray(values, dtype=np.float64))
    n = len(s)

    def cost(parts):
        return sum(((seg - seg.mean()) ** 2).sum() for seg in parts)

    best = None
    for splits in combinations(range(1, n), k - 1):
        idx = (0,) + splits + (n,)
        parts = [s[idx[i] : idx[i + 1]] for i in range(k)]
        c = cost(parts)
        if best is None or c < best[0] - 1e-12:
            best = (c, parts)
    return best


class TestClusterCases:
    def test_three_group_example(self):
        values = [0.9, 0.85, 0.4, 0.35, 0.1, 0.15]
        assign, thresholds = cluster_cases(values, k=3)
        np.testing.assert_array_equal(assign, [0, 0, 1, 1, 2, 2])
        assert thresholds == pytest.approx([0.625, 0.25])

    def test_id_zero_holds_largest(self):
        assign, _ = cluster_cases([1.0, 10.0, 5.0], k=3)
        np.testing.assert_array_equal(assign, [2, 0, 1])

    def test_single_cluster(self):
        assign, thresholds = cluster_cases([3.0, 1.0, 2.0], k=1)
        np.testing.assert_array_equal(assign, [0, 0, 0])
        assert thresholds == []

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(4, 13))
        values = r.random(n)
        k = int(r.integers(2, min(n, 4) + 1))
        assign, _ = cluster_cases(values, k)
        got = [np.sort(values[assign == c]) for c in range(k)]
        got.sort(key=lambda seg: seg[0])
        _, expect = _brute_force_1d_kmeans(values, k)
        assert len(got) == len(expect)
        for ga, ea in zip(got, expect):
            np.testing.assert_allclose(ga, ea)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            cluster_cases([1.0, 2.0], k=3)
        with pytest.raises(ValueError):
            cluster_cases([1.0], k=0)


class TestChangeClass:
    def test_paper_thresholds(self):
        assert PAPER_THRESHOLDS == (0.5, 0.3)
        assert change_class(0.9) == "small"
        assert change_class(0.4) == "medium"
        assert change_class(0.1) == "large"

    def test_boundaries_fall_down(self):
        assert change_class(0.5) == "medium"
        assert change_class(0.3) == "large"

    def test_rejects_threshold_count(self):
        with pytest.raises(ValueError):
            change_class(0.5, thresholds=(0.5,))


class TestCaseStats:
    def test_ratio_and_cluster(self):
        src = np.zeros((6, 6, 6), dtype=np.uint8)
        src[1:3, 1:3, 1:3] = 1  # 8 voxels
        tgt = np.zeros((6, 6, 6), dtype=np.uint8)
        tgt[1:3, 1:3, 1:2] = 1  # 4 voxels
        stats = case_stats(_labels(src), _labels(tgt), label=1, case_id="c1")
        assert isinstance(stats, CaseStats)
        assert stats.v_source_ml == pytest.approx(8 * 0.027)
        assert stats.ratio == pytest.approx(0.5)
        assert stats.cluster == "medium"

    def test_empty_source_raises(self):
        empty = _labels(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            case_stats(empty, empty, label=1)


class TestContourOverlay:
    def test_sigma_zero_is_identity(self):
        m = _single_voxel((6, 6, 6), (3, 3, 3))
        out = render_contour_overlay(m, label=1, sigma_voxels=0.0)
        np.testing.assert_array_equal(out.data, m.data.astype(np.float32))

    def test_mass_preserved_for_interior_mask(self):
        m = _single_voxel((12, 12, 12), (6, 6, 6))
        out = render_contour_overlay(m, label=1)
        assert out.data.sum() == pytest.approx(1.0, rel=1e-6)
        assert out.data.max() < 1.0


def _report(config, run, hd, tp="final"):
    return EvalReport(
        run_id=f"{config}_{run}",
        config=config,
        time_point=tp,
        hausdorff95_mm=float(hd),
        dice={"bladder": 0.9, "bones": 0.99},
        folded_volume_ml=0.0,
    )


class TestBuildReport:
    def test_single_config_summary(self):
        reports = [_report("base", i, hd) for i, hd in enumerate([1, 2, 3, 4, 5])]
        summary, comparisons = build_report(reports)
        assert comparisons == []
        assert len(summary) == 1
        row = summary[0]
        assert row["n"] == 5
        assert row["hausdorff95_median_mm"] == 3.0
        assert row["hausdorff95_iqr_low_mm"] == 2.0
        assert row["hausdorff95_iqr_high_mm"] == 4.0
        assert row["dice_median"] == 0.9

    def test_identical_groups_not_significant(self):
        reports = [_report("base", i, 4.0) for i in range(5)]
        reports += [_report("other", i, 4.0) for i in range(5)]
        _, comparisons = build_report(reports)
        assert len(comparisons) == 1
        row = comparisons[0]
        assert row["case"] == "base_vs_other"
        assert row["relative_difference_pct"] == 0.0
        assert row["p_value"] == 1.0
        assert row["exact"] is True
        assert row["significant"] is False

    def test_separated_groups_significant(self):
        reports = [_report("base", i, 9.0) for i in range(5)]
        reports += [_report("other", i, 1.0) for i in range(5)]
        _, comparisons = build_report(reports)
        row = comparisons[0]
        assert row["u_statistic"] == 25.0
        assert row["p_value"] == pytest.approx(2 / 252, abs=1e-12)
        assert row["significant"] is True
        assert row["median_baseline_mm"] == 9.0
        assert row["median_other_mm"] == 1.0
        assert row["relative_difference_pct"] == pytest.approx(100 * (1 - 1 / 9))

    def test_alpha_is_strict(self):
        # p exactly at the alpha level does not count as significant
        reports = [_report("base", i, hd) for i, hd in enumerate([1, 2, 3])]
        reports += [_report("other", i, hd) for i, hd in enumerate([4, 5, 6])]
        _, comparisons = build_report(reports, alpha=0.1)
        row = comparisons[0]
        assert row["p_value"] == pytest.approx(0.1, abs=1e-12)
        assert row["significant"] is False

    def test_groups_by_time_point(self):
        reports = [_report("base", 0, 2.0, tp="t0300"), _report("base", 0, 1.0, tp="final")]
        summary, _ = build_report(reports)
        assert [r["time_point"] for r in summary] == ["final", "t0300"]
