"""Desk-scale evaluation metrics and small-sample statistics.

Surface distances work on boundary voxel-face centers so they are
grid-consistent on both sides.  The rank statistics use midranks with
exact small-sample enumeration, matching standard references on the
worked examples kept in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .volumes import Dvf, LabelVolume, Volume, boundary_face_centers

__all__ = [
    "hausdorff95",
    "dice",
    "jacobian_field",
    "folded_volume",
    "mann_whitney_u",
    "relative_median_difference",
    "median_iqr",
    "cluster_cases",
    "change_class",
    "CHANGE_NAMES",
    "PAPER_THRESHOLDS",
    "CaseStats",
    "case_stats",
    "render_contour_overlay",
    "EvalReport",
    "build_report",
]

# volume-change ratio cutoffs separating large / medium / small change
PAPER_THRESHOLDS = (0.5, 0.3)
CHANGE_NAMES = ("small", "medium", "large")

_EXACT_LIMIT = 12  # pooled size up to which the U statistic is enumerated


def hausdorff95(mask_a: LabelVolume, mask_b: LabelVolume, label: int) -> float:
    """95th percentile of the pooled symmetric surface distance multiset (mm).

    Surfaces are the centers of boundary voxel faces; directed nearest
    distances from both sides are pooled before taking the percentile.
    """
    pts_a = boundary_face_centers(mask_a, label)
    pts_b = boundary_face_centers(mask_b, label)
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise ValueError(f"label {label} has an empty surface")
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def dice(mask_a: LabelVolume, mask_b: LabelVolume, label: int) -> float:
    a = mask_a.mask(label)
    b = mask_b.mask(label)
    if a.shape != b.shape:
        raise ValueError("masks must share a grid")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def jacobian_field(dvf: Dvf) -> Volume:
    """Determinant of the deformation gradient I + du/dx per voxel.

    Central differences in the interior, one-sided at the boundary.
    """
    u = dvf.vectors.astype(np.float64)
    dz, dy, dx = dvf.spacing[2], dvf.spacing[1], dvf.spacing[0]
    jac = np.empty(u.shape[:3] + (3, 3))
    for comp in range(3):
        gz, gy, gx = np.gradient(u[..., comp], dz, dy, dx)
        jac[..., comp, 0] = gx
        jac[..., comp, 1] = gy
        jac[..., comp, 2] = gz
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    det = np.linalg.det(jac)
    return Volume(det, dvf.spacing, dvf.origin)


def folded_volume(dvf: Dvf, exclude_extrapolated: bool = True) -> float:
    """Total volume (ml) of voxels with a negative deformation Jacobian."""
    det = jacobian_field(dvf).data
    folded = det < 0.0
    if exclude_extrapolated and dvf.extrapolated is not None:
        folded = folded & ~dvf.extrapolated
    return float(folded.sum()) * dvf.voxel_volume_mm3 / 1000.0


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns (U of the first sample, p).

    Small pooled samples (n_a + n_b <= 12) are enumerated exactly over
    index splits, which stays valid under ties because midranks are
    fixed by the pooled multiset.  Larger samples use the normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u_stat = float(ranks[:na].sum() - na * (na + 1) / 2)

    exact_ok = na + nb <= _EXACT_LIMIT
    if method == "exact" and not exact_ok:
        raise ValueError(f"exact enumeration supports n_a + n_b <= {_EXACT_LIMIT}")
    if method == "exact" or (method == "auto" and exact_ok):
        nm = na * nb
        lo_tail = min(u_stat, nm - u_stat)
        hi_tail = nm - lo_tail
        base = na * (na + 1) / 2
        hits = 0
        total = 0
        for idx in combinations(range(na + nb), na):
            u = ranks[list(idx)].sum() - base
            total += 1
            if u <= lo_tail + 1e-9 or u >= hi_tail - 1e-9:
                hits += 1
        return u_stat, min(1.0, hits / total)

    n = na + nb
    mu = na * nb / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum()) / (n * (n - 1)))
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u_stat, 1.0
    z = max(abs(u_stat - mu) - 0.5, 0.0) / math.sqrt(var)
    return u_stat, min(1.0, math.erfc(z / math.sqrt(2.0)))


def relative_median_difference(baseline, other) -> float:
    """Percent improvement of `other` over `baseline` in medians.

    (1 - median(other) / median(baseline)) * 100; positive when the other
    group's median is lower.
    """
    mb = float(np.median(np.asarray(baseline, dtype=np.float64)))
    mo = float(np.median(np.asarray(other, dtype=np.float64)))
    if mb == 0.0:
        raise ValueError("baseline median is zero; relative difference undefined")
    return (1.0 - mo / mb) * 100.0


def median_iqr(values) -> tuple[float, float, float]:
    """Median plus nearest-rank 25th and 75th percentiles."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("empty sample")
    q25 = v[max(math.ceil(0.25 * n) - 1, 0)]
    q75 = v[max(math.ceil(0.75 * n) - 1, 0)]
    return float(np.median(v)), float(q25), float(q75)


# ---------------------------------------------------------------------------
# Case grouping by volume-change ratio

def cluster_cases(values, k: int = 3) -> tuple[np.ndarray, list[float]]:
    """Optimal 1-D k-means grouping (exact, via dynamic programming).

    Returns per-value cluster ids ordered by decreasing cluster center
    (id 0 holds the largest values) and the k - 1 decision thresholds,
    each the midpoint between adjacent cluster boundary members, in
    decreasing order.
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least {k} values, got {n}")
    order = np.argsort(v, kind="stable")
    s = v[order]
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    c2 = np.concatenate([[0.0], np.cumsum(s * s)])

    def seg(i: int, j: int) -> float:  # cost of s[i:j]
        m = c1[j] - c1[i]
        return (c2[j] - c2[i]) - m * m / (j - i)

    cost = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=int)
    cost[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            best = np.inf
            arg = m - 1
            for i in range(m - 1, j):
                cand = cost[m - 1, i] + seg(i, j)
                if cand < best - 1e-15:
                    best = cand
                    arg = i
            cost[m, j] = best
            split[m, j] = arg

    bounds = [n]
    j = n
    for m in range(k, 0, -1):
        j = split[m, j]
        bounds.append(j)
    bounds.reverse()  # 0 = b0 < b1 < ... < bk = n over the sorted order

    ascending = np.empty(n, dtype=int)
    for c in range(k):
        ascending[bounds[c] : bounds[c + 1]] = c
    assign = np.empty(n, dtype=int)
    assign[order] = (k - 1) - ascending
    thresholds = [
        float(0.5 * (s[bounds[c]] + s[bounds[c] - 1])) for c in range(k - 1, 0, -1)
    ]
    return assign, thresholds


def change_class(ratio: float, thresholds=PAPER_THRESHOLDS) -> str:
    """Name the volume-change group of a target/source ratio.

    Thresholds are in decreasing order; a ratio above the first is a
    small change, above the second medium, at or below large.
    """
    if len(thresholds) != 2:
        raise ValueError("expected two thresholds")
    hi, lo = thresholds
    if ratio > hi:
        return "small"
    if ratio > lo:
        return "medium"
    return "large"


@dataclass(frozen=True)
class CaseStats:
    case_id: str
    v_source_ml: float
    v_target_ml: float
    ratio: float
    cluster: str


def case_stats(
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    label: int,
    case_id: str = "case",
    thresholds=PAPER_THRESHOLDS,
) -> CaseStats:
    v_s = float(source_labels.mask(label).sum()) * source_labels.voxel_volume_mm3 / 1000.0
    v_t = float(target_labels.mask(label).sum()) * target_labels.voxel_volume_mm3 / 1000.0
    if v_s <= 0:
        raise ValueError(f"label {label} is empty in the source volume")
    ratio = v_t / v_s
    return CaseStats(case_id, v_s, v_t, ratio, change_class(ratio, thresholds))


def render_contour_overlay(
    mask: LabelVolume, label: int | None = None, sigma_voxels: float = 0.6
) -> Volume:
    """Soft contour rendering of a mask for visual side-by-side checks."""
    from scipy.ndimage import gaussian_filter

    binary = (mask.data == label) if label is not None else (mask.data > 0)
    smooth = gaussian_filter(binary.astype(np.float32), sigma_voxels, mode="nearest")
    return Volume(smooth, mask.spacing, mask.origin)


# ---------------------------------------------------------------------------
# Report assembly

@dataclass(frozen=True)
class EvalReport:
    """Metrics of one selected solution at one time point."""

    run_id: str
    config: str
    time_point: str
    hausdorff95_mm: float
    dice: dict[str, float]
    folded_volume_ml: float
    runtime_s: float = float("nan")
    selected_index: int = -1

    def dice_primary(self) -> float:
        if "bladder" in self.dice:
            return self.dice["bladder"]
        if not self.dice:
            return float("nan")
        return self.dice[sorted(self.dice)[0]]


def build_report(reports, alpha: float = 0.05):
    """Summaries and pairwise comparisons over evaluation reports.

    Returns (summary_rows, comparison_rows): per (config, time point)
    medians with nearest-rank IQR, and surface-distance comparisons of
    every config against the first-seen config per time point.
    """
    by_key: dict[tuple[str, str], list[EvalReport]] = {}
    config_order: list[str] = []
    for rep in reports:
        by_key.setdefault((rep.config, rep.time_point), []).append(rep)
        if rep.config not in config_order:
            config_order.append(rep.config)

    summary_rows = []
    for (config, tp), group in sorted(
        by_key.items(), key=lambda kv: (config_order.index(kv[0][0]), kv[0][1])
    ):
        hd = [r.hausdorff95_mm for r in group]
        dc = [r.dice_primary() for r in group]
        fv = [r.folded_volume_ml for r in group]
        med, q25, q75 = median_iqr(hd)
        summary_rows.append(
            {
                "config": config,
                "time_point": tp,
                "n": len(group),
                "hausdorff95_median_mm": med,
                "hausdorff95_iqr_low_mm": q25,
                "hausdorff95_iqr_high_mm": q75,
                "dice_median": median_iqr(dc)[0],
                "folded_volume_median_ml": median_iqr(fv)[0],
            }
        )

    comparison_rows = []
    if len(config_order) > 1:
        baseline = config_order[0]
        time_points = sorted({tp for (_, tp) in by_key})
        for other in config_order[1:]:
            for tp in time_points:
                base_group = by_key.get((baseline, tp))
                other_group = by_key.get((other, tp))
                if not base_group or not other_group:
                    continue
                hd_base = [r.hausdorff95_mm for r in base_group]
                hd_other = [r.hausdorff95_mm for r in other_group]
                u_stat, p = mann_whitney_u(hd_base, hd_other)
                med_b, lo_b, hi_b = median_iqr(hd_base)
                med_o, lo_o, hi_o = median_iqr(hd_other)
                comparison_rows.append(
                    {
                        "case": f"{baseline}_vs_{other}",
                        "time_point": tp,
                        "n_baseline": len(hd_base),
                        "n_other": len(hd_other),
                        "median_baseline_mm": med_b,
                        "iqr_low_baseline_mm": lo_b,
                        "iqr_high_baseline_mm": hi_b,
                        "median_other_mm": med_o,
                        "iqr_low_other_mm": lo_o,
                        "iqr_high_other_mm": hi_o,
                        "relative_difference_pct": relative_median_difference(
                            hd_base, hd_other
                        ),
                        "u_statistic": u_stat,
                        "p_value": p,
                        "exact": len(hd_base) + len(hd_other) <= _EXACT_LIMIT,
                        "significant": p < alpha,
                    }
                )
    return summary_rows, comparison_rows
