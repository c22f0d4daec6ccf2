"""Segmentation metrics, per-organ T2* statistics, consistency checks,
growth-curve regression, and the two-sample significance test.

Fit-failed voxels never enter a statistic: masking keys off the failure
mask, not the 0 sentinel in the T2* map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .errors import ConfigError, ContractViolation, RegressionError
from .grid import VoxelGrid

# fixed ten-organ code table; 0 = background
ORGAN_LABELS = {
    1: "lungs",
    2: "liver",
    3: "stomach",
    4: "spleen",
    5: "kidney_pelvis",
    6: "kidney_parenchyma",
    7: "bladder",
    8: "thymus",
    9: "gallbladder",
    10: "adrenal_glands",
}
ALL_ORGAN_LABELS = tuple(sorted(ORGAN_LABELS))


def organ_name(label: int) -> str:
    return ORGAN_LABELS.get(int(label), f"label{int(label)}")


@dataclass
class LabelMap:
    """Label grid restricted to the ten-organ scheme plus background."""

    grid: VoxelGrid

    def __post_init__(self):
        data = np.asarray(self.grid.data)
        if not np.issubdtype(data.dtype, np.integer):
            if np.any(data != np.round(data)):
                raise ContractViolation("label map values must be integral")
            data = data.astype(np.int64)
        bad = set(np.unique(data)) - set(ALL_ORGAN_LABELS) - {0}
        if bad:
            raise ContractViolation(f"label codes outside the organ scheme: {sorted(bad)}")

    @property
    def data(self) -> np.ndarray:
        return np.asarray(self.grid.data).astype(np.int64)

    def present_labels(self) -> list:
        return sorted(set(np.unique(self.data)) - {0})

    def mask(self, label: int) -> np.ndarray:
        return self.data == int(label)


@dataclass(frozen=True)
class OrganStats:
    label: int
    voxel_count: int          # all labelled voxels, failed or not
    volume_ml: float
    t2s_mean_ms: float        # nan when no valid voxel
    t2s_sd_ms: float
    excluded_failed: int

    @property
    def n_valid(self) -> int:
        return self.voxel_count - self.excluded_failed

    @property
    def name(self) -> str:
        return organ_name(self.label)


@dataclass(frozen=True)
class GrowthCurve:
    organ: int
    n: int
    slope: float
    intercept: float
    r2: float
    pearson_r: float


@dataclass(frozen=True)
class ConsistencyResult:
    dynamic_means: tuple
    mean: float
    sigma: float
    band: tuple
    recon_mean: float
    passed: bool


def dice(a: LabelMap, b: LabelMap, label: int) -> float:
    """Dice overlap for one label; 1.0 when both empty, 0.0 when one is."""
    if not a.grid.same_geometry(b.grid):
        raise ContractViolation("dice inputs must share geometry")
    ma, mb = a.mask(label), b.mask(label)
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(ma, mb).sum())
    return 2.0 * inter / (na + nb)


def organ_stats(t2s: VoxelGrid, failed, labels: LabelMap) -> list:
    """Per-organ T2* statistics over non-failed voxels.

    `failed` is a boolean array or grid aligned with t2s. Organs with zero
    valid voxels report nan means. Volume counts every labelled voxel;
    failed fitting does not shrink anatomy.
    """
    fail_data = np.asarray(failed.data if isinstance(failed, VoxelGrid) else failed, bool)
    if not labels.grid.same_geometry(t2s):
        raise ContractViolation("label map and T2* map must share geometry")
    if fail_data.shape != t2s.dims:
        raise ContractViolation("failure mask and T2* map must share dims")
    values = np.asarray(t2s.data, float)
    voxvol_ml = t2s.voxel_volume_mm3 / 1000.0
    out = []
    for lab in labels.present_labels():
        m = labels.mask(lab)
        count = int(m.sum())
        valid = m & ~fail_data
        nval = int(valid.sum())
        if nval > 0:
            v = values[valid]
            mean = float(v.mean())
            sd = float(v.std(ddof=1)) if nval > 1 else 0.0
        else:
            mean, sd = float("nan"), float("nan")
        out.append(
            OrganStats(
                label=int(lab),
                voxel_count=count,
                volume_ml=count * voxvol_ml,
                t2s_mean_ms=mean,
                t2s_sd_ms=sd,
                excluded_failed=count - nval,
            )
        )
    return out


def consistency_check(dynamic_means, recon_mean: float) -> ConsistencyResult:
    """Is the reconstructed mean inside the 2-sigma band of dynamic means?

    Sigma is the sample SD (n-1 denominator); the band is inclusive.
    """
    means = np.asarray(dynamic_means, dtype=float).reshape(-1)
    if means.size < 2:
        raise ContractViolation("consistency check needs at least 2 dynamic means")
    mean = float(means.mean())
    sigma = float(means.std(ddof=1))
    lo, hi = mean - 2.0 * sigma, mean + 2.0 * sigma
    recon_mean = float(recon_mean)
    return ConsistencyResult(
        dynamic_means=tuple(means.tolist()),
        mean=mean,
        sigma=sigma,
        band=(lo, hi),
        recon_mean=recon_mean,
        passed=bool(lo <= recon_mean <= hi),
    )


def fit_growth_curve(points, organ: int = 0) -> GrowthCurve:
    """OLS line through (GA weeks, value) points.

    r2 is the squared Pearson correlation; pearson_r keeps its sign since
    trend direction matters. Constant values give slope 0 and r2 = 0.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractViolation("growth points must be (ga, value) pairs")
    if len(pts) < 3:
        raise ContractViolation("growth curve needs at least 3 points")
    ga, val = pts[:, 0], pts[:, 1]
    sxx = float(np.sum((ga - ga.mean()) ** 2))
    if sxx == 0:
        raise RegressionError("gestational ages are all equal; slope undefined")
    sxy = float(np.sum((ga - ga.mean()) * (val - val.mean())))
    syy = float(np.sum((val - val.mean()) ** 2))
    slope = sxy / sxx
    intercept = float(val.mean() - slope * ga.mean())
    if syy == 0:
        r = 0.0
    else:
        r = sxy / math.sqrt(sxx * syy)
    return GrowthCurve(
        organ=int(organ),
        n=len(pts),
        slope=slope,
        intercept=intercept,
        r2=r * r,
        pearson_r=r,
    )


def welch_t_test(sample_a, sample_b):
    """Welch unequal-variance t-test. Returns (t, dof, two-sided p).

    Degenerate inputs (both variances zero) resolve by convention: p = 1
    when the means agree, p = 0 when they differ.
    """
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    if len(a) < 2 or len(b) < 2:
        raise ContractViolation("each sample needs n >= 2")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return 0.0, float(na + nb - 2), 1.0
        return float("inf") if a.mean() > b.mean() else float("-inf"), float(na + nb - 2), 0.0
    se2 = va / na + vb / nb
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    dof = se2 * se2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(student_t.sf(abs(t), dof))
    return float(t), float(dof), min(p, 1.0)


# ---------------------------------------------------------------------------
# delimited outputs

def write_organ_stats_csv(rows, path) -> None:
    """rows: iterable of (case, ga_weeks, OrganStats)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "GA", "organ", "n", "volume_ml", "t2s_mean", "t2s_sd"])
        for case, ga, st in rows:
            mean = "" if math.isnan(st.t2s_mean_ms) else f"{st.t2s_mean_ms:.6f}"
            sd = "" if math.isnan(st.t2s_sd_ms) else f"{st.t2s_sd_ms:.6f}"
            w.writerow([case, f"{ga:g}", st.name, st.n_valid, f"{st.volume_ml:.6f}", mean, sd])


def read_organ_stats_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_growth_csv(rows, path) -> None:
    """rows: iterable of (metric name, GrowthCurve)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["organ", "metric", "n", "slope", "intercept", "r2", "pearson_r"])
        for metric, c in rows:
            w.writerow(
                [organ_name(c.organ), metric, c.n, f"{c.slope:.6f}",
                 f"{c.intercept:.6f}", f"{c.r2:.6f}", f"{c.pearson_r:.6f}"]
            )


def read_growth_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_consistency_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_consistency_csv(rows, path) -> None:
    """rows: iterable of (case, organ_label, ConsistencyResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["case", "organ", "n_dynamics", "mean", "sigma",
             "band_lo", "band_hi", "recon_mean", "pass"]
        )
        for case, lab, res in rows:
            w.writerow(
                [case, organ_name(lab), len(res.dynamic_means), f"{res.mean:.6f}",
                 f"{res.sigma:.6f}", f"{res.band[0]:.6f}", f"{res.band[1]:.6f}",
                 f"{res.recon_mean:.6f}", int(res.passed)]
            )
