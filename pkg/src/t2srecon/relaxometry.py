"""Per-voxel mono-exponential T2* decay fitting.

The estimator is ordinary least squares on (TE, ln S): exact on noiseless
decays, deterministic, and fast enough to fit whole volumes per dynamic.
A voxel fails when any sample is nonpositive or non-finite, when the log
slope is non-negative (no decay), or when the implied T2* exceeds the cap.
Failed voxels carry a 0 sentinel in the T2* map and are excluded from all
downstream statistics via the mask, never via the sentinel value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .grid import UNIT_LABEL, UNIT_MS, UNIT_SIGNAL, VoxelGrid

T2STAR_CAP_MS = 2000.0


@dataclass
class MultiEchoDynamic:
    """One time point: echo volumes sharing geometry, with their echo times."""

    echoes: list
    tes_ms: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.tes_ms = np.asarray(self.tes_ms, dtype=float).reshape(-1)
        if len(self.echoes) < 2:
            raise ConfigError("a dynamic needs at least 2 echoes")
        if len(self.echoes) != len(self.tes_ms):
            raise ContractViolation("echo count and TE count differ")
        if np.any(self.tes_ms <= 0) or np.any(np.diff(self.tes_ms) <= 0):
            raise ConfigError("echo times must be strictly increasing and > 0")
        first = self.echoes[0]
        for e in self.echoes[1:]:
            if not first.same_geometry(e):
                raise ContractViolation("echo volumes must share geometry")

    @property
    def geometry(self):
        return self.echoes[0].geometry

    def signal_stack(self) -> np.ndarray:
        """Echo signals as (nvox, n_echoes), voxels x-fastest."""
        return np.stack([np.asarray(e.data, float).reshape(-1) for e in self.echoes], axis=1)


@dataclass
class T2StarMap:
    """Voxelwise fit result: T2* (ms), S0, log-domain r², failure mask."""

    t2star: VoxelGrid
    s0: VoxelGrid
    failed: VoxelGrid
    fit_r2: VoxelGrid
    dynamic_index: int = 0

    def __post_init__(self):
        for g in (self.s0, self.failed, self.fit_r2):
            if not self.t2star.same_geometry(g):
                raise ContractViolation("T2* map channels must share geometry")

    @property
    def failed_mask(self) -> np.ndarray:
        return np.asarray(self.failed.data, bool)

    @property
    def valid_mask(self) -> np.ndarray:
        return ~self.failed_mask


@dataclass(frozen=True)
class FitSummary:
    fraction_failed: float
    median_t2star_ms: float
    n_voxels: int


def fit_voxel(signals, tes_ms, cap_ms: float = T2STAR_CAP_MS):
    """Fit one decay. Returns (s0, t2star_ms, r2, failed)."""
    signals = np.asarray(signals, dtype=float).reshape(-1)
    tes = np.asarray(tes_ms, dtype=float).reshape(-1)
    if signals.shape != tes.shape:
        raise ContractViolation("signals and echo times differ in length")
    if len(tes) < 2:
        raise ContractViolation("need at least 2 echoes to fit")
    s0, t2s, r2, failed = _fit_stack(signals[None, :], tes, cap_ms)
    return float(s0[0]), float(t2s[0]), float(r2[0]), bool(failed[0])


def _fit_stack(sig: np.ndarray, tes: np.ndarray, cap_ms: float):
    """Vectorised log-linear OLS over rows of sig (n, E)."""
    n, e = sig.shape
    bad = ~np.all(np.isfinite(sig) & (sig > 0), axis=1)
    # placeholder keeps the log finite on rejected samples (incl. NaN/inf);
    # the bad mask already dooms those rows
    safe = np.where(np.isfinite(sig) & (sig > 0), sig, 1.0)
    y = np.log(safe)
    x = tes - tes.mean()
    sxx = float(np.sum(x * x))
    ybar = y.mean(axis=1)
    b = (y @ x) / sxx
    a = ybar
    # slope >= 0 means no decay; cap rejects divergent near-flat fits
    with np.errstate(divide="ignore", invalid="ignore"):
        t2s = np.where(b < 0, -1.0 / b, 0.0)
    failed = bad | (b >= 0) | (t2s > cap_ms)
    resid = y - (a[:, None] + np.outer(b, x))
    ss_res = np.sum(resid * resid, axis=1)
    ss_tot = np.sum((y - ybar[:, None]) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 1.0)
    s0 = np.exp(a + b * (-tes.mean()))
    t2s = np.where(failed, 0.0, t2s)
    s0 = np.where(failed, 0.0, s0)
    r2 = np.where(failed, 0.0, r2)
    return s0, t2s, r2, failed


def map_dynamic(
    dyn: MultiEchoDynamic, cap_ms: float = T2STAR_CAP_MS
) -> tuple[T2StarMap, FitSummary]:
    """Fit every voxel of a dynamic. Returns the map and a summary record."""
    sig = dyn.signal_stack()
    s0, t2s, r2, failed = _fit_stack(sig, dyn.tes_ms, cap_ms)
    ref = dyn.echoes[0]
    dims = ref.dims
    out = T2StarMap(
        t2star=VoxelGrid(t2s.reshape(dims), ref.affine.copy(), UNIT_MS),
        s0=VoxelGrid(s0.reshape(dims), ref.affine.copy(), UNIT_SIGNAL),
        failed=VoxelGrid(failed.reshape(dims), ref.affine.copy(), UNIT_LABEL),
        fit_r2=VoxelGrid(r2.reshape(dims), ref.affine.copy(), UNIT_SIGNAL),
        dynamic_index=dyn.index,
    )
    ok = ~failed
    median = float(np.median(t2s[ok])) if ok.any() else 0.0
    summary = FitSummary(
        fraction_failed=float(failed.mean()),
        median_t2star_ms=median,
        n_voxels=int(failed.size),
    )
    return out, summary


def decay_signal(s0, t2star_ms, tes_ms) -> np.ndarray:
    """Evaluate S0 * exp(-TE / T2*) for scalar or array s0/t2star."""
    s0 = np.asarray(s0, dtype=float)
    t2s = np.asarray(t2star_ms, dtype=float)
    tes = np.asarray(tes_ms, dtype=float)
    with np.errstate(divide="ignore", under="ignore"):
        rate = np.where(t2s > 0, 1.0 / np.where(t2s > 0, t2s, 1.0), np.inf)
        out = s0[..., None] * np.exp(-tes * rate[..., None])
    return np.where(np.isfinite(out), out, 0.0)
