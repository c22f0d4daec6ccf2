"""Marchenko-Pastur PCA denoising of multi-echo dynamic series.

Every sliding cubic patch is unfolded into a (patch voxels x measurements)
Casorati matrix; the eigenvalue spectrum of its mean-centered covariance is
split into signal and noise parts by the iterative Marchenko-Pastur
partition criterion, sub-threshold components are zeroed, and overlapping
patch estimates are combined by uniform averaging. The byproducts are a
per-voxel noise-sigma map and a retained-rank map.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .grid import UNIT_SIGNAL, VoxelGrid

# eigenvalues this small relative to the largest are structural zeros, not
# noise: keeps the partition exact on noiseless low-rank stacks
_EIG_FLOOR_REL = 1e-12


@dataclass
class MeasurementStack:
    """Measurement volumes sharing one geometry, ordered as (dynamic, echo)."""

    volumes: list
    labels: list | None = None

    def __post_init__(self):
        if len(self.volumes) < 2:
            raise ConfigError("a measurement stack needs M >= 2 volumes")
        first = self.volumes[0]
        for v in self.volumes[1:]:
            if not first.same_geometry(v):
                raise ContractViolation("stack volumes must share dims and affine")
        if self.labels is not None and len(self.labels) != len(self.volumes):
            raise ContractViolation("labels length must match volume count")

    @property
    def m(self) -> int:
        return len(self.volumes)

    @property
    def geometry(self):
        return self.volumes[0].geometry

    def as_array(self) -> np.ndarray:
        """Stack data as (nx, ny, nz, M) float64."""
        return np.stack([np.asarray(v.data, float) for v in self.volumes], axis=-1)

    @classmethod
    def from_dynamics(cls, dynamics) -> "MeasurementStack":
        vols, labels = [], []
        for dyn in dynamics:
            for e, echo in enumerate(dyn.echoes):
                vols.append(echo)
                labels.append((dyn.index, e))
        return cls(vols, labels)

    def split_dynamics(self, reference) -> list:
        """Regroup volumes into dynamics shaped like `reference`."""
        from .relaxometry import MultiEchoDynamic

        out = []
        pos = 0
        for dyn in reference:
            n = len(dyn.echoes)
            echoes = [
                self.volumes[pos + e].copy_with(self.volumes[pos + e].data)
                for e in range(n)
            ]
            out.append(MultiEchoDynamic(echoes, dyn.tes_ms, index=dyn.index))
            pos += n
        if pos != len(self.volumes):
            raise ContractViolation("dynamic structure does not match stack size")
        return out


@dataclass
class NoiseMap:
    sigma: VoxelGrid
    rank: VoxelGrid

    def __post_init__(self):
        if np.any(np.asarray(self.sigma.data) < 0):
            raise ContractViolation("noise sigma must be >= 0 everywhere")


def _coverage_1d(n: int, side: int) -> np.ndarray:
    i = np.arange(n)
    return np.minimum.reduce([i + 1, np.full(n, side), np.full(n, n - side + 1), n - i]).clip(min=1)


def _mp_partition(vals_desc: np.ndarray, n_samples: int):
    """Vectorised Marchenko-Pastur eigenvalue partition.

    vals_desc: (B, R) noise-or-signal eigenvalues, descending, >= 0.
    Returns (rank, sigma2): number of signal components and noise variance
    per row. Scanning p upward, the remaining spectrum is declared noise at
    the first p where the spread-implied variance (vals[p]-vals[min]) /
    (4*sqrt((R-p)/n)) drops to or below the tail mean; <= (not <) makes a
    noiseless low-rank spectrum resolve to its exact rank.
    """
    b, r = vals_desc.shape
    csum = np.cumsum(vals_desc[:, ::-1], axis=1)[:, ::-1]
    p = np.arange(r)
    remaining = r - p
    tail = csum / remaining
    gamma = remaining / float(n_samples)
    edge = (vals_desc - vals_desc[:, -1:]) / (4.0 * np.sqrt(gamma))
    is_noise = edge <= tail
    is_noise[:, -1] = True  # single remaining eigenvalue: spread 0 <= tail
    rank = np.argmax(is_noise, axis=1)
    sigma2 = tail[np.arange(b), rank]
    return rank, sigma2


def mppca_denoise(
    stack: MeasurementStack,
    patch_radius: int = 2,
    aggregate: str = "average",
    threads: int = 1,
) -> tuple[MeasurementStack, NoiseMap]:
    """Denoise a measurement stack patchwise.

    aggregate: "average" combines every sliding patch estimate covering a
    voxel uniformly; "center" keeps only the patch-center estimate (faster,
    used for previews). Output geometry matches the input. Results are
    independent of `threads` because chunk results are merged in fixed
    chunk order.
    """
    if patch_radius < 1:
        raise ConfigError("patch_radius must be >= 1")
    if aggregate not in ("average", "center"):
        raise ConfigError(f"unknown aggregation {aggregate!r}")
    data = stack.as_array()
    nx, ny, nz, m = data.shape
    # patch shrinks per axis on thin volumes so every window stays in bounds
    side = tuple(min(2 * patch_radius + 1, n) for n in (nx, ny, nz))
    n_patch_vox = int(np.prod(side))
    if n_patch_vox < m:
        warnings.warn(
            f"patch of {n_patch_vox} voxels is smaller than M={m}; "
            "noise estimation degrades",
            stacklevel=2,
        )
    n_samples = max(n_patch_vox - 1, 1)  # mean-centered covariance

    win = np.lib.stride_tricks.sliding_window_view(data, side, axis=(0, 1, 2))
    pg = win.shape[:3]  # patch-origin grid
    nvox = nx * ny * nz

    center = np.array(side) // 2
    center_col = int(np.ravel_multi_index(tuple(center), side))
    center_off = int((center[0] * ny + center[1]) * nz + center[2])
    # local voxel offsets of a patch, flattened in C order to match `win`
    lx, ly, lz = np.meshgrid(*[np.arange(s) for s in side], indexing="ij")
    local_flat = ((lx * ny + ly) * nz + lz).reshape(-1)  # full-volume strides

    iy, iz = np.meshgrid(np.arange(pg[1]), np.arange(pg[2]), indexing="ij")
    row_base = (iy * nz + iz).reshape(-1)  # per-row patch origins, minus the ix term

    def run_chunk(ix: int):
        # one x-row of patch origins at a time keeps the copied window small
        x = np.ascontiguousarray(
            win[ix].reshape(pg[1] * pg[2], m, n_patch_vox).transpose(0, 2, 1)
        )
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        cov = np.matmul(xc.transpose(0, 2, 1), xc) / n_samples
        vals, vecs = np.linalg.eigh(cov)
        vals = np.clip(vals, 0.0, None)
        r = min(m, n_samples)
        vd = vals[:, ::-1][:, :r].copy()
        floor = _EIG_FLOOR_REL * vd[:, :1]
        vd[vd <= floor] = 0.0
        rank, sigma2 = _mp_partition(vd, n_samples)
        keep = np.arange(m)[None, :] >= (m - rank)[:, None]  # ascending order
        proj = vecs * keep[:, None, :]
        xhat = np.matmul(np.matmul(xc, proj), proj.transpose(0, 2, 1)) + mu
        return xhat, np.sqrt(sigma2), rank.astype(float)

    acc = np.zeros((nvox, m))
    sig_acc = np.zeros(nvox)
    rank_acc = np.zeros(nvox)

    def merge(ix: int, result):
        xhat, sig, rank = result
        base = ix * ny * nz + row_base
        if aggregate == "center":
            cidx = base + center_off
            acc[cidx] += xhat[:, center_col]
            sig_acc[cidx] += sig
            rank_acc[cidx] += rank
            return
        idx = (base[:, None] + local_flat[None, :]).reshape(-1)
        for ch in range(m):
            acc[:, ch] += np.bincount(idx, weights=xhat[:, :, ch].reshape(-1), minlength=nvox)
        sig_acc[:] += np.bincount(idx, weights=np.repeat(sig, n_patch_vox), minlength=nvox)
        rank_acc[:] += np.bincount(idx, weights=np.repeat(rank, n_patch_vox), minlength=nvox)

    rows = list(range(pg[0]))
    if threads > 1:
        # bounded batches: results merged in fixed row order, independent of
        # scheduling, and at most `threads` row buffers alive at once
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for start in range(0, len(rows), threads):
                batch = rows[start:start + threads]
                for ix, res in zip(batch, pool.map(run_chunk, batch)):
                    merge(ix, res)
    else:
        for ix in rows:
            merge(ix, run_chunk(ix))

    if aggregate == "average":
        cov1 = [_coverage_1d(n, s) for n, s in zip((nx, ny, nz), side)]
        cnt = (cov1[0][:, None, None] * cov1[1][None, :, None] * cov1[2][None, None, :])
        cnt = cnt.reshape(-1).astype(float)
    else:
        cnt = np.zeros(nvox)
        ix_all = np.repeat(np.arange(pg[0]), pg[1] * pg[2])
        cidx = ix_all * ny * nz + np.tile(row_base, pg[0]) + center_off
        cnt[cidx] = 1.0
        # voxels no patch center reaches fall back to their input values
        uncovered = cnt == 0
        acc[uncovered] = data.reshape(-1, m)[uncovered]
        sig_acc[uncovered] = 0.0
        cnt[uncovered] = 1.0

    out = acc / cnt[:, None]
    sigma = (sig_acc / cnt).reshape(nx, ny, nz)
    rank = (rank_acc / cnt).reshape(nx, ny, nz)

    ref = stack.volumes[0]
    out_vols = [
        stack.volumes[i].copy_with(out[:, i].reshape(nx, ny, nz))
        for i in range(m)
    ]
    noise = NoiseMap(
        sigma=VoxelGrid(sigma, ref.affine.copy(), UNIT_SIGNAL),
        rank=VoxelGrid(rank, ref.affine.copy(), UNIT_SIGNAL),
    )
    return MeasurementStack(out_vols, stack.labels), noise
