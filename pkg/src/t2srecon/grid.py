"""Voxel grids, affine geometry, resampling and slice-profile kernels.

Conventions: a volume is a scalar array of shape (nx, ny, nz); the 4x4
affine maps voxel indices (i, j, k, 1) to world millimetres. World
coordinates are used everywhere outside this module; index arithmetic
stays inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, GeometryError

FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

UNIT_SIGNAL = "signal"
UNIT_MS = "ms"
UNIT_LABEL = "label"
_UNITS = (UNIT_SIGNAL, UNIT_MS, UNIT_LABEL)


def _as_affine(mat) -> np.ndarray:
    m = np.asarray(mat, dtype=float)
    if m.shape != (4, 4):
        raise GeometryError(f"affine must be 4x4, got {m.shape}")
    if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0)):
        raise GeometryError("affine last row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise GeometryError("affine upper-left 3x3 is singular")
    return m


def spacing_from_affine(affine: np.ndarray) -> np.ndarray:
    """Voxel spacing in mm: column norms of the direction block."""
    return np.linalg.norm(np.asarray(affine)[:3, :3], axis=0)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid without the data."""

    dims: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "affine", _as_affine(self.affine))
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise GeometryError(f"dims must be three integers >= 1, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def spacing(self) -> np.ndarray:
        return spacing_from_affine(self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (nvox, 3), x fastest."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        ijk = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return apply_affine(self.affine, ijk)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world box covering all voxel centers."""
        nx, ny, nz = self.dims
        corners = np.array(
            [(i, j, k) for i in (0, nx - 1) for j in (0, ny - 1) for k in (0, nz - 1)],
            dtype=float,
        )
        w = apply_affine(self.affine, corners)
        return w.min(axis=0), w.max(axis=0)


@dataclass
class VoxelGrid:
    """Scalar 3D raster with spacing and index-to-world affine."""

    data: np.ndarray
    affine: np.ndarray
    unit: str = UNIT_SIGNAL
    spacing: np.ndarray = field(default=None)  # derived from affine when omitted

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryError(f"volume data must be 3D, got {self.data.ndim}D")
        if any(d < 1 for d in self.data.shape):
            raise GeometryError("volume dims must all be >= 1")
        self.affine = _as_affine(self.affine)
        derived = spacing_from_affine(self.affine)
        if self.spacing is None:
            self.spacing = derived
        else:
            self.spacing = np.asarray(self.spacing, dtype=float)
            if self.spacing.shape != (3,) or np.any(self.spacing <= 0):
                raise GeometryError("spacing must be three positive values")
            if not np.allclose(self.spacing, derived, rtol=1e-3, atol=1e-3):
                raise GeometryError(
                    f"spacing {self.spacing} inconsistent with affine columns {derived}"
                )
        if self.unit not in _UNITS:
            raise ContractViolation(f"unknown unit tag {self.unit!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> GridSpec:
        return GridSpec(self.data.shape, self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def copy_with(self, data: np.ndarray, unit: str | None = None) -> "VoxelGrid":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError("replacement data has different dims")
        return VoxelGrid(data, self.affine.copy(), unit or self.unit)

    def same_geometry(self, other: "VoxelGrid", tol: float = 1e-6) -> bool:
        return self.dims == other.dims and np.allclose(
            self.affine, other.affine, atol=tol
        )


def apply_affine(affine: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 4x4 affine to points of shape (..., 3)."""
    pts = np.asarray(pts, dtype=float)
    return pts @ np.asarray(affine)[:3, :3].T + np.asarray(affine)[:3, 3]


def index_to_world(grid: VoxelGrid | GridSpec, ijk) -> np.ndarray:
    """Map (possibly fractional) voxel indices to world mm."""
    return apply_affine(grid.affine, ijk)


def world_to_index(grid: VoxelGrid | GridSpec, xyz) -> np.ndarray:
    """Map world mm to fractional voxel indices."""
    return apply_affine(np.linalg.inv(grid.affine), xyz)


def compose(*affines: np.ndarray) -> np.ndarray:
    """Compose 4x4 affines left to right: compose(A, B) applies B first."""
    out = np.eye(4)
    for a in affines:
        out = out @ _as_affine(a)
    return out


# ---------------------------------------------------------------------------
# interpolation

def sample_trilinear(
    vol: np.ndarray, inv_affine: np.ndarray, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear sample of `vol` at world points.

    Returns (values, valid); out-of-field points get value 0 and valid False.
    A point is in-field while its 8 interpolation corners exist, i.e. its
    fractional index lies in [0, n-1] per axis.
    """
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 3)
    ijk = flat @ inv_affine[:3, :3].T + inv_affine[:3, 3]
    nx, ny, nz = vol.shape
    eps = 1e-9
    x, y, z = ijk[:, 0], ijk[:, 1], ijk[:, 2]
    valid = (
        (x >= -eps) & (x <= nx - 1 + eps)
        & (y >= -eps) & (y <= ny - 1 + eps)
        & (z >= -eps) & (z <= nz - 1 + eps)
    )
    # clamp in place, then mode="nearest" makes the edge behaviour exact
    np.clip(x, 0.0, float(nx - 1), out=x)
    np.clip(y, 0.0, float(ny - 1), out=y)
    np.clip(z, 0.0, float(nz - 1), out=z)
    vals = ndimage.map_coordinates(
        np.asarray(vol, dtype=float), ijk.T, order=1,
        mode="nearest", prefilter=False,
    )
    vals[~valid] = 0.0
    return vals.reshape(pts.shape[:-1]), valid.reshape(pts.shape[:-1])


def sample_nearest(
    vol: np.ndarray, inv_affine: np.ndarray, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour sample; same contract as sample_trilinear."""
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 3)
    ijk = flat @ inv_affine[:3, :3].T + inv_affine[:3, 3]
    idx = np.rint(ijk).astype(np.int64)
    n = np.array(vol.shape)
    valid = np.all((idx >= 0) & (idx < n), axis=1)
    idx = np.clip(idx, 0, n - 1)
    vals = vol[idx[:, 0], idx[:, 1], idx[:, 2]]
    vals = np.where(valid, vals, 0)
    return vals.reshape(pts.shape[:-1]), valid.reshape(pts.shape[:-1])


def scatter_trilinear(
    shape: tuple[int, int, int],
    inv_affine: np.ndarray,
    pts: np.ndarray,
    values: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of trilinear sampling: spread weighted values into a grid.

    Returns (value_accumulator, weight_accumulator), both float64 of `shape`.
    Out-of-field points are dropped. Accumulation order is fixed by input
    order, so results are deterministic.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    values = np.asarray(values, dtype=float).reshape(-1)
    w = np.ones_like(values) if weights is None else np.asarray(weights, float).reshape(-1)
    ijk = pts @ inv_affine[:3, :3].T + inv_affine[:3, 3]
    nx, ny, nz = shape
    eps = 1e-9
    x, y, z = ijk[:, 0], ijk[:, 1], ijk[:, 2]
    ok = (
        (x >= -eps) & (x <= nx - 1 + eps)
        & (y >= -eps) & (y <= ny - 1 + eps)
        & (z >= -eps) & (z <= nz - 1 + eps)
    )
    x, y, z, values, w = x[ok], y[ok], z[ok], values[ok], w[ok]
    x = np.minimum(np.maximum(x, 0.0), float(nx - 1))
    y = np.minimum(np.maximum(y, 0.0), float(ny - 1))
    z = np.minimum(np.maximum(z, 0.0), float(nz - 1))
    ix = np.minimum(x.astype(np.int64), nx - 2)
    iy = np.minimum(y.astype(np.int64), ny - 2)
    iz = np.minimum(z.astype(np.int64), nz - 2)
    np.maximum(ix, 0, out=ix)
    np.maximum(iy, 0, out=iy)
    np.maximum(iz, 0, out=iz)
    fx, fy, fz = x - ix, y - iy, z - iz
    sy, sz = ny * nz, nz
    base = ix * sy + iy * sz + iz
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    nvox = nx * ny * nz
    acc = np.zeros(nvox)
    wacc = np.zeros(nvox)
    corners = (
        (base, gx * gy * gz),
        (base + 1, gx * gy * fz),
        (base + sz, gx * fy * gz),
        (base + sz + 1, gx * fy * fz),
        (base + sy, fx * gy * gz),
        (base + sy + 1, fx * gy * fz),
        (base + sy + sz, fx * fy * gz),
        (base + sy + sz + 1, fx * fy * fz),
    )
    vw = values * w
    for idx, cw in corners:
        acc += np.bincount(idx, weights=vw * cw, minlength=nvox)
        wacc += np.bincount(idx, weights=w * cw, minlength=nvox)
    return acc.reshape(shape), wacc.reshape(shape)


def resample(
    grid: VoxelGrid, target: GridSpec | VoxelGrid, interp: str = "trilinear"
) -> tuple[VoxelGrid, np.ndarray]:
    """Resample onto a target geometry.

    Returns the resampled grid plus a boolean validity mask; voxels whose
    world position falls outside the source field are 0 / False.
    """
    if interp not in ("trilinear", "nearest"):
        raise ContractViolation(f"unknown interpolation {interp!r}")
    tgt = target.geometry if isinstance(target, VoxelGrid) else target
    pts = tgt.voxel_centers()
    inv = np.linalg.inv(grid.affine)
    src = np.asarray(grid.data, dtype=float)
    if interp == "trilinear":
        vals, valid = sample_trilinear(src, inv, pts)
    else:
        vals, valid = sample_nearest(src, inv, pts)
    data = vals.reshape(tgt.dims)
    out = VoxelGrid(data, tgt.affine.copy(), grid.unit)
    return out, valid.reshape(tgt.dims)


# ---------------------------------------------------------------------------
# slice-profile kernel

@dataclass(frozen=True)
class PsfSpec:
    """Anisotropic Gaussian slice-acquisition profile.

    through_fwhm_mm acts along the slice normal (slice thickness),
    inplane_fwhm_mm isotropically in the slice plane. support_radius is in
    multiples of sigma.
    """

    through_fwhm_mm: float = 3.0
    inplane_fwhm_mm: float = 3.75
    support_radius: float = 2.5

    def __post_init__(self):
        if self.through_fwhm_mm <= 0 or self.inplane_fwhm_mm <= 0:
            raise ContractViolation("PSF FWHMs must be > 0")
        if self.support_radius < 2:
            raise ContractViolation("PSF support radius must be >= 2 sigma")

    @property
    def sigmas(self) -> np.ndarray:
        """(in-plane, in-plane, through-plane) sigma in mm."""
        s_in = self.inplane_fwhm_mm / FWHM_TO_SIGMA
        s_th = self.through_fwhm_mm / FWHM_TO_SIGMA
        return np.array([s_in, s_in, s_th])


@dataclass(frozen=True)
class PsfKernel:
    """Discrete PSF: world-frame offsets (K, 3) mm and weights summing to 1."""

    offsets: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)


def _complete_basis(normal: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis (u, v, n) with given third axis."""
    n = np.asarray(normal, dtype=float)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n)))] = 1.0
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=1)


def psf_weights(
    psf: PsfSpec, normal, spacing, inplane: bool = True
) -> PsfKernel:
    """Discrete Gaussian kernel oriented along a slice normal.

    `spacing` (scalar or per-axis triple, mm) sets the sample step of the
    kernel per (u, v, n) axis. With inplane=False only the through-plane
    profile is discretised (in-plane axes collapse to the centre sample).
    """
    normal = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        raise GeometryError("slice normal must be nonzero")
    if abs(norm - 1.0) > 1e-6:
        raise GeometryError("slice normal must be unit length")
    step = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
    if np.any(step <= 0):
        raise ContractViolation("kernel spacing must be > 0")
    sig = psf.sigmas
    basis = _complete_basis(normal / norm)
    axes = []
    for a in range(3):
        if a < 2 and not inplane:
            axes.append(np.array([0.0]))
            continue
        radius = psf.support_radius * sig[a]
        k = int(np.floor(radius / step[a] + 1e-12))
        axes.append(np.arange(-k, k + 1) * step[a])
    ou, ov, on = np.meshgrid(*axes, indexing="ij")
    local = np.stack([ou, ov, on], axis=-1).reshape(-1, 3)
    # support is the sigma-scaled ball, not the box product of the per-axis
    # ranges: corner samples past support_radius carry ~e^-9 of the mass but
    # would triple the kernel size
    mah2 = np.sum((local / sig) ** 2, axis=1)
    local = local[mah2 <= psf.support_radius**2 + 1e-9]
    # exp of large negative arguments underflows to 0, which is the intended limit
    with np.errstate(under="ignore"):
        logw = -0.5 * np.sum((local / sig) ** 2, axis=1)
        w = np.exp(logw - logw.max())
    w /= w.sum()
    offsets = local @ basis.T
    return PsfKernel(offsets=offsets, weights=w)


def gaussian_blur_grid(grid: VoxelGrid, sigma_mm: float) -> VoxelGrid:
    """Isotropic Gaussian blur in world mm (separable, on the index lattice)."""
    from scipy.ndimage import gaussian_filter

    if sigma_mm <= 0:
        return grid.copy_with(grid.data.copy())
    sig_vox = sigma_mm / grid.spacing
    return grid.copy_with(gaussian_filter(np.asarray(grid.data, float), sig_vox))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation in [-1, 1]; 0 when either input is constant."""
    a = np.asarray(a, float).reshape(-1)
    b = np.asarray(b, float).reshape(-1)
    if a.shape != b.shape:
        raise ContractViolation("ncc inputs must have identical size")
    ac = a - a.mean()
    bc = b - b.mean()
    na = float(np.linalg.norm(ac))
    nb = float(np.linalg.norm(bc))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(ac, bc) / (na * nb), -1.0, 1.0))


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, peak = reference dynamic range."""
    reference = np.asarray(reference, float)
    test = np.asarray(test, float)
    if reference.shape != test.shape:
        raise ContractViolation("psnr inputs must have identical shape")
    rng = float(reference.max() - reference.min())
    rmse = float(np.sqrt(np.mean((reference - test) ** 2)))
    if rmse == 0:
        return float("inf")
    return 20.0 * np.log10(rng / rmse)
