"""Rigid and free-form (cubic B-spline) spatial transforms.

Rigid transforms are parameterised by Euler angles in degrees (applied as
Rz @ Ry @ Rx) and a translation in mm, rotating about an explicit centre so
that parameter magnitudes stay interpretable for slice poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


def euler_to_matrix(angles_deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=float))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler(rot: np.ndarray) -> np.ndarray:
    """Inverse of euler_to_matrix (Rz @ Ry @ Rx convention), degrees."""
    r = np.asarray(rot, dtype=float)
    sy = -r[2, 0]
    sy = np.clip(sy, -1.0, 1.0)
    ay = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-9:
        ax = np.arctan2(r[2, 1], r[2, 2])
        az = np.arctan2(r[1, 0], r[0, 0])
    else:  # gimbal lock: fold az into ax
        ax = np.arctan2(-r[1, 2], r[1, 1])
        az = 0.0
    return np.rad2deg(np.array([ax, ay, az]))


def rotation_angle_deg(rot: np.ndarray) -> float:
    """Geodesic rotation angle of a 3x3 rotation matrix, degrees."""
    tr = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.rad2deg(np.arccos(tr)))


@dataclass
class RigidTransform:
    """6-DOF rigid motion: Euler angles (deg) and translation (mm) about a centre."""

    angles_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.angles_deg = np.asarray(self.angles_deg, dtype=float).reshape(3).copy()
        self.translation_mm = np.asarray(self.translation_mm, dtype=float).reshape(3).copy()
        self.center_mm = np.asarray(self.center_mm, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.zeros(3), np.zeros(3), np.asarray(center, dtype=float))

    def matrix(self) -> np.ndarray:
        rot = euler_to_matrix(self.angles_deg)
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = self.center_mm - rot @ self.center_mm + self.translation_mm
        return m

    @classmethod
    def from_matrix(cls, mat: np.ndarray, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        mat = np.asarray(mat, dtype=float)
        rot = mat[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ContractViolation("matrix is not a rigid transform")
        center = np.asarray(center, dtype=float)
        angles = matrix_to_euler(rot)
        translation = mat[:3, 3] - center + rot @ center
        return cls(angles, translation, center)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix()
        return np.asarray(pts, dtype=float) @ m[:3, :3].T + m[:3, 3]

    def inverse(self) -> "RigidTransform":
        return RigidTransform.from_matrix(np.linalg.inv(self.matrix()), self.center_mm)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix(), self.center_mm)

    def params(self) -> np.ndarray:
        return np.concatenate([self.angles_deg, self.translation_mm])

    def with_params(self, params) -> "RigidTransform":
        p = np.asarray(params, dtype=float).reshape(6)
        return RigidTransform(p[:3], p[3:], self.center_mm)

    def is_identity(self, atol: float = 1e-12) -> bool:
        return np.allclose(self.angles_deg, 0, atol=atol) and np.allclose(
            self.translation_mm, 0, atol=atol
        )


def pose_delta(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Residual between two poses: (rotation deg, displacement mm at the centre).

    Measures a ∘ b⁻¹ against identity; 0 when the transforms agree.
    """
    d = a.matrix() @ np.linalg.inv(b.matrix())
    ang = rotation_angle_deg(d[:3, :3])
    c = np.append(a.center_mm, 1.0)
    disp = float(np.linalg.norm((d @ c)[:3] - c[:3]))
    return ang, disp


# ---------------------------------------------------------------------------
# cubic B-spline free-form deformation

def bspline_basis(frac: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values (..., 4) for fractional offsets in [0, 1)."""
    f = np.asarray(frac, dtype=float)
    f2, f3 = f * f, f * f * f
    b0 = (1 - f) ** 3 / 6.0
    b1 = (3 * f3 - 6 * f2 + 4) / 6.0
    b2 = (-3 * f3 + 3 * f2 + 3 * f + 1) / 6.0
    b3 = f3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=-1)


@dataclass
class BSplineField:
    """Displacement field on a cubic B-spline control lattice.

    The lattice covers [origin, origin + (shape-1)*spacing] in world mm with
    control displacements (nx, ny, nz, 3); identity when all zero. Cubic
    interpolation makes the field C².
    """

    origin: np.ndarray
    spacing_mm: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.spacing_mm = np.asarray(self.spacing_mm, dtype=float).reshape(3)
        if np.any(self.spacing_mm <= 0):
            raise ContractViolation("control spacing must be > 0")
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 4 or self.coeffs.shape[3] != 3:
            raise ContractViolation("coeffs must have shape (nx, ny, nz, 3)")
        if min(self.coeffs.shape[:3]) < 4:
            raise ContractViolation("control lattice needs >= 4 points per axis")

    @classmethod
    def covering(cls, lo, hi, spacing_mm: float, margin_cp: int = 2) -> "BSplineField":
        """Identity field whose support covers the world box [lo, hi]."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        spacing = np.full(3, float(spacing_mm))
        n = np.ceil((hi - lo) / spacing).astype(int) + 1 + 2 * margin_cp
        n = np.maximum(n, 4)
        origin = lo - margin_cp * spacing
        return cls(origin, spacing, np.zeros((*n, 3)))

    def _support(self, pts: np.ndarray):
        s = (np.asarray(pts, dtype=float) - self.origin) / self.spacing_mm
        base = np.floor(s).astype(np.int64) - 1
        frac = s - np.floor(s)
        return base, frac

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        """Evaluate the displacement (N, 3) at world points (N, 3)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        base, frac = self._support(pts)
        bx = bspline_basis(frac[:, 0])
        by = bspline_basis(frac[:, 1])
        bz = bspline_basis(frac[:, 2])
        nx, ny, nz, _ = self.coeffs.shape
        out = np.zeros_like(pts)
        for a in range(4):
            ia = np.clip(base[:, 0] + a, 0, nx - 1)
            for b in range(4):
                jb = np.clip(base[:, 1] + b, 0, ny - 1)
                wab = bx[:, a] * by[:, b]
                for c in range(4):
                    kc = np.clip(base[:, 2] + c, 0, nz - 1)
                    w = wab * bz[:, c]
                    out += self.coeffs[ia, jb, kc] * w[:, None]
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts + self.displacement(pts.reshape(-1, 3)).reshape(pts.shape)

    def scatter_gradient(self, pts: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Adjoint of displacement(): accumulate per-point gradient vectors
        onto the control lattice. Returns an array shaped like coeffs."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        grads = np.asarray(grads, dtype=float).reshape(-1, 3)
        base, frac = self._support(pts)
        bx = bspline_basis(frac[:, 0])
        by = bspline_basis(frac[:, 1])
        bz = bspline_basis(frac[:, 2])
        nx, ny, nz, _ = self.coeffs.shape
        flat = np.zeros((nx * ny * nz, 3))
        for a in range(4):
            ia = np.clip(base[:, 0] + a, 0, nx - 1)
            for b in range(4):
                jb = np.clip(base[:, 1] + b, 0, ny - 1)
                wab = bx[:, a] * by[:, b]
                for c in range(4):
                    kc = np.clip(base[:, 2] + c, 0, nz - 1)
                    w = wab * bz[:, c]
                    lin = (ia * ny + jb) * nz + kc
                    for axis in range(3):
                        flat[:, axis] += np.bincount(
                            lin, weights=grads[:, axis] * w, minlength=nx * ny * nz
                        )
        return flat.reshape(nx, ny, nz, 3)

    def bending_energy(self) -> float:
        """Discrete bending energy: mean squared second differences of the
        control displacements along each lattice axis."""
        total = 0.0
        count = 0
        for axis in range(3):
            if self.coeffs.shape[axis] < 3:
                continue
            d2 = np.diff(self.coeffs, n=2, axis=axis)
            total += float(np.sum(d2 * d2))
            count += d2[..., 0].size
        return total / max(count, 1)

    def bending_gradient(self) -> np.ndarray:
        """Gradient of bending_energy w.r.t. the control displacements."""
        grad = np.zeros_like(self.coeffs)
        count = 0
        for axis in range(3):
            if self.coeffs.shape[axis] < 3:
                continue
            d2 = np.diff(self.coeffs, n=2, axis=axis)
            count += d2[..., 0].size
            # adjoint of the [1, -2, 1] stencil
            pad = [(0, 0)] * 4
            pad[axis] = (2, 2)
            d2p = np.pad(d2, pad)
            sl0 = [slice(None)] * 4
            sl1 = [slice(None)] * 4
            sl2 = [slice(None)] * 4
            n = self.coeffs.shape[axis]
            sl0[axis] = slice(2, 2 + n)
            sl1[axis] = slice(1, 1 + n)
            sl2[axis] = slice(0, n)
            grad += 2.0 * (d2p[tuple(sl0)] - 2.0 * d2p[tuple(sl1)] + d2p[tuple(sl2)])
        return grad / max(count, 1)

    def refine(self, spacing_mm: float) -> "BSplineField":
        """New finer lattice over the same support, initialised so that it
        reproduces the current field at the new control locations."""
        lo = self.origin + 2 * self.spacing_mm
        hi = self.origin + (np.array(self.coeffs.shape[:3]) - 3) * self.spacing_mm
        fine = BSplineField.covering(lo, hi, spacing_mm)
        nx, ny, nz, _ = fine.coeffs.shape
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        cp_world = fine.origin + np.stack([ii, jj, kk], axis=-1) * fine.spacing_mm
        disp = self.displacement(cp_world.reshape(-1, 3)).reshape(nx, ny, nz, 3)
        # B-spline interpolation is not strict interpolation of coefficients;
        # using sampled displacements as coefficients slightly smooths the
        # field, which is acceptable for a coarse-to-fine initialisation.
        fine.coeffs = disp
        return fine

    def max_displacement(self) -> float:
        return float(np.max(np.linalg.norm(self.coeffs, axis=-1))) if self.coeffs.size else 0.0
