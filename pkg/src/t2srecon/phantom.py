"""Digital fetal-body phantom and multi-echo acquisition simulator.

The phantom is analytic: a body ellipsoid envelope containing ten disjoint
organ ellipsoids, each carrying (S0, T2*) values with gestational-age
dependent linear ramps. Tissue parameter fields (S0 and the decay rate
R2* = 1/T2*) are blended across a thin smoothstep feather at shape
boundaries, so every voxel decays mono-exponentially and organ interiors
carry the table values exactly. Rendering works at any grid geometry.

The simulator moves the phantom rigidly per dynamic (plus optional
per-slice jitter), applies the slice-profile PSF by Gaussian quadrature at
oriented world offsets, evaluates each echo through the decay law, and
adds Gaussian or Rician noise from an independent per-dynamic RNG stream.
Ground-truth transforms, noiseless signals, and parameter maps are
retained for oracle use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .grid import (
    UNIT_LABEL,
    UNIT_MS,
    UNIT_SIGNAL,
    GridSpec,
    PsfKernel,
    PsfSpec,
    VoxelGrid,
    apply_affine,
    psf_weights,
)
from .relaxometry import MultiEchoDynamic
from .stats import ALL_ORGAN_LABELS as ALL_LABELS
from .transforms import RigidTransform, euler_to_matrix

GA_WEEKS_MIN = 17.0
GA_WEEKS_MAX = 40.0

# Simulator defaults, not physiology claims: T2* (ms) is linear in GA,
# anchored at week 28. Lungs rise and kidney parenchyma falls with GA;
# the lung value stays within the observed 194-299 ms band over weeks 17-40.
# (label: s0, t2s at GA 28, slope ms/week)
DEFAULT_ORGAN_TABLE = {
    1: (950.0, 240.0, 2.5),
    2: (1100.0, 60.0, 0.5),
    3: (1000.0, 180.0, 1.0),
    4: (1050.0, 85.0, 0.5),
    5: (1000.0, 220.0, 1.0),
    6: (1000.0, 130.0, -1.2),
    7: (900.0, 280.0, 1.5),
    8: (1000.0, 100.0, 0.8),
    9: (950.0, 160.0, 0.6),
    10: (1000.0, 90.0, 0.4),
}
BODY_TISSUE = (800.0, 70.0, 0.0)

# Nominal organ layout in normalized body coordinates (body = unit ball):
# (center, semi-axes). Pairs are separated along at least one coordinate
# axis with slack, so the construction-time disjointness check passes even
# after seeded jitter.
_ORGAN_LAYOUT = {
    1: ((0.0, -0.05, 0.42), (0.30, 0.25, 0.16)),
    2: ((-0.38, 0.05, 0.02), (0.26, 0.22, 0.14)),
    3: ((0.34, 0.0, 0.05), (0.16, 0.14, 0.11)),
    4: ((0.46, 0.40, -0.05), (0.10, 0.09, 0.08)),
    5: ((-0.30, 0.28, -0.42), (0.055, 0.05, 0.08)),
    6: ((0.30, 0.28, -0.42), (0.10, 0.09, 0.14)),
    7: ((0.0, -0.18, -0.62), (0.14, 0.12, 0.10)),
    8: ((0.0, -0.30, 0.72), (0.10, 0.08, 0.06)),
    9: ((-0.30, -0.35, 0.03), (0.06, 0.05, 0.08)),
    10: ((0.0, 0.30, -0.46), (0.06, 0.05, 0.045)),
}

_JITTER_POS = 0.02      # normalized units per axis
_JITTER_SIZE = 0.08     # relative semi-axis perturbation
_JITTER_ROT_DEG = 6.0


def organ_t2star_ms(label: int, ga_weeks: float, table=None) -> float:
    table = DEFAULT_ORGAN_TABLE if table is None else table
    s0, anchor, slope = table[label]
    return anchor + slope * (ga_weeks - 28.0)


@dataclass(frozen=True)
class Ellipsoid:
    """World-frame ellipsoid: center (mm), semi-axes (mm), rotation matrix."""

    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray

    def normalized_radius(self, pts: np.ndarray) -> np.ndarray:
        """rho(x): 1 on the surface, < 1 inside."""
        local = (np.asarray(pts, float).reshape(-1, 3) - self.center) @ self.rotation
        return np.sqrt(np.sum((local / self.semi_axes) ** 2, axis=1))

    def feather_weight(self, pts: np.ndarray, feather_mm: float) -> np.ndarray:
        """1 on the interior, smoothstep to 0 at the surface.

        The feather lives entirely inside the shape (compact support equals
        the nominal ellipsoid), so interiors keep their exact values. The
        feather is capped at half the smallest semi-axis so small organs
        keep an interior.
        """
        rho = self.normalized_radius(pts)
        if feather_mm <= 0:
            return (rho <= 1.0).astype(float)
        delta = min(feather_mm / float(self.semi_axes.min()), 0.5)
        t = np.clip((1.0 - rho) / delta, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)

    def box_extents(self) -> np.ndarray:
        """Half-extents of the axis-aligned bounding box."""
        return np.sqrt(((self.rotation * self.semi_axes[None, :]) ** 2).sum(axis=1))

    def volume_mm3(self) -> float:
        return float(4.0 / 3.0 * np.pi * np.prod(self.semi_axes))


def _boxes_separated(a: Ellipsoid, b: Ellipsoid, margin: float) -> bool:
    gap = np.abs(a.center - b.center) - (a.box_extents() + b.box_extents())
    return bool(np.any(gap >= margin))


def _inside_body(organ: Ellipsoid, body: Ellipsoid, limit: float = 0.95) -> bool:
    corner = np.abs(organ.center - body.center) + organ.box_extents()
    return float(np.sqrt(np.sum((corner / body.semi_axes) ** 2))) <= limit


@dataclass
class DigitalPhantom:
    """Analytic phantom plus a rendered label grid as the fixed reference."""

    label_grid: VoxelGrid
    organ_values: dict
    ga_weeks: float
    body: Ellipsoid
    organs: dict
    body_values: tuple = BODY_TISSUE[:2]
    feather_mm: float = 2.0

    def __post_init__(self):
        present = set(np.unique(np.asarray(self.label_grid.data))) - {0}
        for lab in present:
            if int(lab) not in self.organ_values:
                raise ContractViolation(f"label {int(lab)} missing from organ table")
        for lab, (s0, t2s) in self.organ_values.items():
            if s0 <= 0 or t2s <= 0:
                raise ContractViolation(f"organ {lab}: S0 and T2* must be > 0")

    # -- analytic evaluation ------------------------------------------------

    def labels_at(self, pts: np.ndarray) -> np.ndarray:
        """Nominal (unfeathered) label codes at world points."""
        pts = np.asarray(pts, float).reshape(-1, 3)
        out = np.zeros(len(pts), dtype=np.uint8)
        for lab, shape in self.organs.items():
            gate = np.all(np.abs(pts - shape.center) <= shape.box_extents(), axis=1)
            if not gate.any():
                continue
            inside = shape.normalized_radius(pts[gate]) <= 1.0
            out[np.flatnonzero(gate)[inside]] = lab
        return out

    def fields_at(self, pts: np.ndarray):
        """Blended (S0, R2* in 1/ms, tissue weight) at world points."""
        pts = np.asarray(pts, float).reshape(-1, 3)
        w_body = self.body.feather_weight(pts, self.feather_mm)
        s0_b, t2_b = self.body_values
        s0 = np.zeros(len(pts))
        r2w = np.zeros(len(pts))
        cover = np.zeros(len(pts))
        for lab, shape in self.organs.items():
            # feather support is inside the surface, so the bounding box
            # gates exactly; organs cover a few percent of the field of view
            gate = np.all(np.abs(pts - shape.center) <= shape.box_extents(), axis=1)
            if not gate.any():
                continue
            w = shape.feather_weight(pts[gate], self.feather_mm)
            os0, ot2 = self.organ_values[lab]
            s0[gate] += w * os0
            r2w[gate] += w / ot2
            cover[gate] += w
        rest = np.maximum(w_body - cover, 0.0)
        s0 += rest * s0_b
        r2w += rest / t2_b
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(w_body > 0, r2w / np.maximum(w_body, 1e-30), 0.0)
        return s0, r2, w_body

    def signal_at(self, pts: np.ndarray, te_ms: float) -> np.ndarray:
        s0, r2, _ = self.fields_at(pts)
        return s0 * np.exp(-te_ms * r2)

    # -- rasterization ------------------------------------------------------

    def render_labels(self, geom: GridSpec) -> VoxelGrid:
        labs = self.labels_at(geom.voxel_centers()).reshape(geom.dims)
        return VoxelGrid(labs, geom.affine.copy(), UNIT_LABEL)

    def render_t2star(self, geom: GridSpec) -> VoxelGrid:
        """True T2* (ms) of the blended field; 0 outside tissue."""
        s0, r2, w = self.fields_at(geom.voxel_centers())
        with np.errstate(divide="ignore"):
            t2s = np.where(r2 > 0, 1.0 / np.maximum(r2, 1e-30), 0.0)
        t2s = np.where(w > 0, t2s, 0.0)
        return VoxelGrid(t2s.reshape(geom.dims), geom.affine.copy(), UNIT_MS)

    def render_s0(self, geom: GridSpec) -> VoxelGrid:
        s0, _, _ = self.fields_at(geom.voxel_centers())
        return VoxelGrid(s0.reshape(geom.dims), geom.affine.copy(), UNIT_SIGNAL)


def centered_geometry(dims, spacing) -> GridSpec:
    """Grid geometry with the world origin at the field-of-view center."""
    dims = np.broadcast_to(np.asarray(dims, int), (3,))
    spacing = np.broadcast_to(np.asarray(spacing, float), (3,))
    affine = np.eye(4)
    affine[:3, :3] = np.diag(spacing)
    affine[:3, 3] = -(dims - 1) / 2.0 * spacing
    return GridSpec(tuple(int(d) for d in dims), affine)


def make_phantom(
    ga_weeks: float,
    dims=(64, 64, 48),
    spacing=(3.125, 3.125, 3.0),
    organ_geometry_seed: int = 0,
    feather_mm: float = 2.0,
    organ_table=None,
) -> DigitalPhantom:
    """Build a deterministic phantom for a gestational age.

    Organ geometry is the nominal layout plus seeded jitter in position,
    size, and orientation; jitter shrinks and the draw repeats if any
    disjointness or containment check fails, so construction always yields
    ten mutually disjoint organs strictly inside the body envelope.
    """
    if not (GA_WEEKS_MIN <= ga_weeks <= GA_WEEKS_MAX):
        raise ConfigError(
            f"ga_weeks {ga_weeks} outside supported range "
            f"[{GA_WEEKS_MIN}, {GA_WEEKS_MAX}]"
        )
    table = DEFAULT_ORGAN_TABLE if organ_table is None else organ_table
    missing = [lab for lab in ALL_LABELS if lab not in table]
    if missing:
        raise ConfigError(f"organ table missing labels {missing}")
    geom = centered_geometry(dims, spacing)
    extent = np.array(geom.dims) * geom.spacing
    body_center = np.zeros(3)
    body_semi = 0.40 * extent
    body = Ellipsoid(body_center, body_semi, np.eye(3))

    min_semi = min(
        float((np.asarray(sz) * body_semi).min()) for _, sz in _ORGAN_LAYOUT.values()
    )
    if min_semi < 0.5 * float(geom.spacing.max()):
        raise ConfigError(
            "grid too small to place all ten organs: smallest organ semi-axis "
            f"{min_semi:.2f} mm is under half a voxel"
        )

    rng = np.random.default_rng(organ_geometry_seed)
    margin = 0.02 * float(body_semi.min())
    organs = None
    scale = 1.0
    for _ in range(8):
        trial = {}
        ok = True
        for lab in ALL_LABELS:
            pos, size = _ORGAN_LAYOUT[lab]
            c = np.asarray(pos) + rng.uniform(-_JITTER_POS, _JITTER_POS, 3) * scale
            s = np.asarray(size) * (1.0 + rng.uniform(-_JITTER_SIZE, _JITTER_SIZE, 3) * scale)
            ang = rng.uniform(-_JITTER_ROT_DEG, _JITTER_ROT_DEG, 3) * scale
            shape = Ellipsoid(body_center + c * body_semi, s * body_semi, euler_to_matrix(ang))
            if not _inside_body(shape, body):
                ok = False
            trial[lab] = shape
        if ok:
            labs = list(trial)
            for i, a in enumerate(labs):
                for b in labs[i + 1:]:
                    if not _boxes_separated(trial[a], trial[b], margin):
                        ok = False
        if ok:
            organs = trial
            break
        scale *= 0.5
    if organs is None:
        raise ConfigError("could not place ten disjoint organs in this grid")

    values = {lab: (table[lab][0], organ_t2star_ms(lab, ga_weeks, table)) for lab in ALL_LABELS}
    phantom = DigitalPhantom(
        label_grid=VoxelGrid(np.zeros(geom.dims, np.uint8), geom.affine.copy(), UNIT_LABEL),
        organ_values=values,
        ga_weeks=float(ga_weeks),
        body=body,
        organs=organs,
        feather_mm=float(feather_mm),
    )
    phantom.label_grid = phantom.render_labels(geom)
    return phantom


# ---------------------------------------------------------------------------
# acquisition simulation

@dataclass
class MotionScript:
    """Per-dynamic rigid motion plus jitter and noise settings.

    entries: one (rotation degrees triple, translation mm triple) per
    dynamic. jitter amplitudes apply independently per slice.
    """

    entries: list
    jitter_deg: float = 0.0
    jitter_mm: float = 0.0
    noise_sigma: float = 0.0
    noise_model: str = "gaussian"

    def __post_init__(self):
        if self.jitter_deg < 0 or self.jitter_mm < 0:
            raise ConfigError("jitter amplitudes must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.noise_model not in ("gaussian", "rician"):
            raise ConfigError(f"unknown noise model {self.noise_model!r}")

    @classmethod
    def still(cls, n_dynamics: int, noise_sigma: float = 0.0, **kw) -> "MotionScript":
        entries = [((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))] * n_dynamics
        return cls(entries, noise_sigma=noise_sigma, **kw)

    def transform(self, d: int, center) -> RigidTransform:
        rot, trans = self.entries[d]
        return RigidTransform(np.asarray(rot, float), np.asarray(trans, float),
                              np.asarray(center, float))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SimulationTruth:
    """Ground truth retained by the simulator for oracle use.

    applied[d] is the rigid motion the phantom underwent for dynamic d;
    slice_applied[d][k] additionally includes that slice's jitter. The
    corrective transform a reconstruction should recover is the inverse of
    the applied one.
    """

    phantom: DigitalPhantom
    applied: list
    slice_applied: list
    noiseless: list
    deform_amplitude_mm: float = 0.0

    def corrective(self, d: int) -> RigidTransform:
        return self.applied[d].inverse()


@dataclass
class SimulatedSeries:
    dynamics: list
    truth: SimulationTruth

    def __len__(self) -> int:
        return len(self.dynamics)


@dataclass(frozen=True)
class SinusoidDeform:
    """Smooth through-space warp for non-rigid test scenes.

    Displaces phantom-frame points along `axis_out` by
    amplitude * sin(2*pi * x[axis_in] / wavelength + phase[d]).
    """

    amplitude_mm: float
    wavelength_mm: float = 60.0
    axis_in: int = 0
    axis_out: int = 2
    phases: tuple = ()

    def __call__(self, d: int, pts: np.ndarray) -> np.ndarray:
        phase = self.phases[d % len(self.phases)] if self.phases else 0.7 * d
        pts = np.array(pts, dtype=float)
        disp = self.amplitude_mm * np.sin(
            2.0 * np.pi * pts[:, self.axis_in] / self.wavelength_mm + phase
        )
        pts[:, self.axis_out] += disp
        return pts


def _slice_points(geom: GridSpec, k: int) -> np.ndarray:
    nx, ny, _ = geom.dims
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ijk = np.stack([ii, jj, np.full_like(ii, k)], axis=-1).reshape(-1, 3)
    return apply_affine(geom.affine, ijk)


def slice_normal(geom: GridSpec) -> np.ndarray:
    n = np.asarray(geom.affine)[:3, 2] / geom.spacing[2]
    return n / np.linalg.norm(n)


def slice_order_indices(nz: int, order: str) -> list:
    if order == "sequential":
        return list(range(nz))
    if order == "interleaved":
        return list(range(0, nz, 2)) + list(range(1, nz, 2))
    raise ConfigError(f"unknown slice order {order!r}")


def simulate_acquisition(
    phantom: DigitalPhantom,
    motion: MotionScript,
    tes_ms,
    slice_geometry: GridSpec,
    psf: PsfSpec | None = None,
    base_seed: int = 0,
    slice_order: str = "sequential",
    deform=None,
) -> SimulatedSeries:
    """Simulate a motion-corrupted multi-echo dynamic series.

    Each dynamic d uses the independent RNG stream seed base_seed + d, so
    dynamics may be generated concurrently and results never depend on
    generation order.
    """
    tes = np.asarray(tes_ms, dtype=float).reshape(-1)
    if tes.size == 0:
        raise ConfigError("TE list must not be empty")
    if np.any(tes <= 0) or np.any(np.diff(tes) <= 0):
        raise ConfigError("echo times must be strictly increasing and > 0")
    if len(motion) == 0:
        raise ConfigError("motion script has no dynamics")
    psf = psf or PsfSpec()
    kernel = psf_weights(psf, slice_normal(slice_geometry), sample_step(psf))
    nz = slice_geometry.dims[2]
    acq_order = slice_order_indices(nz, slice_order)

    dynamics = []
    applied = []
    slice_applied = []
    noiseless = []
    for d in range(len(motion)):
        rng = np.random.default_rng(base_seed + d)
        t_dyn = motion.transform(d, center=phantom.body.center)
        jitters = [t_dyn] * nz
        if motion.jitter_deg > 0 or motion.jitter_mm > 0:
            # jitter is drawn in acquisition order, so the slice-order flag
            # changes which slice receives which perturbation
            for k in acq_order:
                jr = rng.uniform(-motion.jitter_deg, motion.jitter_deg, 3)
                jt = rng.uniform(-motion.jitter_mm, motion.jitter_mm, 3)
                j = RigidTransform(jr, jt, phantom.body.center)
                jitters[k] = j.compose(t_dyn)
        echoes_data = _render_dynamic(phantom, jitters, kernel, slice_geometry, tes, d, deform)
        clean = [
            VoxelGrid(e, slice_geometry.affine.copy(), UNIT_SIGNAL) for e in echoes_data
        ]
        noiseless.append(MultiEchoDynamic(clean, tes, index=d))
        noisy = []
        for e in echoes_data:
            noisy.append(_add_noise(e, motion, rng))
        dynamics.append(
            MultiEchoDynamic(
                [VoxelGrid(e, slice_geometry.affine.copy(), UNIT_SIGNAL) for e in noisy],
                tes,
                index=d,
            )
        )
        applied.append(t_dyn)
        slice_applied.append(jitters)
    truth = SimulationTruth(
        phantom=phantom,
        applied=applied,
        slice_applied=slice_applied,
        noiseless=noiseless,
        deform_amplitude_mm=getattr(deform, "amplitude_mm", 0.0) if deform else 0.0,
    )
    return SimulatedSeries(dynamics=dynamics, truth=truth)


def sample_step(psf: PsfSpec) -> np.ndarray:
    """Quadrature step for PSF sampling: one sigma per axis."""
    return np.maximum(psf.sigmas, 1e-6)


def _render_dynamic(phantom, slice_transforms, kernel: PsfKernel,
                    geom: GridSpec, tes: np.ndarray, d: int, deform) -> list:
    nx, ny, nz = geom.dims
    echoes = [np.empty(geom.dims) for _ in tes]
    for k in range(nz):
        pts = _slice_points(geom, k)
        inv = slice_transforms[k].inverse()
        # PSF quadrature: evaluate the moved phantom at oriented offsets
        src = np.concatenate([inv.apply(pts + off) for off in kernel.offsets])
        if deform is not None:
            src = deform(d, src)
        s0, r2, _ = phantom.fields_at(src)
        s0 = s0.reshape(kernel.size, -1)
        r2 = r2.reshape(kernel.size, -1)
        w = kernel.weights[:, None]
        for e, te in enumerate(tes):
            with np.errstate(under="ignore"):
                sig = np.sum(w * s0 * np.exp(-te * r2), axis=0)
            echoes[e][:, :, k] = sig.reshape(nx, ny)
    return echoes


def _add_noise(clean: np.ndarray, motion: MotionScript, rng) -> np.ndarray:
    if motion.noise_sigma <= 0:
        return clean.copy()
    sigma = motion.noise_sigma
    if motion.noise_model == "gaussian":
        return clean + sigma * rng.standard_normal(clean.shape)
    re = clean + sigma * rng.standard_normal(clean.shape)
    im = sigma * rng.standard_normal(clean.shape)
    return np.sqrt(re * re + im * im)


def acquire_volume(
    phantom: DigitalPhantom,
    geom: GridSpec,
    transform: RigidTransform | None = None,
    psf: PsfSpec | None = None,
) -> VoxelGrid:
    """PSF-weighted S0 acquisition (the TE -> 0 limit of the simulator)."""
    psf = psf or PsfSpec()
    kernel = psf_weights(psf, slice_normal(geom), sample_step(psf))
    inv = (transform or RigidTransform.identity()).inverse()
    pts = geom.voxel_centers()
    acc = np.zeros(len(pts))
    for off, w in zip(kernel.offsets, kernel.weights):
        s0, _, _ = phantom.fields_at(inv.apply(pts + off))
        acc += w * s0
    return VoxelGrid(acc.reshape(geom.dims), geom.affine.copy(), UNIT_SIGNAL)
