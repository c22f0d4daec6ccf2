"""Motion-corrected slice-to-volume reconstruction.

Pipeline: slices are cut from the chosen echo of every kept dynamic, a
high-resolution isotropic volume is initialised from the template stack,
then outer iterations alternate per-slice rigid registration (NCC pattern
search) with PSF-based super-resolution updates. A two-level cubic
B-spline deformable refinement follows, then a final sharp SR pass, and
the recovered transforms are replayed onto the T2* channel by weighted
scatter-averaging with fit-failed voxels carrying zero weight.

Robust statistics and intensity matching stay off by default; slices are
binary included/excluded by footprint overlap and post-registration NCC.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractViolation, ReconstructionError
from .grid import (
    UNIT_MS,
    UNIT_SIGNAL,
    GridSpec,
    PsfKernel,
    PsfSpec,
    VoxelGrid,
    apply_affine,
    ncc,
    psf_weights,
    sample_trilinear,
    scatter_trilinear,
)
from .transforms import BSplineField, RigidTransform, pose_delta


@dataclass
class ReconConfig:
    """Reconstruction settings; defaults mirror the processing protocol:
    1.2 mm isotropic target, no intensity matching, no robust statistics,
    control-point schedule [12, 5] mm, final regularization delta 0.015."""

    resolution_mm: float = 1.2
    intensity_matching: bool = False
    robust_stats: bool = False
    cp_spacing_mm: tuple = (12.0, 5.0)
    final_delta: float = 0.015
    early_delta_factor: float = 10.0
    outer_iterations: int = 3
    sr_iterations: int = 5
    early_sr_iterations: int = 2
    deform_iterations: int = 12
    bending_weight: float = 0.02
    smooth_strength: float = 1.0
    echo_index: int = 1
    psf: PsfSpec = field(default_factory=PsfSpec)
    sr_step_sigma: float = 1.25
    min_overlap_fraction: float = 0.25
    min_slice_ncc: float = 0.3
    weight_floor_rel: float = 0.05
    template_dynamic: int | None = None
    rot_step_deg: tuple = (2.0, 0.125)
    trans_step_mm: tuple = (2.0, 0.125)
    threads: int = 1

    def __post_init__(self):
        if self.resolution_mm <= 0:
            raise ConfigError("target resolution must be > 0")
        cps = tuple(float(c) for c in self.cp_spacing_mm)
        if any(b >= a for a, b in zip(cps, cps[1:])):
            raise ConfigError("control-point schedule must be decreasing")
        self.cp_spacing_mm = cps
        if self.final_delta <= 0:
            raise ConfigError("regularization delta must be > 0")


@dataclass
class SliceModel:
    """One acquired 2D slice with its pose state.

    data2d lives on the (i, j) lattice of its source stack at index k;
    stack_affine maps stack indices to scanner-frame mm. The pose maps
    scanner-frame points into the reconstruction frame; the optional
    per-stack deformation applies in scanner frame before the pose.
    weight stays 1 while robust statistics are disabled.
    """

    data2d: np.ndarray
    stack_affine: np.ndarray
    k: int
    dynamic: int
    stack: int
    pose: RigidTransform
    deformation: BSplineField | None = None
    weight: float = 1.0
    pixel_weights: np.ndarray | None = None
    excluded: bool = False
    exclude_reason: str = ""
    _points: np.ndarray | None = None
    _moved: tuple | None = None

    def points(self) -> np.ndarray:
        """Scanner-frame world coordinates of pixel centers, (npix, 3)."""
        if self._points is None:
            nx, ny = self.data2d.shape
            ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            ijk = np.stack([ii, jj, np.full_like(ii, self.k)], axis=-1).reshape(-1, 3)
            self._points = apply_affine(self.stack_affine, ijk)
        return self._points

    def moved_points(self) -> np.ndarray:
        if self.deformation is None:
            return self.points()
        cached = self._moved
        if cached is not None and cached[0] is self.deformation:
            return cached[1]
        pts = self.points() + self.deformation.displacement(self.points())
        self._moved = (self.deformation, pts)
        return pts

    @property
    def normal(self) -> np.ndarray:
        n = np.asarray(self.stack_affine)[:3, 2]
        return n / np.linalg.norm(n)

    @property
    def inplane_spacing(self) -> np.ndarray:
        return np.linalg.norm(np.asarray(self.stack_affine)[:3, :2], axis=0)

    def values(self) -> np.ndarray:
        return np.asarray(self.data2d, float).reshape(-1)


def slices_from_dynamics(dynamics, echo_index: int = 1) -> list:
    """Cut every dynamic's chosen echo volume into posed slices."""
    slices = []
    for dyn in dynamics:
        if not (0 <= echo_index < len(dyn.echoes)):
            raise ConfigError(f"echo_index {echo_index} invalid for dynamic {dyn.index}")
        vol = dyn.echoes[echo_index]
        data = np.asarray(vol.data, float)
        for k in range(vol.dims[2]):
            slices.append(
                SliceModel(
                    data2d=data[:, :, k].copy(),
                    stack_affine=vol.affine.copy(),
                    k=k,
                    dynamic=dyn.index,
                    stack=dyn.index,
                    pose=RigidTransform.identity(),
                )
            )
    return slices


def _stack_kernel(affine, psf: PsfSpec, step_sigma: float, inplane: bool) -> PsfKernel:
    normal = np.asarray(affine)[:3, 2]
    normal = normal / np.linalg.norm(normal)
    step = np.maximum(psf.sigmas * step_sigma, 1e-6)
    return _kernel_cache(psf, tuple(np.round(normal, 12)), tuple(step), inplane)


_KERNELS: dict = {}


def _kernel_cache(psf, normal_key, step_key, inplane) -> PsfKernel:
    # one interned kernel object per geometry: lets call sites reuse
    # offset tables by identity
    key = (psf, normal_key, step_key, inplane)
    if key not in _KERNELS:
        _KERNELS[key] = psf_weights(
            psf, np.asarray(normal_key), np.asarray(step_key), inplane=inplane
        )
    return _KERNELS[key]


def _psf_base(pts: np.ndarray, kernel: PsfKernel) -> np.ndarray:
    """Scanner-frame PSF sample positions, flattened to (K*npix, 3)."""
    return (pts[None, :, :] + kernel.offsets[:, None, :]).reshape(-1, 3)


def _reduce_psf(vals, valid, kernel: PsfKernel, lead_shape):
    """Collapse the PSF axis: weight-average over in-field samples."""
    vals = vals.reshape(lead_shape)
    valid = valid.reshape(lead_shape)
    w = kernel.weights.reshape((1,) * (len(lead_shape) - 2) + (kernel.size, 1))
    acc = np.sum(w * vals, axis=-2)
    wacc = np.sum(w * valid, axis=-2)
    with np.errstate(invalid="ignore"):
        pred = np.where(wacc > 1e-12, acc / np.maximum(wacc, 1e-12), 0.0)
    return pred, wacc


def _project_base(
    vol_data: np.ndarray,
    inv_affine: np.ndarray,
    base: np.ndarray,
    kernel: PsfKernel,
    pose: RigidTransform,
    npix: int,
):
    mat = pose.matrix()
    p = base @ mat[:3, :3].T + mat[:3, 3]
    vals, valid = sample_trilinear(vol_data, inv_affine, p)
    return _reduce_psf(vals, valid, kernel, (kernel.size, npix))


def _project_poses(
    vol_data: np.ndarray,
    inv_affine: np.ndarray,
    base: np.ndarray,
    kernel: PsfKernel,
    poses,
    npix: int,
):
    """Project one slice under several candidate poses in one pass."""
    mats = np.stack([p.matrix() for p in poses])
    p = base[None, :, :] @ mats[:, :3, :3].transpose(0, 2, 1) + mats[:, None, :3, 3]
    vals, valid = sample_trilinear(vol_data, inv_affine, p)
    return _reduce_psf(vals, valid, kernel, (len(poses), kernel.size, npix))


def _project_at(
    vol_data: np.ndarray,
    inv_affine: np.ndarray,
    pts: np.ndarray,
    kernel: PsfKernel,
    pose: RigidTransform,
):
    return _project_base(
        vol_data, inv_affine, _psf_base(pts, kernel), kernel, pose, len(pts)
    )


def project_slice(
    vol_data: np.ndarray,
    inv_affine: np.ndarray,
    sl: SliceModel,
    kernel: PsfKernel,
    pose: RigidTransform | None = None,
):
    """PSF forward model: predicted slice pixels from the volume.

    Returns (pred, support): prediction normalized by the in-field PSF
    weight, and that weight per pixel (0 where fully out of field).
    """
    pose = sl.pose if pose is None else pose
    return _project_at(vol_data, inv_affine, sl.moved_points(), kernel, pose)


def _masked_ncc(sl_values: np.ndarray, pred: np.ndarray, support: np.ndarray):
    mask = support > 0.5
    overlap = float(mask.mean())
    if mask.sum() < 8:
        return -1.0, overlap
    return ncc(sl_values[mask], pred[mask]), overlap


def register_slice(sl: SliceModel, volume: VoxelGrid, config: ReconConfig) -> RigidTransform:
    """6-DOF NCC maximization by coarse-to-fine pattern search.

    Deterministic greedy pattern search: each sweep projects all twelve
    single-parameter probes in one batch and accepts the best strict
    improvement, so the similarity sequence is non-decreasing; steps halve
    from the coarse to the fine limit. Slices with under 25% footprint
    overlap are skipped unchanged; ones ending below the NCC floor are
    excluded.
    """
    vol_data = np.asarray(volume.data, float)
    inv_affine = np.linalg.inv(volume.affine)
    kernel = _stack_kernel(sl.stack_affine, config.psf, 1.0, inplane=False)
    values = sl.values()
    moved = sl.moved_points()
    anchor = sl.pose

    # coarse levels run on a stride-2 pixel lattice, fine levels on the
    # full lattice; the NCC baseline is re-anchored at the switch
    full = (values, _psf_base(moved, kernel), values.size)
    sub = np.zeros(sl.data2d.shape, dtype=bool)
    sub[::2, ::2] = True
    sub = sub.reshape(-1)
    if int(sub.sum()) >= 64:
        coarse = (values[sub], _psf_base(moved[sub], kernel), int(sub.sum()))
    else:
        coarse = full

    def similarity(param_rows, lattice):
        vals, base, npix = lattice
        poses = [anchor.with_params(p) for p in param_rows]
        preds, supports = _project_poses(vol_data, inv_affine, base, kernel, poses, npix)
        return [_masked_ncc(vals, preds[c], supports[c]) for c in range(len(poses))]

    params = anchor.params()
    [(best_ncc, overlap)] = similarity([params], coarse)
    if overlap < config.min_overlap_fraction:
        sl.excluded = True
        sl.exclude_reason = f"overlap {overlap:.2f} < {config.min_overlap_fraction}"
        return sl.pose

    rot_hi, rot_lo = config.rot_step_deg
    trans_hi, trans_lo = config.trans_step_mm
    rot_step, trans_step = rot_hi, trans_hi
    steps = np.empty(6)
    lattice = coarse
    while rot_step >= rot_lo - 1e-12:
        fine = rot_step < 0.3
        if fine and lattice is coarse:
            lattice = full
            [(best_ncc, _)] = similarity([params], lattice)
        steps[:3] = rot_step
        steps[3:] = trans_step
        improved = True
        sweeps = 0
        while improved and sweeps < 16:
            sweeps += 1
            cands = np.repeat(params[None, :], 12, axis=0)
            idx = np.arange(6)
            cands[2 * idx, idx] += steps
            cands[2 * idx + 1, idx] -= steps
            nccs = [r[0] for r in similarity(cands, lattice)]
            bi = int(np.argmax(nccs))
            improved = nccs[bi] > best_ncc + 1e-12
            if improved:
                params, best_ncc = cands[bi], nccs[bi]
        rot_step /= 2.0
        trans_step /= 2.0
    new_pose = anchor.with_params(params)
    if best_ncc < config.min_slice_ncc:
        sl.excluded = True
        sl.exclude_reason = f"ncc {best_ncc:.3f} < {config.min_slice_ncc}"
        return sl.pose
    sl.excluded = False
    sl.exclude_reason = ""
    sl.pose = new_pose
    return new_pose


def register_all(slices, volume: VoxelGrid, config: ReconConfig) -> dict:
    """Register every non-excluded slice; returns pose-update statistics."""
    previous = [sl.pose for sl in slices]
    workers = max(1, config.threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda sl: register_slice(sl, volume, config), slices))
    else:
        for sl in slices:
            register_slice(sl, volume, config)
    deltas = [pose_delta(sl.pose, prev) for sl, prev in zip(slices, previous)]
    rot = [d[0] for d in deltas]
    tr = [d[1] for d in deltas]
    return {
        "max_rot_update_deg": float(max(rot)) if rot else 0.0,
        "max_trans_update_mm": float(max(tr)) if tr else 0.0,
        "excluded": int(sum(sl.excluded for sl in slices)),
    }


# ---------------------------------------------------------------------------
# initialization

def slice_stacks(slices) -> dict:
    """Group slices by stack index into (affine, sorted slice list)."""
    stacks: dict = {}
    for sl in slices:
        stacks.setdefault(sl.stack, []).append(sl)
    for group in stacks.values():
        group.sort(key=lambda s: s.k)
    return stacks


def _stack_volume(group) -> VoxelGrid:
    ks = [sl.k for sl in group]
    if ks != list(range(min(ks), max(ks) + 1)):
        raise ContractViolation("stack slices must form a contiguous index range")
    data = np.stack([sl.data2d for sl in group], axis=2)
    affine = group[0].stack_affine.copy()
    # shift the origin so index k=0 of the assembled volume matches min(ks)
    affine[:3, 3] = affine[:3, 3] + affine[:3, 2] * min(ks)
    return VoxelGrid(data, affine, UNIT_SIGNAL)


def psf_resample(stack: VoxelGrid, target: GridSpec, psf: PsfSpec):
    """Trilinear+PSF gather resampling of a stack onto a target geometry.

    Through-plane-only kernel: each target point averages stack samples at
    slice-normal offsets, renormalized over the in-field support.
    """
    kernel = _stack_kernel(stack.affine, psf, 1.0, inplane=False)
    inv = np.linalg.inv(stack.affine)
    pts = target.voxel_centers()
    data = np.asarray(stack.data, float)
    out = np.empty(len(pts))
    mask = np.empty(len(pts), dtype=bool)
    step = max(1, _CHUNK_SAMPLES // kernel.size)
    for start in range(0, len(pts), step):
        chunk = pts[start:start + step]
        vals, valid = sample_trilinear(data, inv, _psf_base(chunk, kernel))
        pred, wacc = _reduce_psf(vals, valid, kernel, (kernel.size, len(chunk)))
        out[start:start + step] = pred
        mask[start:start + step] = wacc > 1e-12
    return out.reshape(target.dims), mask.reshape(target.dims)


def target_geometry(slices, resolution_mm: float) -> GridSpec:
    """Isotropic axis-aligned grid covering the union of slice footprints."""
    los, his = [], []
    for sl in slices:
        nx, ny = sl.data2d.shape
        corners = np.array(
            [(i, j, sl.k) for i in (0, nx - 1) for j in (0, ny - 1)], float
        )
        world = sl.pose.apply(apply_affine(sl.stack_affine, corners))
        los.append(world.min(axis=0))
        his.append(world.max(axis=0))
    lo = np.min(los, axis=0) - resolution_mm
    hi = np.max(his, axis=0) + resolution_mm
    dims = np.ceil((hi - lo) / resolution_mm).astype(int) + 1
    affine = np.eye(4)
    affine[:3, :3] = np.diag([resolution_mm] * 3)
    affine[:3, 3] = lo
    return GridSpec(tuple(int(d) for d in dims), affine)


def initialize_volume(slices, config: ReconConfig, extent_slices=None):
    """Bootstrap volume: PSF-weighted average of the given stacks.

    The grid covers extent_slices (default: the given slices) at the
    config resolution; values average the per-stack trilinear+PSF gather
    resamples at identity poses. Returns (volume, coverage mask).
    """
    if not slices:
        raise ContractViolation("initialize_volume needs at least one slice")
    geom = target_geometry(extent_slices or slices, config.resolution_mm)
    acc = np.zeros(geom.dims)
    cnt = np.zeros(geom.dims)
    for _, group in sorted(slice_stacks(slices).items()):
        vals, valid = psf_resample(_stack_volume(group), geom, config.psf)
        acc += np.where(valid, vals, 0.0)
        cnt += valid
    with np.errstate(invalid="ignore"):
        data = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
    return VoxelGrid(data, geom.affine.copy(), UNIT_SIGNAL), cnt > 0


# ---------------------------------------------------------------------------
# super-resolution

def _robust_range(vol: np.ndarray) -> float:
    lo, hi = np.percentile(vol, [1.0, 99.0])
    rng = float(hi - lo)
    return rng if rng > 0 else max(float(np.abs(vol).max()), 1.0)


def _smooth_increment(delta: np.ndarray, vol: np.ndarray, edge_delta: float,
                      strength: float) -> np.ndarray:
    """Edge-preserving first-difference smoothing of the update increment.

    Neighbor weights decay with the intensity difference in the current
    volume (Perona-Malik form), so the increment diffuses inside smooth
    regions but not across edges. Zero increments stay exactly zero,
    preserving the fixed point of the SR iteration.
    """
    if strength <= 0:
        return delta
    num = delta.copy()
    den = np.ones_like(delta)
    for axis in range(3):
        for shift in (1, -1):
            sl_to = [slice(None)] * 3
            sl_from = [slice(None)] * 3
            if shift == 1:
                sl_to[axis] = slice(0, -1)
                sl_from[axis] = slice(1, None)
            else:
                sl_to[axis] = slice(1, None)
                sl_from[axis] = slice(0, -1)
            sl_to, sl_from = tuple(sl_to), tuple(sl_from)
            dv = vol[sl_from] - vol[sl_to]
            w = strength / (1.0 + (dv / edge_delta) ** 2)
            num[sl_to] += w * delta[sl_from]
            den[sl_to] += w
    return num / den


_CHUNK_SAMPLES = 4_000_000  # PSF samples per batched sampling/scatter call


def _stack_predictions(vol_data, inv_affine, slices, kernels):
    """Yield (index, pred, support) for every non-excluded slice.

    Slices are grouped per stack (shared kernel and pixel count) and
    projected in batches of at most _CHUNK_SAMPLES PSF samples, so the
    cost is a few large interpolation calls instead of one per slice.
    """
    by_stack: dict = {}
    for idx, sl in enumerate(slices):
        if not sl.excluded:
            by_stack.setdefault(sl.stack, []).append(idx)
    for stack in sorted(by_stack):
        idxs = by_stack[stack]
        kernel = kernels[stack]
        npix = slices[idxs[0]].data2d.size
        group = max(1, _CHUNK_SAMPLES // (kernel.size * npix))
        for start in range(0, len(idxs), group):
            chunk = idxs[start:start + group]
            parts = []
            for i in chunk:
                sl = slices[i]
                mat = sl.pose.matrix()
                parts.append(
                    _psf_base(sl.moved_points(), kernel) @ mat[:3, :3].T + mat[:3, 3]
                )
            vals, valid = sample_trilinear(vol_data, inv_affine, np.concatenate(parts))
            pred, wacc = _reduce_psf(
                vals, valid, kernel, (len(chunk), kernel.size, npix)
            )
            for row, i in enumerate(chunk):
                yield i, pred[row], wacc[row]


def _forward_all(vol_data, inv_affine, slices, kernels):
    """Predictions for all included slices; returns (records, data_term)."""
    records = [None] * len(slices)
    data_term = 0.0
    for i, pred, support in _stack_predictions(vol_data, inv_affine, slices, kernels):
        sl = slices[i]
        mask = support > 0.5
        w = np.full(pred.shape, sl.weight)
        if sl.pixel_weights is not None:
            w = w * sl.pixel_weights.reshape(-1)
        w = w * mask
        resid = (sl.values() - pred) * (w > 0)
        data_term += float(np.sum(w * resid * resid))
        records[i] = (pred, w, resid)
    return records, data_term


def superresolution_update(
    volume: VoxelGrid,
    slices,
    config: ReconConfig,
    delta_rel: float | None = None,
    iterations: int | None = None,
):
    """Iterative SR passes: PSF forward model, normalized residual
    back-projection, edge-preserving increment regularization, and a
    backtracking step that keeps the data term non-increasing.

    Returns (updated volume, info dict with the data-term trace).
    """
    vol = np.asarray(volume.data, float).copy()
    inv_affine = np.linalg.inv(volume.affine)
    kernels = {
        stack: _stack_kernel(group[0].stack_affine, config.psf, config.sr_step_sigma,
                             inplane=True)
        for stack, group in slice_stacks(slices).items()
    }
    delta_rel = config.final_delta if delta_rel is None else delta_rel
    n_iter = config.sr_iterations if iterations is None else iterations
    info = {"data_term": [], "step": [], "delta_rel": delta_rel, "diverged": False}
    if n_iter <= 0:
        return volume.copy_with(vol), info

    records, data_term = _forward_all(vol, inv_affine, slices, kernels)
    info["data_term"].append(data_term)
    shape = vol.shape
    for _ in range(n_iter):
        num = np.zeros(shape)
        den = np.zeros(shape)
        pend_p, pend_v, pend_w = [], [], []
        pending = 0

        def flush():
            nonlocal pending
            if not pend_p:
                return
            a, wa = scatter_trilinear(
                shape, inv_affine, np.concatenate(pend_p),
                np.concatenate(pend_v), np.concatenate(pend_w),
            )
            num[...] += a
            den[...] += wa
            pend_p.clear()
            pend_v.clear()
            pend_w.clear()
            pending = 0

        for sl, rec in zip(slices, records):
            if rec is None:
                continue
            pred, w, resid = rec
            live = w > 0
            nlive = int(np.count_nonzero(live))
            if nlive == 0:
                continue
            kernel = kernels[sl.stack]
            mat = sl.pose.matrix()
            pts = _psf_base(sl.moved_points()[live], kernel) @ mat[:3, :3].T + mat[:3, 3]
            pend_p.append(pts)
            pend_v.append(np.broadcast_to(resid[live], (kernel.size, nlive)).reshape(-1))
            pend_w.append((kernel.weights[:, None] * w[live]).reshape(-1))
            pending += len(pts)
            if pending >= _CHUNK_SAMPLES:
                flush()
        flush()
        floor = 1e-9
        upd = np.where(den > floor, num / np.maximum(den, floor), 0.0)
        edge_delta = delta_rel * _robust_range(vol)
        upd = _smooth_increment(upd, vol, edge_delta, config.smooth_strength)
        # backtracking keeps the data term monotone non-increasing
        accepted = False
        alpha = 1.0
        for _try in range(5):
            cand = vol + alpha * upd
            cand_records, cand_term = _forward_all(cand, inv_affine, slices, kernels)
            if cand_term <= data_term * (1.0 + 1e-12):
                vol, records, data_term = cand, cand_records, cand_term
                accepted = True
                break
            alpha *= 0.5
        info["step"].append(alpha if accepted else 0.0)
        info["data_term"].append(data_term)
    terms = info["data_term"]
    info["diverged"] = any(b > a * 1.1 for a, b in zip(terms, terms[1:]))
    return volume.copy_with(vol), info


# ---------------------------------------------------------------------------
# deformable refinement

def mean_slice_similarity(volume: VoxelGrid, slices, config: ReconConfig) -> float:
    """Mean masked NCC of all non-excluded slices against the volume."""
    vol_data = np.asarray(volume.data, float)
    inv_affine = np.linalg.inv(volume.affine)
    kernels = {
        stack: _stack_kernel(group[0].stack_affine, config.psf, 1.0, inplane=False)
        for stack, group in slice_stacks(slices).items()
    }
    total, n = 0.0, 0
    for i, pred, support in _stack_predictions(vol_data, inv_affine, slices, kernels):
        score, _ = _masked_ncc(slices[i].values(), pred, support)
        total += score
        n += 1
    return total / n if n else 0.0


def _clamp_control_points(coeffs: np.ndarray, limit: float) -> np.ndarray:
    norms = np.linalg.norm(coeffs, axis=-1, keepdims=True)
    scale = np.where(norms > limit, limit / np.maximum(norms, 1e-12), 1.0)
    return coeffs * scale


def _optimize_stack_field(vol_data, inv_affine, grads, live, kernel,
                          deform: BSplineField, config: ReconConfig):
    """Gradient ascent on content-weighted slice NCC minus the bending
    penalty.

    The NCC gradient flows through the sampled volume values only (the
    in-field support is treated as frozen); update increments are clamped
    to half a control spacing and accepted only on strict improvement, so
    the objective trace is non-decreasing.
    """
    pts_list = [sl.points() for sl in live]
    vals_list = [sl.values() for sl in live]
    limit = float(np.min(deform.spacing_mm)) / 2.0
    # content-weighted aggregation: near-empty slices carry only PSF leakage
    # whose NCC is noise, so their vote scales with their signal spread
    sds = np.array([float(v.std()) for v in vals_list])
    sd_total = float(sds.sum())
    if sd_total <= 0:
        return deform, [0.0]
    sds = sds / sd_total
    # freeze control points reached only by faint samples: with nothing but
    # PSF leakage voting there, any displacement they pick up is noise
    support = np.zeros(deform.coeffs.shape[:3])
    for pts, sw in zip(pts_list, sds):
        if sw == 0.0:
            continue
        support += deform.scatter_gradient(pts, np.full((len(pts), 3), sw))[..., 0]
    gate = (support > 0.02 * support.max())[..., None]

    def objective(field: BSplineField) -> float:
        total = 0.0
        for sl, pts, vals, sw in zip(live, pts_list, vals_list, sds):
            if sw == 0.0:
                continue
            moved = pts + field.displacement(pts)
            pred, wacc = _project_at(vol_data, inv_affine, moved, kernel, sl.pose)
            score, _ = _masked_ncc(vals, pred, wacc)
            total += sw * score
        return total - config.bending_weight * field.bending_energy()

    def gradient(field: BSplineField) -> np.ndarray:
        g_coeffs = np.zeros_like(field.coeffs)
        for sl, pts, vals, sw in zip(live, pts_list, vals_list, sds):
            if sw == 0.0:
                continue
            moved = pts + field.displacement(pts)
            mat = sl.pose.matrix()
            p = _psf_base(moved, kernel) @ mat[:3, :3].T + mat[:3, 3]
            pv, valid = sample_trilinear(vol_data, inv_affine, p)
            pv = pv.reshape(kernel.size, -1)
            valid = valid.reshape(kernel.size, -1)
            w = kernel.weights[:, None]
            wacc = np.sum(w * valid, axis=0)
            mask = wacc > 0.5
            if mask.sum() < 8:
                continue
            pred = np.where(mask, np.sum(w * pv, axis=0) / np.maximum(wacc, 1e-12), 0.0)
            vc = vals[mask] - vals[mask].mean()
            mc = pred[mask] - pred[mask].mean()
            ns = float(np.linalg.norm(vc))
            nm = float(np.linalg.norm(mc))
            if ns < 1e-12 or nm < 1e-12:
                continue
            score = float(vc @ mc) / (ns * nm)
            dncc = vc / (ns * nm) - score * mc / nm**2
            # volume gradient at the sample points, chained back to a
            # scanner-frame displacement gradient per pixel
            gijk = np.stack(
                [np.sum(w * valid
                        * sample_trilinear(g, inv_affine, p)[0].reshape(kernel.size, -1),
                        axis=0)
                 for g in grads],
                axis=-1,
            ) / np.maximum(wacc, 1e-12)[:, None]
            chain = inv_affine[:3, :3] @ sl.pose.matrix()[:3, :3]
            gscan = gijk @ chain
            gpix = np.zeros((len(pts), 3))
            gpix[mask] = sw * dncc[:, None] * gscan[mask]
            g_coeffs += field.scatter_gradient(pts, gpix)
        return g_coeffs - config.bending_weight * field.bending_gradient()

    f_cur = objective(deform)
    trace = [f_cur]
    step = float(np.min(deform.spacing_mm)) / 4.0
    min_step = 0.05
    for _ in range(config.deform_iterations):
        g = gradient(deform) * gate
        gmax = float(np.max(np.linalg.norm(g.reshape(-1, 3), axis=1)))
        if gmax < 1e-12:
            break
        accepted = False
        while step >= min_step:
            # the clamp bounds the update increment, not the accumulated
            # field: a coarse-level estimate may legitimately exceed the
            # finer level's half-spacing
            inc = _clamp_control_points((step / gmax) * g, limit)
            cand = BSplineField(deform.origin, deform.spacing_mm, deform.coeffs + inc)
            f_cand = objective(cand)
            if f_cand > f_cur + 1e-12:
                deform, f_cur = cand, f_cand
                trace.append(f_cur)
                accepted = True
                step = min(step * 2.0, limit)
                break
            step /= 2.0
        if not accepted:
            break
    return deform, trace


def _template_reference(volume: VoxelGrid, slices, config: ReconConfig,
                        template=None) -> VoxelGrid:
    """Single-stack reference volume for deformable registration.

    Deformations are estimated against the template stack alone: a volume
    averaged over all stacks blends the very inconsistencies the fields
    should explain, which both flattens the objective around the true
    field and leaves a model-mismatch blur that rewards spurious warps.
    The reference is a pose-aware PSF scatter average of the template
    slices on the volume grid, sharpened by SR passes restricted to that
    stack; voxels the template does not cover keep the input volume.
    """
    live_by = {stack: [sl for sl in group if not sl.excluded]
               for stack, group in slice_stacks(slices).items()}
    live_by = {stack: group for stack, group in live_by.items() if group}
    if template is None or template not in live_by:
        template = max(live_by, key=lambda stack: (len(live_by[stack]), -stack))
    tmpl = live_by[template]
    shape = volume.dims
    inv_affine = np.linalg.inv(volume.affine)
    kernel = _stack_kernel(tmpl[0].stack_affine, config.psf, 1.0, inplane=False)
    num = np.zeros(shape)
    den = np.zeros(shape)
    for sl in tmpl:
        mat = sl.pose.matrix()
        pts = _psf_base(sl.moved_points(), kernel) @ mat[:3, :3].T + mat[:3, 3]
        npix = sl.data2d.size
        vals = np.broadcast_to(sl.values(), (kernel.size, npix)).reshape(-1)
        w = np.broadcast_to(kernel.weights[:, None], (kernel.size, npix)).reshape(-1)
        acc, wacc = scatter_trilinear(shape, inv_affine, pts, vals, w)
        num += acc
        den += wacc
    ref = np.where(den > 1e-9, num / np.maximum(den, 1e-9),
                   np.asarray(volume.data, float))
    sharp, _ = superresolution_update(volume.copy_with(ref), tmpl, config)
    return sharp


def deformable_stage(volume: VoxelGrid, slices, config: ReconConfig, report=None,
                     template=None):
    """Two-level cubic B-spline refinement of per-stack deformations.

    For each stack a displacement field is estimated against a reference
    built from the template stack, maximizing the masked-NCC objective
    minus a bending-energy penalty at the coarse control spacing and then
    at the fine one. Control displacements are clamped to half a control
    spacing. A zero iteration budget leaves the slices untouched.
    """
    if config.deform_iterations <= 0 or not config.cp_spacing_mm:
        return slices
    reference = _template_reference(volume, slices, config, template)
    vol_data = np.asarray(reference.data, float)
    inv_affine = np.linalg.inv(reference.affine)
    grads = np.gradient(vol_data)
    for stack, group in sorted(slice_stacks(slices).items()):
        live = [sl for sl in group if not sl.excluded]
        if not live:
            continue
        kernel = _stack_kernel(group[0].stack_affine, config.psf, 1.0, inplane=False)
        pts = np.concatenate([sl.points() for sl in live], axis=0)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        deform = None
        for spacing in config.cp_spacing_mm:
            deform = (BSplineField.covering(lo, hi, spacing) if deform is None
                      else deform.refine(spacing))
            deform, trace = _optimize_stack_field(
                vol_data, inv_affine, grads, live, kernel, deform, config
            )
            if report is not None:
                report.append({
                    "stack": int(stack),
                    "cp_spacing_mm": float(spacing),
                    "objective": [float(v) for v in trace],
                    "max_displacement_mm": deform.max_displacement(),
                })
        for sl in group:
            sl.deformation = deform
    return slices


# ---------------------------------------------------------------------------
# channel propagation

def channel_slices_from_maps(slices, t2star_maps) -> list:
    """Cut per-dynamic T2* maps into slices mirroring the structural ones.

    Pixel weights are 1 on valid fits and 0 where the fit failed, so failed
    voxels never contribute to the propagated channel.
    """
    by_dyn = {m.dynamic_index: m for m in t2star_maps}
    channel = []
    for sl in slices:
        if sl.dynamic not in by_dyn:
            raise ContractViolation(f"no T2* map for dynamic {sl.dynamic}")
        m = by_dyn[sl.dynamic]
        data = np.asarray(m.t2star.data, float)
        if not (0 <= sl.k < data.shape[2]) or not np.allclose(
            m.t2star.affine, sl.stack_affine, atol=1e-6
        ):
            raise ContractViolation(
                f"T2* map geometry does not match dynamic {sl.dynamic} slice {sl.k}"
            )
        channel.append(
            SliceModel(
                data2d=data[:, :, sl.k].copy(),
                stack_affine=sl.stack_affine,
                k=sl.k,
                dynamic=sl.dynamic,
                stack=sl.stack,
                pose=RigidTransform.identity(),
                pixel_weights=m.valid_mask[:, :, sl.k].astype(float),
            )
        )
    return channel


def propagate_channel(slices, channel_slices, target: VoxelGrid,
                      config: ReconConfig):
    """Replay the recovered transforms onto a second value channel.

    Each structural slice's pose, deformation and PSF weights are applied
    to the corresponding channel slice; values are scatter-averaged into
    the target geometry with zero weight on failed pixels. Voxels whose
    accumulated weight falls below a floor (relative to the median covered
    weight) are flagged invalid. No registration happens here, so the
    output is linear in the channel values.

    Returns (channel volume in ms, valid mask).
    """
    if len(slices) != len(channel_slices):
        raise ContractViolation("channel slices must correspond 1-1 with structural slices")
    inv_affine = np.linalg.inv(target.affine)
    shape = target.dims
    kernels = {
        stack: _stack_kernel(group[0].stack_affine, config.psf,
                             config.sr_step_sigma, inplane=True)
        for stack, group in slice_stacks(slices).items()
    }
    num = np.zeros(shape)
    den = np.zeros(shape)
    pend_p, pend_v, pend_w = [], [], []
    pending = 0

    def flush():
        nonlocal pending
        if not pend_p:
            return
        a, wa = scatter_trilinear(
            shape, inv_affine, np.concatenate(pend_p),
            np.concatenate(pend_v), np.concatenate(pend_w),
        )
        num[...] += a
        den[...] += wa
        pend_p.clear()
        pend_v.clear()
        pend_w.clear()
        pending = 0

    for sl, ch in zip(slices, channel_slices):
        if (sl.dynamic, sl.k) != (ch.dynamic, ch.k):
            raise ContractViolation(
                f"channel slice (dynamic {ch.dynamic}, k {ch.k}) does not match "
                f"structural slice (dynamic {sl.dynamic}, k {sl.k})"
            )
        if sl.excluded:
            continue
        vals = ch.values()
        w = np.full(vals.shape, sl.weight)
        if ch.pixel_weights is not None:
            w = w * ch.pixel_weights.reshape(-1)
        live = w > 0
        nlive = int(np.count_nonzero(live))
        if nlive == 0:
            continue
        kernel = kernels[sl.stack]
        mat = sl.pose.matrix()
        pts = _psf_base(sl.moved_points()[live], kernel) @ mat[:3, :3].T + mat[:3, 3]
        pend_p.append(pts)
        pend_v.append(np.broadcast_to(vals[live], (kernel.size, nlive)).reshape(-1))
        pend_w.append((kernel.weights[:, None] * w[live]).reshape(-1))
        pending += len(pts)
        if pending >= _CHUNK_SAMPLES:
            flush()
    flush()
    covered = den[den > 0]
    floor = config.weight_floor_rel * float(np.median(covered)) if covered.size else 0.0
    valid = den >= max(floor, 1e-12)
    with np.errstate(invalid="ignore"):
        data = np.where(valid, num / np.maximum(den, 1e-12), 0.0)
    return VoxelGrid(data, target.affine.copy(), UNIT_MS), valid


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class ReconResult:
    """Motion-corrected reconstruction products.

    structural: high-resolution volume of the reconstruction echo;
    t2star: T2* channel in the same geometry; valid_mask: voxels with
    enough propagated weight; report: JSON-serializable convergence log;
    slices: final slice models with recovered poses and deformations.
    """

    structural: VoxelGrid
    t2star: VoxelGrid
    valid_mask: np.ndarray
    report: dict
    slices: list


def _pick_template(dynamics, config: ReconConfig, qc_scores) -> int:
    indices = [dyn.index for dyn in dynamics]
    if config.template_dynamic is not None:
        if config.template_dynamic not in indices:
            raise ConfigError(
                f"template dynamic {config.template_dynamic} is not among the kept dynamics"
            )
        return config.template_dynamic
    if qc_scores:
        kept = [s for s in qc_scores if s.kept and s.index in indices]
        if kept:
            return max(kept, key=lambda s: (s.ncc_to_reference, -s.index)).index
    return indices[0]


def _pose_table(slices) -> list:
    table = []
    for sl in slices:
        table.append({
            "dynamic": int(sl.dynamic),
            "slice": int(sl.k),
            "rotation_deg": [float(a) for a in sl.pose.angles_deg],
            "translation_mm": [float(t) for t in sl.pose.translation_mm],
            "deformation_max_mm": (sl.deformation.max_displacement()
                                   if sl.deformation is not None else 0.0),
            "excluded": bool(sl.excluded),
            "reason": sl.exclude_reason,
        })
    return table


def reconstruct(dynamics, t2star_maps, config: ReconConfig | None = None,
                qc_scores=None) -> ReconResult:
    """Full motion-corrected reconstruction of kept dynamics.

    Slices are cut from the configured echo, a template dynamic seeds the
    volume, then outer iterations alternate slice registration with SR
    updates at a relaxed regularization delta. A two-level deformable
    refinement and a final sharp SR pass follow, and the recovered
    transforms are replayed onto the per-dynamic T2* maps.
    """
    config = ReconConfig() if config is None else config
    dynamics = list(dynamics)
    if not dynamics:
        raise ContractViolation("reconstruct needs at least one kept dynamic")
    if len(dynamics) < 3:
        warnings.warn(
            f"only {len(dynamics)} kept dynamics; reconstruction may be unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    template = _pick_template(dynamics, config, qc_scores)
    slices = slices_from_dynamics(dynamics, config.echo_index)
    template_slices = [sl for sl in slices if sl.dynamic == template]
    volume, _ = initialize_volume(template_slices, config, extent_slices=slices)

    report = {
        "template_dynamic": int(template),
        "resolution_mm": float(config.resolution_mm),
        "n_dynamics": len(dynamics),
        "n_slices": len(slices),
        "initial_mean_slice_ncc": mean_slice_similarity(volume, slices, config),
        "iterations": [],
        "deformable": [],
    }
    early = config.final_delta * config.early_delta_factor
    for it in range(config.outer_iterations):
        reg = register_all(slices, volume, config)
        if all(sl.excluded for sl in slices):
            raise ReconstructionError("all slices were excluded during registration")
        volume, sr = superresolution_update(volume, slices, config, delta_rel=early,
                                            iterations=config.early_sr_iterations)
        report["iterations"].append({
            "iteration": it,
            **reg,
            "mean_slice_ncc": mean_slice_similarity(volume, slices, config),
            "sr_data_term": sr["data_term"],
            "sr_step": sr["step"],
            "sr_diverged": sr["diverged"],
        })

    deformable_stage(volume, slices, config, report=report["deformable"],
                     template=template)
    volume, sr = superresolution_update(volume, slices, config,
                                        delta_rel=config.final_delta)
    report["final_sr"] = {
        "delta_rel": sr["delta_rel"],
        "sr_data_term": sr["data_term"],
        "sr_step": sr["step"],
        "sr_diverged": sr["diverged"],
    }
    report["final_mean_slice_ncc"] = mean_slice_similarity(volume, slices, config)

    channel = channel_slices_from_maps(slices, t2star_maps)
    t2star_hr, valid = propagate_channel(slices, channel, volume, config)
    report["pose_table"] = _pose_table(slices)
    report["excluded_slices"] = [
        {"dynamic": int(sl.dynamic), "slice": int(sl.k), "reason": sl.exclude_reason}
        for sl in slices if sl.excluded
    ]
    report["n_excluded"] = len(report["excluded_slices"])
    return ReconResult(volume, t2star_hr, valid, report, slices)
