"""On-disk layout for acquisition series and pipeline products.

A series directory holds one gzipped NIfTI per dynamic and echo, named
``dyn{d:03}_echo{e}.nii.gz``, plus a ``series.json`` manifest carrying the
echo times and simulation settings. Simulated datasets add a ``truth/``
subdirectory with the ground-truth label map, parameter maps, and the
applied per-dynamic rigid transforms as 4x4 text matrices. Processing
stages write their products next to the series with fixed names, so any
stage can be rerun from disk alone.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .grid import UNIT_LABEL, UNIT_MS, UNIT_SIGNAL, VoxelGrid
from .nifti import read_volume, write_volume
from .relaxometry import MultiEchoDynamic, T2StarMap

_ECHO_RE = re.compile(r"^dyn(\d{3})_echo(\d+)\.nii\.gz$")

MANIFEST_NAME = "series.json"
NOISE_MAP_NAME = "noise_sigma.nii.gz"
QC_REPORT_NAME = "qc_report.csv"
RECON_STRUCTURAL_NAME = "recon_echo2.nii.gz"
RECON_T2STAR_NAME = "recon_t2s.nii.gz"
RECON_MASK_NAME = "recon_valid_mask.nii.gz"
RECON_REPORT_NAME = "recon_report.json"


def echo_filename(dynamic: int, echo: int) -> str:
    return f"dyn{dynamic:03d}_echo{echo}.nii.gz"


def write_matrix(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, float), fmt="%.17g")


def read_matrix(path) -> np.ndarray:
    m = np.loadtxt(path)
    if m.shape != (4, 4):
        raise IntegrityError(f"{path}: expected a 4x4 matrix, got shape {m.shape}")
    return m


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_series(root, dynamics, manifest: dict | None = None) -> None:
    """Write a dynamic series (and its manifest) into `root`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tes = None
    for dyn in dynamics:
        tes = [float(t) for t in dyn.tes_ms]
        for e, echo in enumerate(dyn.echoes):
            write_volume(echo, root / echo_filename(dyn.index, e))
    payload = dict(manifest or {})
    payload.setdefault("tes_ms", tes)
    payload["n_dynamics"] = len(list(dynamics))
    payload["n_echoes"] = len(tes) if tes else 0
    write_json(root / MANIFEST_NAME, payload)


def write_truth(root, truth) -> None:
    """Write simulator ground truth under `root`/truth for oracle use."""
    tdir = Path(root) / "truth"
    tdir.mkdir(parents=True, exist_ok=True)
    geom = truth.phantom.label_grid.geometry
    write_volume(truth.phantom.render_labels(geom), tdir / "labels.nii.gz")
    write_volume(truth.phantom.render_t2star(geom), tdir / "t2star.nii.gz")
    write_volume(truth.phantom.render_s0(geom), tdir / "s0.nii.gz")
    for d, tr in enumerate(truth.applied):
        write_matrix(tdir / f"transform_dyn{d:03d}.txt", tr.matrix())


def series_paths(root) -> dict:
    """Map dynamic index -> {echo index -> path} for a series directory."""
    root = Path(root)
    found: dict = {}
    for p in sorted(root.iterdir()):
        m = _ECHO_RE.match(p.name)
        if m:
            found.setdefault(int(m.group(1)), {})[int(m.group(2))] = p
    return found


def load_series(root, tes_ms=None):
    """Read a series directory back into dynamics.

    Echo times come from the manifest unless given explicitly. Returns
    (dynamics, manifest dict).
    """
    root = Path(root)
    manifest = {}
    mpath = root / MANIFEST_NAME
    if mpath.exists():
        manifest = read_json(mpath)
    if tes_ms is None:
        tes_ms = manifest.get("tes_ms")
    if tes_ms is None:
        raise IntegrityError(f"{root}: no echo times given and no {MANIFEST_NAME}")
    found = series_paths(root)
    if not found:
        raise IntegrityError(f"{root}: no dyn*_echo*.nii.gz volumes found")
    dynamics = []
    for d in sorted(found):
        echoes = found[d]
        expected = list(range(len(tes_ms)))
        if sorted(echoes) != expected:
            missing = [echo_filename(d, e) for e in expected if e not in echoes]
            raise IntegrityError(
                f"{root}: dynamic {d} is missing {', '.join(missing)}"
                if missing
                else f"{root}: dynamic {d} has unexpected echo files"
            )
        vols = [read_volume(echoes[e], unit=UNIT_SIGNAL) for e in expected]
        dynamics.append(MultiEchoDynamic(vols, np.asarray(tes_ms, float), index=d))
    return dynamics, manifest


# ---------------------------------------------------------------------------
# per-stage products

def t2star_map_paths(root, dynamic: int) -> dict:
    root = Path(root)
    return {
        "t2star": root / f"t2s_dyn{dynamic:03d}.nii.gz",
        "s0": root / f"s0_dyn{dynamic:03d}.nii.gz",
        "failed": root / f"failed_dyn{dynamic:03d}.nii.gz",
    }


def write_t2star_map(root, tmap: T2StarMap) -> None:
    paths = t2star_map_paths(root, tmap.dynamic_index)
    write_volume(tmap.t2star, paths["t2star"])
    write_volume(tmap.s0, paths["s0"])
    failed = VoxelGrid(
        np.asarray(tmap.failed.data, bool).astype(np.uint8),
        tmap.failed.affine.copy(),
        UNIT_LABEL,
    )
    write_volume(failed, paths["failed"])


def read_t2star_map(root, dynamic: int) -> T2StarMap:
    """Read a fitted map back; the r^2 diagnostic is not part of the disk
    contract and comes back as zeros."""
    paths = t2star_map_paths(root, dynamic)
    for p in paths.values():
        if not p.exists():
            raise IntegrityError(f"missing fitted map file {p}")
    t2s = read_volume(paths["t2star"], unit=UNIT_MS)
    s0 = read_volume(paths["s0"], unit=UNIT_SIGNAL)
    failed = read_volume(paths["failed"], unit=UNIT_LABEL)
    zero = VoxelGrid(np.zeros(t2s.dims), t2s.affine.copy(), UNIT_SIGNAL)
    return T2StarMap(t2star=t2s, s0=s0, failed=failed, fit_r2=zero,
                     dynamic_index=dynamic)


def write_noise_map(root, noise) -> None:
    write_volume(noise.sigma, Path(root) / NOISE_MAP_NAME)


def write_recon(root, result) -> None:
    """Write reconstruction products: volumes, report, slice transforms."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_volume(result.structural, root / RECON_STRUCTURAL_NAME)
    write_volume(result.t2star, root / RECON_T2STAR_NAME)
    mask = VoxelGrid(
        np.asarray(result.valid_mask, bool).astype(np.uint8),
        result.structural.affine.copy(),
        UNIT_LABEL,
    )
    write_volume(mask, root / RECON_MASK_NAME)
    write_json(root / RECON_REPORT_NAME, result.report)
    tdir = root / "transforms"
    tdir.mkdir(exist_ok=True)
    for sl in result.slices:
        write_matrix(
            tdir / f"dyn{sl.dynamic:03d}_slice{sl.k:03d}.txt", sl.pose.matrix()
        )
