"""End-to-end pipeline stages with content-hash skip logic.

Each stage declares its input files and settings; a stage is skipped when
a stamp under ``<out>/.stamps`` records the same input hashes and settings
and all recorded outputs still match on disk. Skipping therefore never
changes results: any edit to inputs, settings, or outputs re-runs the
stage. Partial outputs of a failed stage are left in place for debugging.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig, config_to_dict
from .denoise import MeasurementStack, mppca_denoise
from .errors import ConfigError, IntegrityError, RegressionError
from .grid import UNIT_LABEL, UNIT_MS, VoxelGrid, apply_affine, sample_nearest
from .nifti import read_volume
from .phantom import (
    MotionScript,
    SinusoidDeform,
    centered_geometry,
    make_phantom,
    simulate_acquisition,
)
from .qc import apply_qc, read_qc_report, score_dynamics, write_qc_report
from .relaxometry import map_dynamic
from .series import (
    MANIFEST_NAME,
    NOISE_MAP_NAME,
    QC_REPORT_NAME,
    RECON_MASK_NAME,
    RECON_REPORT_NAME,
    RECON_STRUCTURAL_NAME,
    RECON_T2STAR_NAME,
    echo_filename,
    load_series,
    read_json,
    read_matrix,
    read_t2star_map,
    series_paths,
    t2star_map_paths,
    write_noise_map,
    write_recon,
    write_series,
    write_t2star_map,
    write_truth,
)
from .stats import (
    LabelMap,
    ORGAN_LABELS,
    consistency_check,
    fit_growth_curve,
    organ_stats,
    read_organ_stats_csv,
    write_consistency_csv,
    write_growth_csv,
    write_organ_stats_csv,
)
from .svr import reconstruct


def _noop_log(msg: str) -> None:
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for blob in iter(lambda: fh.read(1 << 20), b""):
            h.update(blob)
    return h.hexdigest()


class StageRunner:
    """Runs stage functions, skipping ones whose world has not changed."""

    def __init__(self, out_dir, log=None):
        self.out_dir = Path(out_dir)
        self.stamp_dir = self.out_dir / ".stamps"
        self.log = log or _noop_log

    def run(self, name: str, inputs, settings: dict, fn) -> bool:
        """Execute `fn` unless the stamp for `name` is current.

        `fn` must return the list of files it produced. Returns True when
        the stage ran, False when it was skipped.
        """
        inputs = sorted(Path(p) for p in inputs)
        for p in inputs:
            if not p.exists():
                raise IntegrityError(f"stage {name}: missing input file {p}")
        key = hashlib.sha256(
            json.dumps(
                {
                    "inputs": {p.name: _sha256_file(p) for p in inputs},
                    "settings": settings,
                },
                sort_keys=True,
            ).encode()
        ).hexdigest()
        stamp_path = self.stamp_dir / f"{name}.json"
        if stamp_path.exists():
            try:
                stamp = json.loads(stamp_path.read_text())
            except json.JSONDecodeError:
                stamp = {}
            outputs = stamp.get("outputs", {})
            if (
                stamp.get("key") == key
                and outputs
                and all(
                    Path(p).exists() and _sha256_file(Path(p)) == h
                    for p, h in outputs.items()
                )
            ):
                self.log(f"[{name}] up to date, skipped")
                return False
        self.log(f"[{name}] running")
        try:
            produced = fn()
        except Exception:
            self.log(f"[{name}] failed")
            raise
        self.stamp_dir.mkdir(parents=True, exist_ok=True)
        stamp_path.write_text(
            json.dumps(
                {
                    "key": key,
                    "outputs": {str(p): _sha256_file(Path(p)) for p in produced},
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        return True


def _echo_files(series_dir: Path) -> list:
    found = series_paths(series_dir)
    if not found:
        raise IntegrityError(f"{series_dir}: no dyn*_echo*.nii.gz volumes found")
    files = [p for echoes in found.values() for p in echoes.values()]
    manifest = series_dir / MANIFEST_NAME
    if manifest.exists():
        files.append(manifest)
    return sorted(files)


def _series_tes(config: PipelineConfig, manifest: dict):
    tes = manifest.get("tes_ms") or list(config.tes_ms)
    if config.echo_index >= len(tes):
        raise ConfigError(
            f"echo_index {config.echo_index} out of range for series with {len(tes)} echoes"
        )
    return tes


# ---------------------------------------------------------------------------
# dataset synthesis

def simulate_dataset(config: PipelineConfig, log=None) -> Path:
    """Generate the synthetic series plus ground truth into the out dir."""
    log = log or _noop_log
    s = config.simulate
    out = config.require_out()
    phantom = make_phantom(
        s.ga_weeks,
        dims=s.dims,
        spacing=s.spacing_mm,
        organ_geometry_seed=s.organ_geometry_seed,
        feather_mm=s.feather_mm,
    )
    entries = s.entries
    if entries is None:
        rng = np.random.default_rng(config.seed)
        entries = [((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))]
        for _ in range(s.n_dynamics - 1):
            rot = rng.uniform(-s.max_rot_deg, s.max_rot_deg, 3)
            trans = rng.uniform(-s.max_trans_mm, s.max_trans_mm, 3)
            entries.append((tuple(rot), tuple(trans)))
    motion = MotionScript(
        entries=list(entries),
        jitter_deg=s.jitter_deg,
        jitter_mm=s.jitter_mm,
        noise_sigma=s.noise_sigma,
        noise_model=s.noise_model,
    )
    deform = None
    if s.deform_amplitude_mm > 0:
        deform = SinusoidDeform(s.deform_amplitude_mm, s.deform_wavelength_mm)
    geom = centered_geometry(s.dims, s.spacing_mm)
    log(f"[simulate] {s.n_dynamics} dynamics, GA {s.ga_weeks} weeks, seed {config.seed}")
    series = simulate_acquisition(
        phantom,
        motion,
        config.tes_ms,
        geom,
        base_seed=config.seed,
        slice_order=s.slice_order,
        deform=deform,
    )
    manifest = {
        "tes_ms": [float(t) for t in config.tes_ms],
        "ga_weeks": float(s.ga_weeks),
        "seed": int(config.seed),
        "noise_sigma": float(s.noise_sigma),
        "noise_model": s.noise_model,
        "dims": list(s.dims),
        "spacing_mm": list(s.spacing_mm),
        "slice_order": s.slice_order,
        "deform_amplitude_mm": float(s.deform_amplitude_mm),
    }
    write_series(out, series.dynamics, manifest)
    write_truth(out, series.truth)
    log(f"[simulate] wrote {len(series.dynamics)} dynamics to {out}")
    return out


# ---------------------------------------------------------------------------
# processing stages

def denoise_stage(config: PipelineConfig, runner: StageRunner) -> Path:
    """Denoise the input series; returns the series dir later stages use."""
    raw = config.require_input()
    if not config.denoise.enabled:
        runner.log("[denoise] disabled, using the raw series")
        return raw
    out = config.require_out()
    den_dir = out / "denoised"

    def fn():
        dynamics, manifest = load_series(raw)
        stack = MeasurementStack.from_dynamics(dynamics)
        denoised, noise = mppca_denoise(
            stack, patch_radius=config.denoise.patch_radius, threads=config.threads
        )
        den_dynamics = denoised.split_dynamics(dynamics)
        write_series(den_dir, den_dynamics, dict(manifest))
        write_noise_map(out, noise)
        produced = [out / NOISE_MAP_NAME, den_dir / MANIFEST_NAME]
        for dyn in den_dynamics:
            produced += [den_dir / echo_filename(dyn.index, e)
                         for e in range(len(dyn.echoes))]
        return produced

    runner.run(
        "denoise",
        _echo_files(raw),
        {"patch_radius": config.denoise.patch_radius},
        fn,
    )
    return den_dir


def fit_stage(config: PipelineConfig, series_dir: Path, runner: StageRunner) -> None:
    out = config.require_out()

    def fn():
        dynamics, manifest = load_series(series_dir)
        _series_tes(config, manifest)
        produced = []
        for dyn in dynamics:
            tmap, summary = map_dynamic(dyn, cap_ms=config.stats.t2star_cap_ms)
            write_t2star_map(out, tmap)
            runner.log(
                f"[fit] dynamic {dyn.index}: median T2* "
                f"{summary.median_t2star_ms:.1f} ms, "
                f"{100 * summary.fraction_failed:.1f}% failed"
            )
            produced += list(t2star_map_paths(out, dyn.index).values())
        return produced

    runner.run(
        "fit",
        _echo_files(series_dir),
        {"cap_ms": config.stats.t2star_cap_ms},
        fn,
    )


def qc_stage(config: PipelineConfig, series_dir: Path, runner: StageRunner) -> None:
    out = config.require_out()

    def fn():
        dynamics, _ = load_series(series_dir)
        scores = score_dynamics(dynamics, echo_index=config.echo_index)
        kept = apply_qc(
            scores,
            ncc_threshold=config.qc.ncc_threshold,
            consistency_threshold=config.qc.consistency_threshold,
            keep=config.qc.keep,
            drop=config.qc.drop,
        )
        write_qc_report(scores, out / QC_REPORT_NAME)
        runner.log(f"[qc] kept {len(kept)}/{len(scores)} dynamics")
        return [out / QC_REPORT_NAME]

    runner.run(
        "qc",
        _echo_files(series_dir),
        {
            "ncc_threshold": config.qc.ncc_threshold,
            "consistency_threshold": config.qc.consistency_threshold,
            "keep": list(config.qc.keep),
            "drop": list(config.qc.drop),
            "echo_index": config.echo_index,
        },
        fn,
    )


def recon_stage(config: PipelineConfig, series_dir: Path, runner: StageRunner) -> None:
    out = config.require_out()
    qc_path = out / QC_REPORT_NAME
    if not qc_path.exists():
        raise IntegrityError(f"missing QC report {qc_path}; run the qc stage first")
    scores = read_qc_report(qc_path)
    kept = [s.index for s in scores if s.kept]
    map_files = []
    for d in kept:
        map_files += list(t2star_map_paths(out, d).values())

    def fn():
        dynamics, _ = load_series(series_dir)
        kept_dynamics = [dyn for dyn in dynamics if dyn.index in kept]
        maps = [read_t2star_map(out, dyn.index) for dyn in kept_dynamics]
        rc = replace(config.recon, echo_index=config.echo_index,
                     threads=config.threads)
        result = reconstruct(kept_dynamics, maps, rc, qc_scores=scores)
        write_recon(out, result)
        runner.log(
            f"[recon] template dynamic {result.report['template_dynamic']}, "
            f"{result.report['n_excluded']} slices excluded, final mean NCC "
            f"{result.report['final_mean_slice_ncc']:.3f}"
        )
        produced = [
            out / RECON_STRUCTURAL_NAME,
            out / RECON_T2STAR_NAME,
            out / RECON_MASK_NAME,
            out / RECON_REPORT_NAME,
        ]
        produced += [
            out / "transforms" / f"dyn{sl.dynamic:03d}_slice{sl.k:03d}.txt"
            for sl in result.slices
        ]
        return produced

    settings = config_to_dict(config.recon)
    settings.pop("threads", None)
    settings["echo_index"] = config.echo_index
    runner.run(
        "recon",
        _echo_files(series_dir) + [qc_path] + map_files,
        settings,
        fn,
    )


def _labels_on_grid(labels: VoxelGrid, target: VoxelGrid,
                    applied_matrix: np.ndarray | None) -> VoxelGrid:
    """Nearest-neighbour label transfer onto a target grid.

    `applied_matrix` maps label-frame points to the target's world frame
    (the motion the labelled object underwent); identity when None.
    """
    pts = target.geometry.voxel_centers()
    if applied_matrix is not None:
        pts = apply_affine(np.linalg.inv(applied_matrix), pts)
    vals, valid = sample_nearest(
        np.asarray(labels.data), np.linalg.inv(labels.affine), pts
    )
    data = np.where(valid, vals, 0).astype(np.uint8).reshape(target.dims)
    return VoxelGrid(data, target.affine.copy(), UNIT_LABEL)


def _find_labels(config: PipelineConfig):
    """Label volume for statistics: explicit path, or simulated truth."""
    if config.labels_path:
        p = Path(config.labels_path)
        if not p.exists():
            raise ConfigError(f"label map does not exist: {p}")
        return p, False
    truth = config.require_input() / "truth" / "labels.nii.gz"
    if truth.exists():
        return truth, True
    return None, False


def stats_stage(config: PipelineConfig, runner: StageRunner) -> bool:
    """Per-organ statistics and the consistency check; False when skipped."""
    out = config.require_out()
    labels_path, from_truth = _find_labels(config)
    if labels_path is None:
        runner.log("[stats] no label map available, skipping statistics")
        return False
    recon_files = [out / RECON_T2STAR_NAME, out / RECON_MASK_NAME,
                   out / RECON_REPORT_NAME]
    for p in recon_files:
        if not p.exists():
            raise IntegrityError(f"missing reconstruction output {p}; run recon first")
    qc_path = out / QC_REPORT_NAME
    scores = read_qc_report(qc_path) if qc_path.exists() else []
    kept = [s.index for s in scores if s.kept]
    map_files = []
    for d in kept:
        map_files += list(t2star_map_paths(out, d).values())
    truth_dir = config.require_input() / "truth"
    transform_files = sorted(truth_dir.glob("transform_dyn*.txt")) if from_truth else []

    manifest = {}
    mpath = config.require_input() / MANIFEST_NAME
    if mpath.exists():
        manifest = read_json(mpath)
    ga = config.stats.ga_weeks
    if ga is None:
        ga = manifest.get("ga_weeks")
    if ga is None:
        raise ConfigError("stats needs a gestational age (stats.ga_weeks or series manifest)")

    def transform_for(d: int):
        if not from_truth:
            return None
        p = truth_dir / f"transform_dyn{d:03d}.txt"
        return read_matrix(p) if p.exists() else None

    def fn():
        t2s = read_volume(out / RECON_T2STAR_NAME, unit=UNIT_MS)
        valid = np.asarray(read_volume(out / RECON_MASK_NAME).data, bool)
        report = read_json(out / RECON_REPORT_NAME)
        labels_vol = read_volume(labels_path, unit=UNIT_LABEL)
        labels_hr = _labels_on_grid(labels_vol, t2s,
                                    transform_for(report["template_dynamic"]))
        rows = organ_stats(t2s, ~valid, LabelMap(labels_hr))
        case = config.stats.case_id
        write_organ_stats_csv([(case, float(ga), st) for st in rows],
                              out / "organ_stats.csv")

        recon_means = {st.label: st.t2s_mean_ms for st in rows if st.n_valid > 0}
        per_dynamic: dict = {}
        for d in kept:
            tmap = read_t2star_map(out, d)
            lab_d = _labels_on_grid(labels_vol, tmap.t2star, transform_for(d))
            lmap = LabelMap(lab_d)
            for st in organ_stats(tmap.t2star, tmap.failed_mask, lmap):
                if st.n_valid > 0:
                    per_dynamic.setdefault(st.label, []).append(st.t2s_mean_ms)
        consistency_rows = []
        for lab in sorted(recon_means):
            means = per_dynamic.get(lab, [])
            if len(means) >= 2:
                res = consistency_check(means, recon_means[lab])
                consistency_rows.append((case, lab, res))
        write_consistency_csv(consistency_rows, out / "consistency.csv")
        runner.log(
            f"[stats] {len(rows)} organs, consistency computed for "
            f"{len(consistency_rows)} organs over {len(kept)} dynamics"
        )
        return [out / "organ_stats.csv", out / "consistency.csv"]

    runner.run(
        "stats",
        recon_files + map_files + [labels_path] + transform_files
        + ([qc_path] if qc_path.exists() else []),
        {"case_id": config.stats.case_id, "ga_weeks": float(ga)},
        fn,
    )
    return True


def growth_stage(config: PipelineConfig, stats_csvs, log=None) -> Path:
    """Fit per-organ growth curves from a cohort of organ_stats.csv files."""
    log = log or _noop_log
    out = config.require_out()
    all_rows = []
    for path in stats_csvs:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"stats file does not exist: {p}")
        all_rows += read_organ_stats_csv(p)
    if not all_rows:
        raise ConfigError("no organ statistics rows found in the given files")

    label_of = {name: code for code, name in ORGAN_LABELS.items()}
    points: dict = {}
    for row in all_rows:
        lab = label_of.get(row["organ"])
        if lab is None or int(row["n"] or 0) <= 0:
            continue
        ga = float(row["GA"])
        if row["t2s_mean"]:
            points.setdefault(("t2s_mean", lab), []).append((ga, float(row["t2s_mean"])))
        points.setdefault(("volume_ml", lab), []).append((ga, float(row["volume_ml"])))

    curves = []
    for (metric, lab) in sorted(points):
        pts = points[(metric, lab)]
        if len(pts) < 3:
            log(f"[growth] {ORGAN_LABELS[lab]}/{metric}: only {len(pts)} points, skipped")
            continue
        try:
            curves.append((metric, fit_growth_curve(pts, organ=lab)))
        except RegressionError as exc:
            log(f"[growth] {ORGAN_LABELS[lab]}/{metric}: {exc}")
    write_growth_csv(curves, out / "growth_curves.csv")

    # combined cohort stats so report plots can show the underlying points
    header = ["case", "GA", "organ", "n", "volume_ml", "t2s_mean", "t2s_sd"]
    lines = [",".join(header)]
    for row in all_rows:
        lines.append(",".join(row.get(col, "") for col in header))
    (out / "organ_stats.csv").write_text("\n".join(lines) + "\n")
    log(f"[growth] fitted {len(curves)} curves from {len(stats_csvs)} cases")
    return out / "growth_curves.csv"


def run_all(config: PipelineConfig, log=None) -> None:
    """The full pipeline: denoise, fit, qc, recon, stats, report."""
    runner = StageRunner(config.require_out(), log)
    series_dir = denoise_stage(config, runner)
    fit_stage(config, series_dir, runner)
    qc_stage(config, series_dir, runner)
    recon_stage(config, series_dir, runner)
    if stats_stage(config, runner):
        from .report import report_stage

        report_stage(config, runner)
    else:
        runner.log("[report] skipped (no statistics)")
