"""Digital phantom construction and acquisition simulation."""

import numpy as np
import pytest

from t2srecon.errors import ConfigError
from t2srecon.phantom import (
    DEFAULT_ORGAN_TABLE,
    MotionScript,
    SinusoidDeform,
    acquire_volume,
    centered_geometry,
    make_phantom,
    organ_t2star_ms,
    simulate_acquisition,
)
from t2srecon.stats import ALL_ORGAN_LABELS

from conftest import ACQ_SPACING, SMALL_DIMS, TES_MS, plateau_interior


# ---------------------------------------------------------------------------
# phantom construction

def test_same_seed_gives_identical_phantom():
    a = make_phantom(28.0, dims=SMALL_DIMS, organ_geometry_seed=5)
    b = make_phantom(28.0, dims=SMALL_DIMS, organ_geometry_seed=5)
    assert np.array_equal(a.label_grid.data, b.label_grid.data)
    assert a.organ_values == b.organ_values


def test_different_seed_same_label_alphabet():
    a = make_phantom(28.0, dims=SMALL_DIMS, organ_geometry_seed=1)
    b = make_phantom(28.0, dims=SMALL_DIMS, organ_geometry_seed=2)
    assert not np.array_equal(a.label_grid.data, b.label_grid.data)
    labels_a = set(np.unique(a.label_grid.data)) - {0}
    labels_b = set(np.unique(b.label_grid.data)) - {0}
    assert labels_a == labels_b == set(ALL_ORGAN_LABELS)


def test_lung_default_stays_in_observed_range():
    # lung mean T2* observations span 194-299 ms
    assert organ_t2star_ms(1, 28.0) == 240.0
    for ga in np.linspace(17.0, 40.0, 24):
        assert 194.0 <= organ_t2star_ms(1, ga) <= 299.0


def test_ga_trends_signed_as_configured():
    assert organ_t2star_ms(1, 35.0) > organ_t2star_ms(1, 20.0)  # lungs rise
    assert organ_t2star_ms(6, 35.0) < organ_t2star_ms(6, 20.0)  # parenchyma falls


def test_organs_disjoint_and_inside_body(phantom28):
    labels = phantom28.label_grid
    centers = labels.geometry.voxel_centers()
    data = np.asarray(labels.data).reshape(-1)
    for lab, shape in phantom28.organs.items():
        pts = centers[data == lab]
        assert len(pts) > 0, f"organ {lab} has no voxels"
        assert np.all(phantom28.body.normalized_radius(pts) < 1.0)
        for other, oshape in phantom28.organs.items():
            if other != lab:
                assert np.all(oshape.normalized_radius(pts) > 1.0)


def test_organ_interiors_carry_exact_table_values(phantom28):
    t2s = phantom28.render_t2star(phantom28.label_grid.geometry)
    vals = np.asarray(t2s.data).reshape(-1)
    centers = t2s.geometry.voxel_centers()
    checked = 0
    for lab in phantom28.organs:
        interior = plateau_interior(phantom28, lab, centers)
        if not interior.any():
            continue
        checked += 1
        expect = phantom28.organ_values[lab][1]
        assert np.abs(vals[interior] - expect).max() < 1e-9
    assert checked >= 5, "too few organs have feather-free interior voxels"


def test_make_phantom_validation():
    with pytest.raises(ConfigError):
        make_phantom(10.0, dims=SMALL_DIMS)
    with pytest.raises(ConfigError):
        make_phantom(28.0, dims=(16, 16, 12))
    table = {k: v for k, v in DEFAULT_ORGAN_TABLE.items() if k != 7}
    with pytest.raises(ConfigError):
        make_phantom(28.0, dims=SMALL_DIMS, organ_table=table)


# ---------------------------------------------------------------------------
# acquisition simulation

def test_exact_decay_at_deep_interior_voxel(full_geom):
    table = dict(DEFAULT_ORGAN_TABLE)
    table[1] = (1000.0, 100.0, 0.0)
    ph = make_phantom(28.0, organ_geometry_seed=1, organ_table=table)
    geom = full_geom
    series = simulate_acquisition(ph, MotionScript.still(1), TES_MS, geom)
    # pick voxels so deep inside the lungs that PSF quadrature and feather
    # never leave the constant plateau; the default PSF ball reaches
    # 2.5 * sigma_inplane = 2.5 * 3.75 / 2.355 < 4 mm
    centers = geom.voxel_centers()
    deep = plateau_interior(ph, 1, centers, reach_mm=4.0)
    assert deep.any()
    expect = [1000.0 * np.exp(-te / 100.0) for te in TES_MS]
    assert np.abs(np.asarray(expect) - [631.28, 301.19, 143.70]).max() < 5e-3
    for e, te in enumerate(TES_MS):
        got = np.asarray(series.dynamics[0].echoes[e].data).reshape(-1)[deep]
        assert np.abs(got - expect[e]).max() < 1e-6


def test_te_to_zero_limit_equals_blurred_s0(phantom28, acq_geom):
    series = simulate_acquisition(
        phantom28, MotionScript.still(1), [1e-9, 1.0], acq_geom
    )
    blurred = acquire_volume(phantom28, acq_geom)
    got = np.asarray(series.dynamics[0].echoes[0].data)
    assert np.abs(got - blurred.data).max() < 1e-6


def test_gaussian_noise_variance(phantom28, acq_geom):
    script = MotionScript.still(1, noise_sigma=10.0)
    series = simulate_acquisition(phantom28, script, TES_MS, acq_geom, base_seed=3)
    diffs = [
        np.asarray(series.dynamics[0].echoes[e].data)
        - np.asarray(series.truth.noiseless[0].echoes[e].data)
        for e in range(3)
    ]
    diff = np.concatenate([d.reshape(-1) for d in diffs])
    assert diff.size >= 1e5
    assert abs(np.var(diff) - 100.0) < 5.0


def test_simulation_is_bitwise_deterministic(phantom28, acq_geom):
    script = MotionScript(
        [((2.0, -1.0, 3.0), (1.0, 2.0, -1.0))], jitter_deg=0.5, jitter_mm=0.5,
        noise_sigma=5.0,
    )
    a = simulate_acquisition(phantom28, script, TES_MS, acq_geom, base_seed=9)
    b = simulate_acquisition(phantom28, script, TES_MS, acq_geom, base_seed=9)
    for e in range(3):
        assert np.array_equal(
            a.dynamics[0].echoes[e].data, b.dynamics[0].echoes[e].data
        )


def test_dynamics_independent_of_series_length(phantom28, acq_geom):
    entries = [((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))] * 3
    short = simulate_acquisition(
        phantom28, MotionScript(entries[:2], noise_sigma=4.0), TES_MS, acq_geom
    )
    full = simulate_acquisition(
        phantom28, MotionScript(entries, noise_sigma=4.0), TES_MS, acq_geom
    )
    for d in range(2):
        for e in range(3):
            assert np.array_equal(
                short.dynamics[d].echoes[e].data, full.dynamics[d].echoes[e].data
            )


def test_truth_transforms_invert_applied_motion(moved_series):
    for d in range(len(moved_series)):
        applied = moved_series.truth.applied[d]
        comp = moved_series.truth.corrective(d).compose(applied)
        assert np.abs(comp.matrix() - np.eye(4)).max() < 1e-9


def test_motion_actually_moves_the_images(moved_series, still_series):
    still = np.asarray(still_series.dynamics[0].echoes[1].data)
    moved = np.asarray(moved_series.dynamics[1].echoes[1].data)
    assert np.abs(still - moved).max() > 1.0


def test_slice_jitter_perturbs_individual_slices(phantom28, acq_geom):
    script = MotionScript.still(1, jitter_deg=1.0, jitter_mm=1.0)
    series = simulate_acquisition(phantom28, script, TES_MS, acq_geom, base_seed=2)
    base = series.truth.applied[0].matrix()
    per_slice = series.truth.slice_applied[0]
    deltas = [np.abs(t.matrix() - base).max() for t in per_slice]
    assert max(deltas) > 1e-3


def test_sinusoid_deform_displaces_along_axis():
    deform = SinusoidDeform(amplitude_mm=3.0, wavelength_mm=40.0, phases=(0.0,))
    pts = np.array([[10.0, 0.0, 0.0], [0.0, 5.0, 2.0]])
    out = deform(0, pts)
    expect = pts.copy()
    expect[:, 2] += 3.0 * np.sin(2.0 * np.pi * pts[:, 0] / 40.0)
    assert np.abs(out - expect).max() < 1e-12


def test_simulation_input_validation(phantom28, acq_geom):
    with pytest.raises(ConfigError):
        simulate_acquisition(phantom28, MotionScript.still(1), [], acq_geom)
    with pytest.raises(ConfigError):
        simulate_acquisition(phantom28, MotionScript.still(1), [100.0, 50.0], acq_geom)
    with pytest.raises(ConfigError):
        simulate_acquisition(phantom28, MotionScript([]), TES_MS, acq_geom)
    with pytest.raises(ConfigError):
        MotionScript.still(2, noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        MotionScript([((0,) * 3, (0,) * 3)], jitter_deg=-0.1)
    with pytest.raises(ConfigError):
        MotionScript([((0,) * 3, (0,) * 3)], noise_model="poisson")


def test_rician_noise_is_nonnegative(phantom28, acq_geom):
    script = MotionScript.still(1, noise_sigma=20.0, noise_model="rician")
    series = simulate_acquisition(phantom28, script, TES_MS, acq_geom, base_seed=4)
    assert np.asarray(series.dynamics[0].echoes[2].data).min() >= 0.0
