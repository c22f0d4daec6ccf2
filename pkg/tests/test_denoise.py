"""Patchwise Marchenko-Pastur PCA denoising."""

import numpy as np
import pytest

from t2srecon.denoise import (
    MeasurementStack,
    _coverage_1d,
    _mp_partition,
    mppca_denoise,
)
from t2srecon.errors import ConfigError, ContractViolation
from t2srecon.grid import UNIT_SIGNAL, VoxelGrid
from t2srecon.phantom import centered_geometry
from t2srecon.relaxometry import MultiEchoDynamic


# ---------------------------------------------------------------------------
# oracles

def mp_partition_ref(vals, n_samples):
    """Scalar reference for the eigenvalue partition: scan p upward, declare
    the remainder noise at the first p where the spread-implied variance
    (vals[p] - vals[-1]) / (4 sqrt((R-p)/n)) drops to or below the tail mean.
    """
    vals = np.asarray(vals, float)
    r = len(vals)
    for p in range(r):
        tail = float(vals[p:].mean())
        gamma = (r - p) / float(n_samples)
        edge = (vals[p] - vals[-1]) / (4.0 * np.sqrt(gamma))
        if edge <= tail:
            return p, tail
    return r - 1, float(vals[-1])


def coverage_ref(n, side):
    """Brute-force count of sliding windows covering each index."""
    cnt = np.zeros(n, int)
    for o in range(n - side + 1):
        cnt[o:o + side] += 1
    return np.maximum(cnt, 1)


def stack_from_array(data, spacing=(2.0, 2.0, 2.0)):
    geom = centered_geometry(data.shape[:3], spacing)
    vols = [
        VoxelGrid(np.ascontiguousarray(data[..., i]), geom.affine, UNIT_SIGNAL)
        for i in range(data.shape[-1])
    ]
    return MeasurementStack(vols)


def rank_k_data(dims, coeffs):
    """Sum of smooth separable fields times per-measurement coefficients."""
    geom = centered_geometry(dims, (2.0, 2.0, 2.0))
    pts = geom.voxel_centers()
    fields = [
        1.0 + 0.05 * pts[:, 0] + 0.03 * pts[:, 1] + 0.02 * pts[:, 2],
        np.exp(-np.sum((pts / 15.0) ** 2, axis=1)),
    ]
    data = np.zeros(dims + (len(coeffs[0]),))
    for f, c in zip(fields, coeffs):
        data += f.reshape(dims + (1,)) * np.asarray(c, float)
    return data


# ---------------------------------------------------------------------------
# partition

def test_partition_matches_reference_on_random_spectra():
    rng = np.random.default_rng(0)
    for n_samples in (24, 124):
        rows = []
        for _ in range(64):
            r = 12
            vals = np.sort(rng.gamma(2.0, 1.0, r))[::-1]
            vals[: rng.integers(0, 4)] += rng.uniform(5, 50)
            rows.append(np.sort(vals)[::-1])
        rows = np.asarray(rows)
        rank, sigma2 = _mp_partition(rows, n_samples)
        for i in range(len(rows)):
            p_ref, s_ref = mp_partition_ref(rows[i], n_samples)
            assert rank[i] == p_ref
            assert abs(sigma2[i] - s_ref) < 1e-12 * max(s_ref, 1.0)


def test_partition_limiting_cases():
    rank, sigma2 = _mp_partition(np.zeros((1, 8)), 124)
    assert rank[0] == 0 and sigma2[0] == 0.0
    spectrum = np.zeros((1, 8))
    spectrum[0, 0] = 100.0
    rank, sigma2 = _mp_partition(spectrum, 124)
    assert rank[0] == 1 and sigma2[0] == 0.0
    flat = np.full((1, 8), 3.0)
    rank, sigma2 = _mp_partition(flat, 124)
    assert rank[0] == 0 and abs(sigma2[0] - 3.0) < 1e-12


def test_coverage_matches_brute_force():
    for n, side in [(9, 5), (5, 5), (12, 3), (4, 4), (7, 5)]:
        assert np.array_equal(_coverage_1d(n, side), coverage_ref(n, side))


# ---------------------------------------------------------------------------
# denoising behavior

def test_noiseless_rank1_is_a_fixed_point():
    data = rank_k_data((10, 9, 8), [[1.0, 0.8, 1.3, 0.5, 1.9, 0.7]])
    out, noise = mppca_denoise(stack_from_array(data))
    got = out.as_array()
    scale = np.abs(data).max()
    assert np.abs(got - data).max() < 1e-6 * scale
    assert np.array_equal(np.asarray(noise.rank.data), np.ones((10, 9, 8)))
    assert np.asarray(noise.sigma.data).max() < 1e-6 * scale


def test_pure_noise_sigma_recovery_and_variance_drop():
    sigma_true = 50.0
    med_sigmas, var_ratios = [], []
    for rep in range(20):
        rng = np.random.default_rng(100 + rep)
        data = rng.normal(0.0, sigma_true, (8, 8, 8, 45))
        out, noise = mppca_denoise(stack_from_array(data))
        med_sigmas.append(float(np.median(np.asarray(noise.sigma.data))))
        var_ratios.append(float(np.var(out.as_array()) / np.var(data)))
    assert abs(np.mean(med_sigmas) - sigma_true) < 0.10 * sigma_true
    assert np.mean(var_ratios) < 0.20


def test_rank2_denoising_reduces_error():
    coeffs = np.random.default_rng(1).uniform(0.5, 2.0, (2, 45))
    clean = rank_k_data((10, 10, 8), coeffs)
    rng = np.random.default_rng(2)
    sigma = 0.05 * float(np.sqrt(np.mean(clean**2)))
    noisy = clean + rng.normal(0.0, sigma, clean.shape)
    out, _ = mppca_denoise(stack_from_array(noisy))
    rmse_in = float(np.sqrt(np.mean((noisy - clean) ** 2)))
    rmse_out = float(np.sqrt(np.mean((out.as_array() - clean) ** 2)))
    assert rmse_out < 0.6 * rmse_in


def test_per_volume_offset_equivariance():
    rng = np.random.default_rng(3)
    data = rng.normal(10.0, 2.0, (8, 8, 6, 6))
    offsets = np.array([0.0, 5.0, -3.0, 100.0, 12.5, -40.0])
    base, _ = mppca_denoise(stack_from_array(data))
    shifted, _ = mppca_denoise(stack_from_array(data + offsets))
    diff = shifted.as_array() - base.as_array() - offsets
    assert np.abs(diff).max() < 1e-9 * np.abs(data).max()


def test_thread_count_does_not_change_output():
    rng = np.random.default_rng(4)
    data = rng.normal(0.0, 1.0, (9, 8, 7, 8))
    out1, noise1 = mppca_denoise(stack_from_array(data), threads=1)
    out3, noise3 = mppca_denoise(stack_from_array(data), threads=3)
    assert np.array_equal(out1.as_array(), out3.as_array())
    assert np.array_equal(np.asarray(noise1.sigma.data), np.asarray(noise3.sigma.data))


def test_center_aggregation_keeps_uncovered_voxels():
    rng = np.random.default_rng(5)
    data = rng.normal(0.0, 1.0, (7, 7, 7, 6))
    out, _ = mppca_denoise(stack_from_array(data), aggregate="center")
    got = out.as_array()
    # patch centers span [2, 4] per axis; everything else passes through
    covered = np.zeros((7, 7, 7), bool)
    covered[2:5, 2:5, 2:5] = True
    assert np.array_equal(got[~covered], data[~covered])
    assert not np.allclose(got[covered], data[covered])


def test_patch_shrinks_on_thin_volumes():
    rng = np.random.default_rng(6)
    data = rng.normal(0.0, 1.0, (8, 8, 3, 6))  # z thinner than the patch
    out, _ = mppca_denoise(stack_from_array(data))
    assert out.as_array().shape == data.shape


def test_small_patch_warns_when_m_exceeds_patch():
    rng = np.random.default_rng(7)
    data = rng.normal(0.0, 1.0, (4, 4, 4, 65))
    with pytest.warns(UserWarning, match="smaller than M"):
        mppca_denoise(stack_from_array(data))


# ---------------------------------------------------------------------------
# stack plumbing and validation

def test_from_dynamics_roundtrip():
    geom = centered_geometry((4, 4, 4), (2.0, 2.0, 2.0))
    rng = np.random.default_rng(8)
    dyns = []
    for d in range(2):
        echoes = [
            VoxelGrid(rng.normal(size=(4, 4, 4)), geom.affine, UNIT_SIGNAL)
            for _ in range(3)
        ]
        dyns.append(MultiEchoDynamic(echoes, [46.0, 120.0, 194.0], index=d))
    stack = MeasurementStack.from_dynamics(dyns)
    assert stack.m == 6
    assert stack.labels == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    back = stack.split_dynamics(dyns)
    for orig, got in zip(dyns, back):
        assert got.index == orig.index
        assert np.array_equal(got.tes_ms, orig.tes_ms)
        for a, b in zip(orig.echoes, got.echoes):
            assert np.array_equal(a.data, b.data)


def test_stack_validation():
    geom = centered_geometry((4, 4, 4), (2.0, 2.0, 2.0))
    v = VoxelGrid(np.ones((4, 4, 4)), geom.affine, UNIT_SIGNAL)
    with pytest.raises(ConfigError):
        MeasurementStack([v])
    other = VoxelGrid(np.ones((4, 4, 4)), 2.0 * np.diag([1.0, 1, 1, 0.5]), UNIT_SIGNAL)
    with pytest.raises(ContractViolation):
        MeasurementStack([v, other])
    with pytest.raises(ContractViolation):
        MeasurementStack([v, v], labels=[(0, 0)])


def test_denoise_validation():
    rng = np.random.default_rng(9)
    stack = stack_from_array(rng.normal(size=(6, 6, 6, 4)))
    with pytest.raises(ConfigError):
        mppca_denoise(stack, patch_radius=0)
    with pytest.raises(ConfigError):
        mppca_denoise(stack, aggregate="median")
