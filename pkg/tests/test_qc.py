"""Motion QC scoring and exclusion rules."""

import numpy as np
import pytest

from t2srecon.errors import ConfigError
from t2srecon.grid import UNIT_SIGNAL, VoxelGrid, ncc
from t2srecon.phantom import centered_geometry
from t2srecon.qc import (
    CONSISTENCY_THRESHOLD,
    NCC_THRESHOLD,
    _slice_consistency,
    apply_qc,
    read_qc_report,
    score_dynamics,
    write_qc_report,
)
from t2srecon.relaxometry import MultiEchoDynamic

DIMS = (24, 24, 12)
GEOM = centered_geometry(DIMS, (2.0, 2.0, 2.0))


def bump_volume(shift_vox=0):
    pts = GEOM.voxel_centers()
    r2 = np.sum(pts**2, axis=1).reshape(DIMS)
    vol = 100.0 * np.exp(-r2 / 300.0) + 0.001 * pts[:, 0].reshape(DIMS)
    return np.roll(vol, shift_vox, axis=0)


def make_dynamic(vol, index):
    echoes = [
        VoxelGrid(1.2 * vol, GEOM.affine, UNIT_SIGNAL),
        VoxelGrid(vol, GEOM.affine, UNIT_SIGNAL),
    ]
    return MultiEchoDynamic(echoes, [46.0, 120.0], index=index)


def noisy_series(n, outliers=(), seed=0):
    """n structured dynamics; indices in `outliers` are pure noise."""
    rng = np.random.default_rng(seed)
    base = bump_volume()
    dyns = []
    for d in range(n):
        if d in outliers:
            vol = rng.normal(0.0, 30.0, DIMS)
        else:
            vol = base + rng.normal(0.0, 0.5, DIMS)
        dyns.append(make_dynamic(vol, d))
    return dyns


# ---------------------------------------------------------------------------
# scoring

def test_identical_dynamics_score_perfectly_and_all_keep():
    dyns = [make_dynamic(bump_volume(), d) for d in range(5)]
    scores = score_dynamics(dyns)
    for s in scores:
        assert s.ncc_to_reference >= 1.0 - 1e-12
        assert s.slice_consistency > 0.9
    kept = apply_qc(scores)
    assert kept == [0, 1, 2, 3, 4]
    assert all(s.kept and s.reason == "" for s in scores)


def test_reference_is_median_not_mean():
    base = bump_volume()
    rng = np.random.default_rng(1)
    dyns = [make_dynamic(base, d) for d in range(4)]
    dyns.append(make_dynamic(base + rng.normal(0.0, 1000.0, DIMS), 4))
    scores = score_dynamics(dyns)
    # a mean reference would be polluted by the outlier; the median is not
    for s in scores[:4]:
        assert s.ncc_to_reference >= 1.0 - 1e-12
    assert scores[4].ncc_to_reference < 0.5


def test_pure_noise_dynamic_is_excluded():
    dyns = noisy_series(10, outliers={6})
    scores = score_dynamics(dyns)
    assert scores[6].ncc_to_reference < 0.5
    kept = apply_qc(scores)
    assert kept == [d for d in range(10) if d != 6]
    assert "ncc" in scores[6].reason


def test_large_shift_scores_lower():
    dyns = noisy_series(6)
    dyns[3] = make_dynamic(bump_volume(shift_vox=10), 3)  # 20 mm off
    scores = score_dynamics(dyns)
    others = [s.ncc_to_reference for s in scores if s.index != 3]
    assert scores[3].ncc_to_reference < min(others)


def test_slice_consistency_oracle():
    rng = np.random.default_rng(2)
    vol = rng.normal(0.0, 1.0, (6, 6, 5))
    expect = np.mean([ncc(vol[:, :, k], vol[:, :, k + 1]) for k in range(4)])
    assert abs(_slice_consistency(vol) - expect) < 1e-12
    assert _slice_consistency(vol[:, :, :1]) == 1.0


def test_smooth_volume_has_high_consistency_noise_low():
    assert _slice_consistency(bump_volume()) > 0.9
    rng = np.random.default_rng(3)
    assert _slice_consistency(rng.normal(size=DIMS)) < 0.3


# ---------------------------------------------------------------------------
# decisions

def test_thresholds_of_minus_one_keep_everything():
    dyns = noisy_series(10, outliers={2, 7})
    scores = score_dynamics(dyns)
    kept = apply_qc(scores, ncc_threshold=-1.0, consistency_threshold=-1.0)
    assert kept == list(range(10))


def test_forced_keep_rescues_a_failing_dynamic():
    dyns = noisy_series(10, outliers={4})
    scores = score_dynamics(dyns)
    kept = apply_qc(scores, keep=[4])
    assert kept == list(range(10))
    assert scores[4].kept and scores[4].reason == "forced keep"


def test_forced_drop_wins_over_forced_keep():
    dyns = noisy_series(6)
    scores = score_dynamics(dyns)
    kept = apply_qc(scores, keep=[2], drop=[2, 5])
    assert kept == [0, 1, 3, 4]
    assert scores[2].reason == "forced drop"
    assert scores[5].reason == "forced drop"


def test_exactly_five_of_twenty_outliers_are_dropped():
    outliers = {2, 7, 11, 13, 19}
    dyns = noisy_series(20, outliers=outliers)
    scores = score_dynamics(dyns)
    kept = apply_qc(scores)
    assert kept == [d for d in range(20) if d not in outliers]


def test_scoring_follows_dynamic_indices_not_list_order():
    dyns = noisy_series(8, outliers={5})
    shuffled = [dyns[i] for i in (3, 0, 5, 7, 1, 6, 2, 4)]
    by_index = {s.index: s for s in score_dynamics(shuffled)}
    for s in score_dynamics(dyns):
        assert abs(by_index[s.index].ncc_to_reference - s.ncc_to_reference) < 1e-12


def test_apply_qc_is_idempotent():
    scores = score_dynamics(noisy_series(10, outliers={1}))
    first = apply_qc(scores)
    assert apply_qc(scores) == first


# ---------------------------------------------------------------------------
# validation and report plumbing

def test_validation_errors():
    dyns = noisy_series(4)
    with pytest.raises(ConfigError):
        score_dynamics(dyns[:2])
    with pytest.raises(ConfigError):
        score_dynamics(dyns, echo_index=2)
    scores = score_dynamics(dyns)
    with pytest.raises(ConfigError):
        apply_qc(scores, ncc_threshold=1.5)
    with pytest.raises(ConfigError):
        apply_qc(scores, keep=[99])


def test_qc_report_roundtrip(tmp_path):
    scores = score_dynamics(noisy_series(10, outliers={3}))
    apply_qc(scores, drop=[8])
    path = tmp_path / "qc.csv"
    write_qc_report(scores, path)
    back = read_qc_report(path)
    assert len(back) == len(scores)
    for orig, got in zip(scores, back):
        assert got.index == orig.index
        assert abs(got.ncc_to_reference - orig.ncc_to_reference) < 1e-6
        assert abs(got.slice_consistency - orig.slice_consistency) < 1e-6
        assert got.kept == orig.kept
        assert got.reason == orig.reason


def test_default_thresholds_are_documented_values():
    assert NCC_THRESHOLD == 0.5
    assert CONSISTENCY_THRESHOLD == 0.4
