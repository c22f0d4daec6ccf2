"""Shared fixtures: a small deterministic phantom and simulated series.

Expensive fixtures are session-scoped; tests must treat them as read-only.
"""

import numpy as np
import pytest

from t2srecon.grid import GridSpec, UNIT_SIGNAL, VoxelGrid
from t2srecon.phantom import (
    MotionScript,
    centered_geometry,
    make_phantom,
    simulate_acquisition,
)

ACQ_SPACING = (3.125, 3.125, 3.0)
TES_MS = (46.0, 120.0, 194.0)
SMALL_DIMS = (48, 48, 32)
DEFAULT_DIMS = (64, 64, 48)


@pytest.fixture(scope="session")
def phantom28():
    return make_phantom(28.0, dims=SMALL_DIMS, organ_geometry_seed=1)


@pytest.fixture(scope="session")
def phantom_full():
    """Default-size phantom: organs large enough to keep PSF-reach-eroded
    plateau interiors nonempty."""
    return make_phantom(28.0, organ_geometry_seed=1)


@pytest.fixture(scope="session")
def full_geom():
    return centered_geometry(DEFAULT_DIMS, ACQ_SPACING)


@pytest.fixture(scope="session")
def still_full_series(phantom_full, full_geom):
    """Noiseless zero-motion single dynamic at the default phantom size."""
    return simulate_acquisition(
        phantom_full, MotionScript.still(1), TES_MS, full_geom
    )


@pytest.fixture(scope="session")
def acq_geom():
    return centered_geometry(SMALL_DIMS, ACQ_SPACING)


@pytest.fixture(scope="session")
def still_series(phantom28, acq_geom):
    """Noiseless zero-motion series: 3 dynamics, 3 echoes."""
    return simulate_acquisition(
        phantom28, MotionScript.still(3), TES_MS, acq_geom, base_seed=11
    )


@pytest.fixture(scope="session")
def moved_series(phantom28, acq_geom):
    """Noiseless series with known moderate rigid motion per dynamic."""
    entries = [
        ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        ((3.0, -2.0, 1.5), (2.0, -1.0, 2.5)),
        ((-2.5, 1.0, -3.0), (-1.5, 2.0, -2.0)),
    ]
    return simulate_acquisition(
        phantom28, MotionScript(entries), TES_MS, acq_geom, base_seed=17
    )


def plateau_interior(phantom, label, pts, reach_mm=0.0):
    """Points whose reach_mm ball stays on both feather plateaus.

    There the blended fields equal the organ's table values exactly: the
    organ weight is 1, the body weight is 1, and no other organ overlaps.
    A displacement of r mm moves an ellipsoid's normalized radius by at
    most r / semi_min, which bounds PSF quadrature excursions.
    """
    shape = phantom.organs[label]
    s_min = float(shape.semi_axes.min())
    b_min = float(phantom.body.semi_axes.min())
    d_org = min(phantom.feather_mm / s_min, 0.5)
    d_body = min(phantom.feather_mm / b_min, 0.5)
    ok_org = shape.normalized_radius(pts) <= 1.0 - d_org - reach_mm / s_min
    ok_body = phantom.body.normalized_radius(pts) <= 1.0 - d_body - reach_mm / b_min
    return ok_org & ok_body


def random_grid(rng, dims=(8, 8, 8), spacing=(2.0, 2.0, 2.0)) -> VoxelGrid:
    geom = centered_geometry(dims, spacing)
    return VoxelGrid(rng.normal(size=dims), geom.affine, UNIT_SIGNAL)


def linear_ramp_grid(dims=(12, 10, 9), spacing=(2.0, 1.5, 3.0), coeffs=(1.0, 0.0, 0.0, 0.0)):
    """Grid whose data is a0*x + a1*y + a2*z + a3 of world coordinates."""
    geom = centered_geometry(dims, spacing)
    pts = geom.voxel_centers()
    a = np.asarray(coeffs, float)
    vals = pts @ a[:3] + a[3]
    return VoxelGrid(vals.reshape(dims), geom.affine, UNIT_SIGNAL)
