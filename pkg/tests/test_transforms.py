"""Rigid transforms (Euler convention, composition) and B-spline fields."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from t2srecon.errors import ContractViolation
from t2srecon.transforms import (
    BSplineField,
    RigidTransform,
    bspline_basis,
    euler_to_matrix,
    matrix_to_euler,
    pose_delta,
    rotation_angle_deg,
)


# ---------------------------------------------------------------------------
# Euler rotations

def test_euler_matches_scipy_rotation():
    rng = np.random.default_rng(0)
    for _ in range(25):
        ang = rng.uniform(-90, 90, 3)
        ours = euler_to_matrix(ang)
        # extrinsic x-y-z composition equals Rz @ Ry @ Rx
        ref = Rotation.from_euler("xyz", ang, degrees=True).as_matrix()
        assert np.abs(ours - ref).max() < 1e-12


def test_matrix_to_euler_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(25):
        ang = rng.uniform(-80, 80, 3)  # stay clear of gimbal lock
        back = matrix_to_euler(euler_to_matrix(ang))
        assert np.abs(back - ang).max() < 1e-9


def test_rotation_angle_known_case():
    rot = euler_to_matrix((0.0, 0.0, 30.0))
    assert abs(rotation_angle_deg(rot) - 30.0) < 1e-9
    assert abs(rotation_angle_deg(np.eye(3))) < 1e-9


# ---------------------------------------------------------------------------
# rigid transforms

def test_identity_transform_is_noop():
    t = RigidTransform.identity(center=(5.0, -3.0, 2.0))
    pts = np.random.default_rng(2).normal(size=(10, 3))
    assert np.abs(t.apply(pts) - pts).max() < 1e-12
    assert t.is_identity()


def test_rotation_about_center_fixes_center():
    center = np.array([10.0, -4.0, 6.0])
    t = RigidTransform((20.0, -10.0, 5.0), (0.0, 0.0, 0.0), center)
    assert np.abs(t.apply(center[None]) - center).max() < 1e-9


def test_translation_is_additive():
    t = RigidTransform((0.0, 0.0, 0.0), (1.0, -2.0, 3.0), (9.0, 9.0, 9.0))
    p = np.array([[0.0, 0.0, 0.0]])
    assert np.allclose(t.apply(p), [[1.0, -2.0, 3.0]])


def test_matrix_round_trip_preserves_action():
    rng = np.random.default_rng(3)
    for _ in range(10):
        t = RigidTransform(rng.uniform(-40, 40, 3), rng.uniform(-20, 20, 3),
                           rng.uniform(-10, 10, 3))
        back = RigidTransform.from_matrix(t.matrix(), t.center_mm)
        pts = rng.normal(size=(20, 3)) * 30
        assert np.abs(t.apply(pts) - back.apply(pts)).max() < 1e-9


def test_inverse_undoes_transform():
    rng = np.random.default_rng(4)
    t = RigidTransform((12.0, -7.0, 30.0), (4.0, 5.0, -6.0), (1.0, 2.0, 3.0))
    pts = rng.normal(size=(50, 3)) * 40
    assert np.abs(t.inverse().apply(t.apply(pts)) - pts).max() < 1e-9


def test_compose_applies_right_operand_first():
    a = RigidTransform((0.0, 0.0, 90.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    b = RigidTransform((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    p = np.array([[0.0, 0.0, 0.0]])
    # (a ∘ b)(0) = a(b(0)) = a((1,0,0)) = (0,1,0) under +90° about z
    assert np.abs(a.compose(b).apply(p) - [[0.0, 1.0, 0.0]]).max() < 1e-9
    assert np.abs(b.compose(a).apply(p) - [[1.0, 0.0, 0.0]]).max() < 1e-9


def test_params_round_trip():
    t = RigidTransform((1.0, 2.0, 3.0), (4.0, 5.0, 6.0), (7.0, 8.0, 9.0))
    u = t.with_params(t.params())
    assert np.allclose(u.angles_deg, t.angles_deg)
    assert np.allclose(u.translation_mm, t.translation_mm)
    assert np.allclose(u.center_mm, t.center_mm)


def test_pose_delta_zero_for_equal_poses():
    t = RigidTransform((5.0, -3.0, 8.0), (2.0, 1.0, -4.0), (0.0, 0.0, 0.0))
    ang, disp = pose_delta(t, t)
    assert ang < 1e-9
    assert disp < 1e-9


def test_pose_delta_measures_translation_and_rotation():
    ident = RigidTransform.identity()
    shifted = RigidTransform((0.0, 0.0, 0.0), (3.0, 4.0, 0.0), (0.0, 0.0, 0.0))
    ang, disp = pose_delta(shifted, ident)
    assert ang < 1e-9
    assert abs(disp - 5.0) < 1e-9
    rot = RigidTransform((0.0, 0.0, 10.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    ang, disp = pose_delta(rot, ident)
    assert abs(ang - 10.0) < 1e-9
    assert disp < 1e-9  # measured at the rotation centre


def test_from_matrix_rejects_nonrigid():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ContractViolation):
        RigidTransform.from_matrix(bad)


# ---------------------------------------------------------------------------
# cubic B-spline displacement fields

def test_bspline_basis_partition_of_unity():
    f = np.linspace(0.0, 1.0, 33, endpoint=False)
    basis = bspline_basis(f)
    assert np.all(basis >= 0)
    assert np.abs(basis.sum(axis=-1) - 1.0).max() < 1e-12


def test_zero_field_is_identity():
    field = BSplineField.covering((-20, -20, -20), (20, 20, 20), 10.0)
    pts = np.random.default_rng(5).uniform(-20, 20, size=(100, 3))
    assert np.abs(field.displacement(pts)).max() == 0.0
    assert np.abs(field.apply(pts) - pts).max() == 0.0


def test_constant_coefficients_give_constant_displacement():
    field = BSplineField.covering((-15, -15, -15), (15, 15, 15), 7.5)
    field.coeffs[...] = (1.0, -2.0, 0.5)
    pts = np.random.default_rng(6).uniform(-15, 15, size=(200, 3))
    disp = field.displacement(pts)
    assert np.abs(disp - (1.0, -2.0, 0.5)).max() < 1e-9


def test_displacement_is_smooth_interpolant():
    # coefficients linear in lattice index reproduce a linear field
    field = BSplineField.covering((-12, -12, -12), (12, 12, 12), 6.0)
    nx, ny, nz, _ = field.coeffs.shape
    ii = np.arange(nx, dtype=float)
    field.coeffs[..., 0] = ii[:, None, None] * 0.5
    pts = np.random.default_rng(7).uniform(-10, 10, size=(100, 3))
    disp = field.displacement(pts)
    idx = (pts[:, 0] - field.origin[0]) / field.spacing_mm[0]
    assert np.abs(disp[:, 0] - 0.5 * idx).max() < 1e-9
    assert np.abs(disp[:, 1:]).max() < 1e-12


def test_scatter_gradient_is_adjoint_of_displacement():
    rng = np.random.default_rng(8)
    field = BSplineField.covering((-10, -10, -10), (10, 10, 10), 5.0)
    field.coeffs = rng.normal(size=field.coeffs.shape)
    pts = rng.uniform(-10, 10, size=(150, 3))
    grads = rng.normal(size=(150, 3))
    lhs = float(np.sum(field.displacement(pts) * grads))
    rhs = float(np.sum(field.coeffs * field.scatter_gradient(pts, grads)))
    assert abs(lhs - rhs) < 1e-9


def test_bending_energy_zero_for_affine_fields():
    field = BSplineField.covering((-10, -10, -10), (10, 10, 10), 5.0)
    assert field.bending_energy() == 0.0
    nx = field.coeffs.shape[0]
    field.coeffs[..., 0] = np.arange(nx, dtype=float)[:, None, None]
    assert field.bending_energy() < 1e-24


def test_bending_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    field = BSplineField.covering((-8, -8, -8), (8, 8, 8), 8.0)
    field.coeffs = rng.normal(size=field.coeffs.shape) * 0.5
    grad = field.bending_gradient()
    eps = 1e-6
    for _ in range(5):
        idx = tuple(rng.integers(0, s) for s in field.coeffs.shape)
        e0 = field.bending_energy()
        field.coeffs[idx] += eps
        e1 = field.bending_energy()
        field.coeffs[idx] -= eps
        fd = (e1 - e0) / eps
        assert abs(grad[idx] - fd) < 1e-5


def test_refine_of_identity_is_identity():
    field = BSplineField.covering((-12, -12, -12), (12, 12, 12), 12.0)
    fine = field.refine(5.0)
    assert fine.max_displacement() == 0.0
    assert np.allclose(fine.spacing_mm, 5.0)


def test_refine_approximates_smooth_field():
    field = BSplineField.covering((-12, -12, -12), (12, 12, 12), 12.0)
    field.coeffs[...] = (0.8, 0.0, -0.3)
    fine = field.refine(5.0)
    pts = np.random.default_rng(10).uniform(-10, 10, size=(50, 3))
    assert np.abs(fine.displacement(pts) - field.displacement(pts)).max() < 1e-9


def test_field_validation():
    with pytest.raises(ContractViolation):
        BSplineField((0, 0, 0), (0.0, 1.0, 1.0), np.zeros((4, 4, 4, 3)))
    with pytest.raises(ContractViolation):
        BSplineField((0, 0, 0), (1.0, 1.0, 1.0), np.zeros((3, 4, 4, 3)))
    with pytest.raises(ContractViolation):
        BSplineField((0, 0, 0), (1.0, 1.0, 1.0), np.zeros((4, 4, 4, 2)))
