import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from shapespec.geometry import PointCloud, rotate_points
from shapespec.rotation import (
    QuaternionError,
    as_unit_quaternion,
    euler_to_quat,
    quat_angle,
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_euler,
    quat_to_rotation_matrix,
    real_cob_matrix,
    rotate_spectrum,
    rotation_matrix_to_quat,
    slerp,
    su2_generators,
    wigner_d_euler,
    wigner_d_euler_derivatives,
    wigner_d_quat,
    wigner_d_quat_derivatives,
)
from shapespec.zernike import build_basis, project_points, solid_harmonics

from conftest import ball_points, random_unit_quaternion

seeds = st.integers(0, 2**32 - 1)
PERM = np.eye(3)[[1, 2, 0]]  # real l=1 harmonics are ordered (y, z, x)


def test_unit_quaternion_validation():
    assert np.allclose(as_unit_quaternion([2.0, 0, 0, 0], tol=10), [1, 0, 0, 0])
    with pytest.raises(QuaternionError):
        as_unit_quaternion([0.0, 0, 0, 0])
    with pytest.raises(ValueError):
        as_unit_quaternion([1.0, 0, 0])
    with pytest.raises(QuaternionError):
        as_unit_quaternion([np.nan, 0, 0, 1])


def test_axis_angle_examples(rng):
    assert np.array_equal(quat_from_axis_angle([1, 2, 3], 0.0), [1, 0, 0, 0])
    assert np.allclose(quat_from_axis_angle([0, 0, 1], math.pi), [0, 0, 0, 1], atol=1e-16)
    axis = rng.standard_normal(3)
    R = quat_to_rotation_matrix(quat_from_axis_angle(axis, 1.234))
    assert np.allclose(R @ axis, axis, atol=1e-12)


@given(seeds)
def test_multiplication_composes_rotations(seed):
    rng = np.random.default_rng(seed)
    a, b = random_unit_quaternion(rng), random_unit_quaternion(rng)
    assert np.allclose(quat_multiply(a, [1, 0, 0, 0]), a, atol=1e-15)
    assert np.allclose(np.abs(quat_multiply(a, quat_conjugate(a))), [1, 0, 0, 0], atol=1e-15)
    Rab = quat_to_rotation_matrix(quat_multiply(a, b))
    assert np.max(np.abs(Rab - quat_to_rotation_matrix(a) @ quat_to_rotation_matrix(b))) <= 1e-12


@given(seeds)
def test_rotation_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    q = random_unit_quaternion(rng)
    R = quat_to_rotation_matrix(q)
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
    assert abs(np.linalg.det(R) - 1.0) <= 1e-12
    ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    assert np.allclose(R, ref, atol=1e-12)
    assert quat_angle(rotation_matrix_to_quat(R), q) <= 1e-7


def test_rotation_matrix_examples():
    assert np.array_equal(quat_to_rotation_matrix([1, 0, 0, 0]), np.eye(3))
    R = quat_to_rotation_matrix(quat_from_axis_angle([0, 0, 1], math.pi / 2))
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_slerp_examples(rng):
    a, b = random_unit_quaternion(rng), random_unit_quaternion(rng)
    assert np.allclose(slerp(a, b, 0.0)[0], a)
    q1 = slerp(a, b, 1.0)[0]
    assert min(np.abs(q1 - b).max(), np.abs(q1 + b).max()) <= 1e-12
    mid = slerp([1, 0, 0, 0], quat_from_axis_angle([0, 0, 1], math.pi / 2), 0.5)[0]
    assert np.allclose(mid, quat_from_axis_angle([0, 0, 1], math.pi / 4), atol=1e-12)


def test_slerp_angle_grows_linearly(rng):
    a, b = random_unit_quaternion(rng), random_unit_quaternion(rng)
    total = quat_angle(a, b)
    for t in np.linspace(0, 1, 11):
        assert quat_angle(a, slerp(a, b, t)[0]) == pytest.approx(t * total, abs=1e-10)


def test_euler_roundtrip_zyx(rng):
    for _ in range(20):
        ang = rng.uniform([-3, -1.4, -3], [3, 1.4, 3])
        q = euler_to_quat(*ang)
        assert np.allclose(quat_to_euler(q), ang, atol=1e-10)
        ref = Rotation.from_euler("ZYX", ang).as_matrix()
        assert np.allclose(quat_to_rotation_matrix(q), ref, atol=1e-12)


def test_cob_matrix_examples(rng):
    assert np.array_equal(real_cob_matrix(0), [[1.0]])
    Q1 = real_cob_matrix(1)
    s = 1 / math.sqrt(2)
    assert set(np.round(np.abs(Q1[Q1 != 0]), 12)) <= {round(s, 12), 1.0}
    for ell in range(8):
        Q = real_cob_matrix(ell)
        assert np.allclose(Q @ Q.conj().T, np.eye(2 * ell + 1), atol=1e-14)
    # Q maps real harmonics to complex ones at random directions
    pts = rng.standard_normal((10, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    theta, phi = np.arccos(pts[:, 2]), np.arctan2(pts[:, 1], pts[:, 0])
    for ell in (1, 3, 5):
        real = solid_harmonics(pts, ell)[:, ell, : 2 * ell + 1]
        cplx = np.stack([sph_harm_y(ell, m, theta, phi) for m in range(-ell, ell + 1)], axis=1)
        assert np.max(np.abs(real @ real_cob_matrix(ell).T - cplx)) <= 1e-12


def test_generators():
    assert np.all(su2_generators(0).real == 0.0)
    for ell in range(11):
        G = su2_generators(ell)
        assert np.max(np.abs(G.jx @ G.jy - G.jy @ G.jx - 1j * G.jz)) <= 1e-12
        for A in G.real:
            assert np.max(np.abs(A + A.T)) <= 1e-12
    Gz = su2_generators(1).real[2]
    theta = 0.7
    D1 = wigner_d_quat(1, quat_from_axis_angle([0, 0, 1], theta))[1]
    assert np.max(np.abs(expm(theta * Gz) - D1)) <= 1e-10


def test_identity_blocks():
    D = wigner_d_quat(10, [1, 0, 0, 0])
    for ell in range(11):
        assert np.allclose(D[ell], np.eye(2 * ell + 1), atol=1e-15)
    E = wigner_d_euler(6, 0, 0, 0)
    for ell in range(7):
        assert np.allclose(E[ell], np.eye(2 * ell + 1), atol=1e-15)


@given(seeds)
def test_wigner_blocks_are_orthogonal_and_match_l1(seed):
    rng = np.random.default_rng(seed)
    q = random_unit_quaternion(rng)
    D = wigner_d_quat(10, q)
    for ell in range(11):
        assert np.max(np.abs(D[ell].T @ D[ell] - np.eye(2 * ell + 1))) <= 1e-10
    assert np.max(np.abs(D[1] - PERM @ quat_to_rotation_matrix(q) @ PERM.T)) <= 1e-12


@given(seeds)
def test_representation_property(seed):
    rng = np.random.default_rng(seed)
    a, b = random_unit_quaternion(rng), random_unit_quaternion(rng)
    lhs = wigner_d_quat(10, quat_multiply(a, b)).padded
    rhs = (wigner_d_quat(10, a) @ wigner_d_quat(10, b)).padded
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_double_cover(rng):
    q = random_unit_quaternion(rng)
    assert np.allclose(wigner_d_quat(8, q).padded, wigner_d_quat(8, -q).padded, atol=1e-12)


def test_euler_and_quaternion_agree(rng):
    for _ in range(20):
        ang = rng.uniform([-3, -1.4, -3], [3, 1.4, 3])
        E = wigner_d_euler(10, *ang).padded
        Q = wigner_d_quat(10, euler_to_quat(*ang)).padded
        assert np.max(np.abs(E - Q)) <= 1e-9


def test_euler_composition(rng):
    a, b, g = rng.uniform(-3, 3, 3)
    lhs = (wigner_d_euler(6, a, 0, 0) @ wigner_d_euler(6, 0, b, 0) @ wigner_d_euler(6, 0, 0, g)).padded
    assert np.max(np.abs(lhs - wigner_d_euler(6, a, b, g).padded)) <= 1e-10


def test_quaternion_derivatives(rng):
    q = random_unit_quaternion(rng)
    D, dD = wigner_d_quat_derivatives(4, q)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (wigner_d_quat_derivatives(4, q + e)[0] - wigner_d_quat_derivatives(4, q - e)[0]) / (2 * h)
        assert np.allclose(dD[i], fd, atol=1e-7)


def test_euler_derivatives(rng):
    ang = rng.uniform(-1, 1, 3)
    D, dD, d2D = wigner_d_euler_derivatives(4, ang, order=2)
    h = 1e-5
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        Dp, dDp = wigner_d_euler_derivatives(4, ang + e)
        Dm, dDm = wigner_d_euler_derivatives(4, ang - e)
        assert np.allclose(dD[i], (Dp - Dm) / (2 * h), atol=1e-8)
        assert np.allclose(d2D[:, i], (dDp - dDm) / (2 * h), atol=1e-7)


def test_rotate_spectrum_consistency(rng):
    b = build_basis(12, 8)
    pts = ball_points(rng, 200, radius=0.9)
    C = project_points(b, pts)
    assert np.allclose(rotate_spectrum(C, wigner_d_quat(8, [1, 0, 0, 0])).data, C.data, rtol=0, atol=1e-15)
    q = random_unit_quaternion(rng)
    Cr = rotate_spectrum(C, wigner_d_quat(8, q))
    Pr = project_points(b, rotate_points(PointCloud(pts), q).points)
    assert np.max(np.abs(Cr.data - Pr.data)) <= 1e-10
    assert np.allclose(np.linalg.norm(Cr.data, axis=2), np.linalg.norm(C.data, axis=2), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        rotate_spectrum(C, wigner_d_quat(4, q))
