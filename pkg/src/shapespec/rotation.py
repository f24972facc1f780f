"""Quaternions, real Wigner-D matrices and spectral rotation.

Quaternions are plain float arrays ordered ``(w, x, y, z)``.  Real spherical
harmonics of degree ``l`` are stored in azimuthal order ``m = -l..l``; for
``l = 1`` that order is ``(y, z, x)``.

Convention (fixed by the projection/rotation commuting test): rotating a
point cloud by ``quat_to_rotation_matrix(q)`` maps its moment vectors as
``c_l -> wigner_d_quat(l_max, q)[l] @ c_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_UNIT_TOL = 1e-6
_AXES = {"x": 0, "y": 1, "z": 2}


class QuaternionError(ValueError):
    """Raised for quaternions that are not (close to) unit norm."""


def as_unit_quaternion(q, tol: float = _UNIT_TOL) -> np.ndarray:
    """Return ``q`` as a unit float array, renormalizing small drift."""
    q = np.asarray(q, dtype=float).reshape(4)
    if not np.all(np.isfinite(q)):
        raise QuaternionError(f"non-finite quaternion {q}")
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > tol:
        raise QuaternionError(f"quaternion norm {norm:.6g} is not within {tol} of 1")
    return q / norm


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    aw, ax, ay, az = np.asarray(a, dtype=float)
    bw, bx, by, bz = np.asarray(b, dtype=float)
    out = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return out / np.linalg.norm(out)


def quat_to_rotation_matrix(q) -> np.ndarray:
    w, x, y, z = as_unit_quaternion(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_matrix_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotation_matrix` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    # Largest-pivot branch for stability.
    tr = np.trace(R)
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(cands))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_angle(a, b) -> float:
    """Rotation angle (radians, in [0, pi]) between the rotations ``a`` and ``b``."""
    d = abs(float(np.dot(as_unit_quaternion(a), as_unit_quaternion(b))))
    return 2.0 * math.acos(min(1.0, d))


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample on S^3 (normalized 4-d Gaussian)."""
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def slerp(a, b, t: float) -> tuple[np.ndarray, bool]:
    """Shortest-arc geodesic interpolation on S^3.

    Returns ``(q, degenerate)``; ``degenerate`` is set when ``a`` and ``b``
    are antipodal after the sign fix, in which case a fixed orthogonal great
    circle is used.
    """
    a = as_unit_quaternion(a)
    b = as_unit_quaternion(b)
    d = float(np.dot(a, b))
    if d < 0.0:
        b, d = -b, -d
    if d > 1.0 - 1e-12:
        q = (1.0 - t) * a + t * b
        return q / np.linalg.norm(q), False
    degenerate = False
    if d < -1.0 + 1e-12:  # unreachable after the sign fix; kept for safety
        degenerate = True
        b = np.array([-a[1], a[0], -a[3], a[2]])
        d = 0.0
    omega = math.acos(d)
    s = math.sin(omega)
    q = (math.sin((1.0 - t) * omega) * a + math.sin(t * omega) * b) / s
    return q / np.linalg.norm(q), degenerate


def euler_to_quat(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Quaternion of ``Rz(alpha) @ Ry(beta) @ Rx(gamma)``."""
    qz = quat_from_axis_angle([0, 0, 1], alpha)
    qy = quat_from_axis_angle([0, 1, 0], beta)
    qx = quat_from_axis_angle([1, 0, 0], gamma)
    return quat_multiply(qz, quat_multiply(qy, qx))


def quat_to_euler(q) -> np.ndarray:
    """ZYX angles ``(alpha, beta, gamma)`` with ``R = Rz Ry Rx``."""
    R = quat_to_rotation_matrix(q)
    beta = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    alpha = math.atan2(R[1, 0], R[0, 0])
    gamma = math.atan2(R[2, 1], R[2, 2])
    return np.array([alpha, beta, gamma])


# ---------------------------------------------------------------------------
# change of basis and generators


@lru_cache(maxsize=None)
def real_cob_matrix(ell: int) -> np.ndarray:
    """Unitary ``Q`` with ``Y_complex[m] = sum_m' Q[m, m'] Y_real[m']``.

    Rows index complex ``m``, columns real ``m'``, both offset by ``ell``.
    """
    size = 2 * ell + 1
    Q = np.zeros((size, size), dtype=complex)
    s = 1.0 / math.sqrt(2.0)
    for m in range(-ell, ell + 1):
        a = abs(m)
        if m == 0:
            Q[ell, ell] = 1.0
        elif m < 0:
            Q[m + ell, -a + ell] = -1j * s
            Q[m + ell, a + ell] = s
        else:
            sign = (-1) ** a
            Q[m + ell, -a + ell] = 1j * sign * s
            Q[m + ell, a + ell] = sign * s
    Q.setflags(write=False)
    return Q


@dataclass(frozen=True)
class GeneratorSet:
    """SU(2) generators of degree ``ell``.

    ``jx, jy, jz`` are the Hermitian complex-basis matrices; ``real`` holds the
    real skew-symmetric forms ``Q^dagger conj(-i J) Q`` in ``(x, y, z)`` order.

    The complex conjugate matches the Cayley-Klein construction of
    :func:`wigner_d_quat`, which produces ``conj(exp(-i theta n.J))``; with it,
    ``expm(theta * real[k])`` is the block of a rotation by ``theta`` about
    axis ``k``.
    """

    ell: int
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray
    real: np.ndarray


@lru_cache(maxsize=None)
def su2_generators(ell: int) -> GeneratorSet:
    size = 2 * ell + 1
    jp = np.zeros((size, size))
    jm = np.zeros((size, size))
    ms = np.arange(-ell, ell + 1)
    for j, mp in enumerate(ms):
        if mp + 1 <= ell:
            jp[j + 1, j] = math.sqrt((ell - mp) * (ell + mp + 1))
        if mp - 1 >= -ell:
            jm[j - 1, j] = math.sqrt((ell + mp) * (ell - mp + 1))
    jx = 0.5 * (jp + jm).astype(complex)
    jy = (jp - jm) / 2j
    jz = np.diag(ms).astype(complex)
    Q = real_cob_matrix(ell)
    real = np.stack([(Q.conj().T @ np.conj(-1j * J) @ Q).real for J in (jx, jy, jz)])
    return GeneratorSet(ell, jx, jy, jz, real)


# ---------------------------------------------------------------------------
# Wigner-D from a quaternion


@dataclass(frozen=True)
class _WignerTerms:
    """Flattened monomial table of the complex Wigner-D polynomial.

    Each term contributes ``coef * a^pa * conj(a)^pac * b^pb * conj(b)^pbc`` to
    the padded complex matrix entry ``(ell, row, col)``.
    """

    l_max: int
    ell: np.ndarray
    row: np.ndarray
    col: np.ndarray
    flat: np.ndarray
    coef: np.ndarray
    exps: np.ndarray  # (T, 4): powers of a, conj(a), b, conj(b)


@lru_cache(maxsize=None)
def _wigner_terms(l_max: int) -> _WignerTerms:
    fact = [math.factorial(i) for i in range(2 * l_max + 2)]
    width = 2 * l_max + 1
    ell_l, row_l, col_l, coef_l, exp_l = [], [], [], [], []
    for ell in range(l_max + 1):
        for mp in range(-ell, ell + 1):
            for m in range(-ell, ell + 1):
                pref = math.sqrt(fact[ell + m] * fact[ell - m] / (fact[ell + mp] * fact[ell - mp]))
                for rho in range(max(0, mp - m), min(ell + mp, ell - m) + 1):
                    c = pref * (-1) ** rho * math.comb(ell + mp, rho) * math.comb(ell - mp, ell - rho - m)
                    ell_l.append(ell)
                    row_l.append(mp + ell)
                    col_l.append(m + ell)
                    coef_l.append(c)
                    exp_l.append((ell + mp - rho, ell - rho - m, rho - mp + m, rho))
    ell_a = np.array(ell_l)
    row_a = np.array(row_l)
    col_a = np.array(col_l)
    flat = (ell_a * width + row_a) * width + col_a
    return _WignerTerms(l_max, ell_a, row_a, col_a, flat, np.array(coef_l), np.array(exp_l))


# d/dq_i expressed through Wirtinger derivatives w.r.t. (a, conj a, b, conj b)
# with a = qw + i qz and b = qy + i qx; rows are (w, x, y, z).
_WIRT = np.array([
    [1, 1, 0, 0],
    [0, 0, 1j, -1j],
    [0, 0, 1, 1],
    [1j, -1j, 0, 0],
], dtype=complex)


def _cayley_klein(q):
    w, x, y, z = q
    a = complex(w, z)
    b = complex(y, x)
    return np.array([a, a.conjugate(), b, b.conjugate()])


def _power_table(vals: np.ndarray, max_pow: int) -> np.ndarray:
    table = np.ones((4, max_pow + 1), dtype=complex)
    for p in range(1, max_pow + 1):
        table[:, p] = table[:, p - 1] * vals
    return table


def _monomials(terms: _WignerTerms, q, order: int):
    """Monomial values and their q-derivatives up to ``order`` (0, 1 or 2).

    Returns ``(mono, d1, d2)`` with shapes ``(T,)``, ``(4, T)``, ``(4, 4, T)``.
    """
    vals = _cayley_klein(q)
    maxp = 2 * terms.l_max
    pw = _power_table(vals, maxp)
    e = terms.exps
    idx = np.arange(4)[:, None]
    factors = pw[idx, e.T]  # (4, T)
    mono = np.prod(factors, axis=0)
    if order == 0:
        return mono, None, None
    # derivative of each factor: p * v^(p-1)
    dfac = e.T * pw[idx, np.maximum(e.T - 1, 0)]
    others = np.empty((4, factors.shape[1]), dtype=complex)
    for v in range(4):
        others[v] = np.prod(np.delete(factors, v, axis=0), axis=0)
    wd1 = dfac * others  # Wirtinger first derivatives, (4, T)
    d1 = _WIRT @ wd1
    if order == 1:
        return mono, d1, None
    ddfac = e.T * (e.T - 1) * pw[idx, np.maximum(e.T - 2, 0)]
    wd2 = np.empty((4, 4, factors.shape[1]), dtype=complex)
    for u in range(4):
        for v in range(4):
            if u == v:
                wd2[u, v] = ddfac[u] * others[u]
            elif u < v:
                rest = np.prod(np.delete(factors, [u, v], axis=0), axis=0)
                wd2[u, v] = dfac[u] * dfac[v] * rest
            else:
                wd2[u, v] = wd2[v, u]
    d2 = np.einsum("iu,jv,uvt->ijt", _WIRT, _WIRT, wd2)
    return mono, d1, d2


@lru_cache(maxsize=None)
def _padded_cob(l_max: int) -> np.ndarray:
    width = 2 * l_max + 1
    Q = np.zeros((l_max + 1, width, width), dtype=complex)
    for ell in range(l_max + 1):
        s = 2 * ell + 1
        Q[ell, :s, :s] = real_cob_matrix(ell)
    return Q


def _scatter(terms: _WignerTerms, values: np.ndarray) -> np.ndarray:
    width = 2 * terms.l_max + 1
    size = (terms.l_max + 1) * width * width
    re = np.bincount(terms.flat, weights=values.real, minlength=size)
    im = np.bincount(terms.flat, weights=values.imag, minlength=size)
    return (re + 1j * im).reshape(terms.l_max + 1, width, width)


def _to_real(X: np.ndarray, l_max: int) -> np.ndarray:
    Q = _padded_cob(l_max)
    return (np.conj(np.swapaxes(Q, -1, -2)) @ X @ Q).real


@dataclass(frozen=True)
class WignerBlockSet:
    """Real Wigner-D blocks stored zero-padded as ``(l_max+1, W, W)``, ``W = 2 l_max + 1``."""

    l_max: int
    padded: np.ndarray

    def __getitem__(self, ell: int) -> np.ndarray:
        s = 2 * ell + 1
        return self.padded[ell, :s, :s]

    def __len__(self) -> int:
        return self.l_max + 1

    def transpose(self) -> "WignerBlockSet":
        return WignerBlockSet(self.l_max, np.swapaxes(self.padded, -1, -2).copy())

    def __matmul__(self, other: "WignerBlockSet") -> "WignerBlockSet":
        if other.l_max != self.l_max:
            raise ValueError("block sets have different l_max")
        return WignerBlockSet(self.l_max, self.padded @ other.padded)


def wigner_d_quat(l_max: int, q) -> WignerBlockSet:
    """Real Wigner-D blocks of the rotation ``q`` for degrees ``0..l_max``."""
    q = as_unit_quaternion(q, tol=1e-9)
    terms = _wigner_terms(l_max)
    mono, _, _ = _monomials(terms, q, 0)
    X = _scatter(terms, terms.coef * mono)
    return WignerBlockSet(l_max, _to_real(X, l_max))


def wigner_d_quat_derivatives(l_max: int, q) -> tuple[np.ndarray, np.ndarray]:
    """Blocks and their Euclidean q-derivatives.

    Returns ``(D, dD)`` with ``D`` of shape ``(L+1, W, W)`` and ``dD`` of shape
    ``(4, L+1, W, W)``; derivatives treat the blocks as polynomials on R^4.
    """
    q = np.asarray(q, dtype=float)
    terms = _wigner_terms(l_max)
    mono, d1, _ = _monomials(terms, q, 1)
    D = _to_real(_scatter(terms, terms.coef * mono), l_max)
    dD = np.stack([_to_real(_scatter(terms, terms.coef * d1[i]), l_max) for i in range(4)])
    return D, dD


# ---------------------------------------------------------------------------
# Wigner-D from Euler angles


@lru_cache(maxsize=None)
def _generator_eig(ell: int):
    g = su2_generators(ell)
    out = []
    for J in (g.jx, g.jy, g.jz):
        w, V = np.linalg.eigh(J)
        out.append((w, V))
    return out


def _expm_herm(ell: int, axis: int, theta: float) -> np.ndarray:
    """``conj(exp(-i theta J_axis))`` in the complex basis (see :class:`GeneratorSet`)."""
    w, V = _generator_eig(ell)[axis]
    return np.conj((V * np.exp(-1j * theta * w)) @ V.conj().T)


def _euler_factors(l_max: int, angles):
    alpha, beta, gamma = angles
    width = 2 * l_max + 1
    Rz = np.zeros((l_max + 1, width, width))
    Ry = np.zeros_like(Rz)
    Rx = np.zeros_like(Rz)
    G = np.zeros((3, l_max + 1, width, width))
    for ell in range(l_max + 1):
        s = 2 * ell + 1
        Q = real_cob_matrix(ell)
        Qh = Q.conj().T
        Rz[ell, :s, :s] = (Qh @ _expm_herm(ell, 2, alpha) @ Q).real
        Ry[ell, :s, :s] = (Qh @ _expm_herm(ell, 1, beta) @ Q).real
        Rx[ell, :s, :s] = (Qh @ _expm_herm(ell, 0, gamma) @ Q).real
        G[:, ell, :s, :s] = su2_generators(ell).real
    return Rz, Ry, Rx, G


def wigner_d_euler(l_max: int, alpha: float, beta: float, gamma: float) -> WignerBlockSet:
    """Real blocks of ``Rz(alpha) Ry(beta) Rx(gamma)`` built from generator exponentials."""
    Rz, Ry, Rx, _ = _euler_factors(l_max, (alpha, beta, gamma))
    return WignerBlockSet(l_max, Rz @ Ry @ Rx)


def wigner_d_euler_derivatives(l_max: int, angles, order: int = 1):
    """Euler blocks with first (and optionally second) angle derivatives.

    Returns ``D`` ``(L+1, W, W)``, ``dD`` ``(3, L+1, W, W)`` and, for
    ``order=2``, ``d2D`` ``(3, 3, L+1, W, W)``; angle order is (alpha, beta, gamma).
    """
    Rz, Ry, Rx, G = _euler_factors(l_max, angles)
    Gx, Gy, Gz = G
    D = Rz @ Ry @ Rx
    # d/dalpha Rz = Gz Rz ; d/dbeta Ry = Gy Ry ; d/dgamma Rx = Gx Rx (generators commute with their own exponentials)
    fz = [Rz, Gz @ Rz, Gz @ Gz @ Rz]
    fy = [Ry, Gy @ Ry, Gy @ Gy @ Ry]
    fx = [Rx, Gx @ Rx, Gx @ Gx @ Rx]
    dD = np.stack([fz[1] @ Ry @ Rx, Rz @ fy[1] @ Rx, Rz @ Ry @ fx[1]])
    if order < 2:
        return D, dD
    d2D = np.empty((3, 3) + D.shape)
    for i in range(3):
        for j in range(i, 3):
            k = [0, 0, 0]
            k[i] += 1
            k[j] += 1
            d2D[i, j] = fz[k[0]] @ fy[k[1]] @ fx[k[2]]
            d2D[j, i] = d2D[i, j]
    return D, dD, d2D


# ---------------------------------------------------------------------------
# spectral rotation


def rotate_spectrum(moments, blocks: WignerBlockSet):
    """Apply ``blocks`` to every azimuthal vector of a moment tensor."""
    from .zernike import MomentTensor

    if blocks.l_max != moments.l_max:
        raise ValueError(f"blocks cover l_max={blocks.l_max}, moments have l_max={moments.l_max}")
    data = np.einsum("lij,klj->kli", blocks.padded, moments.data)
    return MomentTensor(data * moments.mask, moments.n_max, moments.l_max)
