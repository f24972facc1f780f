"""Real 3D Zernike basis, point-cloud projection and its adjoint.

Admissible indices: ``0 <= l <= l_max``, ``n in {l, l+2, ..., <= n_max}``.
Moments live in a zero-padded tensor ``[k, l, j]`` with radial slot
``k = (n - l) // 2`` and azimuthal slot ``j = m + l``.

Each polynomial factors as ``Z_nlm(x) = Rt_kl(r^2) * S_lm(x)`` where ``Rt`` is
the radial function divided by ``r^l`` (a polynomial in ``r^2``) and ``S`` is
the real solid harmonic ``r^l Y_lm``.  Both factors are evaluated by stable
recurrences, so values and point-gradients are smooth everywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)


class BasisError(ValueError):
    pass


@lru_cache(maxsize=None)
def _mask(n_max: int, l_max: int) -> np.ndarray:
    K = n_max // 2 + 1
    W = 2 * l_max + 1
    mask = np.zeros((K, l_max + 1, W))
    for ell in range(l_max + 1):
        for k in range(K):
            if ell + 2 * k <= n_max:
                mask[k, ell, : 2 * ell + 1] = 1.0
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class MomentTensor:
    """Dense padded moment tensor of shape ``(n_max//2 + 1, l_max + 1, 2 l_max + 1)``."""

    data: np.ndarray
    n_max: int
    l_max: int

    def __post_init__(self):
        shape = (self.n_max // 2 + 1, self.l_max + 1, 2 * self.l_max + 1)
        if self.data.shape != shape:
            raise BasisError(f"moment data has shape {self.data.shape}, expected {shape}")

    @property
    def mask(self) -> np.ndarray:
        return _mask(self.n_max, self.l_max)

    @property
    def n_spec(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def zeros(cls, n_max: int, l_max: int) -> "MomentTensor":
        return cls(np.zeros((n_max // 2 + 1, l_max + 1, 2 * l_max + 1)), n_max, l_max)

    def get(self, n: int, ell: int, m: int) -> float:
        _check_index(self.n_max, self.l_max, n, ell, m)
        return float(self.data[(n - ell) // 2, ell, m + ell])

    def block(self, ell: int) -> np.ndarray:
        """Azimuthal vectors of degree ``ell`` for every admissible radial slot."""
        kmax = (self.n_max - ell) // 2
        return self.data[: kmax + 1, ell, : 2 * ell + 1]

    def flat(self) -> np.ndarray:
        """Admissible coefficients in ``(l, k, m)`` order."""
        return np.concatenate([self.block(ell).ravel() for ell in range(self.l_max + 1)])

    def __add__(self, other: "MomentTensor") -> "MomentTensor":
        _check_compatible(self, other)
        return MomentTensor(self.data + other.data, self.n_max, self.l_max)

    def __sub__(self, other: "MomentTensor") -> "MomentTensor":
        _check_compatible(self, other)
        return MomentTensor(self.data - other.data, self.n_max, self.l_max)

    def scale(self, a: float) -> "MomentTensor":
        return MomentTensor(self.data * a, self.n_max, self.l_max)

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "l_max": self.l_max,
            "shape": list(self.data.shape),
            "data": self.data.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentTensor":
        n_max, l_max = int(d["n_max"]), int(d["l_max"])
        data = np.asarray(d["data"], dtype=float).reshape(d["shape"])
        mt = cls(data, n_max, l_max)
        if not np.all(np.isfinite(data)):
            raise BasisError("moment data contains non-finite values")
        if np.any(data * (1.0 - mt.mask) != 0.0):
            raise BasisError("padded moment entries must be zero")
        return mt


def _check_compatible(a: MomentTensor, b: MomentTensor) -> None:
    if (a.n_max, a.l_max) != (b.n_max, b.l_max):
        raise BasisError(
            f"truncation mismatch: ({a.n_max}, {a.l_max}) vs ({b.n_max}, {b.l_max})"
        )


def _check_index(n_max, l_max, n, ell, m):
    if not (0 <= ell <= l_max and ell <= n <= n_max and (n - ell) % 2 == 0 and abs(m) <= ell):
        raise BasisError(f"inadmissible index (n={n}, l={ell}, m={m}) for ({n_max}, {l_max})")


# ---------------------------------------------------------------------------
# basis


def _jacobi_coeffs_in_rho(k: int, a: float) -> np.ndarray:
    """Coefficients (ascending in rho) of ``P_k^{(a,0)}(1 - 2 rho)``."""
    out = np.empty(k + 1)
    pref = 1.0 / math.factorial(k)
    for s in range(k + 1):
        # ((x - 1)/2)^s = (-rho)^s
        out[s] = pref * math.comb(k, s) * math.gamma(a + k + s + 1) / math.gamma(a + s + 1) * (-1) ** s
    return out


@dataclass(frozen=True)
class ZernikeBasis:
    n_max: int
    l_max: int
    index_table: tuple = field(repr=False)
    radial_coeffs: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    @property
    def n_spec(self) -> int:
        return sum(2 * ell + 1 for _, ell in self.index_table)

    @property
    def n_radial(self) -> int:
        return self.n_max // 2 + 1

    @property
    def mask(self) -> np.ndarray:
        return _mask(self.n_max, self.l_max)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_radial, self.l_max + 1, 2 * self.l_max + 1)


def build_basis(n_max: int, l_max: int) -> ZernikeBasis:
    """Precompute the admissible index table and radial polynomial data."""
    if l_max < 0 or n_max < 0:
        raise BasisError("truncations must be nonnegative")
    if l_max > n_max:
        raise BasisError(f"l_max={l_max} exceeds n_max={n_max}")
    K = n_max // 2 + 1
    table = []
    coeffs = np.zeros((K, l_max + 1, K))
    norms = np.zeros((K, l_max + 1))
    for ell in range(l_max + 1):
        for k in range(K):
            n = ell + 2 * k
            if n > n_max:
                break
            table.append((n, ell))
            norms[k, ell] = (-1) ** k * math.sqrt(2 * n + 3)
            coeffs[k, ell, : k + 1] = norms[k, ell] * _jacobi_coeffs_in_rho(k, ell + 0.5)
    table.sort()
    coeffs.setflags(write=False)
    norms.setflags(write=False)
    return ZernikeBasis(n_max, l_max, tuple(table), coeffs, norms)


def radial_reduced(basis: ZernikeBasis, rho: np.ndarray, deriv: bool = False):
    """``Rt_kl(rho) = R_nl(r) / r^l`` on ``rho = r^2``, shape ``(P, K, L+1)``.

    Uses the three-term Jacobi recurrence in ``x = 1 - 2 rho``; with
    ``deriv=True`` also returns ``d Rt / d rho``.
    """
    rho = np.asarray(rho, dtype=float)
    x = 1.0 - 2.0 * rho
    K, L = basis.n_radial, basis.l_max
    P = np.zeros(rho.shape + (K, L + 1))
    dP = np.zeros_like(P) if deriv else None
    for ell in range(L + 1):
        kmax = (basis.n_max - ell) // 2
        a = ell + 0.5
        p_prev = np.ones_like(x)
        dp_prev = np.zeros_like(x)
        P[..., 0, ell] = p_prev
        if deriv:
            dP[..., 0, ell] = dp_prev
        if kmax >= 1:
            p_cur = (a + 1.0) + 0.5 * (a + 2.0) * (x - 1.0)
            dp_cur = np.full_like(x, 0.5 * (a + 2.0))
            P[..., 1, ell] = p_cur
            if deriv:
                dP[..., 1, ell] = dp_cur
        for k in range(2, kmax + 1):
            c = 2 * k + a
            a1 = 2.0 * k * (k + a) * (c - 2.0)
            b1 = (c - 1.0) * c * (c - 2.0)
            b0 = (c - 1.0) * a * a
            c1 = 2.0 * (k + a - 1.0) * (k - 1.0) * c
            p_next = ((b1 * x + b0) * p_cur - c1 * p_prev) / a1
            if deriv:
                dp_next = ((b1 * x + b0) * dp_cur + b1 * p_cur - c1 * dp_prev) / a1
                dP[..., k, ell] = dp_next
                dp_prev, dp_cur = dp_cur, dp_next
            P[..., k, ell] = p_next
            p_prev, p_cur = p_cur, p_next
    valid = basis.norms != 0.0
    P = P * basis.norms * valid
    if not deriv:
        return P
    # chain rule dx/drho = -2
    return P, -2.0 * dP * basis.norms * valid


@lru_cache(maxsize=None)
def _sh_norm(l_max: int) -> np.ndarray:
    """Normalization of the real solid harmonics, indexed ``[l, j]``."""
    W = 2 * l_max + 1
    out = np.zeros((l_max + 1, W))
    for ell in range(l_max + 1):
        for m in range(-ell, ell + 1):
            a = abs(m)
            nlm = math.sqrt((2 * ell + 1) / (4 * math.pi) * math.factorial(ell - a) / math.factorial(ell + a))
            out[ell, m + ell] = nlm * (math.sqrt(2.0) if m != 0 else 1.0)
    return out


def solid_harmonics(points: np.ndarray, l_max: int, grad: bool = False):
    """Real solid harmonics ``r^l Y_lm`` as polynomials in Cartesian coordinates.

    Returns ``S`` of shape ``(P, L+1, W)``; with ``grad=True`` also the
    gradient of shape ``(P, L+1, W, 3)``.  Sign convention: no Condon-Shortley
    phase, so the ``l=1`` functions are proportional to ``(y, z, x)``.
    """
    pts = np.asarray(points, dtype=float)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = x * x + y * y + z * z
    P = pts.shape[0]
    W = 2 * l_max + 1
    # A_m + i B_m = (x + i y)^m
    A = np.zeros((l_max + 1, P))
    B = np.zeros((l_max + 1, P))
    A[0] = 1.0
    for m in range(1, l_max + 1):
        A[m] = x * A[m - 1] - y * B[m - 1]
        B[m] = x * B[m - 1] + y * A[m - 1]
    # Pi[l, m] polynomial in (z, rho)
    Pi = np.zeros((l_max + 1, l_max + 1, P))
    if grad:
        Pz = np.zeros_like(Pi)
        Pr = np.zeros_like(Pi)
    dfact = 1.0
    for m in range(l_max + 1):
        if m > 0:
            dfact *= 2 * m - 1
        Pi[m, m] = dfact
        if m + 1 <= l_max:
            Pi[m + 1, m] = (2 * m + 1) * z * dfact
            if grad:
                Pz[m + 1, m] = (2 * m + 1) * dfact
        for ell in range(m + 2, l_max + 1):
            Pi[ell, m] = ((2 * ell - 1) * z * Pi[ell - 1, m] - (ell + m - 1) * rho * Pi[ell - 2, m]) / (ell - m)
            if grad:
                Pz[ell, m] = (
                    (2 * ell - 1) * (Pi[ell - 1, m] + z * Pz[ell - 1, m]) - (ell + m - 1) * rho * Pz[ell - 2, m]
                ) / (ell - m)
                Pr[ell, m] = (
                    (2 * ell - 1) * z * Pr[ell - 1, m] - (ell + m - 1) * (Pi[ell - 2, m] + rho * Pr[ell - 2, m])
                ) / (ell - m)
    norm = _sh_norm(l_max)
    S = np.zeros((P, l_max + 1, W))
    dS = np.zeros((P, l_max + 1, W, 3)) if grad else None
    for ell in range(l_max + 1):
        for m in range(ell + 1):
            jp = ell + m
            S[:, ell, jp] = norm[ell, jp] * Pi[ell, m] * A[m]
            if m > 0:
                jn = ell - m
                S[:, ell, jn] = norm[ell, jn] * Pi[ell, m] * B[m]
            if not grad:
                continue
            # grad Pi = (2x Pr, 2y Pr, Pz + 2z Pr)
            gpi = np.stack([2 * x * Pr[ell, m], 2 * y * Pr[ell, m], Pz[ell, m] + 2 * z * Pr[ell, m]], axis=-1)
            if m > 0:
                gA = np.stack([m * A[m - 1], -m * B[m - 1], np.zeros(P)], axis=-1)
                gB = np.stack([m * B[m - 1], m * A[m - 1], np.zeros(P)], axis=-1)
            else:
                gA = np.zeros((P, 3))
                gB = gA
            dS[:, ell, jp] = norm[ell, jp] * (gpi * A[m][:, None] + Pi[ell, m][:, None] * gA)
            if m > 0:
                dS[:, ell, jn] = norm[ell, jn] * (gpi * B[m][:, None] + Pi[ell, m][:, None] * gB)
    if grad:
        return S, dS
    return S


def eval_zernike(basis: ZernikeBasis, n: int, ell: int, m: int, point) -> float:
    """Value of a single real Zernike polynomial at one point."""
    _check_index(basis.n_max, basis.l_max, n, ell, m)
    p = np.asarray(point, dtype=float).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise BasisError("point must be finite")
    rt = radial_reduced(basis, np.sum(p * p, axis=1))
    S = solid_harmonics(p, basis.l_max)
    return float(rt[0, (n - ell) // 2, ell] * S[0, ell, m + ell])


def zernike_values(basis: ZernikeBasis, points) -> np.ndarray:
    """All basis functions at all points, shape ``(P, K, L+1, W)`` (padded zeros)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rt = radial_reduced(basis, np.sum(pts * pts, axis=1))
    S = solid_harmonics(pts, basis.l_max)
    return rt[:, :, :, None] * S[:, None, :, :] * basis.mask


def project_points(basis: ZernikeBasis, points, weights=None) -> MomentTensor:
    """``c = (1/N) sum_i w_i Z(x_i)`` for points already in the unit-ball frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    N = pts.shape[0]
    if N == 0:
        raise BasisError("cannot project an empty cloud")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float).reshape(N)
    rt = radial_reduced(basis, np.sum(pts * pts, axis=1))
    S = solid_harmonics(pts, basis.l_max)
    data = np.einsum("p,pkl,plj->klj", w / N, rt, S, optimize=True)
    return MomentTensor(data * basis.mask, basis.n_max, basis.l_max)


def project_moments(basis: ZernikeBasis, cloud, weights=None) -> MomentTensor:
    """Project a normalized cloud onto the basis.

    ``weights`` defaults to the cloud's own weights, or ones.
    """
    if weights is None:
        weights = getattr(cloud, "weights", None)
    frac = getattr(cloud, "out_of_ball_fraction", 0.0)
    if frac > 0.0:
        log.debug("projecting cloud with %.3g of points outside the unit ball", frac)
    return project_points(basis, cloud.points, weights)


def projection_vjp(basis: ZernikeBasis, points, weights, cotangent: np.ndarray):
    """Adjoint of :func:`project_points`.

    Given ``G = dL/dc`` of shape ``(..., K, L+1, W)`` returns ``dL/dx_i`` of
    shape ``(..., N, 3)`` and ``dL/dw_i`` of shape ``(..., N)``, both in the
    unit-ball frame.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    N = pts.shape[0]
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float).reshape(N)
    G = np.asarray(cotangent) * basis.mask
    rho = np.sum(pts * pts, axis=1)
    rt, drt = radial_reduced(basis, rho, deriv=True)
    S, dS = solid_harmonics(pts, basis.l_max, grad=True)
    # contract the radial slot first
    a = np.einsum("...klj,pkl->...plj", G, rt, optimize=True)
    da = np.einsum("...klj,pkl->...plj", G, drt, optimize=True)
    gw = np.einsum("...plj,plj->...p", a, S, optimize=True) / N
    gx = (np.einsum("...plj,pljc->...pc", a, dS, optimize=True)
          + 2.0 * pts * np.einsum("...plj,plj->...p", da, S, optimize=True)[..., None]) / N
    return w[:, None] * gx, gw


def point_gradients(basis: ZernikeBasis, points) -> np.ndarray:
    """Gradients of every basis function at every point, ``(P, K, L+1, W, 3)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rt, drt = radial_reduced(basis, np.sum(pts * pts, axis=1), deriv=True)
    S, dS = solid_harmonics(pts, basis.l_max, grad=True)
    g = (rt[:, :, :, None, None] * dS[:, None]
         + 2.0 * (drt[:, :, :, None] * S[:, None])[..., None] * pts[:, None, None, None, :])
    return g * basis.mask[..., None]


def reconstruct_density(moments: MomentTensor, basis: ZernikeBasis, grid) -> np.ndarray:
    """Evaluate the truncated expansion ``sum c Z(x)`` at grid points."""
    if (moments.n_max, moments.l_max) != (basis.n_max, basis.l_max):
        raise BasisError("moments and basis truncations differ")
    pts = np.asarray(grid, dtype=float).reshape(-1, 3)
    rt = radial_reduced(basis, np.sum(pts * pts, axis=1))
    S = solid_harmonics(pts, basis.l_max)
    return np.einsum("klj,pkl,plj->p", moments.data, rt, S, optimize=True)
