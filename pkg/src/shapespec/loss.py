"""Aligned-spectrum matching loss and its gradients.

Gradients with respect to point coordinates and weights combine the analytic
projection adjoint with implicit differentiation through the alignment
optimum ``q*``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (
    AlignmentConfig,
    AlignmentResult,
    OverlapModel,
    align,
    align_multistart,
    newton_polish,
    tangent_basis,
)
from .geometry import PointCloud, normalize_to_unit_ball
from .rotation import as_unit_quaternion, wigner_d_quat, wigner_d_quat_derivatives
from .zernike import (
    MomentTensor,
    ZernikeBasis,
    _check_compatible,
    build_basis,
    point_gradients,
    project_points,
    projection_vjp,
    zernike_values,
)


class DegenerateHessianError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    pinv_threshold: float = 0.01
    alignment: AlignmentConfig = AlignmentConfig(learning_rate=0.1, threshold=1e-8, max_iterations=2000)
    n_starts: int = 8
    seed: int = 0
    warm_solver: str = "newton"  # or "adam"

    def __post_init__(self):
        if self.warm_solver not in ("newton", "adam"):
            raise ValueError("warm_solver must be 'newton' or 'adam'")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 < self.pinv_threshold < 1.0:
            raise ValueError("pinv_threshold must lie in (0, 1)")


@dataclass
class LossGradient:
    value: float
    grad_points: np.ndarray
    grad_weights: np.ndarray
    q_star: np.ndarray
    implicit_term_norm: float
    spectral_mse: float = 0.0
    com_penalty: float = 0.0
    inner_iterations: int = 0
    pinv_rank: int = 0

    def to_dict(self, arrays: bool = False) -> dict:
        d = {
            "loss": self.value,
            "spectral_mse": self.spectral_mse,
            "com_penalty": self.com_penalty,
            "q_star": self.q_star.tolist(),
            "implicit_term_norm": self.implicit_term_norm,
            "inner_iterations": self.inner_iterations,
            "pinv_rank": self.pinv_rank,
            "grad_points_norm": float(np.linalg.norm(self.grad_points)),
            "grad_weights_norm": float(np.linalg.norm(self.grad_weights)),
        }
        if arrays:
            d["grad_points"] = self.grad_points.tolist()
            d["grad_weights"] = self.grad_weights.tolist()
        return d


def shape_matching_loss(c_evol_aligned: MomentTensor, c_target: MomentTensor, com, n_agent: int, lam: float) -> float:
    _check_compatible(c_evol_aligned, c_target)
    com = np.asarray(com, dtype=float)
    mse = float(np.sum((c_target.data - c_evol_aligned.data) ** 2)) / c_target.n_spec
    return mse + lam / n_agent * float(com @ com)


def overlap_grad_q(c_evol: MomentTensor, c_target: MomentTensor, q) -> np.ndarray:
    return OverlapModel(c_evol, c_target).value_grad(np.asarray(q, dtype=float))[1]


def overlap_hessian_q(c_evol: MomentTensor, c_target: MomentTensor, q) -> np.ndarray:
    H = OverlapModel(c_evol, c_target).value_grad_hess(np.asarray(q, dtype=float))[2]
    return 0.5 * (H + H.T)


def riemannian_hessian(H, q, g) -> np.ndarray:
    """``P (H - (q.g) I) P`` with ``P = I - q q^T``."""
    q = np.asarray(q, dtype=float)
    P = np.eye(4) - np.outer(q, q)
    Hr = P @ (np.asarray(H) - (q @ np.asarray(g)) * np.eye(4)) @ P
    return 0.5 * (Hr + Hr.T)


def tangent_eigenvalues(Hr, q) -> np.ndarray:
    """Eigenvalues of ``Hr`` restricted to the tangent frame, by |value| descending."""
    U = tangent_basis(q)
    w = np.linalg.eigvalsh(U.T @ Hr @ U)
    return w[np.argsort(-np.abs(w))]


def hessian_pinv(Hr, pinv_threshold: float = 0.01, abs_floor: float = 1e-300):
    """Pseudoinverse discarding singular values below ``pinv_threshold`` x largest."""
    w, V = np.linalg.eigh(0.5 * (Hr + Hr.T))
    s = np.abs(w)
    smax = s.max()
    if not smax > abs_floor:
        raise DegenerateHessianError(
            "rotational Hessian vanishes: the shape likely has a continuous rotational symmetry"
        )
    keep = s >= pinv_threshold * smax
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T, int(keep.sum())


def implicit_quat_jacobian(riem_hess, mixed, pinv_threshold: float = 0.01):
    """``-[P (H - a I) P]^+ mixed``; returns ``(J, rank)``."""
    Hp, rank = hessian_pinv(riem_hess, pinv_threshold)
    return -Hp @ np.asarray(mixed), rank


def moment_jacobian(basis: ZernikeBasis, cloud, weights=None):
    """Dense Jacobians of all moments w.r.t. raw coordinates and weights.

    ``cloud`` is a :class:`NormalizedCloud`; the normalization uses a fixed
    scale and the cloud's own mean, whose coupling is included.  Returns
    ``dC/dX`` of shape ``(K, L+1, W, N, 3)`` and ``dC/dw`` of shape
    ``(K, L+1, W, N)``.  Memory grows as N times the basis size; intended for
    small clouds and tests.
    """
    pts = cloud.points
    N = pts.shape[0]
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    Z = zernike_values(basis, pts)
    dZ = point_gradients(basis, pts)
    dcdw = np.moveaxis(Z, 0, -1) / N
    J = dZ * (w / N)[:, None, None, None, None]
    J = (J - J.mean(axis=0, keepdims=True)) / cloud.scale
    return np.moveaxis(J, 0, -2), dcdw


def _chain_points(gx_unit: np.ndarray, r_max: float) -> np.ndarray:
    """Pull unit-ball point gradients back through centering and scaling."""
    return (gx_unit - gx_unit.mean(axis=-2, keepdims=True)) / r_max


class SpectralLoss:
    """End-to-end loss of a raw cloud against fixed target moments."""

    def __init__(self, basis: ZernikeBasis, target: MomentTensor, r_max: float, cfg: LossConfig = LossConfig()):
        if (basis.n_max, basis.l_max) != (target.n_max, target.l_max):
            raise ValueError("basis and target truncations differ")
        self.basis = basis
        self.target = target
        self.r_max = float(r_max)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    @classmethod
    def from_target_cloud(cls, target: PointCloud, n_max: int, l_max: int, cfg: LossConfig = LossConfig()):
        basis = build_basis(n_max, l_max)
        nt = normalize_to_unit_ball(target)
        return cls(basis, project_points(basis, nt.points, target.weights), nt.scale, cfg)

    def moments(self, points, weights) -> tuple[MomentTensor, np.ndarray]:
        pts = np.asarray(points, dtype=float)
        com = pts.mean(axis=0)
        c = project_points(self.basis, (pts - com) / self.r_max, weights)
        return c, com

    def solve_alignment(self, c_evol: MomentTensor, warm_q=None, tight: bool = False) -> AlignmentResult:
        cfg = self.cfg.alignment
        if warm_q is None:
            res = align_multistart(c_evol, self.target, self.cfg.n_starts, cfg, self.rng,
                                   extra_starts=[np.array([1.0, 0.0, 0.0, 0.0])])
        elif self.cfg.warm_solver == "newton":
            # near the previous optimum the inner problem is locally concave
            model = OverlapModel(c_evol, self.target)
            q0 = as_unit_quaternion(warm_q)
            q, it = newton_polish(model, q0, tol=1e-11, max_iter=50, full=True)
            if model.value(q) >= model.value(q0) - 1e-14:
                return AlignmentResult(q, [model.value(q0), model.value(q)], it, True)
            res = align(c_evol, self.target, warm_q, cfg)
        else:
            res = align(c_evol, self.target, warm_q, cfg)
        if tight:
            model = OverlapModel(c_evol, self.target)
            q = newton_polish(model, res.q_star)
            res = AlignmentResult(q, res.overlap_trace + [model.value(q)], res.iterations, res.converged)
        return res

    def value(self, points, weights, q=None, tight: bool = False, warm_q=None):
        """Loss at the alignment ``q`` (solved when ``None``); returns ``(loss, q)``."""
        N = len(points)
        c, com = self.moments(points, weights)
        if q is None:
            q = self.solve_alignment(c, warm_q, tight).q_star
        D = wigner_d_quat(self.basis.l_max, q)
        aligned = np.einsum("lij,klj->kli", D.padded, c.data)
        mse = float(np.sum((self.target.data - aligned) ** 2)) / c.n_spec
        return mse + self.cfg.lam / N * float(com @ com), q

    def gradient(self, points, weights, warm_q=None, tight: bool = False, align_result=None) -> LossGradient:
        pts = np.asarray(points, dtype=float)
        N = pts.shape[0]
        w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
        c, com = self.moments(pts, w)
        res = align_result if align_result is not None else self.solve_alignment(c, warm_q, tight)
        q = res.q_star
        ns = c.n_spec
        l_max = self.basis.l_max
        model = OverlapModel(c, self.target)
        _, g, H = model.value_grad_hess(q)
        D, dD = wigner_d_quat_derivatives(l_max, q)
        ct, ce = self.target.data, c.data
        aligned = np.einsum("lij,klj->kli", D, ce)
        resid = ct - aligned
        mse = float(np.sum(resid**2)) / ns
        pen = self.cfg.lam / N * float(com @ com)

        # dL/dc_e at fixed q
        g_direct = -2.0 / ns * np.einsum("lij,kli->klj", D, resid)
        # implicit: (dL/dq) dq*/dc_e with dL/dq = -2 grad M
        Hr = riemannian_hessian(H, q, g)
        if not (np.any(ct) and np.any(ce)):
            # the overlap is identically zero, so the loss does not depend on q
            a, rank = np.zeros(4), 0
        else:
            Hp, rank = hessian_pinv(Hr, self.cfg.pinv_threshold)
            a = 2.0 * Hp @ g
        g_impl = np.einsum("i,ilab,kla->klb", a, dD, ct) / ns
        cot = np.stack([g_direct, g_impl]) * self.basis.mask
        gx, gw = projection_vjp(self.basis, (pts - com) / self.r_max, w, cot)
        gx = _chain_points(gx, self.r_max)
        grad_points = gx[0] + gx[1] + 2.0 * self.cfg.lam * com / N**2
        grad_weights = gw[0] + gw[1]
        impl_norm = float(np.sqrt(np.sum(gx[1] ** 2) + np.sum(gw[1] ** 2)))
        return LossGradient(
            value=mse + pen,
            grad_points=grad_points,
            grad_weights=grad_weights,
            q_star=q,
            implicit_term_norm=impl_norm,
            spectral_mse=mse,
            com_penalty=pen,
            inner_iterations=res.iterations,
            pinv_rank=rank,
        )

    def quat_jacobian(self, points, weights, q):
        """``dq*/dX`` of shape ``(4, N, 3)`` and ``dq*/dw`` of shape ``(4, N)``."""
        pts = np.asarray(points, dtype=float)
        N = pts.shape[0]
        w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
        c, com = self.moments(pts, w)
        model = OverlapModel(c, self.target)
        _, g, H = model.value_grad_hess(q)
        _, dD = wigner_d_quat_derivatives(self.basis.l_max, q)
        # d(grad_q M)_i / dc_e
        dgdc = np.einsum("ilab,kla->iklb", dD, self.target.data) / c.n_spec
        gx, gw = projection_vjp(self.basis, (pts - com) / self.r_max, w, dgdc)
        gx = _chain_points(gx, self.r_max)
        P = np.eye(4) - np.outer(q, q)
        mixed = P @ np.concatenate([gx.reshape(4, -1), gw], axis=1)
        J, rank = implicit_quat_jacobian(riemannian_hessian(H, q, g), mixed, self.cfg.pinv_threshold)
        return J[:, : 3 * N].reshape(4, N, 3), J[:, 3 * N:], rank


def total_gradient(X: PointCloud, weights, target_C: MomentTensor, r_max: float,
                   cfg: LossConfig = LossConfig(), warm_q=None, tight: bool = False) -> LossGradient:
    basis = build_basis(target_C.n_max, target_C.l_max)
    w = X.weights if weights is None else weights
    return SpectralLoss(basis, target_C, r_max, cfg).gradient(X.points, w, warm_q, tight)


def finite_difference_gradient(X: PointCloud, weights, target_C: MomentTensor, r_max: float,
                               cfg: LossConfig = LossConfig(), h: float = 1e-5, q0=None) -> LossGradient:
    """Central differences of the end-to-end loss.

    Each probe re-solves the alignment tightly (Newton polish from the base
    optimum), so the oracle is independent of the implicit formula.
    Costs ``6N + 2M + 1`` loss evaluations for N points (M weights).
    """
    basis = build_basis(target_C.n_max, target_C.l_max)
    sl = SpectralLoss(basis, target_C, r_max, cfg)
    pts = np.array(X.points, dtype=float)
    w = np.array(X.weights if weights is None else weights, dtype=float)
    N = pts.shape[0]
    if q0 is None:
        c, _ = sl.moments(pts, w)
        q0 = sl.solve_alignment(c, None, tight=True).q_star
    q0 = as_unit_quaternion(q0)

    def f(p, ww):
        c, com = sl.moments(p, ww)
        q = newton_polish(OverlapModel(c, target_C), q0)
        return sl.value(p, ww, q)[0]

    base = f(pts, w)
    gp = np.zeros_like(pts)
    for i in range(N):
        for k in range(3):
            pts[i, k] += h
            fp = f(pts, w)
            pts[i, k] -= 2 * h
            fm = f(pts, w)
            pts[i, k] += h
            gp[i, k] = (fp - fm) / (2 * h)
    gw = np.zeros(N)
    for i in range(N):
        w[i] += h
        fp = f(pts, w)
        w[i] -= 2 * h
        fm = f(pts, w)
        w[i] += h
        gw[i] = (fp - fm) / (2 * h)
    return LossGradient(base, gp, gw, q0, 0.0)


def max_relative_error(g, g_ref) -> float:
    """``max |g - g_ref| / max |g_ref|``."""
    g = np.asarray(g)
    g_ref = np.asarray(g_ref)
    scale = np.max(np.abs(g_ref))
    return float(np.max(np.abs(g - g_ref)) / (scale if scale > 0 else 1.0))
