"""Spectral overlap on S^3 and its maximization by Riemannian ADAM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rotation import (
    _padded_cob,
    _monomials,
    _wigner_terms,
    as_unit_quaternion,
    random_quaternion,
    wigner_d_euler_derivatives,
)
from .zernike import MomentTensor, _check_compatible


class AlignmentError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class AlignmentConfig:
    learning_rate: float = 5e-3
    threshold: float = 1e-8
    max_iterations: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_tol: float | None = None
    polish: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ValueError("invalid ADAM parameters")


@dataclass
class AlignmentResult:
    q_star: np.ndarray
    overlap_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def overlap(self) -> float:
        return self.overlap_trace[-1]

    def to_dict(self, trace: bool = False) -> dict:
        d = {
            "q_star": self.q_star.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "overlap": self.overlap,
        }
        if trace:
            d["overlap_trace"] = list(self.overlap_trace)
        return d


def _pair_matrix(c_evol: MomentTensor, c_target: MomentTensor) -> np.ndarray:
    """``K[l, i, j] = sum_k c_t[k, l, i] c_e[k, l, j]``."""
    _check_compatible(c_evol, c_target)
    return np.einsum("kli,klj->lij", c_target.data, c_evol.data)


class OverlapModel:
    """``M(q) = (1/N_spec) sum c_t . D(q) c_e`` as a polynomial on R^4.

    The pair of spectra is folded into one complex weight per Wigner monomial,
    so each evaluation costs one pass over the monomial table.
    """

    def __init__(self, c_evol: MomentTensor, c_target: MomentTensor):
        self.l_max = c_evol.l_max
        self.n_spec = c_evol.n_spec
        self.c_evol = c_evol
        self.c_target = c_target
        K = _pair_matrix(c_evol, c_target)
        Q = _padded_cob(self.l_max)
        W = np.conj(Q) @ K @ np.swapaxes(Q, -1, -2)
        self.terms = _wigner_terms(self.l_max)
        self.weights = self.terms.coef * W.ravel()[self.terms.flat] / self.n_spec

    def value(self, q) -> float:
        mono, _, _ = _monomials(self.terms, q, 0)
        return float(np.real(self.weights @ mono))

    def value_grad(self, q):
        mono, d1, _ = _monomials(self.terms, q, 1)
        return float(np.real(self.weights @ mono)), np.real(d1 @ self.weights)

    def value_grad_hess(self, q):
        mono, d1, d2 = _monomials(self.terms, q, 2)
        return (
            float(np.real(self.weights @ mono)),
            np.real(d1 @ self.weights),
            np.real(d2 @ self.weights),
        )


def spectral_overlap(c_evol: MomentTensor, c_target: MomentTensor, q) -> float:
    return OverlapModel(c_evol, c_target).value(as_unit_quaternion(q))


def euler_overlap(c_evol: MomentTensor, c_target: MomentTensor, angles, order: int = 1):
    """Overlap with the Euler-angle Wigner-D and its angle derivatives."""
    K = _pair_matrix(c_evol, c_target) / c_evol.n_spec
    out = wigner_d_euler_derivatives(c_evol.l_max, np.asarray(angles, dtype=float), order)
    vals = [np.einsum("...lij,lij->...", a, K) for a in out]
    return tuple(float(v) if np.ndim(v) == 0 else v for v in vals)


def riemannian_gradient(q, euclid_grad) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    g = np.asarray(euclid_grad, dtype=float)
    return g - (q @ g) * q


def exp_map_step(q, v, eta: float, tol: float = 1e-8) -> np.ndarray:
    """Geodesic step ``cos(eta |v|) q - sin(eta |v|) v / |v|``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(q @ v) > tol * max(1.0, np.linalg.norm(v)):
        raise ValueError(f"step is not tangent: q.v = {q @ v:.3g}")
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return q.copy()
    t = eta * nv
    out = math.cos(t) * q - math.sin(t) * v / nv
    return out / np.linalg.norm(out)


def tangent_basis(q) -> np.ndarray:
    """Orthonormal 4x3 frame of the tangent space at ``q`` (QR of ``[q | I]``)."""
    q = np.asarray(q, dtype=float)
    A = np.column_stack([q, np.eye(4)])
    Qm, _ = np.linalg.qr(A)
    U = Qm[:, 1:4]
    return U - np.outer(q, q @ U)


def newton_polish(model: OverlapModel, q, tol: float = 1e-13, max_iter: int = 30, full: bool = False):
    """Riemannian Newton iterations on the 3-d tangent frame to tighten an optimum.

    Returns ``q``, or ``(q, iterations)`` when ``full`` is set.
    """
    q = np.asarray(q, dtype=float)
    it = 0
    for it in range(1, max_iter + 1):
        _, g, H = model.value_grad_hess(q)
        U = tangent_basis(q)
        gr = U.T @ g
        if np.linalg.norm(gr) < tol:
            break
        alpha = q @ g
        Hr = U.T @ H @ U - alpha * np.eye(3)
        w, V = np.linalg.eigh(Hr)
        # only accept ascent directions; clamp the spectrum negative
        w = np.minimum(w, -1e-3 * max(1e-300, np.abs(w).max()))
        s = -V @ ((V.T @ gr) / w)
        step = U @ s
        ns = np.linalg.norm(step)
        if ns == 0.0:
            break
        q = math.cos(ns) * q + math.sin(ns) * step / ns
        q /= np.linalg.norm(q)
    return (q, it) if full else q


def align(
    c_evol: MomentTensor,
    c_target: MomentTensor,
    q0=None,
    cfg: AlignmentConfig = AlignmentConfig(),
    rng: np.random.Generator | None = None,
    model: OverlapModel | None = None,
) -> AlignmentResult:
    """Maximize the overlap by ADAM on S^3 with geodesic retraction.

    Moments are kept in the ambient space, the ADAM direction is re-projected
    onto the tangent space before each step.  ``q0=None`` draws a uniform
    random start.
    """
    if model is None:
        model = OverlapModel(c_evol, c_target)
    if q0 is None:
        q0 = random_quaternion(rng if rng is not None else np.random.default_rng())
    q = as_unit_quaternion(q0)
    m = np.zeros(4)
    v = np.zeros(4)
    M, g_e = model.value_grad(q)
    trace = [M]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g = -riemannian_gradient(q, g_e)
        if cfg.grad_tol is not None and np.linalg.norm(g) < cfg.grad_tol:
            converged = True
            it -= 1
            break
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mh = m / (1.0 - cfg.beta1**it)
        vh = v / (1.0 - cfg.beta2**it)
        d = mh / (np.sqrt(vh) + cfg.eps)
        d = d - (q @ d) * q
        q = exp_map_step(q, d, cfg.learning_rate)
        M_new, g_e = model.value_grad(q)
        if not np.isfinite(M_new):
            raise AlignmentError("overlap became non-finite during alignment", trace)
        trace.append(M_new)
        if abs(M_new - M) < cfg.threshold:
            converged = True
            M = M_new
            break
        M = M_new
    if cfg.polish:
        q = newton_polish(model, q)
        trace.append(model.value(q))
    # keep the representative with nonnegative scalar part
    if q[0] < 0:
        q = -q
    return AlignmentResult(q, trace, it, converged)


def align_multistart(
    c_evol: MomentTensor,
    c_target: MomentTensor,
    n_starts: int = 8,
    cfg: AlignmentConfig = AlignmentConfig(),
    rng: np.random.Generator | None = None,
    extra_starts=(),
) -> AlignmentResult:
    """Run :func:`align` from several random starts and keep the best overlap."""
    rng = rng if rng is not None else np.random.default_rng()
    model = OverlapModel(c_evol, c_target)
    starts = [np.asarray(s, dtype=float) for s in extra_starts]
    starts += [random_quaternion(rng) for _ in range(n_starts)]
    best = None
    for s in starts:
        res = align(c_evol, c_target, s, cfg, model=model)
        if best is None or res.overlap > best.overlap:
            best = res
    return best
