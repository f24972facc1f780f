"""Rotational Hessian probes, Euler-vs-quaternion comparisons and runtime benchmarks."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentConfig, OverlapModel, _pair_matrix, align, exp_map_step, riemannian_gradient
from .geometry import PointCloud, normalize_to_unit_ball, ring_ellipsoid
from .loss import (
    DegenerateHessianError,
    LossConfig,
    SpectralLoss,
    hessian_pinv,
    riemannian_hessian,
    tangent_eigenvalues,
)
from .rotation import (
    as_unit_quaternion,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_euler,
    slerp,
    wigner_d_euler_derivatives,
    wigner_d_quat,
    wigner_d_quat_derivatives,
)
from .zernike import MomentTensor, ZernikeBasis, build_basis, project_points

# one degree about x, the default probe point
PROBE_Q = quat_from_axis_angle([1.0, 0.0, 0.0], math.radians(1.0))


@dataclass
class HessianReport:
    euclidean_4x4: np.ndarray
    tangent_eigenvalues: np.ndarray
    tangent_determinant: float
    pinv_rank: int

    def to_dict(self) -> dict:
        return {
            "euclidean_4x4": self.euclidean_4x4.tolist(),
            "tangent_eigenvalues": self.tangent_eigenvalues.tolist(),
            "tangent_determinant": self.tangent_determinant,
            "pinv_rank": self.pinv_rank,
        }


def cloud_moments(cloud: PointCloud, basis: ZernikeBasis, r_max: float | None = None) -> MomentTensor:
    nc = normalize_to_unit_ball(cloud, r_max)
    return project_points(basis, nc.points, cloud.weights)


def hessian_report(c_evol: MomentTensor, c_target: MomentTensor, q, pinv_threshold: float = 0.01) -> HessianReport:
    q = as_unit_quaternion(q)
    _, g, H = OverlapModel(c_evol, c_target).value_grad_hess(q)
    H = 0.5 * (H + H.T)
    Hr = riemannian_hessian(H, q, g)
    ev = tangent_eigenvalues(Hr, q)
    try:
        _, rank = hessian_pinv(Hr, pinv_threshold)
    except DegenerateHessianError:
        rank = 0
    return HessianReport(H, ev, float(np.prod(ev)), rank)


def hessian_probe(cloud: PointCloud, q=PROBE_Q, basis: ZernikeBasis | None = None, r_max: float | None = None) -> HessianReport:
    """Rotational Hessian of the cloud's self-overlap at ``q``."""
    basis = basis if basis is not None else build_basis(20, 10)
    C = cloud_moments(cloud, basis, r_max)
    return hessian_report(C, C, q)


def sphere_grid(n_phi: int = 32, n_theta: int = 24, n_shells: int = 4) -> PointCloud:
    """Solid ball on an exact latitude-longitude grid (no jitter)."""
    return ring_ellipsoid(n_phi, n_theta, n_shells, elongation=1.0, jitter=False)


def noisy_elongated_sphere(elongation: float = 1.1, noise: float = 0.05, seed: int = 0, **grid) -> PointCloud:
    from .geometry import elongate

    g = elongate(sphere_grid(**grid), "z", elongation)
    rng = np.random.default_rng(seed)
    return g.with_points(g.points + noise * rng.standard_normal(g.points.shape))


@dataclass
class SymmetryRow:
    n_phi: int
    report: HessianReport

    def to_dict(self) -> dict:
        return {"n_phi": self.n_phi, **self.report.to_dict()}


def symmetry_scan(n_phis=(32, 64, 128, 256), elongation: float = 3.0, basis: ZernikeBasis | None = None,
                  seed: int = 0, q=PROBE_Q, axis: str = "x", **ring) -> list[SymmetryRow]:
    """Hessian probes of ring-structured ellipsoids with growing azimuthal resolution.

    The symmetry axis defaults to x, the axis of the default probe rotation,
    so the probe moves along the near-flat direction only.
    """
    basis = basis if basis is not None else build_basis(20, 10)
    rows = []
    for n in n_phis:
        if n < 3:
            raise ValueError("n_phi must be at least 3")
        cloud = ring_ellipsoid(n, elongation=elongation, axis=axis, seed=seed, **ring)
        rows.append(SymmetryRow(int(n), hessian_probe(cloud, q, basis)))
    return rows


# ---------------------------------------------------------------------------
# Euler versus quaternion


def _contract(blocks: np.ndarray, K: np.ndarray):
    """Overlap (or its derivatives) from Wigner-D blocks and the pair matrix."""
    return np.einsum("...lij,lij->...", blocks, K)


class _PairOverlap:
    """Overlap evaluated through explicit Wigner-D blocks for either parameterization."""

    def __init__(self, c_evol: MomentTensor, c_target: MomentTensor):
        self.l_max = c_evol.l_max
        self.K = _pair_matrix(c_evol, c_target) / c_evol.n_spec

    def quat(self, q):
        D, dD = wigner_d_quat_derivatives(self.l_max, q)
        return float(_contract(D, self.K)), _contract(dD, self.K)

    def euler(self, angles, order: int = 1):
        out = wigner_d_euler_derivatives(self.l_max, np.asarray(angles, dtype=float), order)
        vals = [_contract(a, self.K) for a in out]
        return (float(vals[0]), *vals[1:])


@dataclass
class GimbalTraces:
    quaternion: list
    euler: list
    q_final: np.ndarray
    euler_final: np.ndarray
    self_overlap: float

    def to_dict(self) -> dict:
        return {
            "quaternion_trace": list(map(float, self.quaternion)),
            "euler_trace": list(map(float, self.euler)),
            "q_final": self.q_final.tolist(),
            "euler_final": self.euler_final.tolist(),
            "self_overlap": self.self_overlap,
        }


def _ascent(f, x0, step, cfg: AlignmentConfig, method: str = "gd"):
    """Shared first-order loop on ``-M``; ``step(x, d, eta)`` moves against ``d``.

    ``method`` is plain gradient steps (``"gd"``) or ADAM (``"adam"``).
    Stops when the overlap changes by less than ``cfg.threshold``.
    """
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    M, g = f(x)
    trace = [M]
    for it in range(1, cfg.max_iterations + 1):
        if method == "adam":
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            d = (m / (1.0 - cfg.beta1**it)) / (np.sqrt(v / (1.0 - cfg.beta2**it)) + cfg.eps)
        else:
            d = g
        x = step(x, d, cfg.learning_rate)
        M_new, g = f(x)
        trace.append(M_new)
        if abs(M_new - M) < cfg.threshold:
            break
        M = M_new
    return x, trace


GIMBAL_CONFIG = AlignmentConfig(learning_rate=1.0, threshold=1e-10, max_iterations=20000)


def gimbal_fixture(angle_deg: float = 45.0) -> tuple[np.ndarray, np.ndarray]:
    """Source and target orientations at -angle and +angle about x after a 90 degree pitch.

    The pitch puts the straight path between them on the ZYX lock at
    beta = 90 degrees, where the Euler parameterization loses a direction.
    """
    pitch = quat_from_axis_angle([0.0, 1.0, 0.0], math.pi / 2)
    a = math.radians(angle_deg)
    src = quat_multiply(quat_from_axis_angle([1.0, 0.0, 0.0], -a), pitch)
    tgt = quat_multiply(quat_from_axis_angle([1.0, 0.0, 0.0], a), pitch)
    return src, tgt


def gimbal_comparison(source_q, target_q, cloud: PointCloud, basis: ZernikeBasis | None = None,
                      cfg: AlignmentConfig = GIMBAL_CONFIG, method: str = "gd") -> GimbalTraces:
    """Recover the orientation ``target_q`` of ``cloud`` starting from ``source_q``.

    The free variable is the absolute orientation applied to the cloud's
    moments, parameterized either by a unit quaternion (geodesic steps) or
    by ZYX Euler angles (flat steps). Both share the overlap contraction,
    the optimizer and its settings.
    """
    if method not in ("gd", "adam"):
        raise ValueError("method must be 'gd' or 'adam'")
    basis = basis if basis is not None else build_basis(10, 8)
    C = cloud_moments(cloud, basis)
    ct = MomentTensor(np.einsum("lij,klj->kli", wigner_d_quat(basis.l_max, target_q).padded, C.data), C.n_max, C.l_max)
    ov = _PairOverlap(C, ct)
    self_overlap = float(np.sum(ct.data**2)) / C.n_spec

    def fq(q):
        M, g = ov.quat(q)
        return M, -riemannian_gradient(q, g)

    def stepq(q, d, eta):
        d = d - (q @ d) * q
        return exp_map_step(q, d, eta)

    def fe(a):
        M, g = ov.euler(a, 1)
        return M, -g

    q_fin, tq = _ascent(fq, as_unit_quaternion(source_q), stepq, cfg, method)
    a_fin, te = _ascent(fe, np.array(quat_to_euler(source_q)), lambda a, d, eta: a - eta * d, cfg, method)
    return GimbalTraces(tq, te, q_fin, a_fin, self_overlap)


@dataclass
class PathPoint:
    t: float
    q: np.ndarray
    euler: np.ndarray
    quaternion_det: float
    euler_det: float


def slerp_hessian_path(q_a, q_b, steps: int, cloud: PointCloud, basis: ZernikeBasis | None = None) -> list[PathPoint]:
    """Hessian determinants at the optimum along the SLERP path from ``q_a`` to ``q_b``.

    At each path point the target is the cloud's spectrum rotated to that
    point, so the point itself is the optimum in both parameterizations.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    basis = basis if basis is not None else build_basis(10, 8)
    C = cloud_moments(cloud, basis)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        p, _ = slerp(q_a, q_b, float(t))
        ct = MomentTensor(np.einsum("lij,klj->kli", wigner_d_quat(basis.l_max, p).padded, C.data), C.n_max, C.l_max)
        qrep = hessian_report(C, ct, p)
        ang = np.array(quat_to_euler(p))
        _, _, He = _PairOverlap(C, ct).euler(ang, 2)
        out.append(PathPoint(float(t), p, ang, qrep.tangent_determinant, float(np.linalg.det(-He))))
    return out


# ---------------------------------------------------------------------------
# runtime benchmarks


@dataclass
class BenchRecord:
    operation: str
    params: dict
    times: list = field(default_factory=list)

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    @property
    def mad(self) -> float:
        med = self.median
        return statistics.median(abs(t - med) for t in self.times)

    def row(self) -> tuple:
        p = ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return (self.operation, p, self.median, self.mad, len(self.times))


BENCH_HEADER = ("operation", "params", "median_s", "mad_s", "repetitions")


def time_call(fn, repetitions: int = 5) -> list[float]:
    """Wall times of ``repetitions`` calls after one discarded warm-up call."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    fn()
    out = []
    for _ in range(repetitions):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return out


def bench_loss(sizes=(1000, 10000, 50000), l_maxes=(4, 6, 8, 10), n_max: int = 20, repetitions: int = 5,
               seed: int = 0) -> list[BenchRecord]:
    """Projection time and post-projection loss time versus N and l_max."""
    from .geometry import bunny

    recs = []
    for l_max in l_maxes:
        basis = build_basis(max(n_max, l_max), l_max)
        target = bunny(2000, seed=seed)
        sl = SpectralLoss(basis, cloud_moments(target, basis), 1.0, LossConfig(n_starts=2, seed=seed))
        for n in sizes:
            X = bunny(n, seed=seed + 1)
            c, com = sl.moments(X.points, X.weights)
            recs.append(BenchRecord("project", {"N": n, "l_max": l_max},
                                    time_call(lambda: sl.moments(X.points, X.weights), repetitions)))

            def post():
                q = sl.solve_alignment(c).q_star
                D = wigner_d_quat(l_max, q)
                aligned = np.einsum("lij,klj->kli", D.padded, c.data)
                return float(np.sum((sl.target.data - aligned) ** 2)) / c.n_spec + float(com @ com) / n

            recs.append(BenchRecord("loss_post_projection", {"N": n, "l_max": l_max}, time_call(post, repetitions)))
    return recs


def bench_gw(sizes=(100, 200, 400), epsilons=(0.05, 0.01), repetitions: int = 5, seed: int = 0) -> list[BenchRecord]:
    from .geometry import bunny
    from .metrics import entropic_gw

    recs = []
    for n in sizes:
        X = bunny(n, seed=seed)
        Y = bunny(n, seed=seed + 1)
        for eps in epsilons:
            recs.append(BenchRecord("entropic_gw", {"N": n, "eps": eps},
                                    time_call(lambda: entropic_gw(X, Y, eps), repetitions)))
    return recs


def bench_trispectrum(l_maxes=(2, 4, 6), n_max: int = 10, repetitions: int = 5, seed: int = 0) -> list[BenchRecord]:
    from .geometry import bunny
    from .metrics import spectral_invariants

    recs = []
    X = bunny(1000, seed=seed)
    for l_max in l_maxes:
        C = cloud_moments(X, build_basis(n_max, l_max))
        recs.append(BenchRecord("trispectrum", {"l_max": l_max, "n_max": n_max},
                                time_call(lambda: spectral_invariants(C, 4), repetitions)))
    return recs


def bench_gradient(budgets=(10, 20, 40, 80), n_points: int = 10, l_max: int = 4, n_max: int = 8,
                   repetitions: int = 5, seed: int = 0) -> list[BenchRecord]:
    """Per-outer-step cost of implicit and finite-difference gradients versus alignment iterations.

    Both run the alignment for exactly ``budget`` iterations. The implicit
    gradient aligns once and differentiates at the optimum; the finite
    difference baseline re-aligns for each of its ``6N + 1`` loss evaluations.
    """
    from .geometry import bunny

    basis = build_basis(n_max, l_max)
    target = bunny(200, seed=seed)
    X = bunny(n_points, seed=seed + 1)
    w = np.ones(n_points)
    recs = []
    for k in budgets:
        cfg = LossConfig(alignment=AlignmentConfig(learning_rate=0.05, threshold=1e-300, max_iterations=k),
                         n_starts=1, seed=seed, warm_solver="adam")
        sl = SpectralLoss(basis, cloud_moments(target, basis), 1.0, cfg)
        q0 = np.array([1.0, 0.0, 0.0, 0.0])

        def implicit():
            c, _ = sl.moments(X.points, w)
            res = align(c, sl.target, q0, cfg.alignment)
            return sl.gradient(X.points, w, align_result=res)

        def fd(h=1e-5):
            pts = np.array(X.points)

            def f(p):
                c, _ = sl.moments(p, w)
                q = align(c, sl.target, q0, cfg.alignment).q_star
                return sl.value(p, w, q)[0]

            f(pts)
            g = np.zeros_like(pts)
            for i in range(n_points):
                for j in range(3):
                    pts[i, j] += h
                    fp = f(pts)
                    pts[i, j] -= 2 * h
                    fm = f(pts)
                    pts[i, j] += h
                    g[i, j] = (fp - fm) / (2 * h)
            return g

        params = {"iterations": k, "N": n_points, "l_max": l_max}
        recs.append(BenchRecord("gradient_implicit", dict(params), time_call(implicit, repetitions)))
        recs.append(BenchRecord("gradient_fd", dict(params, cost_model_evals=(6 * n_points + 1) * k),
                                time_call(fd, repetitions)))
    return recs


def fit_slope(xs, ys) -> float:
    """Least-squares slope of ``ys`` against ``xs``."""
    return float(np.polyfit(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), 1)[0])


SUITES = {"loss": bench_loss, "gw": bench_gw, "trispectrum": bench_trispectrum, "gradient": bench_gradient}


def runtime_bench(suite=("loss", "gw", "trispectrum", "gradient"), repetitions: int = 5, **kwargs) -> list[BenchRecord]:
    """Run the selected suites; ``kwargs`` maps suite name to keyword overrides."""
    recs = []
    for name in suite:
        if name not in SUITES:
            raise ValueError(f"unknown bench suite {name!r}")
        recs += SUITES[name](repetitions=repetitions, **kwargs.get(name, {}))
    return recs
