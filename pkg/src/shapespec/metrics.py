"""Baseline shape distances, spectral invariants and the invariance report."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .rotation import real_cob_matrix
from .zernike import MomentTensor


def _pts(X) -> np.ndarray:
    return np.asarray(getattr(X, "points", X), dtype=float)


# ---------------------------------------------------------------------------
# point-based metrics


def chamfer(X, Y) -> float:
    """Sum of the two directed mean squared nearest-neighbour distances."""
    x, y = _pts(X), _pts(Y)
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(np.mean(dxy**2) + np.mean(dyx**2))


def pairwise_distance(X, Y) -> float:
    """Mean squared difference of the two intra-cloud distance matrices."""
    x, y = _pts(X), _pts(Y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"pairwise distance needs equal point counts, got {x.shape[0]} and {y.shape[0]}")
    n = x.shape[0]
    return float(np.sum((cdist(x, x) - cdist(y, y)) ** 2) / n**2)


@dataclass
class SinkhornResult:
    value: float
    plan: np.ndarray
    marginal_error: float
    iterations: int
    converged: bool


def _lse(A: np.ndarray, axis: int) -> np.ndarray:
    m = A.max(axis=axis, keepdims=True)
    return (np.log(np.exp(A - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _sinkhorn_log(la, lb, nC, eps, f, g, max_iter, tol, check_every, a):
    err, it = np.inf, 0
    for it in range(1, max_iter + 1):
        f = eps * (la - _lse(nC + g[None, :] / eps, axis=1))
        g = eps * (lb - _lse(nC + f[:, None] / eps, axis=0))
        if it % check_every == 0 or it == max_iter:
            err = float(np.abs(np.exp(_lse(nC + (f[:, None] + g[None, :]) / eps, axis=1)) - a).sum())
            if err <= tol:
                break
    return f, g, err, it


def sinkhorn(a, b, C, eps: float, max_iter: int = 1000, tol: float = 1e-6, f0=None, g0=None,
             check_every: int = 10):
    """Sinkhorn with dual potentials; returns ``(plan, f, g, err, iterations, converged)``.

    Runs matrix scaling on a kernel stabilized by the current potentials and
    absorbs the scalings back into the potentials whenever they grow large.
    Falls back to log-domain updates if the kernel underflows. ``err`` is the
    L1 row-marginal violation (columns are exact after each sweep).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    f = np.zeros_like(a) if f0 is None else np.array(f0, dtype=float)
    g = np.zeros_like(b) if g0 is None else np.array(g0, dtype=float)
    nC = -C / eps
    err, it = np.inf, 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        K = np.exp(nC + (f[:, None] + g[None, :]) / eps)
        u, v = np.ones_like(a), np.ones_like(b)
        ok = True
        while it < max_iter:
            it += 1
            u = a / (K @ v)
            v = b / (K.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                ok = False
                break
            big = max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > 30.0
            if big:
                f, g = f + eps * np.log(u), g + eps * np.log(v)
                K = np.exp(nC + (f[:, None] + g[None, :]) / eps)
                u, v = np.ones_like(a), np.ones_like(b)
            if it % check_every == 0 or it == max_iter:
                err = float(np.abs(u * (K @ v) - a).sum())
                if err <= tol:
                    break
    if ok:
        f, g = f + eps * np.log(u), g + eps * np.log(v)
    else:
        f, g, err, extra = _sinkhorn_log(np.log(a), np.log(b), nC, eps, f, g, max_iter, tol, check_every, a)
        it = extra
    plan = np.exp(nC + (f[:, None] + g[None, :]) / eps)
    return plan, f, g, err, it, err <= tol


def sinkhorn_emd(X, Y, eps: float = 0.01, max_iter: int = 2000, tol: float = 1e-6) -> SinkhornResult:
    """Entropic transport cost with Euclidean (unsquared) ground cost."""
    x, y = _pts(X), _pts(Y)
    a = np.full(len(x), 1.0 / len(x))
    b = np.full(len(y), 1.0 / len(y))
    C = cdist(x, y)
    plan, _, _, err, it, ok = sinkhorn(a, b, C, eps, max_iter, tol)
    return SinkhornResult(float(np.sum(plan * C)), plan, err, it, ok)


def _gw_descent(C1, C2, a, b, const, plan, eps, max_iter, tol, sinkhorn_iter):
    f = g = None
    err, ok, it = np.inf, False, 0
    for it in range(1, max_iter + 1):
        tens = const - 2.0 * C1 @ plan @ C2.T
        new, f, g, err, _, _ = sinkhorn(a, b, 2.0 * tens, eps, sinkhorn_iter, 1e-6, f, g)
        delta = float(np.abs(new - plan).sum())
        plan = new
        if delta < tol:
            ok = True
            break
    tens = const - 2.0 * C1 @ plan @ C2.T
    return SinkhornResult(float(np.sum(tens * plan)), plan, err, it, ok and err <= 1e-6)


def entropic_gw(X, Y, eps: float = 0.01, max_iter: int = 100, tol: float = 1e-9,
                sinkhorn_iter: int = 1000, restarts: int = 4, seed: int = 0) -> SinkhornResult:
    """Entropic Gromov-Wasserstein discrepancy with square loss.

    Alternates a linearization of the quartic objective with a Sinkhorn
    projection, starting from the product coupling ``a b^T``. When that
    coupling is itself stationary (clouds whose points are intrinsically
    indistinguishable), ``restarts`` randomly perturbed couplings are also
    descended and the lowest value is kept.
    """
    x, y = _pts(X), _pts(Y)
    C1, C2 = cdist(x, x), cdist(y, y)
    a = np.full(len(x), 1.0 / len(x))
    b = np.full(len(y), 1.0 / len(y))
    const = np.outer(C1**2 @ a, np.ones(len(y))) + np.outer(np.ones(len(x)), C2**2 @ b)
    prod = np.outer(a, b)
    best = _gw_descent(C1, C2, a, b, const, prod, eps, max_iter, tol, sinkhorn_iter)
    if best.iterations == 1 and restarts > 0:
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            start = prod * rng.uniform(0.5, 1.5, prod.shape)
            start, *_ = sinkhorn(a, b, -eps * np.log(start), eps, sinkhorn_iter, 1e-12)
            res = _gw_descent(C1, C2, a, b, const, start, eps, max_iter, tol, sinkhorn_iter)
            if res.value < best.value:
                best = res
    return best


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients


def _f(n: int) -> int:
    return math.factorial(n)


def clebsch_gordan(l1: int, m1: int, l2: int, m2: int, l3: int, m3: int) -> float:
    """``<l1 m1; l2 m2 | l3 m3>`` by Racah's closed form (exact rational sum)."""
    if m3 != m1 + m2 or not (abs(l1 - l2) <= l3 <= l1 + l2):
        return 0.0
    if abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        return 0.0
    pre = Fraction(
        (2 * l3 + 1) * _f(l3 + l1 - l2) * _f(l3 - l1 + l2) * _f(l1 + l2 - l3),
        _f(l1 + l2 + l3 + 1),
    ) * (_f(l3 + m3) * _f(l3 - m3) * _f(l1 - m1) * _f(l1 + m1) * _f(l2 - m2) * _f(l2 + m2))
    s = Fraction(0)
    kmin = max(0, l2 - l3 - m1, l1 - l3 + m2)
    kmax = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    for k in range(kmin, kmax + 1):
        den = (_f(k) * _f(l1 + l2 - l3 - k) * _f(l1 - m1 - k) * _f(l2 + m2 - k)
               * _f(l3 - l2 + m1 + k) * _f(l3 - l1 - m2 + k))
        s += Fraction((-1) ** k, den)
    val = s * s * pre
    return math.copysign(math.sqrt(float(val)), float(s))


@lru_cache(maxsize=None)
def cg_tensor(l1: int, l2: int, l3: int) -> np.ndarray:
    """Dense ``(2l1+1, 2l2+1, 2l3+1)`` array of coefficients."""
    T = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                T[m1 + l1, m2 + l2, m3 + l3] = clebsch_gordan(l1, m1, l2, m2, l3, m3)
    T.setflags(write=False)
    return T


# ---------------------------------------------------------------------------
# selection rules


def _triangle(a: int, b: int, c: int) -> bool:
    return abs(a - b) <= c <= a + b


def bispectrum_indices(l_max: int) -> list[tuple[int, int, int]]:
    """Ordered triples obeying the triangle rule with an even degree sum."""
    out = []
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            lo = abs(l1 - l2)
            start = lo + ((l1 + l2 + lo) % 2)
            for l3 in range(start, min(l1 + l2, l_max) + 1, 2):
                out.append((l1, l2, l3))
    return out


def intermediate_degrees(l1: int, l2: int, l3: int, l4: int) -> list[int]:
    """Admissible coupling degrees: both triangles and both parities."""
    lo = max(abs(l1 - l2), abs(l3 - l4))
    hi = min(l1 + l2, l3 + l4)
    return [lp for lp in range(lo, hi + 1) if (l1 + l2 + lp) % 2 == 0 and (l3 + l4 + lp) % 2 == 0]


def trispectrum_indices(l_max: int) -> list[tuple[int, int, int, int]]:
    out = []
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            for l3 in range(l_max + 1):
                for l4 in range(l_max + 1):
                    if intermediate_degrees(l1, l2, l3, l4):
                        out.append((l1, l2, l3, l4))
    return out


# ---------------------------------------------------------------------------
# invariants


@dataclass(frozen=True)
class InvariantVector:
    order: int
    values: np.ndarray
    index: tuple  # (radial slot, degree tuple) per value
    n_tuples: int

    def distance(self, other: "InvariantVector", n_max: int, l_max: int) -> float:
        if self.order != other.order or self.index != other.index:
            raise ValueError("invariant vectors are not comparable")
        sq = float(np.sum((self.values - other.values) ** 2))
        if self.order == 2:
            return sq / max(1, n_max * l_max)
        return sq / max(1, n_max * self.n_tuples)


def _complex_blocks(C: MomentTensor):
    """Complex-basis coefficient vectors ``a = conj(Q) c`` per degree, shape ``(K, 2l+1)``."""
    return [C.data[:, ell, : 2 * ell + 1] @ real_cob_matrix(ell).conj().T for ell in range(C.l_max + 1)]


def _normalized_blocks(C: MomentTensor):
    """``c / sqrt(cbar_l)`` with ``cbar_l = sum_{n,m} c^2 / (n_max (2l+1))``; zero when ``cbar_l = 0``."""
    blocks = _complex_blocks(C)
    out = []
    for ell, a in enumerate(blocks):
        cbar = float(np.sum(np.abs(a) ** 2)) / (max(1, C.n_max) * (2 * ell + 1))
        out.append(a / math.sqrt(cbar) if cbar > 0 else np.zeros_like(a))
    return out


def _slots(C: MomentTensor, degrees) -> range:
    """Radial slots at which every degree in ``degrees`` is admissible."""
    return range((C.n_max - max(degrees)) // 2 + 1)


def _couple(u: np.ndarray, v: np.ndarray, l1: int, l2: int, lp: int) -> np.ndarray:
    return np.einsum("abM,a,b->M", cg_tensor(l1, l2, lp), u, v)


def spectral_invariants(C: MomentTensor, order: int) -> InvariantVector:
    """Power spectrum (2), bispectrum (3) or trispectrum (4) per radial slot.

    Higher orders use the complex basis with the last factor(s) conjugated,
    which makes the contraction rotation invariant.
    """
    L = C.l_max
    if order == 2:
        vals, idx = [], []
        for ell in range(L + 1):
            for k in _slots(C, (ell,)):
                vals.append(float(np.sum(C.data[k, ell, : 2 * ell + 1] ** 2)) / (2 * ell + 1))
                idx.append((k, (ell,)))
        return InvariantVector(2, np.array(vals), tuple(idx), L + 1)
    blocks = _normalized_blocks(C)
    if order == 3:
        tuples = bispectrum_indices(L)
        vals, idx = [], []
        for t in tuples:
            l1, l2, l3 = t
            for k in _slots(C, t):
                u = _couple(blocks[l1][k], blocks[l2][k], l1, l2, l3)
                vals.append(np.vdot(blocks[l3][k], u))
                idx.append((k, t))
        return InvariantVector(3, _real_part(vals), tuple(idx), len(tuples))
    if order == 4:
        tuples = trispectrum_indices(L)
        coupled = {}
        vals, idx = [], []
        for t in tuples:
            l1, l2, l3, l4 = t
            for k in _slots(C, t):
                acc = 0.0 + 0.0j
                for lp in intermediate_degrees(*t):
                    for pair in ((l1, l2), (l3, l4)):
                        key = (k, pair, lp)
                        if key not in coupled:
                            coupled[key] = _couple(blocks[pair[0]][k], blocks[pair[1]][k], pair[0], pair[1], lp)
                    acc += np.vdot(coupled[(k, (l3, l4), lp)], coupled[(k, (l1, l2), lp)])
                vals.append(acc)
                idx.append((k, t))
        return InvariantVector(4, _real_part(vals), tuple(idx), len(tuples))
    raise ValueError(f"order must be 2, 3 or 4, got {order}")


def _real_part(vals, tol: float = 1e-8) -> np.ndarray:
    v = np.asarray(vals, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(v)))) if v.size else 1.0
    resid = float(np.max(np.abs(v.imag))) if v.size else 0.0
    if resid > tol * scale:
        raise ArithmeticError(f"invariant has imaginary residue {resid:.3g}")
    return v.real.copy()


def spectrum_distance(CX: MomentTensor, CY: MomentTensor, order: int) -> float:
    a = spectral_invariants(CX, order)
    b = spectral_invariants(CY, order)
    return a.distance(b, CX.n_max, CX.l_max)


# ---------------------------------------------------------------------------
# invariance report

VARIANTS = ("self", "permuted", "subsampled", "rotated", "mirrored")
PROPERTIES = {"permuted": "permutation", "subsampled": "count", "rotated": "rotation", "mirrored": "reflection"}
METRICS = ("chamfer", "emd", "pairwise", "gw", "power", "bispectrum", "trispectrum", "loss")

# Cells of the property pattern that the report is expected to reproduce.
# True means the metric is invariant to the variant, False means it reacts.
EXPECTED_PATTERN = {
    "chamfer": {"rotation": False},
    "emd": {"rotation": False},
    "pairwise": {"permutation": False, "count": False},
    "gw": {"permutation": True, "rotation": True, "count": False},
    "power": {"permutation": True, "count": True, "rotation": True, "reflection": True},
    "bispectrum": {"permutation": True, "count": True, "rotation": True, "reflection": True},
    "trispectrum": {"permutation": True, "count": True, "rotation": True, "reflection": True},
    "loss": {"permutation": True, "count": True, "rotation": True, "reflection": False},
}


@dataclass(frozen=True)
class ReportParams:
    n_max: int = 10
    l_max: int = 6
    eps: float = 0.01
    tau: float = 0.1
    gw_max_iter: int = 100
    emd_max_iter: int = 5000
    loss_starts: int = 32
    seed: int = 0

    def digest(self) -> str:
        import hashlib
        import json
        from dataclasses import asdict

        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def bunny_fixtures(n: int = 1000, seed: int = 0, sub_fraction: float = 0.5) -> dict:
    """Self, permuted, subsampled, rotated, mirrored bunny plus a distinct ellipsoid."""
    from .geometry import bunny, ellipsoid, mirror_points, rotate_points
    from .rotation import random_quaternion

    rng = np.random.default_rng(seed)
    B = bunny(n, seed=seed)
    other = ellipsoid(n, 2.0, seed=seed + 1)
    other = other.with_points(other.points / np.linalg.norm(other.points, axis=1).max())
    return {
        "self": B,
        "permuted": B.subset(rng.permutation(n)),
        "subsampled": B.subset(np.sort(rng.choice(n, int(round(sub_fraction * n)), replace=False))),
        "rotated": rotate_points(B, random_quaternion(rng)),
        "mirrored": mirror_points(B),
        "other": other,
    }


class _Evaluator:
    """Evaluates each metric between the reference cloud and a variant."""

    def __init__(self, ref, params: ReportParams):
        from .geometry import max_radius
        from .zernike import build_basis

        self.ref = ref
        self.p = params
        self.basis = build_basis(params.n_max, params.l_max)
        self.r_max = max_radius(ref)
        self.c_ref = self.moments(ref)
        self._inv_ref = {}
        self._loss = None

    def moments(self, cloud) -> MomentTensor:
        from .geometry import normalize_to_unit_ball
        from .zernike import project_moments

        return project_moments(self.basis, normalize_to_unit_ball(cloud, self.r_max))

    def _cumulative(self, C: MomentTensor, order: int) -> float:
        total = 0.0
        for k in range(2, order + 1):
            if k not in self._inv_ref:
                self._inv_ref[k] = spectral_invariants(self.c_ref, k)
            total += self._inv_ref[k].distance(spectral_invariants(C, k), C.n_max, C.l_max)
        return total

    def __call__(self, metric: str, cloud) -> float:
        p = self.p
        if metric == "chamfer":
            return chamfer(self.ref, cloud)
        if metric == "emd":
            return sinkhorn_emd(self.ref, cloud, p.eps, p.emd_max_iter).value
        if metric == "pairwise":
            try:
                return pairwise_distance(self.ref, cloud)
            except ValueError:
                return float("nan")
        if metric == "gw":
            return entropic_gw(self.ref, cloud, p.eps, p.gw_max_iter).value
        if metric in ("power", "bispectrum", "trispectrum"):
            order = {"power": 2, "bispectrum": 3, "trispectrum": 4}[metric]
            return self._cumulative(self.moments(cloud), order)
        if metric == "loss":
            from .loss import LossConfig, SpectralLoss

            if self._loss is None:
                self._loss = SpectralLoss(self.basis, self.c_ref, self.r_max, LossConfig(n_starts=p.loss_starts, seed=p.seed))
            return self._loss.value(cloud.points, cloud.weights)[0]
        raise ValueError(f"unknown metric {metric!r}")


@dataclass
class InvarianceReport:
    values: dict  # metric -> {variant: value}
    pattern: dict  # metric -> {property: bool}
    params: ReportParams

    def rows(self) -> list:
        h = self.params.digest()
        return [(m, v, val, h) for m, row in self.values.items() for v, val in row.items()]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "variant", "value", "params-hash"])
            for m, v, val, h in self.rows():
                w.writerow([m, v, repr(float(val)), h])

    def mismatches(self, expected: dict = EXPECTED_PATTERN) -> list:
        """Expected cells that the measured pattern does not reproduce."""
        bad = []
        for m, cells in expected.items():
            if m not in self.pattern:
                continue
            for prop, want in cells.items():
                got = self.pattern[m].get(prop)
                if got is not want:
                    bad.append((m, prop, want, got))
        return bad


def classify(values: dict, tau: float) -> dict:
    """Invariance flag per property from one metric's row of values.

    A variant counts as invariant when its value stays within ``tau`` of the
    Self baseline, relative to that baseline. Metrics whose Self value is zero
    are measured relative to the distance to a distinct shape instead.
    A non-finite value (metric undefined for the variant) is not invariant.
    """
    base = values["self"]
    yard = abs(values.get("other", float("nan")))
    scale = abs(base) if abs(base) > 1e-12 * max(yard, 1e-300) else yard
    flags = {}
    for variant, prop in PROPERTIES.items():
        v = values.get(variant)
        if v is None:
            continue
        flags[prop] = bool(np.isfinite(v) and abs(v - base) <= tau * scale)
    return flags


def invariance_report(fixtures: dict, metrics=METRICS, params: ReportParams = ReportParams()) -> InvarianceReport:
    """Evaluate every metric between ``fixtures['self']`` and each variant."""
    missing = [v for v in VARIANTS if v not in fixtures]
    if missing:
        raise ValueError(f"fixture set lacks variants {missing}")
    ev = _Evaluator(fixtures["self"], params)
    names = [v for v in (*VARIANTS, "other") if v in fixtures]
    values, pattern = {}, {}
    for m in metrics:
        values[m] = {v: float(ev(m, fixtures[v])) for v in names}
        pattern[m] = classify(values[m], params.tau)
    return InvarianceReport(values, pattern, params)
