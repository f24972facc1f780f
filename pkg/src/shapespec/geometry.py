"""Point clouds, rigid transforms and synthetic shape generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .rotation import as_unit_quaternion, quat_to_rotation_matrix

_AXES = {"x": 0, "y": 1, "z": 2}


class CloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise CloudError(f"points must be an (N>=1, 3) array, got shape {pts.shape}")
        w = np.ones(pts.shape[0]) if self.weights is None else np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise CloudError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise CloudError("points and weights must be finite")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.weights)

    def with_weights(self, weights) -> "PointCloud":
        return PointCloud(self.points, weights)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.weights[idx])


@dataclass(frozen=True)
class NormalizedCloud:
    """Centered cloud divided by ``scale``; ``com_shift`` is the subtracted mean."""

    points: np.ndarray
    scale: float
    com_shift: np.ndarray
    weights: np.ndarray = field(default=None)

    @property
    def out_of_ball_fraction(self) -> float:
        return float(np.mean(np.sum(self.points**2, axis=1) > 1.0 + 1e-12))

    def restore(self) -> np.ndarray:
        return self.points * self.scale + self.com_shift


def center_of_mass(cloud: PointCloud) -> np.ndarray:
    """Unweighted arithmetic mean of the points."""
    return cloud.points.mean(axis=0)


def max_radius(cloud: PointCloud) -> float:
    """Largest distance from the center of mass."""
    d = cloud.points - center_of_mass(cloud)
    return float(np.sqrt(np.max(np.sum(d * d, axis=1))))


def normalize_to_unit_ball(cloud: PointCloud, r_max: float | None = None) -> NormalizedCloud:
    """Center and scale; ``r_max=None`` uses the cloud's own max radius."""
    com = center_of_mass(cloud)
    if r_max is None:
        r_max = max_radius(cloud)
        if r_max == 0.0:
            r_max = 1.0
    if not (np.isfinite(r_max) and r_max > 0.0):
        raise CloudError(f"invalid scale r_max={r_max}")
    return NormalizedCloud((cloud.points - com) / r_max, float(r_max), com, cloud.weights)


def rotate_points(cloud: PointCloud, q) -> PointCloud:
    R = quat_to_rotation_matrix(as_unit_quaternion(q))
    return cloud.with_points(cloud.points @ R.T)


def mirror_points(cloud: PointCloud, axis: str = "x") -> PointCloud:
    if axis not in _AXES:
        raise CloudError(f"axis must be one of x|y|z, got {axis!r}")
    pts = cloud.points.copy()
    pts[:, _AXES[axis]] *= -1.0
    return cloud.with_points(pts)


def translate(cloud: PointCloud, shift) -> PointCloud:
    return cloud.with_points(cloud.points + np.asarray(shift, dtype=float))


def scale(cloud: PointCloud, factor: float) -> PointCloud:
    return cloud.with_points(cloud.points * factor)


def elongate(cloud: PointCloud, axis_unit, factor: float) -> PointCloud:
    """Stretch the component along ``axis_unit`` by ``factor``."""
    if isinstance(axis_unit, str):
        axis_unit = np.eye(3)[_AXES[axis_unit]]
    u = np.asarray(axis_unit, dtype=float).reshape(3)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise CloudError("elongation axis must be nonzero")
    if abs(nu - 1.0) > 1e-9:
        raise CloudError(f"elongation axis must have unit norm, got {nu}")
    if not factor > 0.0:
        raise CloudError("elongation factor must be positive")
    p = cloud.points
    along = p @ u
    return cloud.with_points(p + np.outer((factor - 1.0) * along, u))


def arc_bend(cloud: PointCloud, bend_radius: float, along: str = "z", toward: str = "x") -> PointCloud:
    """Bend a cloud along one axis into an arc of radius ``bend_radius``.

    With ``t`` the coordinate along ``along`` and ``theta = t / R``, the
    ``toward`` coordinate gains ``R (1 - cos theta)`` and ``t`` becomes
    ``R sin theta``; the third coordinate is untouched.  A point at arc
    length ``t`` on the axis lands on a circle of radius ``R`` centered at
    ``R`` on the ``toward`` axis.
    """
    R = float(bend_radius)
    if not R > 0.0:
        raise CloudError("bend radius must be positive")
    if along == toward or along not in _AXES or toward not in _AXES:
        raise CloudError("along and toward must be two different axes")
    a, b = _AXES[along], _AXES[toward]
    p = cloud.points.copy()
    theta = p[:, a] / R
    p[:, b] = R * (1.0 - np.cos(theta)) + p[:, b]
    p[:, a] = R * np.sin(theta)
    return cloud.with_points(p)


# ---------------------------------------------------------------------------
# generators


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def mean_nn_spacing(points: np.ndarray) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def poisson_disk_ball(radius: float, min_dist: float, rng: np.random.Generator, attempts: int = 30) -> np.ndarray:
    """Bridson dart throwing inside a ball centered at the origin."""
    cell = min_dist / math.sqrt(3.0)
    ncell = int(math.ceil(2 * radius / cell)) + 1
    grid = -np.ones((ncell,) * 3, dtype=int)
    pts: list[np.ndarray] = []

    def cell_of(p):
        return tuple(((p + radius) / cell).astype(int))

    def fits(p):
        if p @ p > radius * radius:
            return False
        c = np.array(cell_of(p))
        lo = np.maximum(c - 2, 0)
        hi = np.minimum(c + 3, ncell)
        near = grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        for j in near[near >= 0]:
            d = pts[j] - p
            if d @ d < min_dist * min_dist:
                return False
        return True

    def add(p):
        grid[cell_of(p)] = len(pts)
        pts.append(p)
        active.append(len(pts) - 1)

    active: list[int] = []
    while True:
        p0 = rng.uniform(-radius, radius, 3)
        if p0 @ p0 <= radius * radius:
            break
    add(p0)
    while active:
        k = int(rng.integers(len(active)))
        base = pts[active[k]]
        for _ in range(attempts):
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            # candidates on the exclusion sphere give a tighter packing
            r = min_dist * (1.0 + 1e-9)
            cand = base + r * v
            if fits(cand):
                add(cand)
                break
        else:
            active.pop(k)
    return np.array(pts)


def farthest_point_order(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Indices of ``m`` points chosen greedily to maximize the gap to those already chosen.

    Any prefix of the returned order is itself an evenly spread subset.
    """
    p = np.asarray(points, dtype=float)
    if not 1 <= m <= len(p):
        raise CloudError(f"m must lie in [1, {len(p)}], got {m}")
    order = np.empty(m, dtype=int)
    order[0] = start
    d = np.sum((p - p[start]) ** 2, axis=1)
    for i in range(1, m):
        j = int(np.argmax(d))
        order[i] = j
        np.minimum(d, np.sum((p - p[j]) ** 2, axis=1), out=d)
    return order


def gen_sphere_cloud(n_shell: int = 250, seed: int = 0, attempts: int = 30) -> PointCloud:
    """Fibonacci shell plus a Poisson-disk core at the shell's mean spacing."""
    if n_shell < 4:
        raise CloudError("n_shell must be at least 4")
    shell = fibonacci_sphere(n_shell)
    d = mean_nn_spacing(shell)
    core = poisson_disk_ball(1.0 - d, d, np.random.default_rng(seed), attempts)
    return PointCloud(np.vstack([shell, core]))


def uniform_ball(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random(n)[:, None] ** (1.0 / 3.0)


def ellipsoid(n: int, factor: float = 2.0, axis: str = "z", seed: int = 0) -> PointCloud:
    """Uniform unit-ball sample elongated along one axis."""
    ball = PointCloud(uniform_ball(n, np.random.default_rng(seed)))
    return elongate(ball, axis, factor)


def crescent(
    n: int = 5000,
    seed: int = 0,
    variant: str = "side",
    bend_radius: float = 2.0,
    elongation: float = 3.0,
    weighted: bool = True,
    symmetrize: bool = True,
    normalize: bool = True,
) -> PointCloud:
    """Elongated ball bent into a crescent.

    ``variant="side"`` elongates and bends along z toward x and weights the
    arms 1 (z >= 0) and 2 (z < 0).  ``variant="upright"`` elongates and bends
    along y toward z.  ``symmetrize`` mirrors half the sample across the
    untouched axis so that mirror symmetry holds exactly.
    """
    rng = np.random.default_rng(seed)
    if variant == "side":
        along, toward, free = "z", "x", 1
    elif variant == "upright":
        along, toward, free = "y", "z", 0
    else:
        raise CloudError(f"unknown crescent variant {variant!r}")
    if symmetrize:
        half = uniform_ball((n + 1) // 2, rng)
        mirror = half.copy()
        mirror[:, free] *= -1.0
        pts = np.vstack([half, mirror])[:n]
    else:
        pts = uniform_ball(n, rng)
    cloud = arc_bend(elongate(PointCloud(pts), along, elongation), bend_radius, along, toward)
    if weighted:
        z = cloud.points[:, 2]
        cloud = cloud.with_weights(np.where(z >= 0.0, 1.0, 2.0))
    if normalize:
        cloud = cloud.with_points(cloud.points / np.max(np.linalg.norm(cloud.points, axis=1)))
    return cloud


# Procedural stand-in for a scanned bunny: a union of ellipsoids with no
# mirror or rotational symmetry.  (center, semi-axes, rotation axis, angle)
_BUNNY_PARTS = (
    ((0.0, 0.0, 0.0), (1.0, 0.8, 0.75), (0.0, 1.0, 0.0), 0.15),      # body
    ((0.85, 0.3, 0.55), (0.45, 0.4, 0.42), (0.0, 1.0, 0.3), -0.3),  # head
    ((0.95, 0.35, 1.15), (0.12, 0.09, 0.45), (1.0, 0.2, 0.0), -0.35),  # left ear
    ((0.7, -0.05, 1.1), (0.11, 0.08, 0.38), (0.3, 1.0, 0.0), -0.6),  # right ear
    ((-0.95, -0.2, 0.15), (0.2, 0.18, 0.18), (0.0, 0.0, 1.0), 0.0),  # tail
    ((0.45, 0.4, -0.6), (0.35, 0.2, 0.18), (0.0, 0.0, 1.0), 0.4),    # front paw
    ((-0.45, 0.6, -0.45), (0.45, 0.22, 0.3), (0.0, 0.0, 1.0), -0.5),  # hind leg
)


def _axis_angle_matrix(axis, angle):
    from .rotation import quat_from_axis_angle

    return quat_to_rotation_matrix(quat_from_axis_angle(axis, angle))


def bunny(n: int = 2503, seed: int = 0, solid: bool = False) -> PointCloud:
    """Chiral bunny-like cloud normalized to the unit ball.

    Surface points of the ellipsoid union by default, or a solid sample.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for c, s, ax, ang in _BUNNY_PARTS:
        parts.append((np.array(c), np.array(s), _axis_angle_matrix(ax, ang) if ang else np.eye(3)))

    def inside(p, skip=-1):
        hit = np.zeros(len(p), dtype=bool)
        for j, (c, s, R) in enumerate(parts):
            if j == skip:
                continue
            loc = (p - c) @ R / s
            hit |= np.sum(loc * loc, axis=1) < 1.0
        return hit

    areas = np.array([s[0] * s[1] + s[1] * s[2] + s[0] * s[2] for _, s, _ in parts])
    vols = np.array([np.prod(s) for _, s, _ in parts])
    prob = (vols if solid else areas) / (vols if solid else areas).sum()
    out = []
    count = 0
    while count < n:
        j = int(rng.choice(len(parts), p=prob))
        c, s, R = parts[j]
        m = 4 * (n - count) // len(parts) + 16
        if solid:
            loc = uniform_ball(m, rng)
        else:
            loc = rng.standard_normal((m, 3))
            loc /= np.linalg.norm(loc, axis=1, keepdims=True)
            # thin out by surface-area density of the stretched sphere
            dens = np.linalg.norm(loc / s, axis=1) * np.prod(s)
            loc = loc[rng.random(m) < dens / dens.max()]
        p = (loc * s) @ R.T + c
        p = p[~inside(p, skip=j)] if not solid else p
        take = p[: max(0, min(len(p), (n - count) // 3 + 1))]
        out.append(take)
        count += len(take)
    pts = np.vstack(out)[:n]
    pts = pts - pts.mean(axis=0)
    return PointCloud(pts / np.max(np.linalg.norm(pts, axis=1)))


def weighted_bunny(n: int = 2000, seed: int = 0, r_max: float = 3.5, threshold: float = 2.75) -> PointCloud:
    """Solid bunny scaled to ``r_max`` with weight 1 above ``threshold`` in z, else 2.

    The procedural bunny is recentered so that its top sits at ``r_max`` in z,
    which places the head and ears above the threshold.
    """
    b = bunny(n, seed, solid=True)
    pts = b.points * r_max
    pts[:, 2] += r_max - pts[:, 2].max()
    return PointCloud(pts, np.where(pts[:, 2] >= threshold, 1.0, 2.0))


def ring_ellipsoid(
    n_phi: int,
    n_theta: int = 48,
    n_shells: int = 8,
    elongation: float = 3.0,
    axis: str = "z",
    seed: int = 0,
    jitter: bool = True,
) -> PointCloud:
    """Solid ellipsoid made of azimuthal rings about ``axis``.

    Each ring has ``n_phi`` points, one drawn uniformly inside each of
    ``n_phi`` equal azimuthal partitions (or at the partition starts when
    ``jitter`` is off); polar rings sit at Gauss-Legendre latitudes and the
    solid is filled by ``n_shells`` radial shells.
    """
    if n_phi < 3:
        raise CloudError("n_phi must be at least 3")
    rng = np.random.default_rng(seed)
    cos_t, w_t = np.polynomial.legendre.leggauss(n_theta)
    radii = ((np.arange(n_shells) + 0.5) / n_shells) ** (1.0 / 3.0)
    pts, wts = [], []
    for r in radii:
        for ct, wt in zip(cos_t, w_t):
            st = math.sqrt(1.0 - ct * ct)
            phi = 2.0 * math.pi * (np.arange(n_phi) + (rng.random(n_phi) if jitter else 0.0)) / n_phi
            pts.append(np.column_stack([r * st * np.cos(phi), r * st * np.sin(phi), np.full(n_phi, r * ct)]))
            # latitude quadrature weight, scaled to unit mean
            wts.append(np.full(n_phi, wt * n_theta / 2.0))
    pts = np.vstack(pts)
    a = _AXES[axis]
    if a != 2:
        pts = pts[:, np.roll([0, 1, 2], a - 2)]
    return elongate(PointCloud(pts, np.concatenate(wts)), axis, elongation)
