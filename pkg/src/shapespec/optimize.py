"""Direct shape optimization: gradient descent of a point cloud on the matching loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PointCloud
from .alignment import AlignmentError
from .loss import DegenerateHessianError, LossConfig, SpectralLoss


@dataclass(frozen=True)
class OptimizeConfig:
    eta_x: float = 5e-2
    eta_w: float = 5e-2
    delta_outer: float = 5e-5
    max_steps: int = 10000
    optimize_weights: bool = False
    warm_start_policy: str = "reuse"  # or "fresh"
    multi_start: int = 8
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    snapshot_every: int = 0
    n_max: int = 20
    l_max: int = 10

    def __post_init__(self):
        if not (self.eta_x > 0 and self.eta_w > 0 and self.delta_outer > 0):
            raise ValueError("learning rates and delta_outer must be positive")
        if self.warm_start_policy not in ("reuse", "fresh"):
            raise ValueError("warm_start_policy must be 'reuse' or 'fresh'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class AdamState:
    params: list
    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        params = [np.array(p, dtype=float) for p in params]
        return cls(params, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(state: AdamState, grads, rates, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected ADAM update; returns a new state."""
    t = state.t + 1
    params, ms, vs = [], [], []
    for p, m, v, g, lr in zip(state.params, state.m, state.v, grads, rates):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mh = m / (1.0 - beta1**t)
        vh = v / (1.0 - beta2**t)
        params.append(p - lr * mh / (np.sqrt(vh) + eps))
        ms.append(m)
        vs.append(v)
    return AdamState(params, ms, vs, t)


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    final: PointCloud | None = None
    converged: bool = False

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


class OptimizationError(RuntimeError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


# ADAM rescales each coordinate's step, so a weak centroid penalty lets the
# whole cloud drift; shape optimization therefore defaults to a stiff one
OPTIMIZE_LOSS_CONFIG = LossConfig(lam=1000.0)


def principal_axes(points) -> np.ndarray:
    """Covariance eigenvectors as columns, largest variance first."""
    p = np.asarray(points, dtype=float)
    w, V = np.linalg.eigh(np.cov((p - p.mean(axis=0)).T))
    return V[:, ::-1]


def axis_angle_deg(u, v) -> float:
    """Angle between two undirected axes, in degrees."""
    c = abs(float(np.dot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(min(1.0, c))))


def direct_optimize(
    X0: PointCloud,
    w0,
    target: PointCloud,
    cfg: OptimizeConfig = OptimizeConfig(),
    loss_cfg: LossConfig = OPTIMIZE_LOSS_CONFIG,
    callback=None,
) -> Trajectory:
    """Evolve points (and optionally weights) to minimize the matching loss."""
    loss_cfg = replace(loss_cfg, n_starts=cfg.multi_start, seed=cfg.seed)
    sl = SpectralLoss.from_target_cloud(target, cfg.n_max, cfg.l_max, loss_cfg)
    rng = np.random.default_rng(cfg.seed)
    w = np.array(X0.weights if w0 is None else w0, dtype=float)
    state = AdamState.init([X0.points, w])
    traj = Trajectory()
    q = None
    for step in range(1, cfg.max_steps + 1):
        X, w = state.params
        if cfg.warm_start_policy == "fresh" and q is not None:
            from .rotation import random_quaternion

            q = random_quaternion(rng)
        try:
            lg = sl.gradient(X, w, warm_q=q)
        except (AlignmentError, DegenerateHessianError) as exc:
            raise OptimizationError(f"step {step}: {exc}", traj) from exc
        q = lg.q_star
        if not np.isfinite(lg.value):
            raise OptimizationError(f"step {step}: loss became non-finite", traj)
        rec = {
            "step": step,
            "loss": lg.value,
            "spectral_mse": lg.spectral_mse,
            "com_penalty": lg.com_penalty,
            "q_star": q.tolist(),
            "inner_iterations": lg.inner_iterations,
        }
        traj.records.append(rec)
        if cfg.snapshot_every and (step == 1 or step % cfg.snapshot_every == 0):
            traj.snapshots[step] = np.array(X)
        if callback is not None:
            callback(rec)
        if lg.value < cfg.delta_outer:
            traj.converged = True
            break
        gw = lg.grad_weights if cfg.optimize_weights else np.zeros_like(w)
        if cfg.optimizer == "adam":
            state = adam_step(state, [lg.grad_points, gw], [cfg.eta_x, cfg.eta_w])
        else:
            state = AdamState([X - cfg.eta_x * lg.grad_points, w - cfg.eta_w * gw], state.m, state.v, state.t + 1)
    X, w = state.params
    traj.final = PointCloud(X, w)
    return traj
