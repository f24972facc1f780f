"""Command-line entry point.

Every subcommand reads its parameters from defaults, an optional JSON config
file and command-line flags (in increasing precedence), writes its outputs to
declared paths and emits a manifest JSON describing the run.

numpy is imported lazily so that ``--deterministic`` and the worker-count
variable can limit BLAS/OpenMP thread pools before it loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import zlib
from pathlib import Path

WORKERS_ENV = "SHAPESPEC_WORKERS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def _positive_int(s) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}")
    return v


def _nonneg_int(s) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s!r}")
    return v


def _positive_float(s) -> float:
    v = float(s)
    if not v > 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"expected a positive finite number, got {s!r}")
    return v


def _nonneg_float(s) -> float:
    v = float(s)
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"expected a nonnegative finite number, got {s!r}")
    return v


def _fraction(s) -> float:
    v = float(s)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1], got {s!r}")
    return v


# ---------------------------------------------------------------------------
# parser construction


class _Command:
    """One subcommand: its parser, option defaults and required options."""

    def __init__(self, sub, name: str, help: str, fn):
        self.name = name
        self.fn = fn
        self.parser = sub.add_parser(name, help=help, description=help)
        self.defaults: dict = {}
        self.types: dict = {}
        self.multi: set = set()
        self.flags: set = set()
        self.required: set = set()
        self.inputs: list = []
        self.outputs: list = []
        self._common()

    def opt(self, flag: str, default=None, type=str, help: str = "", required: bool = False,
            nargs=None, choices=None, role: str | None = None):
        dest = flag.lstrip("-").replace("-", "_")
        shown = "required" if required else f"default: {default}"
        self.parser.add_argument(flag, dest=dest, type=type, nargs=nargs, choices=choices,
                                 default=argparse.SUPPRESS, help=f"{help} ({shown})".strip())
        self.defaults[dest] = default
        self.types[dest] = type
        if nargs:
            self.multi.add(dest)
        if required:
            self.required.add(dest)
        if role == "in":
            self.inputs.append(dest)
        elif role == "out":
            self.outputs.append(dest)

    def flag(self, flag: str, help: str = ""):
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS, help=help)
        self.defaults[dest] = False
        self.flags.add(dest)

    def _common(self):
        p = self.parser
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="JSON file of option values; command-line flags take precedence")
        p.add_argument("--manifest", default=argparse.SUPPRESS,
                       help="manifest path (default: next to the primary output)")
        self.opt("--seed", 0, _nonneg_int, "run seed; subsystem streams are derived from it")
        self.flag("--deterministic", "single-threaded numerics for bit-reproducible reductions")


def _coerce(cmd: _Command, key: str, value):
    """Validate a config-file value with the same converter as its flag."""
    if key in cmd.flags:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    conv = cmd.types[key]

    def one(v):
        if isinstance(v, (dict, list, bool)) or v is None:
            raise UsageError(f"config key {key!r} has invalid value {v!r}")
        try:
            return conv(str(v)) if conv is not str else str(v)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None

    if key in cmd.multi:
        if not isinstance(value, list) or not value:
            raise UsageError(f"config key {key!r} must be a non-empty list")
        return [one(v) for v in value]
    return one(value)


def _load_config(cmd: _Command, path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path!r} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    doc = {k.lstrip("-").replace("-", "_"): v for k, v in doc.items()}
    if doc.pop("command", cmd.name) != cmd.name:
        raise UsageError(f"config is for another command, not {cmd.name!r}")
    unknown = sorted(set(doc) - set(cmd.defaults))
    if unknown:
        raise UsageError(f"unknown config keys for {cmd.name!r}: {', '.join(unknown)}")
    choices = {a.dest: a.choices for a in cmd.parser._actions if a.choices}
    out = {}
    for k, v in doc.items():
        out[k] = _coerce(cmd, k, v)
        vals = out[k] if k in cmd.multi else [out[k]]
        if k in choices and any(x not in choices[k] for x in vals):
            raise UsageError(f"config key {k!r} must be one of {sorted(choices[k])}")
    return out


# ---------------------------------------------------------------------------
# run context


class SeedTree:
    """Counter-based streams keyed by subsystem name, independent of draw order."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.used: dict = {}

    def _seq(self, name: str):
        import numpy as np

        return np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))

    def seed_for(self, name: str) -> int:
        s = int(self._seq(name).generate_state(1, dtype="uint32")[0])
        self.used[name] = s
        return s

    def rng(self, name: str):
        import numpy as np

        self.used[name] = "philox"
        return np.random.Generator(np.random.Philox(self._seq(name)))


class Run:
    def __init__(self, cmd: _Command, params: dict, argv: list):
        self.cmd = cmd
        self.params = params
        self.argv = argv
        self.seeds = SeedTree(params["seed"])
        self.outputs: list = []
        self.result: dict = {}

    def out(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p))
        return p


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _file_digest(path) -> str | None:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _versions() -> dict:
    from importlib import metadata

    import numpy
    import scipy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "shapespec": pkg, "platform": platform.platform()}


def _set_threads(deterministic: bool) -> dict:
    # thread pools are sized when numpy first loads
    workers = "1" if deterministic else os.environ.get(WORKERS_ENV)
    applied = {}
    if workers:
        for var in _THREAD_VARS:
            if deterministic or var not in os.environ:
                os.environ[var] = workers
            applied[var] = os.environ[var]
    return {"workers": workers, "applied": applied, "numpy_preloaded": "numpy" in sys.modules}


# ---------------------------------------------------------------------------
# helpers shared by commands


def _cloud(path):
    from .io import load_cloud

    return load_cloud(path)


def _loss_config(p: dict, seeds: SeedTree, **over):
    from .alignment import AlignmentConfig
    from .loss import LossConfig

    al = AlignmentConfig(learning_rate=p.get("lr", 0.1), threshold=p.get("threshold", 1e-8),
                         max_iterations=p.get("max_iter", 2000))
    kw = dict(lam=p.get("lam", 1.0), alignment=al, n_starts=p.get("starts", 8), seed=seeds.seed_for("alignment"))
    kw.update(over)
    return LossConfig(**kw)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(run: Run) -> dict:
    from . import geometry as g
    from .diagnostics import sphere_grid
    from .io import save_cloud

    p = run.params
    s = run.seeds.seed_for("gen")
    shape = p["shape"]
    if shape == "sphere":
        cloud = g.gen_sphere_cloud(p["n_shell"], seed=s)
    elif shape == "sphere-grid":
        cloud = sphere_grid(p["n_phi"])
    elif shape == "ellipsoid":
        cloud = g.ellipsoid(p["n"], p["factor"], p["axis"], seed=s)
    elif shape == "crescent":
        cloud = g.crescent(p["n"], seed=s, variant=p["variant"], weighted=not p["unweighted"])
    elif shape == "bunny":
        cloud = g.bunny(p["n"], seed=s)
    elif shape == "weighted-bunny":
        cloud = g.weighted_bunny(p["n"], seed=s, r_max=p["r_max"] or 3.5, threshold=p["threshold"])
    else:  # ring-ellipsoid
        cloud = g.ring_ellipsoid(p["n_phi"], elongation=p["factor"], axis=p["axis"], seed=s)
    if p["r_max"] and shape != "weighted-bunny":
        cloud = g.scale(cloud, p["r_max"] / g.max_radius(cloud))
    save_cloud(cloud, run.out(p["out"]))
    return {"shape": shape, "points": len(cloud), "weighted": bool((cloud.weights != 1.0).any())}


def cmd_project(run: Run) -> dict:
    from .geometry import normalize_to_unit_ball
    from .io import save_moments
    from .zernike import build_basis, project_moments

    p = run.params
    cloud = _cloud(p["cloud"])
    nc = normalize_to_unit_ball(cloud, p["r_max"])
    C = project_moments(build_basis(p["nmax"], p["lmax"]), nc)
    save_moments(C, run.out(p["out"]))
    return {"n_spec": C.n_spec, "r_max": nc.scale, "out_of_ball_fraction": nc.out_of_ball_fraction,
            "center": nc.com_shift.tolist()}


def cmd_align(run: Run) -> dict:
    from .alignment import AlignmentConfig, align_multistart
    from .io import save_json
    from .loss import SpectralLoss
    from .rotation import quat_to_euler, quat_to_rotation_matrix

    p = run.params
    target, evolved = _cloud(p["target"]), _cloud(p["evolved"])
    cfg = AlignmentConfig(learning_rate=p["lr"], threshold=p["threshold"], max_iterations=p["max_iter"],
                          polish=p["polish"])
    sl = SpectralLoss.from_target_cloud(target, p["nmax"], p["lmax"])
    c, _ = sl.moments(evolved.points, evolved.weights)
    res = align_multistart(c, sl.target, p["starts"], cfg, run.seeds.rng("alignment"),
                           extra_starts=[[1.0, 0.0, 0.0, 0.0]])
    out = res.to_dict(trace=True)
    out["rotation_matrix"] = quat_to_rotation_matrix(res.q_star).tolist()
    out["euler_zyx"] = list(map(float, quat_to_euler(res.q_star)))
    out["self_overlap"] = float((sl.target.data**2).sum()) / sl.target.n_spec
    save_json(out, run.out(p["out"]))
    out.pop("overlap_trace")
    return out


def cmd_loss(run: Run) -> dict:
    from .io import save_json
    from .loss import SpectralLoss

    p = run.params
    target, evolved = _cloud(p["target"]), _cloud(p["evolved"])
    sl = SpectralLoss.from_target_cloud(target, p["nmax"], p["lmax"], _loss_config(p, run.seeds))
    lg = sl.gradient(evolved.points, evolved.weights, tight=True)
    out = lg.to_dict()
    if p["out"]:
        save_json(lg.to_dict(arrays=p["with_gradient"]), run.out(p["out"]))
    return out


def cmd_grad_check(run: Run) -> dict:
    from .io import save_json
    from .loss import SpectralLoss, finite_difference_gradient, max_relative_error, total_gradient

    p = run.params
    target, cloud = _cloud(p["target"]), _cloud(p["cloud"])
    cfg = _loss_config(p, run.seeds)
    sl = SpectralLoss.from_target_cloud(target, p["nmax"], p["lmax"], cfg)
    fd = finite_difference_gradient(cloud, None, sl.target, sl.r_max, cfg, h=p["h"])
    an = total_gradient(cloud, None, sl.target, sl.r_max, cfg, warm_q=fd.q_star, tight=True)
    e_x = max_relative_error(an.grad_points, fd.grad_points)
    e_w = max_relative_error(an.grad_weights, fd.grad_weights)
    out = {"max_relative_error": max(e_x, e_w), "points_relative_error": e_x, "weights_relative_error": e_w,
           "tolerance": p["tol"], "loss": an.value, "pinv_rank": an.pinv_rank,
           "implicit_term_norm": an.implicit_term_norm, "passed": max(e_x, e_w) <= p["tol"]}
    if p["out"]:
        save_json(out, run.out(p["out"]))
    if not out["passed"]:
        raise GradientCheckFailed(out)
    return out


class GradientCheckFailed(RuntimeError):
    def __init__(self, detail: dict):
        super().__init__(f"max relative gradient error {detail['max_relative_error']:.3e} "
                         f"exceeds {detail['tolerance']:.1e}")
        self.detail = detail


def cmd_optimize(run: Run) -> dict:
    from .io import save_cloud, save_json, write_table
    from .optimize import OptimizationError, OptimizeConfig, axis_angle_deg, direct_optimize, principal_axes

    p = run.params
    X0, target = _cloud(p["initial"]), _cloud(p["target"])
    cfg = OptimizeConfig(eta_x=p["eta_x"], eta_w=p["eta_w"], delta_outer=p["delta_outer"],
                         max_steps=p["max_steps"], optimize_weights=p["optimize_weights"],
                         warm_start_policy=p["warm_start"], multi_start=p["starts"],
                         seed=run.seeds.seed_for("optimize"), optimizer=p["optimizer"],
                         snapshot_every=p["snapshot_every"], n_max=p["nmax"], l_max=p["lmax"])
    d = Path(p["out_dir"])
    cols = ("step", "loss", "spectral_mse", "com_penalty", "inner_iterations")

    def dump(traj):
        traj.write_jsonl(run.out(d / "trajectory.jsonl"))
        write_table(run.out(d / "loss_curve.csv"), cols, [[r[c] for c in cols] for r in traj.records])
        for step, pts in sorted(traj.snapshots.items()):
            from .geometry import PointCloud

            save_cloud(PointCloud(pts), run.out(d / f"snapshot_{step:06d}.csv"))

    log_every = p["log_every"]

    def progress(rec):
        if log_every and rec["step"] % log_every == 0:
            print(json.dumps({"step": rec["step"], "loss": rec["loss"]}), file=sys.stderr, flush=True)

    try:
        traj = direct_optimize(X0, None, target, cfg, _loss_config(p, run.seeds), callback=progress)
    except OptimizationError as exc:
        if exc.trajectory is not None:
            dump(exc.trajectory)
        raise
    dump(traj)
    save_cloud(traj.final, run.out(d / "final.csv"))
    A0, At, Af = principal_axes(X0.points), principal_axes(target.points), principal_axes(traj.final.points)
    out = {
        "converged": traj.converged,
        "steps": len(traj.records),
        "final_loss": float(traj.losses[-1]),
        "major_axis_deg_from_initial": axis_angle_deg(Af[:, 0], A0[:, 0]),
        "major_axis_deg_from_target": axis_angle_deg(Af[:, 0], At[:, 0]),
    }
    save_json(out, run.out(d / "summary.json"))
    return out


def cmd_metrics(run: Run) -> dict:
    from .io import save_json
    from .metrics import EXPECTED_PATTERN, ReportParams, bunny_fixtures, invariance_report

    p = run.params
    params = ReportParams(n_max=p["nmax"], l_max=p["lmax"], eps=p["eps"], tau=p["tau"],
                          gw_max_iter=p["gw_max_iter"], emd_max_iter=p["emd_max_iter"],
                          seed=run.seeds.seed_for("loss"))
    fx = bunny_fixtures(p["n"], seed=run.seeds.seed_for("fixtures"), sub_fraction=p["sub_fraction"])
    rep = invariance_report(fx, p["metrics"], params)
    rep.to_csv(run.out(p["out"]))
    mism = rep.mismatches(EXPECTED_PATTERN)
    pattern_path = p["pattern_out"] or str(Path(p["out"]).with_suffix(".pattern.json"))
    doc = {"pattern": rep.pattern, "expected": {m: EXPECTED_PATTERN[m] for m in rep.pattern},
           "mismatches": [dict(zip(("metric", "property", "expected", "measured"), m)) for m in mism],
           "params_hash": params.digest()}
    save_json(doc, run.out(pattern_path))
    return {"mismatches": doc["mismatches"], "params_hash": doc["params_hash"]}


def cmd_diagnose(run: Run) -> dict:
    import numpy as np

    from . import diagnostics as dg
    from .geometry import bunny
    from .io import write_table

    p = run.params
    kind = p["kind"]
    out = run.out(p["out"])
    if kind == "hessian":
        if p["cloud"]:
            fixtures = {Path(p["cloud"]).stem: _cloud(p["cloud"])}
        else:
            fixtures = {"sphere": dg.sphere_grid(),
                        "elongated_noisy": dg.noisy_elongated_sphere(seed=run.seeds.seed_for("noise"))}
        reps = {k: dg.hessian_probe(c) for k, c in fixtures.items()}
        write_table(out, ("fixture", "eig_0", "eig_1", "eig_2", "determinant", "pinv_rank"),
                    [[k, *r.tangent_eigenvalues, r.tangent_determinant, r.pinv_rank] for k, r in reps.items()])
        res = {k: r.to_dict() for k, r in reps.items()}
        if set(reps) == {"sphere", "elongated_noisy"}:
            ds = abs(reps["sphere"].tangent_determinant)
            res["determinant_ratio"] = abs(reps["elongated_noisy"].tangent_determinant) / max(ds, 1e-300)
        return res
    if kind == "symmetry":
        rows = dg.symmetry_scan(p["n_phis"], p["elongation"], seed=run.seeds.seed_for("rings"))
        table = []
        for r in rows:
            e = np.sort(np.abs(r.report.tangent_eigenvalues))
            table.append([r.n_phi, *r.report.tangent_eigenvalues, r.report.tangent_determinant, e[1] / e[0]])
        write_table(out, ("n_phi", "eig_0", "eig_1", "eig_2", "determinant", "separation_ratio"), table)
        return {"n_phi": [t[0] for t in table], "separation_ratio": [float(t[-1]) for t in table]}
    cloud = _cloud(p["cloud"]) if p["cloud"] else bunny(p["n"], seed=run.seeds.seed_for("bunny"))
    src, tgt = dg.gimbal_fixture(p["angle"])
    if kind == "gimbal":
        g = dg.gimbal_comparison(src, tgt, cloud, method=p["method"])
        n = max(len(g.quaternion), len(g.euler))
        rows = [[i, g.quaternion[i] if i < len(g.quaternion) else "", g.euler[i] if i < len(g.euler) else ""]
                for i in range(n)]
        write_table(out, ("iteration", "quaternion_overlap", "euler_overlap"), rows)
        return {"self_overlap": g.self_overlap, "quaternion_final": g.quaternion[-1], "euler_final": g.euler[-1],
                "quaternion_iterations": len(g.quaternion) - 1, "euler_iterations": len(g.euler) - 1,
                "euler_lower": g.euler[-1] < g.quaternion[-1]}
    path = dg.slerp_hessian_path(src, tgt, p["steps"], cloud)
    write_table(out, ("t", "qw", "qx", "qy", "qz", "alpha_deg", "beta_deg", "gamma_deg", "quaternion_det", "euler_det"),
                [[pt.t, *pt.q, *np.degrees(pt.euler), pt.quaternion_det, pt.euler_det] for pt in path])
    qd = np.abs([pt.quaternion_det for pt in path])
    ed = np.abs([pt.euler_det for pt in path])
    return {"euler_min_over_max": float(ed.min() / ed.max()), "quaternion_min_over_max": float(qd.min() / qd.max())}


QUICK_BENCH = {
    "loss": {"sizes": (500, 2000, 8000), "l_maxes": (4, 8), "n_max": 10},
    "gw": {"sizes": (100, 200), "epsilons": (0.05,)},
    "trispectrum": {"l_maxes": (2, 4), "n_max": 8},
    "gradient": {"budgets": (10, 20, 40), "n_points": 6},
}


def cmd_bench(run: Run) -> dict:
    from .diagnostics import BENCH_HEADER, runtime_bench
    from .io import write_table

    p = run.params
    kwargs = {s: dict(QUICK_BENCH[s]) if p["quick"] else {} for s in p["suite"]}
    for s in kwargs:
        kwargs[s]["seed"] = run.seeds.seed_for(f"bench/{s}")
    recs = runtime_bench(p["suite"], p["repetitions"], **kwargs)
    write_table(run.out(p["out"]), BENCH_HEADER, [r.row() for r in recs])
    return {"records": len(recs)}


# ---------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="shapespec",
        description="Rotation-invariant, chirality-sensitive shape matching on Zernike spectra.",
        epilog="Each command prints one JSON line on stdout; exit codes: 0 ok, 1 failure, 2 usage.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    cmds = {}

    c = cmds["gen"] = _Command(sub, "gen", "generate a fixture point cloud as CSV", cmd_gen)
    c.opt("--shape", "sphere", choices=("sphere", "sphere-grid", "ellipsoid", "crescent", "bunny",
                                         "weighted-bunny", "ring-ellipsoid"), help="fixture")
    c.opt("--n", 1000, _positive_int, "number of points")
    c.opt("--n-shell", 250, _positive_int, "shell points of the sphere fixture")
    c.opt("--n-phi", 32, _positive_int, "azimuthal samples per ring")
    c.opt("--factor", 2.0, _positive_float, "elongation factor")
    c.opt("--axis", "z", choices=("x", "y", "z"), help="elongation or symmetry axis")
    c.opt("--variant", "side", choices=("side", "upright"), help="crescent orientation")
    c.flag("--unweighted", "crescent with unit weights")
    c.opt("--r-max", None, _positive_float, "rescale to this max radius about the centroid (weighted bunny: 3.5)")
    c.opt("--threshold", 2.75, float, "weighted bunny height above which weights are 1")
    c.opt("--out", None, required=True, help="output CSV", role="out")

    c = cmds["project"] = _Command(sub, "project", "project a cloud onto the Zernike basis", cmd_project)
    c.opt("--cloud", None, required=True, help="input cloud CSV", role="in")
    c.opt("--nmax", 20, _nonneg_int, "radial truncation")
    c.opt("--lmax", 10, _nonneg_int, "angular truncation")
    c.opt("--r-max", None, _positive_float, "scale (default: the cloud's max radius)")
    c.opt("--out", None, required=True, help="output moments JSON", role="out")

    c = cmds["align"] = _Command(sub, "align", "rotationally align one cloud's spectrum to another's", cmd_align)
    c.opt("--evolved", None, required=True, help="cloud to rotate", role="in")
    c.opt("--target", None, required=True, help="reference cloud", role="in")
    c.opt("--nmax", 20, _nonneg_int, "radial truncation")
    c.opt("--lmax", 10, _nonneg_int, "angular truncation")
    c.opt("--lr", 5e-3, _positive_float, "ADAM learning rate")
    c.opt("--threshold", 1e-8, _positive_float, "overlap change stopping threshold")
    c.opt("--max-iter", 5000, _positive_int, "iteration cap per start")
    c.opt("--starts", 8, _nonneg_int, "random starts besides the identity")
    c.flag("--polish", "finish with Riemannian Newton steps")
    c.opt("--out", None, required=True, help="output JSON", role="out")

    c = cmds["loss"] = _Command(sub, "loss", "evaluate the aligned matching loss and its gradient", cmd_loss)
    c.opt("--evolved", None, required=True, help="evolved cloud", role="in")
    c.opt("--target", None, required=True, help="target cloud", role="in")
    c.opt("--nmax", 20, _nonneg_int, "radial truncation")
    c.opt("--lmax", 10, _nonneg_int, "angular truncation")
    c.opt("--lam", 1.0, _nonneg_float, "centre-of-mass penalty weight")
    c.opt("--starts", 8, _nonneg_int, "random alignment starts")
    c.opt("--lr", 0.1, _positive_float, "alignment learning rate")
    c.opt("--threshold", 1e-8, _positive_float, "alignment stopping threshold")
    c.opt("--max-iter", 2000, _positive_int, "alignment iteration cap")
    c.flag("--with-gradient", "include the full gradient arrays in the output JSON")
    c.opt("--out", None, help="output JSON", role="out")

    c = cmds["grad-check"] = _Command(sub, "grad-check", "compare the analytic gradient to central differences",
                                      cmd_grad_check)
    c.opt("--cloud", None, required=True, help="evolved cloud (small)", role="in")
    c.opt("--target", None, required=True, help="target cloud", role="in")
    c.opt("--nmax", 8, _nonneg_int, "radial truncation")
    c.opt("--lmax", 4, _nonneg_int, "angular truncation")
    c.opt("--lam", 1.0, _nonneg_float, "centre-of-mass penalty weight")
    c.opt("--starts", 8, _nonneg_int, "random alignment starts")
    c.opt("--h", 1e-5, _positive_float, "finite-difference step")
    c.opt("--tol", 1e-4, _positive_float, "maximum accepted relative error")
    c.opt("--out", None, help="output JSON", role="out")

    c = cmds["optimize"] = _Command(sub, "optimize", "deform a cloud to minimize the matching loss", cmd_optimize)
    c.opt("--initial", None, required=True, help="starting cloud", role="in")
    c.opt("--target", None, required=True, help="target cloud", role="in")
    c.opt("--out-dir", None, required=True, help="output directory", role="out")
    c.opt("--nmax", 20, _nonneg_int, "radial truncation")
    c.opt("--lmax", 10, _nonneg_int, "angular truncation")
    c.opt("--lam", 1000.0, _nonneg_float,
          "centre-of-mass penalty weight (large: ADAM steps otherwise let the centroid drift)")
    c.opt("--eta-x", 5e-2, _positive_float, "point learning rate")
    c.opt("--eta-w", 5e-2, _positive_float, "weight learning rate")
    c.opt("--delta-outer", 5e-5, _positive_float, "stop when the loss falls below this")
    c.opt("--max-steps", 10000, _positive_int, "outer step cap")
    c.flag("--optimize-weights", "also update point weights")
    c.opt("--warm-start", "reuse", choices=("reuse", "fresh"), help="inner alignment start policy")
    c.opt("--starts", 8, _nonneg_int, "random starts for the first alignment")
    c.opt("--optimizer", "adam", choices=("adam", "sgd"), help="outer optimizer")
    c.opt("--snapshot-every", 0, _nonneg_int, "write the cloud every k steps (0: never)")
    c.opt("--log-every", 0, _nonneg_int, "progress line on stderr every k steps (0: never)")

    c = cmds["metrics"] = _Command(sub, "metrics", "invariance report of all metrics on bunny fixtures", cmd_metrics)
    c.opt("--n", 1000, _positive_int, "bunny points")
    c.opt("--sub-fraction", 0.5, _fraction, "subsampled variant size")
    c.opt("--nmax", 10, _nonneg_int, "radial truncation")
    c.opt("--lmax", 6, _nonneg_int, "angular truncation")
    c.opt("--eps", 0.01, _positive_float, "entropic regularization")
    c.opt("--tau", 0.1, _positive_float, "invariance tolerance")
    c.opt("--gw-max-iter", 100, _positive_int, "GW outer iterations")
    c.opt("--emd-max-iter", 5000, _positive_int, "Sinkhorn iterations")
    c.opt("--metrics", ["chamfer", "emd", "pairwise", "gw", "power", "bispectrum", "trispectrum", "loss"],
          nargs="+", choices=("chamfer", "emd", "pairwise", "gw", "power", "bispectrum", "trispectrum", "loss"),
          help="metrics to evaluate")
    c.opt("--out", None, required=True, help="output CSV (metric, variant, value, params-hash)", role="out")
    c.opt("--pattern-out", None, help="pattern JSON (default: next to --out)", role="out")

    c = cmds["diagnose"] = _Command(sub, "diagnose", "rotational Hessian and gimbal-lock diagnostics", cmd_diagnose)
    c.opt("--kind", "hessian", choices=("hessian", "symmetry", "gimbal", "slerp"), help="diagnostic")
    c.opt("--cloud", None, help="cloud to probe (default: built-in fixtures)", role="in")
    c.opt("--n", 2503, _positive_int, "bunny points for gimbal and slerp")
    c.opt("--n-phis", [32, 64, 128, 256], _positive_int, "ring resolutions", nargs="+")
    c.opt("--elongation", 3.0, _positive_float, "ring ellipsoid elongation")
    c.opt("--angle", 45.0, float, "gimbal fixture half-angle in degrees")
    c.opt("--method", "gd", choices=("gd", "adam"), help="gimbal optimizer")
    c.opt("--steps", 21, _positive_int, "SLERP path points")
    c.opt("--out", None, required=True, help="output CSV", role="out")

    c = cmds["bench"] = _Command(sub, "bench", "runtime benchmarks", cmd_bench)
    c.opt("--suite", ["loss", "gw", "trispectrum", "gradient"], nargs="+",
          choices=("loss", "gw", "trispectrum", "gradient"), help="suites to run")
    c.opt("--repetitions", 5, _positive_int, "timed repetitions per case")
    c.flag("--quick", "smaller problem sizes")
    c.opt("--out", None, required=True, help="output CSV", role="out")
    return parser, cmds


def _resolve(cmd: _Command, ns: argparse.Namespace) -> tuple[dict, str | None]:
    cli = {k: v for k, v in vars(ns).items() if k in cmd.defaults}
    params = dict(cmd.defaults)
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        params.update(_load_config(cmd, cfg_path))
    params.update(cli)
    missing = sorted(k for k in cmd.required if params.get(k) in (None, ""))
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    ins = {Path(params[k]).resolve() for k in cmd.inputs if params.get(k)}
    outs = {Path(params[k]).resolve() for k in cmd.outputs if params.get(k)}
    if ins & outs:
        raise UsageError("an output path coincides with an input file; inputs are never overwritten")
    return params, cfg_path


def _manifest_path(cmd: _Command, params: dict, ns) -> Path | None:
    if getattr(ns, "manifest", None):
        return Path(ns.manifest)
    if params.get("out_dir"):
        return Path(params["out_dir"]) / "manifest.json"
    if params.get("out"):
        return Path(str(params["out"]) + ".manifest.json")
    return None


def _emit(doc: dict, stream=None) -> None:
    from .io import to_jsonable

    print(json.dumps(to_jsonable(doc), sort_keys=True), file=stream or sys.stdout, flush=True)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, cmds = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    cmd = cmds[ns.command]
    try:
        params, cfg_path = _resolve(cmd, ns)
    except UsageError as exc:
        cmd.parser.print_usage(sys.stderr)
        _emit({"status": "error", "error": "UsageError", "message": str(exc), "exit_code": EXIT_USAGE})
        return EXIT_USAGE

    threads = _set_threads(params["deterministic"])
    run = Run(cmd, params, argv)
    t0 = time.perf_counter()
    status, code, err = "ok", EXIT_OK, None
    try:
        run.result = cmd.fn(run) or {}
    except GradientCheckFailed as exc:
        status, code = "error", EXIT_FAILURE
        err = {"error": type(exc).__name__, "message": str(exc), **exc.detail}
    except (ValueError, ArithmeticError, RuntimeError, OSError, KeyError) as exc:
        status, code = "error", EXIT_FAILURE
        err = {"error": type(exc).__name__, "message": str(exc)}
    elapsed = time.perf_counter() - t0

    manifest = {
        "command": cmd.name,
        "argv": argv,
        "config_file": cfg_path,
        "params": params,
        "config_hash": config_hash({"command": cmd.name, **params}),
        "seed": params["seed"],
        "subsystem_seeds": run.seeds.used,
        "inputs": {params[k]: _file_digest(params[k]) for k in cmd.inputs if params.get(k)},
        "outputs": run.outputs,
        "versions": _versions(),
        "threads": threads,
        "status": status,
        "elapsed_s": elapsed,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(time.time() - elapsed)),
    }
    mpath = _manifest_path(cmd, params, ns)
    if mpath is not None:
        from .io import save_json

        try:
            mpath.parent.mkdir(parents=True, exist_ok=True)
            save_json(manifest, mpath)
        except OSError as exc:
            if code == EXIT_OK:
                status, code = "error", EXIT_FAILURE
                err = {"error": type(exc).__name__, "message": f"cannot write manifest: {exc}"}
    if code != EXIT_OK:
        _emit({"status": "error", "command": cmd.name, "exit_code": code, **err})
        return code
    _emit({"status": "ok", "command": cmd.name, "config_hash": manifest["config_hash"],
           "manifest": str(mpath) if mpath else None, **run.result})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
