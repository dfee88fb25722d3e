"""Command line: simulate, optimize, hemolysis, verify and export.

Exit codes are stable:

====  ==========================================
0     success
2     configuration or usage error
3     solver failure (Picard, tangling, flow map)
4     input/output failure
5     verification failure
6     optimizer failure (budget, no feasible point)
====  ==========================================

Every run that reaches its output directory ends with ``manifest.json``,
written atomically, listing the configuration hash, library versions,
per-stage timings and every file written with its sha256.
"""
from __future__ import annotations

import os

# BLAS threading would make reductions depend on the thread count; the
# process-level knob is ``--threads`` (ensemble members), so pin BLAS to one.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
import tempfile  # noqa: E402
import time  # noqa: E402
import warnings  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config  # noqa: E402

log = logging.getLogger("hemoshape")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4
EXIT_VERIFY = 5
EXIT_OPTIMIZER = 6

SUITE_NAMES = ("rheology", "bogovskii", "korn", "piola", "projector", "flowmap")


class SolverFailure(RuntimeError):
    pass


def _versions():
    import scipy
    import shapely
    return {"hemoshape": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "shapely": shapely.__version__}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finite(x):
    """JSON has no infinities; write them as strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


class RunManifest:
    """Output directory bookkeeping.

    Files are written through :meth:`path` so the inventory is complete by
    construction; :meth:`finish` hashes them and writes the manifest.
    """

    NAME = "manifest.json"

    def __init__(self, out_dir, command, config_hash=None):
        self.out_dir = os.path.abspath(out_dir)
        self.command = command
        self.config_hash = config_hash
        self.files = []
        self.stages = {}
        self.t0 = time.perf_counter()
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def prepare(self):
        os.makedirs(self.out_dir, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise PermissionError(f"output directory {self.out_dir} is not writable")

    def path(self, rel):
        full = os.path.join(self.out_dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return full

    def stage(self, name):
        manifest = self

        class _Stage:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                manifest.stages[name] = manifest.stages.get(name, 0.0) + time.perf_counter() - self.t
                return False
        return _Stage()

    def to_dict(self, status, exit_code):
        inventory = []
        for rel in self.files:
            full = os.path.join(self.out_dir, rel)
            if os.path.exists(full):
                inventory.append({"path": rel, "bytes": os.path.getsize(full),
                                  "sha256": _sha256(full)})
        return {"command": self.command, "status": status, "exit_code": exit_code,
                "schema_version": SCHEMA_VERSION, "config_hash": self.config_hash,
                "versions": _versions(), "started": self.started,
                "wall_clock": time.perf_counter() - self.t0, "stages": self.stages,
                "files": inventory}

    def finish(self, status="ok", exit_code=EXIT_OK):
        write_json_atomic(os.path.join(self.out_dir, self.NAME), self.to_dict(status, exit_code))


def write_json_atomic(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(_finite(obj), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- helpers

def _out_dir(args, cfg: RunConfig | None):
    if getattr(args, "out", None):
        return args.out
    env = os.environ.get("HEMOSHAPE_OUT_DIR")
    if env:
        return env
    return cfg.data["out_dir"] if cfg is not None else "out"


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("HEMOSHAPE_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"HEMOSHAPE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def build_moving_mesh(cfg: RunConfig, domain=None, velocity=None):
    """Reference mesh of the configured domain transported over the solver time grid."""
    from .discretization.mesh import MovingMesh, build_reference_mesh
    s = cfg.data["solver"]
    times = np.linspace(0.0, cfg.hold_all.T, int(s["n_layers"]))
    rings = None if s["n_rings"] is None else int(s["n_rings"])
    mesh = build_reference_mesh(domain or cfg.domain, float(s["mesh_h"]), rings)
    return MovingMesh.build(mesh, velocity or cfg.velocity, times)


def _solver_errors():
    from .discretization.mesh import MeshError, TanglingError
    from .discretization.weakform import SingularSystemError
    from .geometry import FlowMapError
    from .solver import PicardError
    return (PicardError, TanglingError, MeshError, FlowMapError, SingularSystemError,
            SolverFailure)


def run_forward(cfg: RunConfig, threads=1, domain=None, velocity=None, manifest=None):
    """Moving mesh, ensemble solve and functional value for a configuration."""
    from .discretization.fem import FEValues
    from .functionals import evaluate
    from .solver import solve_ensemble

    stage = manifest.stage if manifest is not None else (lambda name: _Null())
    velocity = velocity or cfg.velocity
    with stage("mesh"):
        md = build_moving_mesh(cfg, domain, velocity)
        fe_layers = [FEValues.build(md.layer(i)) for i in range(md.layer_count)]
    with stage("solve"):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                runs = solve_ensemble(md, velocity, cfg.rheology, cfg.initial, cfg.forcing(),
                                      cfg.solver_configs, threads=threads, fe_layers=fe_layers)
            except RuntimeError as exc:
                if isinstance(exc, _solver_errors()):
                    raise
                raise SolverFailure(str(exc)) from exc
    for w in caught:
        log.warning("%s", w.message)
    with stage("functional"):
        fv = evaluate(cfg.functional, md, [s for s, _ in runs], cfg.rheology, velocity,
                      fe_layers=fe_layers)
    return md, fe_layers, runs, fv, [str(w.message) for w in caught]


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def export_layers(manifest: RunManifest, fe_layers, state, prefix="layers"):
    from .discretization.export import write_vtk
    for i, fe in enumerate(fe_layers):
        write_vtk(manifest.path(f"{prefix}/layer_{i:03d}.vtk"), fe.mesh,
                  state.velocity_coeffs[i], state.pressure_coeffs[i],
                  {"w_x": state.w_coeffs[i][:, 0], "w_y": state.w_coeffs[i][:, 1]},
                  title=f"layer {i} t={state.time_grid[i]!r}")


def write_state(manifest: RunManifest, state, name="state.npz"):
    state.to_npz(manifest.path(name))


def _energy_report(cfg: RunConfig, fe0, state, ledger):
    from .discretization.fem import l2_norm
    from .solver import energy_bound, energy_check, f_norm_qprime
    C0 = l2_norm(fe0, state.velocity_coeffs[0])
    fn = f_norm_qprime(cfg.forcing(), cfg.hold_all, cfg.rheology.q)
    bound = energy_bound(cfg.rheology, cfg.hold_all, cfg.velocity.c_V, C0, fn)
    rep = energy_check(ledger, bound.value)
    rep["bound"] = {k: getattr(bound, k) for k in ("value", "K0", "F", "gronwall", "C0", "c_V",
                                                    "c_K", "c_P", "f_norm", "q")}
    return rep


def _member_summary(fe_layers, state, ledger):
    from .discretization.fem import divergence_l2, l2_norm
    return {"seed_id": state.info.get("seed_id"), "m": state.info.get("m"),
            "picard_iterations": state.info.get("picard_iterations"),
            "max_discrete_divergence": float(np.max(np.abs(ledger.column("divergence")))),
            "max_divergence_l2": max(divergence_l2(fe, w)
                                     for fe, w in zip(fe_layers, state.w_coeffs)),
            "velocity_l2": [l2_norm(fe, u) for fe, u in zip(fe_layers, state.velocity_coeffs)],
            "max_energy_residual": ledger.max_relative_residual()}


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args)
    man = RunManifest(_out_dir(args, cfg), "simulate", cfg.source_hash)
    man.prepare()
    try:
        md, fe_layers, runs, fv, warns = run_forward(cfg, threads, manifest=man)
        best = int(np.argmin(fv.ensemble_values))
        state, ledger = runs[best]
        with man.stage("export"):
            export_layers(man, fe_layers, state)
            write_state(man, state)
            ledger.write_csv(man.path("ledger.csv"))
            fv.write_breakdown_csv(man.path("functional_breakdown.csv"))
            summary = {
                "functional": {**fv.to_dict(), "kind": cfg.functional.kind},
                "selected_member": best,
                "members": [_member_summary(fe_layers, s, led) for s, led in runs],
                "energy": _energy_report(cfg, fe_layers[0], state, ledger),
                "mesh": {"n_vertices": md.reference_mesh.n_vertices,
                         "n_triangles": md.reference_mesh.n_triangles,
                         "h_max": md.reference_mesh.h_max(), "layers": md.layer_count},
                "warnings": warns,
                "timings": dict(man.stages),
            }
            write_json_atomic(man.path("summary.json"), summary)
        if not summary["energy"]["balance_ok"]:
            log.warning("energy balance residual %.3e above 1e-6",
                        summary["energy"]["max_relative_residual"])
    except BaseException as exc:
        man.finish("error", _exit_code(exc))
        raise
    man.finish()
    print(json.dumps(_finite({"out_dir": man.out_dir, "functional": fv.value,
                              "energy_residual": summary["energy"]["max_relative_residual"]})))
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .geometry import DomainSpec
    from .optimizer import SYNTHETIC, OptimizerError, OptimizerState, ParamVector, decode, minimize

    cfg = load_config(args.config)
    if cfg.optimizer is None:
        raise ConfigError("configuration has no optimizer section")
    ocfg, problem = cfg.optimizer
    if args.budget is not None:
        ocfg.budget = args.budget
    problem.threads = _threads(args)
    man = RunManifest(_out_dir(args, cfg), "optimize", cfg.source_hash)
    man.prepare()
    ckpt = man.path("optimizer_state.json")
    state = None
    if args.resume:
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"no optimizer state to resume at {ckpt}")
        state = OptimizerState.load(ckpt)
        if state.layout.to_dict() != problem.layout.to_dict():
            raise ConfigError("stored optimizer state has a different parameter layout")
    try:
        with man.stage("optimize"):
            state = minimize(ocfg, problem, state, checkpoint=ckpt)
    except BaseException as exc:
        man.finish("error", _exit_code(exc))
        raise
    with man.stage("export"):
        state.save(ckpt)
        state.write_history_csv(man.path("history.csv"))
        dec = decode(ParamVector(state.best_x, problem.layout), problem)
        dom: DomainSpec = dec.domain
        _write_boundary(man.path("best_boundary.csv"), dom.boundary(256))
        summary = {"best_value": state.best_value, "best_x": state.best_x,
                   "evaluations": state.evaluations, "starts_done": state.starts_done,
                   "monotone": state.is_monotone(), "kind": problem.kind,
                   "best_domain": dom.to_dict(), "resumed": bool(args.resume)}
    if problem.kind not in SYNTHETIC:
        try:
            _, fe_layers, runs, fv, _ = run_forward(cfg, problem.threads, dom, dec.velocity,
                                                    manifest=man)
        except BaseException as exc:
            man.finish("error", _exit_code(exc))
            raise
        best = int(np.argmin(fv.ensemble_values))
        with man.stage("export"):
            export_layers(man, fe_layers, runs[best][0], prefix="best_layers")
            write_state(man, runs[best][0], "best_state.npz")
        summary["best_functional_recomputed"] = fv.value
    summary["timings"] = dict(man.stages)
    write_json_atomic(man.path("summary.json"), summary)
    man.finish()
    print(json.dumps(_finite({"out_dir": man.out_dir, "best_value": state.best_value,
                              "evaluations": state.evaluations,
                              "monotone": state.is_monotone()})))
    return EXIT_OK


def _write_boundary(path, pts):
    with open(path, "w") as fh:
        fh.write("x,y\n")
        for x, y in pts:
            fh.write("%.17g,%.17g\n" % (x, y))


def _load_solution(cfg: RunConfig, solution_dir):
    from .discretization.fem import FEValues
    from .discretization.state import FlowState
    path = os.path.join(solution_dir, "state.npz")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no state.npz in {solution_dir}")
    state = FlowState.from_npz(path)
    md = build_moving_mesh(cfg)
    if state.n_layers != md.layer_count or not np.allclose(state.time_grid, md.times,
                                                           rtol=0, atol=1e-12):
        raise ConfigError("solution time grid does not match the configuration")
    fe_layers = [FEValues.build(md.layer(i)) for i in range(md.layer_count)]
    if any(len(u) != fe.mesh.n_p2 for u, fe in zip(state.velocity_coeffs, fe_layers)):
        raise ConfigError("solution does not live on the mesh of this configuration")
    return md, fe_layers, state


def cmd_hemolysis(args) -> int:
    from .functionals import evaluate
    cfg = load_config(args.config)
    md, fe_layers, state = _load_solution(cfg, args.solution)
    fv = evaluate(cfg.functional, md, [state], cfg.rheology, cfg.velocity, fe_layers=fe_layers)
    man = RunManifest(args.out or os.path.join(args.solution, "hemolysis"), "hemolysis",
                      cfg.source_hash)
    man.prepare()
    fv.write_breakdown_csv(man.path("hemolysis_breakdown.csv"))
    man.finish()
    print(json.dumps(_finite({**fv.to_dict(), "kind": cfg.functional.kind,
                              "breakdown": [float(v) for v in fv.breakdown],
                              "times": [float(t) for t in fv.times]}),
                     default=_json_default))
    return EXIT_OK


def cmd_export(args) -> int:
    from .discretization.export import write_node_csv
    cfg = load_config(args.config)
    _, fe_layers, state = _load_solution(cfg, args.solution)
    man = RunManifest(_out_dir(args, cfg), "export", cfg.source_hash)
    man.prepare()
    with man.stage("export"):
        if args.format == "vtk":
            export_layers(man, fe_layers, state)
        else:
            for i, fe in enumerate(fe_layers):
                write_node_csv(man.path(f"nodes/layer_{i:03d}.csv"), fe.mesh,
                               float(state.time_grid[i]), state.velocity_coeffs[i],
                               state.pressure_coeffs[i])
    man.finish()
    return EXIT_OK


def cmd_verify(args) -> int:
    from .analysis.suites import run_suites
    names = SUITE_NAMES if args.suite == "all" else (args.suite,)
    man = RunManifest(_out_dir(args, None), "verify")
    man.prepare()
    with man.stage("verify"):
        report = run_suites(names)
    ok = all(r["passed"] for r in report.values())
    write_json_atomic(man.path("verify_report.json"),
                      {"passed": ok, "suites": report})
    man.finish("ok" if ok else "failed", EXIT_OK if ok else EXIT_VERIFY)
    for name, r in report.items():
        print(f"{name}: {'PASS' if r['passed'] else 'FAIL'} ({r['seconds']:.1f} s)")
    return EXIT_OK if ok else EXIT_VERIFY


def _exit_code(exc):
    from .functionals import FunctionalError
    from .geometry import AdmissibilityError
    from .optimizer import OptimizerError
    if isinstance(exc, (ConfigError, FunctionalError, AdmissibilityError)):
        return EXIT_CONFIG
    if isinstance(exc, OptimizerError):
        return EXIT_OPTIMIZER
    if isinstance(exc, _solver_errors()):
        return EXIT_SOLVER
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="hemoshape",
        description=("Shape optimization of shear-thinning flow in moving domains. "
                     f"Configuration files are JSON with schema_version {SCHEMA_VERSION}."),
        epilog=("Environment: HEMOSHAPE_OUT_DIR overrides the output directory, "
                "HEMOSHAPE_THREADS the thread count. Exit codes: 0 ok, 2 configuration, "
                "3 solver, 4 input/output, 5 verification, 6 optimizer."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for ensemble members (default: HEMOSHAPE_THREADS or 1); "
                        "results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="forward solve with exports")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("optimize", help="derivative-free shape search")
    o.add_argument("--config", required=True)
    o.add_argument("--out")
    o.add_argument("--resume", action="store_true",
                   help="continue from optimizer_state.json in the output directory")
    o.add_argument("--budget", type=int, help="total evaluation budget (overrides the config)")
    o.set_defaults(func=cmd_optimize)

    h = sub.add_parser("hemolysis", help="evaluate the functional on a stored solution")
    h.add_argument("--solution", required=True, help="directory holding state.npz")
    h.add_argument("--config", required=True)
    h.add_argument("--out", help="directory for the breakdown CSV (default: SOLUTION/hemolysis)")
    h.set_defaults(func=cmd_hemolysis)

    v = sub.add_parser("verify", help="run the verification suites")
    v.add_argument("--suite", required=True, choices=SUITE_NAMES + ("all",))
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export", help="re-export a stored solution")
    e.add_argument("--solution", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--format", choices=("vtk", "csv"), default="vtk")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)
    return p


_LABELS = {EXIT_CONFIG: "configuration error", EXIT_OPTIMIZER: "optimizer error",
           EXIT_SOLVER: "solver error", EXIT_IO: "input/output error"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"{_LABELS[code]}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
