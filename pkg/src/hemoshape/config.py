"""Run configuration: a versioned JSON document with one section per concern.

Loading fills defaults, checks every section and the cross-section windows
(for instance ``r`` against ``q'/alpha``), and returns a ``RunConfig`` whose
``to_dict`` output loads back to an identical configuration.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math

from .functionals import KINDS, FunctionalError, FunctionalSpec, validate_spec
from .geometry import AdmissibilityError, DomainSpec, HoldAll, VelocityFieldSpec
from .optimizer import SYNTHETIC, OptimizerConfig, ParamLayout, Problem, VelocityTemplate
from .rheology import HemolysisParams, ParameterError, RheologyParams
from .solver import InitialData, SolverConfig, forcing_from_dict

SCHEMA_VERSION = 1

SECTIONS = ("hold_all", "domain", "velocity", "rheology", "hemolysis", "solver", "functional",
            "optimizer")

DEFAULTS = {
    "hold_all": {"bbox": [-2.0, 2.0, -2.0, 2.0], "horizon": 1.0},
    "domain": {"radial_coeffs": [1.0], "center": [0.0, 0.0], "lip_bound": 0.5},
    "velocity": {"bump_centers": [], "bump_radii": [], "stream_coeffs": [], "bump_kinds": [],
                 "plateau_radii": [], "c_V": 1.0},
    "rheology": {"q": 1.5, "p": None, "m_schedule": ["inf"]},
    "hemolysis": {"c_h": 1.0, "alpha": 1.0, "beta": 0.5, "r": 1.0},
    "solver": {"n_layers": 5, "mesh_h": 0.2, "n_rings": None, "picard_max": 60, "picard_tol": 1e-8,
               "ensemble": 1, "perturbation": 1e-2, "initial": {"mode": "match_V",
                                                                "perturbation": []},
               "forcing": [0.0, 0.0]},
    "functional": {"kind": "hemolysis_r"},
    "optimizer": None,
}

OPTIMIZER_DEFAULTS = {"kind": None, "x0": None, "n_radial": 1, "n_time": 0, "lower": None,
                      "upper": None, "budget": 200, "starts": 8, "scale": 0.1,
                      "penalty": 1e3, "xtol": 1e-6, "ftol": 1e-12, "target_area": math.pi,
                      "max_restarts": 3}


class ConfigError(ValueError):
    pass


def _merge(defaults, given, where):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"section {where!r} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _inf_list(xs):
    return ["inf" if (isinstance(x, float) and math.isinf(x)) or x == "inf" else float(x)
            for x in xs]


class RunConfig:
    """Validated run configuration.

    Attributes hold the typed objects (``hold_all``, ``domain``, ``velocity``,
    ``rheology``, ``hemolysis``, ``solver_configs``, ``functional``) built from
    the normalized sections in ``data``.
    """

    def __init__(self, data: dict, source_hash: str | None = None):
        self.data = self._normalize(data)
        self.source_hash = source_hash
        self._build()

    # -- normalization
    @staticmethod
    def _normalize(data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        unknown = set(data) - set(SECTIONS) - {"schema_version", "seed", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        out = {"schema_version": SCHEMA_VERSION, "seed": int(data.get("seed", 0)),
               "out_dir": str(data.get("out_dir", "out"))}
        for name in SECTIONS:
            if name == "optimizer":
                opt = data.get("optimizer")
                out[name] = None if opt is None else _merge(OPTIMIZER_DEFAULTS, opt, name)
                continue
            sec = _merge(DEFAULTS[name], data.get(name), name)
            if name == "solver":
                sec["initial"] = _merge(DEFAULTS["solver"]["initial"],
                                        (data.get("solver") or {}).get("initial"),
                                        "solver.initial")
            out[name] = sec
        r = out["rheology"]
        r["m_schedule"] = _inf_list(r["m_schedule"])
        if r["p"] is None:
            try:
                r["p"] = RheologyParams.p_min(float(r["q"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"rheology: {exc}") from exc
        return out

    def _build(self):
        d = self.data
        try:
            self.hold_all = HoldAll.from_dict(d["hold_all"])
            self.domain = DomainSpec.from_dict(d["domain"], self.hold_all)
            v = dict(d["velocity"])
            n = len(v["bump_centers"])
            v["bump_kinds"] = v["bump_kinds"] or ["bump"] * n
            v["plateau_radii"] = v["plateau_radii"] or [None] * n
            self.velocity = VelocityFieldSpec.from_dict(v, self.hold_all)
            self.rheology = RheologyParams.from_dict(d["rheology"])
            self.hemolysis = HemolysisParams.from_dict(d["hemolysis"])
        except (AdmissibilityError, ParameterError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        fkind = d["functional"].get("kind")
        if fkind not in KINDS:
            raise ConfigError(f"functional kind must be one of {KINDS}, got {fkind!r}")
        if fkind == "tracking":
            raise ConfigError("tracking needs a target field and is available from Python only")
        try:
            self.functional = FunctionalSpec(fkind, self.hemolysis)
            self.hemolysis_window = validate_spec(self.functional, self.rheology)
        except FunctionalError as exc:
            raise ConfigError(str(exc)) from exc
        s = d["solver"]
        if int(s["n_layers"]) < 2:
            raise ConfigError("solver.n_layers must be >= 2")
        if not float(s["mesh_h"]) > 0:
            raise ConfigError("solver.mesh_h must be positive")
        if s["n_rings"] is not None and int(s["n_rings"]) < 2:
            raise ConfigError("solver.n_rings must be >= 2 when given")
        if int(s["ensemble"]) < 1:
            raise ConfigError("solver.ensemble must be >= 1")
        dt = self.hold_all.T / (int(s["n_layers"]) - 1)
        try:
            self.solver_configs = [
                SolverConfig(dt=dt, picard_max=int(s["picard_max"]),
                             picard_tol=float(s["picard_tol"]), seed_id=k,
                             perturbation=float(s["perturbation"]))
                for k in range(int(s["ensemble"]))]
            self.initial = InitialData.from_dict(s["initial"])
        except ValueError as exc:
            raise ConfigError(f"solver: {exc}") from exc
        try:
            self._forcing = forcing_from_dict(s["forcing"])
        except (ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(f"solver.forcing: {exc}") from exc
        self.optimizer = self._build_optimizer(d["optimizer"]) if d["optimizer"] else None

    def _build_optimizer(self, o):
        kind = o["kind"] or self.functional.kind
        if kind not in SYNTHETIC + KINDS:
            raise ConfigError(f"optimizer kind must be one of {SYNTHETIC + KINDS}, got {kind!r}")
        n_bumps = len(self.velocity.bump_centers) if o["n_time"] else 0
        x0 = o["x0"]
        if x0 is None:
            raise ConfigError("optimizer.x0 is required")
        try:
            size = int(o["n_radial"]) + n_bumps * int(o["n_time"])
            lo = _bounds(o["lower"], size, -math.inf)
            hi = _bounds(o["upper"], size, math.inf)
            layout = ParamLayout(int(o["n_radial"]), n_bumps, int(o["n_time"]), lo, hi)
            cfg = OptimizerConfig(tuple(float(v) for v in x0), int(o["budget"]),
                                  int(o["starts"]), float(o["scale"]), float(o["penalty"]),
                                  float(o["xtol"]), float(o["ftol"]), self.data["seed"],
                                  int(o["max_restarts"]))
            tpl = VelocityTemplate(self.velocity.bump_centers, self.velocity.bump_radii,
                                   self.velocity.bump_kinds, self.velocity.plateau_radii,
                                   self.velocity.c_V,
                                   None if o["n_time"] else self.velocity.stream_coeffs)
            s = self.data["solver"]
            problem = Problem(kind, layout, self.hold_all, tpl, self.domain.lip_bound,
                              None, 1e-6, float(o["target_area"]), self.rheology,
                              self.hemolysis, float(s["mesh_h"]), int(s["n_layers"]),
                              int(s["ensemble"]), float(s["picard_tol"]), self.forcing())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"optimizer: {exc}") from exc
        if len(cfg.x0) != layout.size:
            raise ConfigError(f"optimizer.x0 has {len(cfg.x0)} entries, expected {layout.size}")
        return cfg, problem

    # -- accessors
    def forcing(self):
        """Body force callable ``f(t, pts)`` or ``None``."""
        return self._forcing

    def to_dict(self):
        return copy.deepcopy(self.data)

    def dumps(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    def with_overrides(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return RunConfig(d, self.source_hash)


def _bounds(v, n, fill):
    if v is None:
        return [fill] * n
    if len(v) != n:
        raise ConfigError(f"bounds need {n} entries, got {len(v)}")
    return [float(x) for x in v]


def load_config(path) -> RunConfig:
    """Read and validate a JSON configuration; the hash covers the exact file bytes."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    return RunConfig(data, hashlib.sha256(raw).hexdigest())
