"""Run configuration: JSON schema, defaults, validation, and env overrides.

A run is described by one JSON document with optional sections; missing keys
fall back to the reference setup (water channel with an embedded lens, 70 kHz
Gaussian-modulated excitation, generalized-alpha integration).  Unknown keys
are rejected.  Any key can be overridden through environment variables named
``LENSOPT_<SECTION>__<KEY>`` (nesting separated by double underscores), e.g.
``LENSOPT_TIME__N_STEPS=1201``.
"""

import json
import os
from dataclasses import asdict, dataclass, field

from .adjoint import AdjointParams
from .assembly import Excitation, Material, Materials
from .domain import DomainParams, GeometryError, Refinement
from .stepping import AlphaParams, TimeGrid
from .update import ThicknessConstraint

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_dict"]

ENV_PREFIX = "LENSOPT_"

TARGET_KEYS = {
    "gaussian": {"kind", "amplitude", "sigma_x", "sigma_y", "y_focus"},
    "stored": {"kind", "path"},
    "synthetic": {"kind", "goal", "noise_level"},
}


class ConfigError(ValueError):
    """Invalid run configuration (schema violation, bad value, bad JSON)."""


@dataclass
class RunConfig:
    domain: DomainParams = field(default_factory=DomainParams)
    materials: Materials = field(default_factory=Materials)
    excitation: Excitation = field(default_factory=Excitation)
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(9e-5, 3801))
    integrator: AlphaParams = field(default_factory=AlphaParams)
    adjoint: AdjointParams = field(default_factory=AdjointParams)
    tracking_box: tuple = None  # None -> inner fluid patch above the lens
    target: dict = field(
        default_factory=lambda: {
            "kind": "gaussian",
            "amplitude": 6e7,
            "sigma_x": 0.02,
            "sigma_y": 0.004,
            "y_focus": 0.105,
        }
    )
    optimizer: dict = field(
        default_factory=lambda: {
            "s_max": 50,
            "tol_grad": 1e-4,
            "tol_step": 1e-8,
            "step_base": 1e-3,
            "grow": 2.0,
            "shrink": 0.5,
            "movable": "upper",
        }
    )
    constraint: ThicknessConstraint = field(default_factory=ThicknessConstraint)
    probes: list = field(default_factory=list)
    seed: int = 0
    out_dir: str = None

    def to_dict(self):
        """Full resolved configuration as a JSON-ready dict (manifest form)."""
        return {
            "domain": {
                "L": self.domain.L,
                "B": self.domain.B,
                "K": self.domain.K,
                "W": self.domain.W,
                "S": self.domain.S,
                "R": self.domain.R,
                "P": self.domain.P,
                "degree": self.domain.degree,
                "refinement": dict(self.domain.refinement.__dict__),
            },
            "materials": {
                "fluid": asdict(self.materials.fluid),
                "lens": asdict(self.materials.lens),
            },
            "excitation": asdict(self.excitation),
            "time": {"t_final": self.grid.t_final, "n_steps": self.grid.n_steps},
            "integrator": asdict(self.integrator),
            "adjoint": {
                "gamma": self.adjoint.gamma_p,
                "beta": self.adjoint.beta_p,
                "tol": self.adjoint.tol_p,
                "max_iter": self.adjoint.max_iter,
            },
            "tracking": {
                "box": None if self.tracking_box is None else list(self.tracking_box)
            },
            "target": dict(self.target),
            "optimizer": dict(self.optimizer),
            "constraint": {
                "enabled": self.constraint.enabled,
                "tol": self.constraint.tol,
            },
            "probes": [list(p) for p in self.probes],
            "seed": self.seed,
            "out_dir": self.out_dir,
        }


def _require_keys(d, allowed, path):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(
            "%s: unknown key(s) %s (allowed: %s)"
            % (path, ", ".join(sorted(unknown)), ", ".join(sorted(allowed)))
        )


def _number(d, key, default, path, positive=False):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("%s.%s: expected a number, got %r" % (path, key, v))
    if positive and not v > 0:
        raise ConfigError("%s.%s: must be positive, got %r" % (path, key, v))
    return float(v)


def _integer(d, key, default, path):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError("%s.%s: expected an integer, got %r" % (path, key, v))
    return v


def _material(d, defaults, path):
    _require_keys(d, ("c", "b", "rho", "b_over_a"), path)
    return Material(
        c=_number(d, "c", defaults.c, path, positive=True),
        b=_number(d, "b", defaults.b, path, positive=True),
        rho=_number(d, "rho", defaults.rho, path, positive=True),
        b_over_a=_number(d, "b_over_a", defaults.b_over_a, path),
    )


def _section(data, name):
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError("%s: expected an object" % name)
    return sec


def parse_dict(data):
    """Validate a configuration dict and fill defaults."""
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a JSON object")
    _require_keys(
        data,
        (
            "domain",
            "materials",
            "excitation",
            "time",
            "integrator",
            "adjoint",
            "tracking",
            "target",
            "optimizer",
            "constraint",
            "probes",
            "seed",
            "out_dir",
        ),
        "top level",
    )
    cfg = RunConfig()

    dom = _section(data, "domain")
    _require_keys(
        dom, ("L", "B", "K", "W", "S", "R", "P", "degree", "refinement"), "domain"
    )
    ref_d = dom.get("refinement", {})
    if not isinstance(ref_d, dict):
        raise ConfigError("domain.refinement: expected an object")
    ref_defaults = Refinement()
    _require_keys(ref_d, ref_defaults.__dict__.keys(), "domain.refinement")
    refinement = Refinement(
        **{
            k: _integer(ref_d, k, getattr(ref_defaults, k), "domain.refinement")
            for k in ref_defaults.__dict__
        }
    )
    d0 = DomainParams()
    domain = DomainParams(
        L=_number(dom, "L", d0.L, "domain", positive=True),
        B=_number(dom, "B", d0.B, "domain", positive=True),
        K=_number(dom, "K", d0.K, "domain", positive=True),
        W=_number(dom, "W", d0.W, "domain", positive=True),
        S=_number(dom, "S", d0.S, "domain", positive=True),
        R=_number(dom, "R", d0.R, "domain", positive=True),
        P=_number(dom, "P", d0.P, "domain", positive=True),
        degree=_integer(dom, "degree", d0.degree, "domain"),
        refinement=refinement,
    )
    try:
        domain.validate()
    except (GeometryError, ValueError) as e:
        raise ConfigError("domain: %s" % e) from e

    mat = _section(data, "materials")
    _require_keys(mat, ("fluid", "lens"), "materials")
    m0 = Materials()
    materials = Materials(
        fluid=_material(_section(mat, "fluid"), m0.fluid, "materials.fluid"),
        lens=_material(_section(mat, "lens"), m0.lens, "materials.lens"),
    )

    exc = _section(data, "excitation")
    _require_keys(exc, ("amplitude", "frequency"), "excitation")
    e0 = Excitation()
    excitation = Excitation(
        amplitude=_number(exc, "amplitude", e0.amplitude, "excitation"),
        frequency=_number(exc, "frequency", e0.frequency, "excitation", positive=True),
    )

    tim = _section(data, "time")
    _require_keys(tim, ("t_final", "n_steps"), "time")
    try:
        grid = TimeGrid(
            t_final=_number(tim, "t_final", 9e-5, "time", positive=True),
            n_steps=_integer(tim, "n_steps", 3801, "time"),
        )
    except ValueError as e:
        raise ConfigError("time: %s" % e) from e

    a0 = AlphaParams()
    itg = _section(data, "integrator")
    _require_keys(itg, ("alpha_m", "alpha_f", "gamma", "beta", "tol", "max_iter"), "integrator")
    integrator = AlphaParams(
        alpha_m=_number(itg, "alpha_m", a0.alpha_m, "integrator"),
        alpha_f=_number(itg, "alpha_f", a0.alpha_f, "integrator"),
        gamma=_number(itg, "gamma", a0.gamma, "integrator", positive=True),
        beta=_number(itg, "beta", a0.beta, "integrator", positive=True),
        tol=_number(itg, "tol", a0.tol, "integrator", positive=True),
        max_iter=_integer(itg, "max_iter", a0.max_iter, "integrator"),
    )

    p0 = AdjointParams()
    adj = _section(data, "adjoint")
    _require_keys(adj, ("gamma", "beta", "tol", "max_iter"), "adjoint")
    adjoint = AdjointParams(
        gamma_p=_number(adj, "gamma", p0.gamma_p, "adjoint"),
        beta_p=_number(adj, "beta", p0.beta_p, "adjoint", positive=True),
        tol_p=_number(adj, "tol", p0.tol_p, "adjoint", positive=True),
        max_iter=_integer(adj, "max_iter", p0.max_iter, "adjoint"),
    )

    trk = _section(data, "tracking")
    _require_keys(trk, ("box",), "tracking")
    box = trk.get("box", None)
    if box is not None:
        if not (isinstance(box, (list, tuple)) and len(box) == 4):
            raise ConfigError("tracking.box: expected [x0, x1, y0, y1]")
        box = tuple(float(v) for v in box)
        if not (box[0] < box[1] and box[2] < box[3]):
            raise ConfigError("tracking.box: need x0 < x1 and y0 < y1")

    tgt = dict(_section(data, "target"))
    kind = tgt.get("kind", "gaussian")
    if kind not in TARGET_KEYS:
        raise ConfigError(
            "target.kind: expected one of %s" % ", ".join(sorted(TARGET_KEYS))
        )
    tgt["kind"] = kind
    _require_keys(tgt, TARGET_KEYS[kind], "target")
    if kind == "gaussian":
        tgt.setdefault("amplitude", 6e7)
        tgt.setdefault("sigma_x", 0.02)
        tgt.setdefault("sigma_y", 0.004)
        tgt.setdefault("y_focus", 0.105)
        for k in ("amplitude", "sigma_x", "sigma_y"):
            _number(tgt, k, tgt[k], "target", positive=True)
        _number(tgt, "y_focus", tgt["y_focus"], "target")
    elif kind == "stored":
        if not isinstance(tgt.get("path"), str):
            raise ConfigError("target.path: stored targets need a file path")
    else:  # synthetic
        goal = tgt.setdefault("goal", {})
        if not isinstance(goal, dict):
            raise ConfigError("target.goal: expected an object of domain overrides")
        _require_keys(goal, ("L", "B", "K", "W", "S", "R", "P"), "target.goal")
        for k in goal:
            _number(goal, k, goal[k], "target.goal", positive=True)
        tgt.setdefault("noise_level", 0.02)
        v = _number(tgt, "noise_level", tgt["noise_level"], "target")
        if v < 0:
            raise ConfigError("target.noise_level: must be nonnegative")

    o0 = RunConfig().optimizer
    opt = dict(_section(data, "optimizer"))
    _require_keys(opt, o0.keys(), "optimizer")
    optimizer = {
        "s_max": _integer(opt, "s_max", o0["s_max"], "optimizer"),
        "tol_grad": _number(opt, "tol_grad", o0["tol_grad"], "optimizer"),
        "tol_step": _number(opt, "tol_step", o0["tol_step"], "optimizer", positive=True),
        "step_base": _number(opt, "step_base", o0["step_base"], "optimizer", positive=True),
        "grow": _number(opt, "grow", o0["grow"], "optimizer", positive=True),
        "shrink": _number(opt, "shrink", o0["shrink"], "optimizer", positive=True),
        "movable": opt.get("movable", o0["movable"]),
    }
    if optimizer["movable"] not in ("upper", "lower", "both"):
        raise ConfigError("optimizer.movable: expected 'upper', 'lower', or 'both'")

    con = _section(data, "constraint")
    _require_keys(con, ("enabled", "tol"), "constraint")
    enabled = con.get("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError("constraint.enabled: expected true or false")
    constraint = ThicknessConstraint(
        enabled=enabled, tol=_number(con, "tol", 1e-4, "constraint", positive=True)
    )

    probes = data.get("probes", [])
    if not isinstance(probes, list):
        raise ConfigError("probes: expected a list of [x, y] points")
    parsed_probes = []
    for i, p in enumerate(probes):
        if not (isinstance(p, (list, tuple)) and len(p) == 2):
            raise ConfigError("probes[%d]: expected [x, y]" % i)
        parsed_probes.append((float(p[0]), float(p[1])))

    seed = _integer(data, "seed", 0, "top level")
    out_dir = data.get("out_dir", None)
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string path")

    cfg.domain = domain
    cfg.materials = materials
    cfg.excitation = excitation
    cfg.grid = grid
    cfg.integrator = integrator
    cfg.adjoint = adjoint
    cfg.tracking_box = box
    cfg.target = tgt
    cfg.optimizer = optimizer
    cfg.constraint = constraint
    cfg.probes = parsed_probes
    cfg.seed = seed
    cfg.out_dir = out_dir
    return cfg


def _apply_env_overrides(data, environ):
    """Merge LENSOPT_SECTION__KEY=value pairs into the raw config dict."""
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX) :].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for key in path[:-1]:
            nxt = node.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise ConfigError(
                    "%s: override path conflicts with a non-object value" % name
                )
            node = nxt
        node[path[-1]] = value
    return data


def parse_config(path, environ=None):
    """Load, override, and validate a JSON config file.

    An empty (or whitespace-only) file selects the full default setup.
    Environment variables with the LENSOPT_ prefix override file values.
    """
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e)) from e
    if text.strip() == "":
        data = {}
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(
                "%s: line %d column %d: %s" % (path, e.lineno, e.colno, e.msg)
            ) from e
    if environ is None:
        environ = os.environ
    data = _apply_env_overrides(data, environ)
    return parse_dict(data)
