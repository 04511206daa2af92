"""Command-line entry points: simulate, adjoint, optimize, make-target, gradcheck.

Every command reads one JSON config (``--config``; omitted means the default
setup), writes its artifacts into ``--out``, and drops a ``manifest.json``
recording the fully resolved configuration, its SHA-256, package versions,
and wall-clock timings.  Errors print a single JSON line on stderr; exit
status is 2 for configuration problems and 1 for solver/geometry failures.

File formats
------------
state.npz / adjoint.npz   arrays ``times`` plus ``u, du, ddu`` / ``p, dp, ddp``
field CSV                 header ``patch,i1,i2,x,y,value``; rows per patch in
                          local flat order (i2 * n1 + i1); 17 significant digits
history.csv               the descent table (see optimizer.OptimizationHistory)
gradient.csv              header ``dof,x,y,g``; one row per lens-boundary dof
gradcheck.csv             header ``dof,x,y,g_adjoint,g_fd,rel_mismatch``
target.npz                arrays ``times`` and ``coeffs`` for a stored target
"""

import argparse
import contextlib
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .adjoint import solve_adjoint, solve_adjoint_discrete
from .assembly import assemble_tracking_mass, build_operators
from .config import ConfigError, RunConfig, parse_config
from .domain import GeometryError, build_lens_domain, design_dof_set, locate_point
from .gradient import adjoint_loads, cost, shape_gradient_boundary
from .optimizer import OptConfig, optimize
from .stepping import SolverError, StateHistory, solve_state
from .targets import GaussianTarget, StoredTarget, synthesize_target, target_history
from .update import check_feasible, update_boundary

__all__ = ["main"]


# ---------------------------------------------------------------------------
# small helpers


def _fmt(x):
    return "%.17g" % x


def write_field_csv(path, domain, coeffs):
    """One row per control point: patch,i1,i2,x,y,value (17 sig. digits)."""
    coeffs = np.asarray(coeffs, dtype=float)
    with open(path, "w") as f:
        f.write("patch,i1,i2,x,y,value\n")
        for p, (patch, dmap) in enumerate(zip(domain.patches, domain.dof_map)):
            n1, n2 = patch.shape
            pts = patch.ctrl_flat
            for i2 in range(n2):
                for i1 in range(n1):
                    loc = i2 * n1 + i1
                    f.write(
                        "%d,%d,%d,%s,%s,%s\n"
                        % (
                            p,
                            i1,
                            i2,
                            _fmt(pts[loc, 0]),
                            _fmt(pts[loc, 1]),
                            _fmt(coeffs[dmap[loc]]),
                        )
                    )


def domain_to_dict(domain):
    """JSON-ready geometry: construction parameters (if any) plus all patches."""
    params = None
    if domain.params is not None:
        dp = domain.params
        params = {
            "L": dp.L,
            "B": dp.B,
            "K": dp.K,
            "W": dp.W,
            "S": dp.S,
            "R": dp.R,
            "P": dp.P,
            "degree": dp.degree,
            "refinement": dict(dp.refinement.__dict__),
        }
    return {
        "params": params,
        "regions": list(domain.regions),
        "n_global": domain.n_global,
        "patches": [p.to_dict() for p in domain.patches],
    }


def _probe_evaluators(domain, probes):
    """Per-probe (gdofs, basis values) for fast history sampling."""
    out = []
    for xy in probes:
        p, x1, x2 = locate_point(domain, xy)
        patch = domain.patches[p]
        loc, vals, _ = patch.basis_at(x1, x2)
        out.append((domain.dof_map[p][loc], vals))
    return out


def write_probes_csv(path, times, history, evaluators):
    with open(path, "w") as f:
        f.write("t," + ",".join("probe%d" % i for i in range(len(evaluators))) + "\n")
        for n, t in enumerate(times):
            row = [_fmt(t)]
            for gdofs, vals in evaluators:
                row.append(_fmt(float(vals @ history[n, gdofs])))
            f.write(",".join(row) + "\n")


def _resolved_out_dir(args, cfg):
    out = args.out or cfg.out_dir or "lensopt_out"
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args):
    if args.config is None:
        cfg = RunConfig()
    else:
        cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _deterministic_guard(enabled):
    """Pin BLAS thread pools to one thread while a command runs (best effort)."""
    if not enabled:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _write_manifest(out, command, argv, cfg, timings, outputs, extra=None):
    resolved = cfg.to_dict()
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": resolved,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "lensopt": __version__,
        },
        "timings": {k: round(v, 6) for k, v in timings.items()},
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def build_target(cfg, domain=None):
    """Instantiate the configured target; synthetic kinds also return the goal.

    Returns (target, goal_domain_or_None).
    """
    tgt = cfg.target
    kind = tgt["kind"]
    if kind == "gaussian":
        return (
            GaussianTarget(
                amplitude=tgt["amplitude"],
                sigma_x=tgt["sigma_x"],
                sigma_y=tgt["sigma_y"],
                y_focus=tgt["y_focus"],
            ),
            None,
        )
    if kind == "stored":
        try:
            with np.load(tgt["path"]) as data:
                target = StoredTarget(times=data["times"], coeffs=data["coeffs"])
        except (OSError, KeyError) as e:
            raise ConfigError("target.path: cannot load %r (%s)" % (tgt["path"], e)) from e
        return target, None
    goal_params = replace(cfg.domain, **{k: float(v) for k, v in tgt["goal"].items()})
    target, goal = synthesize_target(
        goal_params,
        cfg.grid,
        materials=cfg.materials,
        excitation=cfg.excitation,
        noise_level=tgt["noise_level"],
        seed=cfg.seed,
        alpha=cfg.integrator,
    )
    return target, goal


def _tracking_box(cfg, domain):
    if cfg.tracking_box is not None:
        return cfg.tracking_box
    p = domain.params
    return (0.0, p.W, p.S, p.L)


def _snapshot_fields(out, domain, history, every, prefix):
    written = []
    if not every:
        return written
    for n in range(0, history.shape[0], every):
        path = os.path.join(out, "%s_%06d.csv" % (prefix, n))
        write_field_csv(path, domain, history[n])
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, argv):
    cfg = _load_config(args)
    out = _resolved_out_dir(args, cfg)
    timings, t0 = {}, time.perf_counter()
    domain = build_lens_domain(cfg.domain)
    ops = build_operators(domain, cfg.materials, cfg.excitation)
    timings["assemble"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    state = solve_state(ops, cfg.grid, params=cfg.integrator)
    timings["solve"] = time.perf_counter() - t0

    outputs = []
    state_path = os.path.join(out, "state.npz")
    np.savez(state_path, times=state.times, u=state.u, du=state.du, ddu=state.ddu)
    outputs.append(state_path)
    final_path = os.path.join(out, "field_final.csv")
    write_field_csv(final_path, domain, state.u[-1])
    outputs.append(final_path)
    outputs += _snapshot_fields(out, domain, state.u, args.snapshot_every, "field")
    if cfg.probes:
        probes_path = os.path.join(out, "probes.csv")
        write_probes_csv(
            probes_path, state.times, state.u, _probe_evaluators(domain, cfg.probes)
        )
        outputs.append(probes_path)
    outputs.append(
        _write_manifest(
            out,
            "simulate",
            argv,
            cfg,
            timings,
            outputs,
            extra={"n_global": domain.n_global, "n_steps": cfg.grid.n_steps},
        )
    )
    print("simulate: %d dofs, %d steps -> %s" % (domain.n_global, cfg.grid.n_steps, out))
    return 0


def cmd_adjoint(args, argv):
    cfg = _load_config(args)
    out = _resolved_out_dir(args, cfg)
    timings, t0 = {}, time.perf_counter()
    domain = build_lens_domain(cfg.domain)
    ops = build_operators(domain, cfg.materials, cfg.excitation)
    timings["assemble"] = time.perf_counter() - t0

    state_path = args.state or os.path.join(out, "state.npz")
    try:
        with np.load(state_path) as data:
            state = StateHistory(
                times=data["times"], u=data["u"], du=data["du"], ddu=data["ddu"]
            )
    except (OSError, KeyError) as e:
        raise ConfigError("cannot load state history %r (%s)" % (state_path, e)) from e
    u = state.u
    if u.shape != (cfg.grid.n_steps, domain.n_global) or not np.array_equal(
        state.times, cfg.grid.times
    ):
        raise ConfigError(
            "state history %r does not match the configured mesh/time grid" % state_path
        )

    t0 = time.perf_counter()
    target, _ = build_target(cfg, domain)
    u_d = target_history(target, domain, cfg.grid, ops.caches)
    box = _tracking_box(cfg, domain)
    tracking = assemble_tracking_mass(domain, ops.caches, box)
    loads = adjoint_loads(u, u_d, tracking)
    adj = solve_adjoint(ops, cfg.grid, loads, tensor_coeffs=u, params=cfg.adjoint)
    dadj = solve_adjoint_discrete(ops, cfg.grid, loads, state, params=cfg.integrator)
    timings["adjoint"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    design = design_dof_set(domain, cfg.optimizer["movable"])
    g = shape_gradient_boundary(
        state,
        dadj,
        domain,
        cfg.materials,
        cfg.grid,
        design,
        caches=ops.caches,
        forbidden_dofs=np.unique(tracking.nonzero()[0]),
    )
    timings["gradient"] = time.perf_counter() - t0

    outputs = []
    adj_path = os.path.join(out, "adjoint.npz")
    np.savez(adj_path, times=adj.times, p=adj.p, dp=adj.dp, ddp=adj.ddp)
    outputs.append(adj_path)
    grad_path = os.path.join(out, "gradient.csv")
    coords = domain.global_ctrl()
    with open(grad_path, "w") as f:
        f.write("dof,x,y,g\n")
        for i, gid in enumerate(g.ids):
            f.write(
                "%d,%s,%s,%s\n"
                % (gid, _fmt(coords[gid, 0]), _fmt(coords[gid, 1]), _fmt(g.values[i]))
            )
    outputs.append(grad_path)
    outputs += _snapshot_fields(out, domain, adj.p, args.snapshot_every, "adjoint")
    J = cost(u, u_d, tracking, cfg.grid)
    outputs.append(
        _write_manifest(
            out,
            "adjoint",
            argv,
            cfg,
            timings,
            outputs,
            extra={"cost": J, "gradnorm": g.norm},
        )
    )
    print("adjoint: J=%.6e, |g|=%.6e -> %s" % (J, g.norm, out))
    return 0


def cmd_optimize(args, argv):
    cfg = _load_config(args)
    out = _resolved_out_dir(args, cfg)
    timings, t0 = {}, time.perf_counter()
    domain = build_lens_domain(cfg.domain)
    target, goal = build_target(cfg, domain)
    timings["setup"] = time.perf_counter() - t0

    o = cfg.optimizer
    opt = OptConfig(
        s_max=o["s_max"],
        tol_grad=o["tol_grad"],
        tol_step=o["tol_step"],
        step_base=o["step_base"],
        grow=o["grow"],
        shrink=o["shrink"],
    )
    t0 = time.perf_counter()
    history = optimize(
        domain,
        cfg.grid,
        target,
        box=_tracking_box(cfg, domain),
        opt=opt,
        materials=cfg.materials,
        excitation=cfg.excitation,
        alpha=cfg.integrator,
        movable=o["movable"],
        constraint=cfg.constraint,
        goal=goal,
    )
    timings["optimize"] = time.perf_counter() - t0

    outputs = []
    hist_path = os.path.join(out, "history.csv")
    history.to_csv(hist_path)
    outputs.append(hist_path)
    dom_path = os.path.join(out, "final_domain.json")
    with open(dom_path, "w") as f:
        json.dump(domain_to_dict(history.final_domain), f)
        f.write("\n")
    outputs.append(dom_path)
    snap_path = os.path.join(out, "design_snapshots.csv")
    with open(snap_path, "w") as f:
        k = len(history.snapshots[0])
        f.write("step," + ",".join("y%d" % j for j in range(k)) + "\n")
        for r, y in zip(history.records, history.snapshots):
            f.write("%d," % r.step + ",".join(_fmt(v) for v in y) + "\n")
    outputs.append(snap_path)
    last = history.records[-1]
    outputs.append(
        _write_manifest(
            out,
            "optimize",
            argv,
            cfg,
            timings,
            outputs,
            extra={
                "reason": history.reason,
                "accepted_steps": history.accepted_steps,
                "J_first": history.records[0].J,
                "J_last": last.J,
            },
        )
    )
    print(
        "optimize: %s after %d accepted step(s), J %0.6e -> %0.6e -> %s"
        % (history.reason, history.accepted_steps, history.records[0].J, last.J, out)
    )
    return 0


def cmd_make_target(args, argv):
    cfg = _load_config(args)
    if cfg.target["kind"] != "synthetic":
        raise ConfigError("make-target needs target.kind = 'synthetic'")
    out = _resolved_out_dir(args, cfg)
    timings, t0 = {}, time.perf_counter()
    target, goal = build_target(cfg)
    timings["synthesize"] = time.perf_counter() - t0

    outputs = []
    tgt_path = os.path.join(out, "target.npz")
    np.savez(tgt_path, times=target.times, coeffs=target.coeffs)
    outputs.append(tgt_path)
    goal_path = os.path.join(out, "goal_domain.json")
    with open(goal_path, "w") as f:
        json.dump(domain_to_dict(goal), f)
        f.write("\n")
    outputs.append(goal_path)
    outputs.append(
        _write_manifest(
            out,
            "make-target",
            argv,
            cfg,
            timings,
            outputs,
            extra={"n_global": goal.n_global, "n_steps": cfg.grid.n_steps},
        )
    )
    print(
        "make-target: %d coefficient vectors of length %d -> %s"
        % (target.coeffs.shape[0], target.coeffs.shape[1], out)
    )
    return 0


def cmd_gradcheck(args, argv):
    cfg = _load_config(args)
    out = _resolved_out_dir(args, cfg)
    tau = args.tau
    timings, t0 = {}, time.perf_counter()
    domain = build_lens_domain(cfg.domain)
    target, _ = build_target(cfg, domain)
    box = _tracking_box(cfg, domain)
    design = design_dof_set(domain, cfg.optimizer["movable"])

    ops = build_operators(domain, cfg.materials, cfg.excitation)
    state = solve_state(ops, cfg.grid, params=cfg.integrator)
    tracking = assemble_tracking_mass(domain, ops.caches, box)
    u_d = target_history(target, domain, cfg.grid, ops.caches)
    loads = adjoint_loads(state.u, u_d, tracking)
    dadj = solve_adjoint_discrete(ops, cfg.grid, loads, state, params=cfg.integrator)
    g = shape_gradient_boundary(
        state,
        dadj,
        domain,
        cfg.materials,
        cfg.grid,
        design,
        caches=ops.caches,
        forbidden_dofs=np.unique(tracking.nonzero()[0]),
    )
    timings["adjoint_gradient"] = time.perf_counter() - t0

    movable = np.nonzero(design.movable)[0]
    if movable.size == 0:
        raise ConfigError("gradcheck: no movable design dofs")
    picks = sorted(
        {
            int(movable[movable.size // 4]),
            int(movable[movable.size // 2]),
            int(movable[(3 * movable.size) // 4]),
        }
    )

    # central differences with the target coefficients frozen at the base shape
    t0 = time.perf_counter()
    coords = domain.global_ctrl()
    rows = []
    for j in picks:
        values = np.zeros(design.ids.shape)
        values[j] = 1.0
        fd = []
        for sign in (1.0, -1.0):
            pert = update_boundary(domain, design, values, -sign * tau)
            ops_p = build_operators(pert, cfg.materials, cfg.excitation)
            state_p = solve_state(ops_p, cfg.grid, params=cfg.integrator)
            tracking_p = assemble_tracking_mass(pert, ops_p.caches, box)
            fd.append(cost(state_p.u, u_d, tracking_p, cfg.grid))
        g_fd = (fd[0] - fd[1]) / (2.0 * tau)
        g_adj = float(g.values[j])
        denom = max(abs(g_fd), 1e-300)
        rows.append((int(design.ids[j]), g_adj, g_fd, abs(g_adj - g_fd) / denom))
    timings["finite_differences"] = time.perf_counter() - t0

    outputs = []
    path = os.path.join(out, "gradcheck.csv")
    with open(path, "w") as f:
        f.write("dof,x,y,g_adjoint,g_fd,rel_mismatch\n")
        for gid, ga, gf, rel in rows:
            f.write(
                "%d,%s,%s,%s,%s,%s\n"
                % (gid, _fmt(coords[gid, 0]), _fmt(coords[gid, 1]), _fmt(ga), _fmt(gf), _fmt(rel))
            )
    outputs.append(path)
    worst = max(r[3] for r in rows)
    outputs.append(
        _write_manifest(
            out,
            "gradcheck",
            argv,
            cfg,
            timings,
            outputs,
            extra={"tau": tau, "worst_rel_mismatch": worst},
        )
    )
    for gid, ga, gf, rel in rows:
        print(
            "gradcheck: dof %d adjoint %.6e fd %.6e rel %.3e" % (gid, ga, gf, rel)
        )
    print("gradcheck: worst relative mismatch %.3e -> %s" % (worst, out))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="JSON config file (omit for the default setup)")
    p.add_argument("--out", help="output directory (default: config out_dir or ./lensopt_out)")
    p.add_argument("--seed", type=int, help="override the configured random seed")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="pin linear-algebra thread pools to one thread for repeatable output",
    )
    p.add_argument(
        "--workers",
        type=int,
        default=1,
        help="reserved for future parallel runs; commands execute in-process",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lensopt",
        description="Nonlinear acoustic simulation and lens shape optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="forward wave simulation")
    _add_common(p)
    p.add_argument(
        "--snapshot-every",
        type=int,
        default=0,
        metavar="K",
        help="also write a field CSV every K time steps",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("adjoint", help="adjoint solve and shape gradient for a stored state")
    _add_common(p)
    p.add_argument("--state", help="state.npz from a simulate run (default OUT/state.npz)")
    p.add_argument("--snapshot-every", type=int, default=0, metavar="K")
    p.set_defaults(func=cmd_adjoint)

    p = sub.add_parser("optimize", help="gradient-descent lens shape optimization")
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("make-target", help="synthesize a stored target from a goal shape")
    _add_common(p)
    p.set_defaults(func=cmd_make_target)

    p = sub.add_parser("gradcheck", help="finite-difference check of the shape gradient")
    _add_common(p)
    p.add_argument(
        "--tau",
        type=float,
        default=1e-5,
        help="central-difference step for control-point motion (meters)",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _deterministic_guard(args.deterministic):
            return args.func(args, argv)
    except ConfigError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except (GeometryError, SolverError, ValueError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
