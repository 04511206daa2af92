"""Gradient-descent shape optimization loop with adaptive step control.

Each outer iteration solves the state problem on the current lens shape,
computes the tracking cost and the adjoint-based boundary gradient, then
proposes a descent update of the movable lens boundary.  A proposal is
accepted only if the new shape is feasible AND does not increase the cost;
otherwise the step multiplier shrinks and the proposal is retried.  The loop
stops on a small relative gradient norm, on the step multiplier falling below
its floor, or on the step budget.
"""

from dataclasses import dataclass, field

import numpy as np

from .adjoint import solve_adjoint_discrete
from .assembly import Materials, assemble_tracking_mass, build_operators
from .domain import GeometryError, design_dof_set
from .gradient import adjoint_loads, cost, shape_gradient_boundary
from .stepping import SolverError, solve_state
from .targets import target_history
from .update import ThicknessConstraint, check_feasible, shape_error_l2, update_boundary

__all__ = ["OptConfig", "OptRecord", "OptimizationHistory", "optimize"]


@dataclass(frozen=True)
class OptConfig:
    """Outer-loop controls: budget, stopping tolerances, step-size policy.

    The descent step is alpha = m * step_base / ||g|| with a dimensionless
    multiplier m starting at 1; tol_step bounds the multiplier, not the
    physical step length.
    """

    s_max: int = 50
    tol_grad: float = 1e-4
    tol_step: float = 1e-8
    step_base: float = 1e-3
    grow: float = 2.0
    shrink: float = 0.5

    def __post_init__(self):
        if self.s_max < 0:
            raise ValueError("s_max must be nonnegative")
        if not 0.0 < self.tol_step < 1.0:
            raise ValueError("tol_step must lie strictly between 0 and the initial multiplier 1")
        if self.tol_grad < 0.0:
            raise ValueError("tol_grad must be nonnegative")
        if self.step_base <= 0.0:
            raise ValueError("step_base must be positive")
        if self.grow <= 1.0:
            raise ValueError("grow factor must exceed 1")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink factor must lie strictly between 0 and 1")


@dataclass
class OptRecord:
    """One history row: the shape visited at this step and the move tried from it."""

    step: int
    J: float
    gradnorm: float
    alpha: float  # final trial step launched from this shape (0.0 if none)
    accepted: bool  # whether that trial produced the next shape
    repeats: int  # rejected trials during this outer iteration
    shape_error: float  # L2 control-point mismatch vs the goal (nan without one)


@dataclass
class OptimizationHistory:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # design y-values per step
    reason: str = ""
    final_domain: object = None

    CSV_HEADER = "step,J,J/J0,gradnorm,gradnorm/gradnorm0,alpha,accepted,repeats,shape_error_l2"

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def accepted_steps(self):
        return sum(1 for r in self.records if r.accepted)

    def to_csv(self, path_or_file):
        """History table with stable 17-significant-digit formatting."""
        if not self.records:
            raise ValueError("empty optimization history")
        J0 = self.records[0].J
        g0 = self.records[0].gradnorm
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g"
                % (
                    r.step,
                    r.J,
                    r.J / J0 if J0 != 0.0 else float("nan"),
                    r.gradnorm,
                    r.gradnorm / g0 if g0 != 0.0 else float("nan"),
                    r.alpha,
                    int(r.accepted),
                    r.repeats,
                    r.shape_error,
                )
            )
        text = "\n".join(lines) + "\n"
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            with open(path_or_file, "w") as f:
                f.write(text)
        else:
            path_or_file.write(text)
        return text


def _default_box(domain):
    """Tracking region defaulting to the inner fluid patch above the lens."""
    p = domain.params
    if p is None:
        raise ValueError("tracking box required for domains without stored parameters")
    return (0.0, p.W, p.S, p.L)


def optimize(
    domain,
    grid,
    target,
    box=None,
    opt=None,
    materials=None,
    excitation=None,
    alpha=None,
    movable="upper",
    constraint=None,
    goal=None,
    n_trace_gauss=None,
):
    """Run the descent loop from an initial lens domain.

    target is a GaussianTarget or StoredTarget; box the tracking rectangle
    (x0, x1, y0, y1), defaulting to the inner fluid patch above the lens;
    goal an optional goal domain or design y-vector for shape-error tracking.
    Returns an OptimizationHistory whose final_domain is the last accepted
    shape.  An infeasible initial shape is an immediate error; inner solver
    failures propagate with step context attached.
    """
    opt = opt if opt is not None else OptConfig()
    materials = materials if materials is not None else Materials()
    constraint = constraint if constraint is not None else ThicknessConstraint()
    box = box if box is not None else _default_box(domain)
    design = design_dof_set(domain, movable)
    if goal is None:
        goal_y = None
    elif hasattr(goal, "global_ctrl"):
        goal_y = goal.global_ctrl()[design.ids, 1]
    else:
        goal_y = np.asarray(goal, dtype=float)
        if goal_y.shape != design.ids.shape:
            raise ValueError("goal vector does not match the design dof set")

    report = check_feasible(domain, design, constraint)
    if not report.ok:
        raise GeometryError("initial shape infeasible: " + "; ".join(report.violations))

    def evaluate(dom, context):
        ops = build_operators(dom, materials, excitation)
        try:
            state = solve_state(ops, grid, params=alpha)
        except SolverError as e:
            raise SolverError("%s: %s" % (context, e)) from e
        tracking = assemble_tracking_mass(dom, ops.caches, box)
        u_d = target_history(target, dom, grid, ops.caches)
        return ops, state, tracking, u_d, cost(state.u, u_d, tracking, grid)

    history = OptimizationHistory()
    current = domain
    ops, state, tracking, u_d, J = evaluate(current, "initial shape")
    m = 1.0
    grad0 = None
    s = 0
    while True:
        loads = adjoint_loads(state.u, u_d, tracking)
        dadj = solve_adjoint_discrete(ops, grid, loads, state, params=alpha)
        g = shape_gradient_boundary(
            state,
            dadj,
            current,
            materials,
            grid,
            design,
            caches=ops.caches,
            forbidden_dofs=np.unique(tracking.nonzero()[0]),
        )
        gn = float(np.linalg.norm(g.values[design.movable]))
        if grad0 is None:
            grad0 = gn
        y = current.global_ctrl()[design.ids, 1]
        err = shape_error_l2(y, goal_y) if goal_y is not None else float("nan")

        def record(alpha_step, accepted, repeats):
            history.records.append(
                OptRecord(s, J, gn, alpha_step, accepted, repeats, err)
            )
            history.snapshots.append(y.copy())

        if gn == 0.0:
            record(0.0, False, 0)
            history.reason = "zero_gradient"
            break
        if gn / grad0 < opt.tol_grad:
            record(0.0, False, 0)
            history.reason = "optimal"
            break
        if s >= opt.s_max:
            record(0.0, False, 0)
            history.reason = "max_steps"
            break

        repeats = 0
        accepted = False
        alpha_step = 0.0
        cand = cand_eval = None
        while True:
            alpha_step = m * opt.step_base / gn
            feasible = False
            try:
                cand = update_boundary(current, design, g.values, alpha_step)
                feasible = check_feasible(cand, design, constraint).ok
                if feasible:
                    cand_eval = evaluate(
                        cand, "step %d trial %d (alpha=%.3e)" % (s, repeats, alpha_step)
                    )
            except GeometryError:
                feasible = False
            if feasible and cand_eval[-1] <= J:
                accepted = True
                break
            repeats += 1
            m *= opt.shrink
            if m < opt.tol_step:
                break
        record(alpha_step, accepted, repeats)
        if not accepted:
            history.reason = "step_floor"
            break
        current = cand
        ops, state, tracking, u_d, J = cand_eval
        if repeats == 0:
            m *= opt.grow
        s += 1

    history.final_domain = current
    return history
