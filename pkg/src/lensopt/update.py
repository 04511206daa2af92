"""Lens boundary updates, Coons interior propagation, and feasibility checks.

A descent step moves the movable boundary control points vertically, then
recomputes the interiors of the lens-column patches from their (updated)
boundary curves with a bilinearly blended Coons combination applied directly
to the control nets.  Feasibility of a candidate shape combines a minimal
manufacturable-thickness profile, non-self-intersection, containment, and a
positive geometry-map Jacobian everywhere.
"""

from dataclasses import dataclass, field

import numpy as np

from .nurbs import Curve, TensorPatch
from .domain import design_dof_set

__all__ = [
    "FeasibilityReport",
    "ThicknessConstraint",
    "check_feasible",
    "coons_update",
    "reference_thickness",
    "shape_error_l2",
    "update_boundary",
]

# patches forming the lens column (below / inside / above the lens); these are
# the ones whose boundaries move and whose interiors get re-blended
LENS_COLUMN = (0, 2, 3)


def reference_thickness(x):
    """Thinnest manufacturable lens profile as a function of |x| on [0, W].

    Written so the axis value is exactly the nominal 0.01 m width (the
    root-of-square terms vanish identically at x = 0).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 0.0445):
        raise ValueError("thickness profile defined on 0 <= x <= 0.0445")
    outer = np.sqrt(0.0608**2 - x**2) - 0.0608
    inner = np.sqrt(0.0445**2 - x**2) - 0.0445
    return 0.01 - outer + inner


@dataclass(frozen=True)
class ThicknessConstraint:
    """Minimal vertical gap between the two lens boundaries.

    d_min maps the control abscissa to the required thickness; tol absorbs
    the profile's small nonzero value at the shared-tip abscissa (the lens
    thickness there is structurally zero).
    """

    d_min: callable = reference_thickness
    enabled: bool = True
    tol: float = 1e-4


@dataclass
class FeasibilityReport:
    ok: bool
    violations: list = field(default_factory=list)
    thickness_margin: float = np.inf  # min over pairs of gap - d_min
    min_gap: float = np.inf  # min over pairs of upper - lower
    min_jacobian: float = np.inf

    def __bool__(self):
        return self.ok


def _straight(curve):
    """Same-knot-vector straight segment between a curve's two endpoints."""
    t = curve.kv.greville()[:, None]
    ctrl = (1.0 - t) * curve.ctrl[0] + t * curve.ctrl[-1]
    return Curve(curve.kv, ctrl, curve.weights.copy())


def coons_update(patch, south=None, north=None, west=None, east=None):
    """Recompute a patch interior from its boundary curves (Coons blend).

    Boundary curves default to the patch's current edges; passing a curve
    overrides that edge.  Boundary control points are preserved exactly;
    only the interior is recomputed.
    """
    south = south if south is not None else patch.edge_curve("south")
    north = north if north is not None else patch.edge_curve("north")
    west = west if west is not None else patch.edge_curve("west")
    east = east if east is not None else patch.edge_curve("east")
    return TensorPatch.from_edges(south, north, west, east)


def update_boundary(domain, design, values, alpha):
    """Descent step: y_i <- y_i - alpha * values_i on movable design dofs.

    Returns a new domain: pinned dofs (the tip) stay put, dofs shared with
    the adjacent fluid patches move identically through the glued numbering,
    the straight symmetry-axis edges of the lens column are restretched to
    the moved endpoints, and the lens-column interiors are re-blended.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != design.ids.shape:
        raise ValueError("gradient values do not match the design dof set")
    new = domain.clone()
    coords = new.global_ctrl()
    ids = design.ids[design.movable]
    coords[ids, 1] -= alpha * values[design.movable]
    new.set_global_ctrl(coords)
    for p in LENS_COLUMN:
        patch = new.patches[p]
        new.patches[p] = coons_update(patch, west=_straight(patch.edge_curve("west")))
    return new


def _paired_rows(domain, design):
    lo, up = design.rows["lower"], design.rows["upper"]
    if len(lo) != len(up):
        raise ValueError("boundary rows have mismatched control counts")
    coords = domain.global_ctrl()
    x_mid = 0.5 * (coords[lo, 0] + coords[up, 0])
    return coords[lo, 1], coords[up, 1], x_mid


def check_feasible(domain, design=None, constraint=None, n_sample=2):
    """Feasibility of the current lens shape.

    Checks, in order: upper boundary above lower one (no self-intersection),
    lens contained between the channel floor and the sensor-side interface,
    minimal thickness profile at the paired control abscissae (when the
    constraint is enabled), and positive geometry-map Jacobian on a sample
    grid in every patch.
    """
    if design is None:
        design = design_dof_set(domain)
    if constraint is None:
        constraint = ThicknessConstraint()
    report = FeasibilityReport(ok=True)
    y_lo, y_up, x_mid = _paired_rows(domain, design)
    gap = y_up - y_lo
    # interior pairs must keep a strictly positive gap; the shared tip dof
    # closes the profile with a structural zero and is excluded
    interior = gap[:-1]
    if interior.size:
        report.min_gap = float(interior.min())
    if interior.size and interior.min() <= 0.0:
        i = int(np.argmin(interior))
        report.ok = False
        report.violations.append(
            "self-intersection: gap %.3e at x=%.4f (pair %d)"
            % (interior.min(), x_mid[i], i)
        )
    params = domain.params
    if params is not None:
        if y_lo.min() <= 0.0:
            report.ok = False
            report.violations.append("lower boundary reaches the excitation plane")
        if y_up.max() >= params.S:
            report.ok = False
            report.violations.append("upper boundary reaches the sensor-side interface")
    if constraint.enabled:
        d = constraint.d_min(x_mid)
        margin = gap - d
        report.thickness_margin = float(margin.min())
        bad = np.nonzero(margin < -constraint.tol)[0]
        if bad.size:
            report.ok = False
            for i in bad:
                report.violations.append(
                    "thickness %.4e < required %.4e at x=%.4f (pair %d)"
                    % (gap[i], d[i], x_mid[i], int(i))
                )
    try:
        report.min_jacobian = float(domain.min_jacobian(n_sample))
    except Exception:
        report.min_jacobian = -np.inf
    if report.min_jacobian <= 0.0:
        report.ok = False
        report.violations.append(
            "geometry map folds: min det DG = %.3e" % report.min_jacobian
        )
    return report


def shape_error_l2(y, y_goal):
    """Root mean square control-point mismatch sqrt(mean |y_goal - y|^2)."""
    y = np.asarray(y, dtype=float)
    y_goal = np.asarray(y_goal, dtype=float)
    if y.shape != y_goal.shape:
        raise ValueError("mismatched design dof sets")
    return float(np.sqrt(np.mean((y_goal - y) ** 2)))
