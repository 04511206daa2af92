"""Tracking cost and shape sensitivities of the lens interface.

The cost is a time-trapezoid of a tracking quadratic form over a fixed
observation box.  The production sensitivity per lens-boundary control
point (shape_gradient_boundary) is the exact derivative of the stepped,
quadrature-assembled cost: each control point induces a mesh displacement
field through the boundary update rule, and the derivative of the discrete
operators along that field is paired with the multipliers of the stepping
map, so finite differences of the cost are reproduced down to iteration
tolerances at any step size.

Two independent continuum representations of the same derivative serve as
cross-checks: an interface form (shape_gradient_interface) pairing one-sided
traces along the lens/fluid interface weighted by material-coefficient
jumps, and a directional volume form (shape_gradient_volume_oracle) built
on the backward-in-time adjoint field.  Both converge to the production
values under mesh/step refinement but carry discretization bias on coarse
grids.
"""

from dataclasses import dataclass

import numpy as np

from .assembly import _edge_param_point, build_edge_cache, build_volume_caches
from .domain import DesignSet, GeometryError, design_dof_set
from .update import update_boundary

__all__ = [
    "ShapeGradient",
    "adjoint_loads",
    "build_interface_quadrature",
    "cost",
    "design_displacements",
    "shape_gradient_boundary",
    "shape_gradient_interface",
    "shape_gradient_volume_oracle",
    "trapezoid_weights",
]


def trapezoid_weights(grid):
    """Trapezoidal time-quadrature weights dt * [1/2, 1, ..., 1, 1/2]."""
    w = np.full(len(grid.times), grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def cost(u, u_d, tracking_mass, grid):
    """J = sum_n w_n (u_n - u_d,n)^T M_D (u_n - u_d,n), trapezoid in time."""
    u = np.asarray(u, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    if u.shape != u_d.shape:
        raise ValueError("field and target histories differ in shape")
    if u.shape[0] != len(grid.times):
        raise ValueError("history length does not match the time grid")
    e = u - u_d
    quad = np.einsum("nm,nm->m", tracking_mass @ e.T, e.T)
    return float(trapezoid_weights(grid) @ quad)


def adjoint_loads(u, u_d, tracking_mass):
    """Adjoint driving terms 2 M_D (u_n - u_d,n), one row per time step."""
    return 2.0 * (tracking_mass @ (np.asarray(u) - np.asarray(u_d)).T).T


# ---------------------------------------------------------------------------
# interface quadrature (both-sided traces at matched points)


@dataclass
class _SideTrace:
    """Full patch basis evaluated at edge quadrature points, one side."""

    gdofs: np.ndarray  # (nqp, nloc) global dof ids
    vals: np.ndarray  # (nqp, nloc) basis values
    dNdx: np.ndarray  # (nqp, nloc, 2) physical gradients
    phys: np.ndarray  # (nqp, 2) physical points


@dataclass
class InterfaceQuadrature:
    """Matched quadrature data along one lens/fluid interface."""

    lens: _SideTrace
    fluid: _SideTrace
    w: np.ndarray  # (nqp,) surface measure times Gauss weight
    normal: np.ndarray  # (nqp, 2) unit lens outward normal

    @property
    def normal_y(self):
        return self.normal[:, 1]


def _trace_tables(domain, patch_index, edge, params):
    patch = domain.patches[patch_index]
    dmap = domain.dof_map[patch_index]
    ctrl = patch.ctrl_flat
    gd, va, dn, ph = [], [], [], []
    for t in params:
        x1, x2 = _edge_param_point(edge, t)
        loc, vals, grads = patch.basis_at(x1, x2)
        pts = ctrl[loc]
        J = pts.T @ grads
        dndx = np.linalg.solve(J.T, grads.T).T
        gd.append(dmap[loc])
        va.append(vals)
        dn.append(dndx)
        ph.append(vals @ pts)
    return _SideTrace(
        gdofs=np.array(gd), vals=np.array(va), dNdx=np.array(dn), phys=np.array(ph)
    )


def build_interface_quadrature(domain, n_gauss=None, tol=1e-10):
    """Per lens/fluid interface: both-sided basis tables at shared points.

    Raises GeometryError if the two sides do not produce coincident physical
    quadrature points (non-conforming interface).
    """
    out = []
    for lp, ledge, fp, fedge in domain.lens_interfaces:
        ec = build_edge_cache(domain, lp, ledge, n_gauss)
        params = ec.params.ravel()
        lens = _trace_tables(domain, lp, ledge, params)
        fluid = _trace_tables(domain, fp, fedge, params)
        gap = np.abs(lens.phys - fluid.phys).max()
        if gap > tol:
            raise GeometryError(
                "interface %d.%s/%d.%s quadrature points differ by %.3e"
                % (lp, ledge, fp, fedge, gap)
            )
        out.append(
            InterfaceQuadrature(
                lens=lens,
                fluid=fluid,
                w=ec.dsxW.ravel(),
                normal=ec.normal.reshape(-1, 2),
            )
        )
    return out


# ---------------------------------------------------------------------------
# boundary representation


@dataclass
class ShapeGradient:
    """Sensitivity of the cost per lens-boundary control point.

    values[i] is dJ for a unit vertical motion of the control point with
    global dof ids[i]; all boundary dofs carry a sensitivity, including
    pinned ones (those are excluded from updates, not from the gradient).
    full holds the same accumulation over every global dof (zero off the
    interface) for diagnostics.
    """

    ids: np.ndarray
    values: np.ndarray
    full: np.ndarray

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))


def shape_gradient_interface(
    state,
    adj,
    domain,
    materials,
    grid,
    design=None,
    interfaces=None,
    chunk=256,
):
    """Interface form of the shape gradient for vertical control-point motion.

    g_i = -sum_n w_n sum_qp omega_qp (2[[k]] u u' p' + [[c^2]] grad u_l . grad p_f
          + [[b]] grad u'_l . grad p_f) N_i n_y, jumps [[.]] = lens - fluid,
    with n the lens outward normal.  The one-sided gradients are evaluated in
    tangential/normal components: tangential derivatives are continuous across
    the conforming interface and are taken directly, while the one-sided
    normal derivatives are reconstructed from the interface flux, which the
    transmission condition makes continuous where the raw normal derivative
    jumps: c^2 dn(u) is (up to the small damping flux) single-valued, so
    dn(u)_l = {c^2 dn(u)} / c_l^2 with {.} the two-sided flux average, and
    likewise dn(p)_f = {c^2 dn(p)} / c_f^2 and dn(u')_l = {c^2 dn(u')} / c_l^2.
    Raw one-sided normal derivatives of a C^0 discretization oscillate at the
    interface; the flux-averaged reconstruction is the same continuum quantity
    but converges at the rate of the flux.

    This is the continuum (Hadamard) representation: it sees only the motion
    of the interface itself, so it matches derivatives of the discrete cost
    only up to discretization error.  It serves as an independent cross-check
    of shape_gradient_boundary, which differentiates the discrete problem
    exactly.
    """
    if design is None:
        design = design_dof_set(domain)
    if interfaces is None:
        interfaces = build_interface_quadrature(domain)
    lm = materials.of("lens")
    fm = materials.of("fluid")
    dk = lm.k - fm.k
    cl2 = lm.c**2
    cf2 = fm.c**2
    dc2 = cl2 - cf2
    db = lm.b - fm.b
    w_t = trapezoid_weights(grid)
    m = len(w_t)
    if state.u.shape[0] != m or adj.p.shape[0] != m:
        raise ValueError("state/adjoint histories do not match the time grid")
    g = np.zeros(domain.n_global)
    for iq in interfaces:
        nrm = iq.normal
        tang = np.column_stack([-nrm[:, 1], nrm[:, 0]])
        s = np.zeros(len(iq.w))
        for lo in range(0, m, chunk):
            hi = min(lo + chunk, m)
            u_l = state.u[lo:hi, iq.lens.gdofs]
            du_l = state.du[lo:hi, iq.lens.gdofs]
            u_f = state.u[lo:hi, iq.fluid.gdofs]
            du_f = state.du[lo:hi, iq.fluid.gdofs]
            p_l = adj.p[lo:hi, iq.lens.gdofs]
            p_f = adj.p[lo:hi, iq.fluid.gdofs]
            dp_f = adj.dp[lo:hi, iq.fluid.gdofs]
            u_val = np.einsum("mql,ql->mq", u_l, iq.lens.vals)
            du_val = np.einsum("mql,ql->mq", du_l, iq.lens.vals)
            dp_val = np.einsum("mql,ql->mq", dp_f, iq.fluid.vals)
            gu_l = np.einsum("mql,qld->mqd", u_l, iq.lens.dNdx)
            gdu_l = np.einsum("mql,qld->mqd", du_l, iq.lens.dNdx)
            gu_f = np.einsum("mql,qld->mqd", u_f, iq.fluid.dNdx)
            gdu_f = np.einsum("mql,qld->mqd", du_f, iq.fluid.dNdx)
            gp_l = np.einsum("mql,qld->mqd", p_l, iq.lens.dNdx)
            gp_f = np.einsum("mql,qld->mqd", p_f, iq.fluid.dNdx)
            dn = lambda grad: np.einsum("mqd,qd->mq", grad, nrm)
            dt = lambda grad: np.einsum("mqd,qd->mq", grad, tang)
            flux_u = 0.5 * (cl2 * dn(gu_l) + cf2 * dn(gu_f))
            flux_du = 0.5 * (cl2 * dn(gdu_l) + cf2 * dn(gdu_f))
            flux_p = 0.5 * (cl2 * dn(gp_l) + cf2 * dn(gp_f))
            tp = dt(gp_l)
            integ = (
                2.0 * dk * u_val * du_val * dp_val
                + dc2 * (dt(gu_l) * tp + flux_u * flux_p / (cl2 * cf2))
                + db * (dt(gdu_l) * tp + flux_du * flux_p / (cl2 * cf2))
            )
            s += w_t[lo:hi] @ integ
        coef = -s * iq.w * iq.normal_y
        np.add.at(g, iq.lens.gdofs, coef[:, None] * iq.lens.vals)
    return ShapeGradient(ids=design.ids, values=g[design.ids], full=g)


# ---------------------------------------------------------------------------
# production gradient: exact derivative of the stepped, assembled cost


def design_displacements(domain, design):
    """Exact mesh displacement field per design dof, unit +y control motion.

    The boundary update rule is linear in the step size, so the field induced
    by moving one control point is obtained exactly as the coordinate
    difference of one unit update.  Pinned dofs (the tip) get the field of the
    same construction with the pin released: they carry sensitivities even
    though the optimizer never moves them.  Returns a list of (n_global, 2)
    arrays aligned with design.ids.
    """
    released = DesignSet(
        ids=design.ids,
        movable=np.ones(len(design.ids), dtype=bool),
        rows=design.rows,
        abscissae=design.abscissae,
    )
    base = domain.global_ctrl()
    out = []
    for pos in range(len(design.ids)):
        e = np.zeros(len(design.ids))
        e[pos] = 1.0
        moved = update_boundary(domain, released, e, -1.0)
        out.append(moved.global_ctrl() - base)
    return out


def _wave_boundary_dofs(domain):
    dofs = set()
    for tag in ("excitation", "absorbing"):
        for p, edge in domain.tagged_edges(tag):
            loc = domain.patches[p].edge_indices(edge)
            dofs.update(domain.dof_map[p][loc].tolist())
    return np.array(sorted(dofs), dtype=np.int64)


def shape_gradient_boundary(
    state,
    dadj,
    domain,
    materials,
    grid,
    design=None,
    caches=None,
    forbidden_dofs=None,
    chunk=64,
):
    """Sensitivity of the tracking cost per lens-boundary control point.

    Differentiates the discrete problem exactly: the assembled mass,
    damping, stiffness and nonlinear-tensor forms are isoparametric, so
    their derivative along a mesh displacement field Theta is the material
    derivative evaluated at the quadrature points, and pairing it with the
    stepping-map multipliers dadj (solve_adjoint_discrete) at the
    alpha-averaged states gives the exact derivative of the stepped cost, up
    to the forward/dual iteration tolerances.  Each control point's field
    comes from design_displacements, so g_i matches central finite
    differences of the cost under the same boundary update.

    Requires the wave-carrying outer edges (excitation, absorbing) and the
    observation region (pass its dofs as forbidden_dofs) to stay fixed under
    every design motion; sliding along the symmetry axis is fine because no
    boundary term lives there.  Assumes the forward run started from rest.

    Returns ShapeGradient: values aligned with design.ids (pinned dofs
    included), full scattered over global dofs (zero off the design set).
    """
    if design is None:
        design = design_dof_set(domain)
    if caches is None:
        caches = build_volume_caches(domain)
    m = grid.n_steps
    if state.u.shape[0] != m or dadj.lam.shape[0] != m:
        raise ValueError("state/dual histories do not match the time grid")
    af = dadj.params.alpha_f
    am = dadj.params.alpha_m
    lam = dadj.lam
    thetas = design_displacements(domain, design)
    support = np.zeros(domain.n_global, dtype=bool)
    for th in thetas:
        support |= np.abs(th).sum(axis=1) > 0.0
    wave = _wave_boundary_dofs(domain)
    if wave.size and support[wave].any():
        raise GeometryError("design motion reaches a wave-carrying outer edge")
    if forbidden_dofs is not None:
        forbidden_dofs = np.asarray(forbidden_dofs, dtype=np.int64)
        if forbidden_dofs.size and support[forbidden_dofs].any():
            raise ValueError("design motion reaches the observation region")
    G = np.zeros((domain.n_global, 2))
    for c in caches:
        if not support[c.gdofs].any():
            continue
        mat = materials.of(c.region)
        c2, b, k = mat.c**2, mat.b, mat.k
        ne, nq = c.detJxW.shape
        A = np.zeros((ne, nq, 2, 2))
        S = np.zeros((ne, nq))
        for lo in range(1, m, chunk):
            hi = min(lo + chunk, m)
            ub = (1.0 - af) * state.u[lo:hi] + af * state.u[lo - 1 : hi - 1]
            vb = (1.0 - af) * state.du[lo:hi] + af * state.du[lo - 1 : hi - 1]
            ab = (1.0 - am) * state.ddu[lo:hi] + am * state.ddu[lo - 1 : hi - 1]
            u_e = ub[:, c.gdofs]
            v_e = vb[:, c.gdofs]
            a_e = ab[:, c.gdofs]
            l_e = lam[lo:hi][:, c.gdofs]
            u_q = np.einsum("cel,eql->ceq", u_e, c.N)
            v_q = np.einsum("cel,eql->ceq", v_e, c.N)
            a_q = np.einsum("cel,eql->ceq", a_e, c.N)
            l_q = np.einsum("cel,eql->ceq", l_e, c.N)
            gu = np.einsum("cel,eqld->ceqd", u_e, c.dNdx)
            gv = np.einsum("cel,eqld->ceqd", v_e, c.dNdx)
            gl = np.einsum("cel,eqld->ceqd", l_e, c.dNdx)
            flux = c2 * gu + b * gv
            pair = np.einsum("ceqa,ceqb->eqab", flux, gl)
            A += pair + np.swapaxes(pair, -1, -2)
            S += np.einsum(
                "ceq->eq",
                (1.0 - 2.0 * k * u_q) * a_q * l_q
                + np.einsum("ceqd,ceqd->ceq", flux, gl)
                - 2.0 * k * v_q**2 * l_q,
            )
        # initial-acceleration constraint: plain mass form, fields at rest
        a0 = np.einsum("el,eql->eq", state.ddu[0][c.gdofs], c.N)
        l0 = np.einsum("el,eql->eq", lam[0][c.gdofs], c.N)
        S += a0 * l0
        ga = np.einsum("eq,eqab,eqlb->ela", c.detJxW, A, c.dNdx)
        gs = np.einsum("eq,eq,eqla->ela", c.detJxW, S, c.dNdx)
        np.add.at(G, c.gdofs.ravel(), (ga - gs).reshape(-1, 2))
    values = np.array([float(np.sum(th * G)) for th in thetas])
    full = np.zeros(domain.n_global)
    full[design.ids] = values
    return ShapeGradient(ids=design.ids, values=values, full=full)


# ---------------------------------------------------------------------------
# volume representation (cross-check oracle)


def _outer_boundary_dofs(domain):
    dofs = set()
    for tag in ("excitation", "absorbing", "symmetry"):
        for p, edge in domain.tagged_edges(tag):
            loc = domain.patches[p].edge_indices(edge)
            dofs.update(domain.dof_map[p][loc].tolist())
    return np.array(sorted(dofs), dtype=np.int64)


def shape_gradient_volume_oracle(
    state,
    adj,
    domain,
    materials,
    grid,
    theta,
    caches=None,
    forbidden_dofs=None,
):
    """Volume form of the shape derivative in the direction theta.

    theta is a per-global-dof displacement field (n_global, 2); the induced
    deformation is Theta(x) = sum_i N_i(x) theta_i.  Requires theta to vanish
    on the outer boundary and (via forbidden_dofs) on the observation region.
    Returns the scalar dJ . Theta.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (domain.n_global, 2):
        raise ValueError("theta must be (n_global, 2)")
    bdofs = _outer_boundary_dofs(domain)
    if bdofs.size and np.abs(theta[bdofs]).max() > 0.0:
        raise ValueError("deformation field must vanish on the outer boundary")
    if forbidden_dofs is not None:
        forbidden_dofs = np.asarray(forbidden_dofs, dtype=np.int64)
        if forbidden_dofs.size and np.abs(theta[forbidden_dofs]).max() > 0.0:
            raise ValueError("deformation field must vanish on the tracking region")
    if caches is None:
        caches = build_volume_caches(domain)
    w_t = trapezoid_weights(grid)
    m = len(w_t)
    total = 0.0
    for c in caches:
        th = theta[c.gdofs]
        DT = np.einsum("ela,eqlb->eqab", th, c.dNdx)
        if not DT.any():
            continue
        divT = DT[..., 0, 0] + DT[..., 1, 1]
        sym = DT + np.swapaxes(DT, -1, -2)
        mat = materials.of(c.region)
        c2, b, k = mat.c**2, mat.b, mat.k
        for n in range(m):
            un = state.u[n][c.gdofs]
            dun = state.du[n][c.gdofs]
            ddun = state.ddu[n][c.gdofs]
            pn = adj.p[n][c.gdofs]
            u_q = np.einsum("el,eql->eq", un, c.N)
            du_q = np.einsum("el,eql->eq", dun, c.N)
            ddu_q = np.einsum("el,eql->eq", ddun, c.N)
            p_q = np.einsum("el,eql->eq", pn, c.N)
            gu = np.einsum("el,eqld->eqd", un, c.dNdx)
            gdu = np.einsum("el,eqld->eqd", dun, c.dNdx)
            gp = np.einsum("el,eqld->eqd", pn, c.dNdx)
            flux = c2 * gu + b * gdu
            i1 = np.einsum("eqa,eqab,eqb->eq", flux, sym, gp)
            i2 = (
                (1.0 - 2.0 * k * u_q) * ddu_q * p_q
                + c2 * np.einsum("eqd,eqd->eq", gu, gp)
                + b * np.einsum("eqd,eqd->eq", gdu, gp)
                - 2.0 * k * du_q**2 * p_q
            ) * divT
            total += w_t[n] * float(np.sum((i1 - i2) * c.detJxW))
    return total
