"""Target pressure distributions: analytic Gaussian and stored synthetic data.

The tracking cost compares the computed pressure with target coefficients in
the same NURBS space.  Two target kinds are supported: a stationary Gaussian
focused on the symmetry axis (projected onto the basis), and stored
time-series coefficients, typically synthesized by running the forward solver
on a staggered twin of the goal geometry (one refinement level finer in space,
half the time step) and polluting the transferred data with calibrated noise.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import assemble_mass, build_operators, build_volume_caches
from .domain import build_lens_domain
from .stepping import TimeGrid, solve_state

__all__ = [
    "GaussianTarget",
    "StoredTarget",
    "eval_target",
    "project_pointwise",
    "synthesize_target",
    "target_history",
    "transfer_history",
]


@dataclass(frozen=True)
class GaussianTarget:
    """Stationary Gaussian pressure target centered on the symmetry axis."""

    amplitude: float = 6e7
    sigma_x: float = 0.02
    sigma_y: float = 0.004
    y_focus: float = 0.105

    def __post_init__(self):
        if self.amplitude <= 0.0 or self.sigma_x <= 0.0 or self.sigma_y <= 0.0:
            raise ValueError("Gaussian target needs positive amplitude and widths")

    def value(self, xy):
        """Pointwise target pressure at physical coordinates (..., 2)."""
        xy = np.asarray(xy, dtype=float)
        qx = (xy[..., 0] / self.sigma_x) ** 2
        qy = ((xy[..., 1] - self.y_focus) / self.sigma_y) ** 2
        return self.amplitude * np.exp(-0.5 * (qx + qy))


@dataclass
class StoredTarget:
    """Per-step target coefficients on the optimization grid."""

    times: np.ndarray  # (m,)
    coeffs: np.ndarray  # (m, n_global)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.times.ndim != 1 or self.coeffs.shape[0] != self.times.size:
            raise ValueError("stored target needs one coefficient vector per time")
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("stored target times must be strictly increasing")

    def history_on(self, times):
        """Coefficients at the query times; exact on matching grids, else
        linear interpolation in time. Queries outside the stored span fail."""
        times = np.asarray(times, dtype=float)
        if times.shape == self.times.shape and np.array_equal(times, self.times):
            return self.coeffs.copy()
        eps = 1e-9 * (self.times[-1] - self.times[0])
        if times.min() < self.times[0] - eps or times.max() > self.times[-1] + eps:
            raise ValueError("query times fall outside the stored target span")
        t = np.clip(times, self.times[0], self.times[-1])
        hi = np.clip(np.searchsorted(self.times, t), 1, self.times.size - 1)
        lo = hi - 1
        w = (t - self.times[lo]) / (self.times[hi] - self.times[lo])
        return (1.0 - w)[:, None] * self.coeffs[lo] + w[:, None] * self.coeffs[hi]


def project_pointwise(domain, fn, caches=None):
    """L2-projection of a pointwise function of physical coordinates.

    Solves M c = b with the plain mass matrix and b_i = integral of fn N_i.
    """
    if caches is None:
        caches = build_volume_caches(domain)
    mass = assemble_mass(domain, caches)
    rhs = np.zeros(domain.n_global)
    for c in caches:
        vals = np.asarray(fn(c.phys), dtype=float)
        contrib = np.einsum("eqi,eq->ei", c.N, vals * c.detJxW)
        np.add.at(rhs, c.gdofs.ravel(), contrib.ravel())
    return spla.spsolve(mass.tocsc(), rhs)


def eval_target(target, domain, t, caches=None):
    """Target coefficient vector at one time (Gaussian targets are static)."""
    if isinstance(target, GaussianTarget):
        return project_pointwise(domain, target.value, caches)
    return target.history_on(np.array([float(t)]))[0]


def target_history(target, domain, grid, caches=None):
    """Target coefficients at every grid time, shaped (n_steps, n_global)."""
    if isinstance(target, GaussianTarget):
        coeff = project_pointwise(domain, target.value, caches)
        return np.tile(coeff, (grid.n_steps, 1))
    return target.history_on(grid.times)


def _point_eval_matrix(domain, points_per_patch):
    """Sparse matrix evaluating a coefficient vector at given parametric points.

    points_per_patch maps patch index -> (n_pts, 2) parametric coordinates;
    rows of the result follow patch order, then point order.
    """
    rows, cols, vals = [], [], []
    row = 0
    for p, pts in points_per_patch:
        patch = domain.patches[p]
        dmap = domain.dof_map[p]
        for x1, x2 in pts:
            loc, nvals, _ = patch.basis_at(x1, x2)
            rows.append(np.full(len(loc), row))
            cols.append(dmap[loc])
            vals.append(nvals)
            row += 1
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row, domain.n_global),
    ).tocsr()


def transfer_history(src_domain, dst_domain, u_src, dst_caches=None, chunk=256):
    """L2-project a coefficient history between meshes of the same geometry.

    Fields are paired parametrically patch by patch (the meshes must have the
    same patch layout, e.g. a refined twin).  u_src is (n_steps, n_src); the
    result is (n_steps, n_dst) minimizing the L2 distance on the destination
    mesh.  Fields that both spaces can represent survive the round trip.
    """
    if len(src_domain.patches) != len(dst_domain.patches):
        raise ValueError("meshes must share the same patch layout")
    if dst_caches is None:
        dst_caches = build_volume_caches(dst_domain)
    u_src = np.atleast_2d(np.asarray(u_src, dtype=float))
    if u_src.shape[1] != src_domain.n_global:
        raise ValueError("source history does not match the source mesh")

    # destination-side quadrature tables, flattened over elements
    pts = [(c.patch_index, c.params.reshape(-1, 2)) for c in dst_caches]
    eval_src = _point_eval_matrix(src_domain, pts)
    rows, cols, vals = [], [], []
    row = 0
    for c in dst_caches:
        n_el, n_qp, n_loc = c.N.shape
        r = row + np.arange(n_el * n_qp).repeat(n_loc)
        rows.append(r)
        cols.append(np.repeat(c.gdofs, n_qp, axis=0).reshape(n_el * n_qp, n_loc).ravel())
        vals.append(c.N.reshape(n_el * n_qp, n_loc).ravel())
        row += n_el * n_qp
    eval_dst = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row, dst_domain.n_global),
    ).tocsr()
    weights = np.concatenate([c.detJxW.reshape(-1) for c in dst_caches])

    mass = assemble_mass(dst_domain, dst_caches)
    solve = spla.factorized(mass.tocsc())
    out = np.empty((u_src.shape[0], dst_domain.n_global))
    for s in range(0, u_src.shape[0], chunk):
        block = u_src[s : s + chunk]
        at_qp = eval_src @ block.T  # (n_pts, chunk)
        rhs = eval_dst.T @ (weights[:, None] * at_qp)
        for j in range(rhs.shape[1]):
            out[s + j] = solve(rhs[:, j])
    return out


def synthesize_target(
    goal_params,
    grid,
    materials=None,
    excitation=None,
    noise_level=0.02,
    seed=0,
    alpha=None,
):
    """Synthetic target data from a staggered twin of the goal geometry.

    The forward problem is solved on the goal lens shape with a one-level
    finer mesh and half the time step, transferred to the optimization space
    of the goal geometry, and polluted with Gaussian noise whose standard
    deviation is noise_level times the maximal coefficient amplitude.
    Returns (target, goal_domain).
    """
    goal = build_lens_domain(goal_params)
    fine_params = replace(goal_params, refinement=goal_params.refinement.doubled())
    fine = build_lens_domain(fine_params)
    fine_grid = TimeGrid(grid.t_final, 2 * (grid.n_steps - 1) + 1)
    ops = build_operators(fine, materials, excitation)
    state = solve_state(ops, fine_grid, params=alpha)
    coeffs = transfer_history(fine, goal, state.u[::2])
    if noise_level > 0.0:
        rng = np.random.default_rng(seed)
        sigma = noise_level * np.abs(coeffs).max()
        coeffs = coeffs + rng.normal(0.0, sigma, coeffs.shape)
    return StoredTarget(times=grid.times.copy(), coeffs=coeffs), goal
