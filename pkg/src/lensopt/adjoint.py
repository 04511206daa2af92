"""Backward-in-time Newmark solver for the adjoint (dual) system.

The adjoint of the tracking problem satisfies, backward from the final time
with homogeneous terminal conditions,
    (M - T(u)) p'' - C p' + K p = Fbar + A1 p' - A2 p'',
where Fbar(t) = 2 MD (u - u_d) and T is the Westervelt tensor frozen at the
forward state (or optionally at the target field). The sweep steps with -dt;
the effective matrix M + gamma_p dt C + beta_p dt^2 K is factorized once and
the tensor/boundary terms iterate to a residual-controlled fixed point.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .stepping import AlphaParams, SolverError, _as_csr, effective_mass

__all__ = [
    "AdjointParams",
    "AdjointHistory",
    "DiscreteAdjoint",
    "solve_adjoint",
    "solve_adjoint_discrete",
]


@dataclass(frozen=True)
class AdjointParams:
    """Backward Newmark parameters and residual tolerance."""

    gamma_p: float = 0.5
    beta_p: float = 0.25
    tol_p: float = 1e-8
    max_iter: int = 50


@dataclass
class AdjointHistory:
    """Adjoint solution indexed like the forward grid (terminal values zero)."""

    times: np.ndarray
    p: np.ndarray
    dp: np.ndarray
    ddp: np.ndarray
    iterations: np.ndarray = None


def solve_adjoint(ops, grid, loads, tensor_coeffs=None, params=None):
    """Sweep the adjoint system backward over the time grid.

    Parameters
    ----------
    ops : operator bundle with M, C, K, A1, A2 and optionally tensor
    grid : TimeGrid matching the forward solve
    loads : (n_steps, n) array
        Adjoint load vectors per grid point (2 MD (u_n - u_d,n) in production).
    tensor_coeffs : (n_steps, n) array or None
        Coefficients w_n freezing the tensor T(w_n) per step; None for linear.
    params : AdjointParams

    Returns AdjointHistory with p = dp = ddp = 0 at the terminal index.
    """
    params = params or AdjointParams()
    n = ops.M.shape[0]
    M = _as_csr(ops.M, n)
    C = _as_csr(ops.C, n)
    K = _as_csr(ops.K, n)
    A1 = _as_csr(getattr(ops, "A1", None), n)
    A2 = _as_csr(getattr(ops, "A2", None), n)
    tensor = getattr(ops, "tensor", None)
    if tensor_coeffs is None:
        tensor = None
    dt = grid.dt
    gp, bp = params.gamma_p, params.beta_p

    Mbar = splu(sp.csc_matrix(M + gp * dt * C + bp * dt * dt * K))

    m = grid.n_steps
    p = np.zeros((m, n))
    dp = np.zeros((m, n))
    ddp = np.zeros((m, n))
    iters = np.zeros(m - 1, dtype=np.int64)

    for step in range(m - 1, 0, -1):
        p_pred = p[step] - dt * dp[step] + 0.5 * dt * dt * (1.0 - 2.0 * bp) * ddp[step]
        v_pred = dp[step] - (1.0 - gp) * dt * ddp[step]
        fbar = loads[step - 1]
        bound = tensor.bind(tensor_coeffs[step - 1]) if tensor is not None else None
        rhs_const = fbar + C @ v_pred - K @ p_pred

        a = ddp[step].copy()

        def corrected(acc):
            return p_pred + bp * dt * dt * acc, v_pred - gp * dt * acc

        def residual(acc, pc, vc):
            r = M @ acc - C @ vc + K @ pc - fbar - A1 @ vc + A2 @ acc
            if bound is not None:
                r = r - tensor.apply_bound(bound, acc)
            return np.linalg.norm(r)

        pc, vc = corrected(a)
        res = residual(a, pc, vc)
        it = 0
        while res > params.tol_p:
            if it >= params.max_iter:
                raise SolverError(
                    "adjoint step %d: residual %.3e above tol %.3e after %d iterations"
                    % (step, res, params.tol_p, params.max_iter)
                )
            rhs = rhs_const + A1 @ vc - A2 @ a
            if bound is not None:
                rhs = rhs + tensor.apply_bound(bound, a)
            a = Mbar.solve(rhs)
            pc, vc = corrected(a)
            res = residual(a, pc, vc)
            it += 1
        iters[step - 1] = it
        p[step - 1] = pc
        dp[step - 1] = vc
        ddp[step - 1] = a

    return AdjointHistory(times=grid.times, p=p, dp=dp, ddp=ddp, iterations=iters)


@dataclass
class DiscreteAdjoint:
    """Multipliers of the forward stepping map, one per step constraint.

    lam[n] (n >= 1) multiplies the converged step-n balance residual at the
    alpha-averaged states; lam[0] multiplies the consistent-initial-
    acceleration constraint M a_0 = F(0) - C v_0 - K u_0.  params records the
    integrator parameters the multipliers belong to, so downstream sensitivity
    code can rebuild the matching alpha-averaged states.
    """

    times: np.ndarray
    lam: np.ndarray
    params: AlphaParams
    iterations: np.ndarray = None


def solve_adjoint_discrete(ops, grid, loads, state, params=None):
    """Multipliers that make gradients consistent with the stepped cost.

    Reverse recursion through the exact linearization of each forward step:
    the implicit balance at the alpha-averaged states, the displacement and
    velocity update rules, and the initial-acceleration solve.  With these
    multipliers a sensitivity assembled from the derivative of the discrete
    operators reproduces finite differences of the stepped cost down to the
    iteration tolerances, at any step size.

    Parameters
    ----------
    ops : operator bundle with M, C, K, A1, A2 and optionally tensor
    grid : TimeGrid matching the forward solve
    loads : (n_steps, n) array
        Cost density per grid point (2 MD (u_n - u_d,n) in production); the
        trapezoid time weights of the cost are applied internally.
    state : StateHistory from solve_state on the same grid (zero-initial run)
    params : AlphaParams used by the forward solve (defaults must match)

    Returns DiscreteAdjoint.  Raises SolverError if a backward fixed point
    fails to converge.
    """
    params = params or AlphaParams()
    n = ops.M.shape[0]
    M = _as_csr(ops.M, n)
    C = _as_csr(ops.C, n)
    K = _as_csr(ops.K, n)
    A1 = _as_csr(getattr(ops, "A1", None), n)
    A2 = _as_csr(getattr(ops, "A2", None), n)
    tensor = getattr(ops, "tensor", None)
    dt = grid.dt
    am, af = params.alpha_m, params.alpha_f
    gam, bet = params.gamma, params.beta
    m = grid.n_steps
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (m, n):
        raise ValueError("loads history does not match the grid/system size")
    if state.u.shape != (m, n):
        raise ValueError("state history does not match the grid/system size")

    w_t = np.full(m, dt)
    w_t[0] *= 0.5
    w_t[-1] *= 0.5

    Mbar = splu(sp.csc_matrix(effective_mass(M, C, K, dt, params)))
    Mfac = splu(sp.csc_matrix(M))

    def averaged(j):
        ub = (1.0 - af) * state.u[j] + af * state.u[j - 1]
        vb = (1.0 - af) * state.du[j] + af * state.du[j - 1]
        ab = (1.0 - am) * state.ddu[j] + am * state.ddu[j - 1]
        if tensor is not None:
            return tensor.bind(ub), tensor.bind(vb), tensor.bind(ab)
        return None, None, None

    def k_tilde(bnd_a, x):
        r = K @ x
        if bnd_a is not None:
            r = r - tensor.apply_bound(bnd_a, x)
        return r

    def c_tilde(bnd_v, x):
        r = C @ x + A1 @ x
        if bnd_v is not None:
            r = r - 2.0 * tensor.apply_bound(bnd_v, x)
        return r

    def m_tilde(bnd_u, x):
        r = M @ x + A2 @ x
        if bnd_u is not None:
            r = r - tensor.apply_bound(bnd_u, x)
        return r

    lam = np.zeros((m, n))
    iters = np.zeros(m - 1, dtype=np.int64)
    mu1 = nu1 = None  # multipliers of step n+1 while sweeping step n
    bnd1 = None  # bound tensors of step n+1
    for step in range(m - 1, 0, -1):
        bnd_u, bnd_v, bnd_a = averaged(step)
        q = w_t[step] * loads[step]
        if step == m - 1:
            r_mu = q
            r_nu = np.zeros(n)
            rhs = bet * dt * dt * r_mu
        else:
            lam1 = lam[step + 1]
            r_mu = q + mu1 - af * k_tilde(bnd1[2], lam1)
            r_nu = nu1 + dt * mu1 - af * c_tilde(bnd1[1], lam1)
            rhs = (
                bet * dt * dt * r_mu
                + gam * dt * r_nu
                + 0.5 * dt * dt * (1.0 - 2.0 * bet) * mu1
                + (1.0 - gam) * dt * nu1
                - am * m_tilde(bnd1[0], lam1)
            )
        # fixed point for (effective mass of the tilde blocks) lam = rhs with
        # the boundary/tensor parts of the matrix iterated on the right side
        x = lam[step + 1].copy() if step < m - 1 else np.zeros(n)
        converged = False
        for it in range(1, params.max_iter + 1):
            extra = (1.0 - am) * (A2 @ x) + gam * (1.0 - af) * dt * (A1 @ x)
            if tensor is not None:
                extra = extra - (1.0 - am) * tensor.apply_bound(bnd_u, x)
                extra = extra - 2.0 * gam * (1.0 - af) * dt * tensor.apply_bound(bnd_v, x)
                extra = extra - bet * (1.0 - af) * dt * dt * tensor.apply_bound(bnd_a, x)
            x_new = Mbar.solve(rhs - extra)
            nrm = np.linalg.norm(x_new)
            if nrm < 1e-30 or np.linalg.norm(x_new - x) <= params.tol * nrm:
                x = x_new
                converged = True
                break
            x = x_new
        if not converged:
            raise SolverError(
                "dual step %d: fixed point not converged in %d iterations"
                % (step, params.max_iter)
            )
        iters[step - 1] = it
        lam[step] = x
        mu1 = r_mu - (1.0 - af) * k_tilde(bnd_a, x)
        nu1 = r_nu - (1.0 - af) * c_tilde(bnd_v, x)
        bnd1 = (bnd_u, bnd_v, bnd_a)
    lam[0] = Mfac.solve(
        0.5 * dt * dt * (1.0 - 2.0 * bet) * mu1
        + (1.0 - gam) * dt * nu1
        - am * m_tilde(bnd1[0], lam[1])
    )
    return DiscreteAdjoint(times=grid.times, lam=lam, params=params, iterations=iters)
