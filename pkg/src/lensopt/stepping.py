"""Generalized-alpha time integration of the semidiscrete Westervelt system.

The second-order system is
    M u'' + C u' + K u - T(u')u' - T(u)u'' = F(t) - A1 u' - A2 u''
with the nonlinear tensor T applied matrix-free. Each step solves for the new
acceleration by a fixed-point iteration: the constant-coefficient part
(M, C, K) is implicit through the effective matrix (factorized once), while
the tensor and absorbing-boundary terms are evaluated at the previous iterate.
The same machinery integrates plain linear oscillators when the tensor and
boundary matrices are absent, which the verification suite exploits.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "TimeGrid",
    "AlphaParams",
    "SecondOrderSystem",
    "StateHistory",
    "SolverError",
    "effective_mass",
    "initial_acceleration",
    "solve_state",
]


class SolverError(RuntimeError):
    """Raised when an inner fixed-point iteration fails to converge."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with n_steps points covering [0, t_final]."""

    t_final: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("need at least two grid points")
        if self.t_final <= 0:
            raise ValueError("t_final must be positive")

    @property
    def dt(self):
        return self.t_final / (self.n_steps - 1)

    @property
    def times(self):
        return np.linspace(0.0, self.t_final, self.n_steps)


@dataclass(frozen=True)
class AlphaParams:
    """Generalized-alpha parameters and inner-iteration controls."""

    alpha_m: float = 0.5
    alpha_f: float = 1.0 / 3.0
    gamma: float = 0.75
    beta: float = 0.45
    tol: float = 1e-6
    max_iter: int = 50

    @classmethod
    def newmark(cls, gamma=0.5, beta=0.25, **kw):
        """Plain Newmark scheme (no alpha-averaging)."""
        return cls(alpha_m=0.0, alpha_f=0.0, gamma=gamma, beta=beta, **kw)


@dataclass
class SecondOrderSystem:
    """Minimal operator bundle for the integrators (tests and benchmarks)."""

    M: object
    C: object = None
    K: object = None
    A1: object = None
    A2: object = None
    f: object = None  # callable t -> load vector, or None
    tensor: object = None  # object with apply(w, v), or None

    def load(self, t):
        if self.f is None:
            return np.zeros(self.M.shape[0])
        return self.f(t)


@dataclass
class StateHistory:
    """Forward solution history on the time grid."""

    times: np.ndarray
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray
    iterations: np.ndarray = None

    @property
    def n_steps(self):
        return len(self.times)


def _as_csr(A, n):
    if A is None:
        return sp.csr_matrix((n, n))
    if sp.issparse(A):
        return A.tocsr()
    return sp.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float)))


def effective_mass(M, C, K, dt, params):
    """Iteration matrix (1-alpha_m) M + gamma (1-alpha_f) dt C + beta (1-alpha_f) dt^2 K."""
    am, af = params.alpha_m, params.alpha_f
    return (
        (1.0 - am) * M
        + params.gamma * (1.0 - af) * dt * C
        + params.beta * (1.0 - af) * dt * dt * K
    )


def initial_acceleration(M_factor, load0, C, K, u0, v0):
    """Consistent initial acceleration from M u''(0) = F(0) - C u'(0) - K u(0)."""
    return M_factor.solve(load0 - C @ v0 - K @ u0)


def solve_state(ops, grid, params=None, u0=None, v0=None):
    """Integrate the (possibly nonlinear) second-order system forward in time.

    Parameters
    ----------
    ops : operator bundle
        Needs attributes M, C, K, A1, A2 (sparse or None), load(t), and
        tensor (None for linear problems; else .bind/.apply_bound or .apply).
    grid : TimeGrid
    params : AlphaParams
    u0, v0 : initial pressure / velocity coefficients (default zero)

    Returns StateHistory. Raises SolverError if an inner iteration exceeds
    max_iter without meeting the relative acceleration update tolerance.
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

    Mbar = splu(sp.csc_matrix(effective_mass(M, C, K, dt, params)))
    Mfac = splu(sp.csc_matrix(M))

    times = grid.times
    u = np.zeros((grid.n_steps, n))
    du = np.zeros((grid.n_steps, n))
    ddu = np.zeros((grid.n_steps, n))
    iters = np.zeros(grid.n_steps - 1, dtype=np.int64)
    u[0] = 0.0 if u0 is None else np.asarray(u0, dtype=float)
    du[0] = 0.0 if v0 is None else np.asarray(v0, dtype=float)
    ddu[0] = initial_acceleration(Mfac, ops.load(times[0]), C, K, u[0], du[0])

    for step in range(grid.n_steps - 1):
        un, vn, an = u[step], du[step], ddu[step]
        t_af = (1.0 - af) * times[step + 1] + af * times[step]
        u_pred = un + dt * vn + 0.5 * dt * dt * (1.0 - 2.0 * bet) * an
        v_pred = vn + (1.0 - gam) * dt * an
        rhs_const = (
            ops.load(t_af)
            - K @ ((1.0 - af) * u_pred + af * un)
            - C @ ((1.0 - af) * v_pred + af * vn)
            - am * (M @ an)
        )
        a = an.copy()
        converged = False
        for it in range(1, params.max_iter + 1):
            u_af = (1.0 - af) * (u_pred + bet * dt * dt * a) + af * un
            v_af = (1.0 - af) * (v_pred + gam * dt * a) + af * vn
            a_am = (1.0 - am) * a + am * an
            rhs = rhs_const - A1 @ v_af - A2 @ a_am
            if tensor is not None:
                rhs = rhs + tensor.apply(v_af, v_af) + tensor.apply(u_af, a_am)
            a_new = Mbar.solve(rhs)
            nrm = np.linalg.norm(a_new)
            if nrm < 1e-30 or np.linalg.norm(a_new - a) <= params.tol * nrm:
                a = a_new
                converged = True
                break
            a = a_new
        if not converged:
            raise SolverError(
                "state step %d: fixed point not converged in %d iterations"
                % (step, params.max_iter)
            )
        iters[step] = it
        u[step + 1] = u_pred + bet * dt * dt * a
        du[step + 1] = v_pred + gam * dt * a
        ddu[step + 1] = a

    return StateHistory(times=times, u=u, du=du, ddu=ddu, iterations=iters)
