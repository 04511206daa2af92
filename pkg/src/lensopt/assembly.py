"""Quadrature caches and Galerkin assembly for the Westervelt lens problem.

Element integrals use Gauss-Legendre quadrature with degree+1 points per
direction per knot span. Per patch, basis values, physical gradients, mapped
quadrature weights, and physical coordinates are cached in batched arrays so
matrices assemble with einsum into COO triplets, and the nonlinear term
applies matrix-free.

Matrices (all symmetric, CSR, on glued global dofs):
    M   mass                 integrand N_i N_j |det DG|
    C   damping              b(x) grad N_i . grad N_j
    K   stiffness            c(x)^2 grad N_i . grad N_j
    MD  tracking mass        N_i N_j restricted to the tracking box D
    A1  absorbing boundary   c_f N_i N_j on the absorbing edges
    A2  absorbing boundary   (b_f / c_f) N_i N_j on the absorbing edges
The nonlinearity enters through T(w) with entries 2 k(x) N_i N_j (sum_l N_l w_l),
applied matrix-free. The excitation load is F(t) = (c_f^2 g(t) + b_f g'(t)) f
with f_i = integral of N_i over the source boundary.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .domain import GeometryError
from .nurbs import ders_basis_funs

__all__ = [
    "Material",
    "Materials",
    "Excitation",
    "build_volume_caches",
    "build_edge_cache",
    "assemble_mass",
    "assemble_damping",
    "assemble_stiffness",
    "assemble_tracking_mass",
    "assemble_boundary",
    "load_at",
    "TensorOperator",
    "apply_tensor",
    "Operators",
    "build_operators",
]


@dataclass(frozen=True)
class Material:
    """Acoustic medium: sound speed, diffusivity, density, nonlinearity ratio."""

    c: float
    b: float
    rho: float
    b_over_a: float

    @property
    def k(self):
        """Westervelt nonlinearity coefficient (1 + (B/A)/2) / (rho c^2)."""
        return (1.0 + 0.5 * self.b_over_a) / (self.rho * self.c**2)


@dataclass(frozen=True)
class Materials:
    fluid: Material = Material(c=1500.0, b=6e-9, rho=1000.0, b_over_a=5.0)
    lens: Material = Material(c=1100.0, b=4e-9, rho=1250.0, b_over_a=4.0)

    def of(self, region):
        if region == "fluid":
            return self.fluid
        if region == "lens":
            return self.lens
        raise KeyError("unknown region %r" % region)


@dataclass(frozen=True)
class Excitation:
    """Gaussian-modulated sinusoidal source pressure g(t)."""

    amplitude: float = 4e9
    frequency: float = 7e4

    @property
    def omega(self):
        return 2.0 * np.pi * self.frequency

    def g(self, t):
        w = self.omega
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.exp(-((w * t / 8.0) ** 2)) * np.sin(w * t)

    def dg(self, t):
        w = self.omega
        t = np.asarray(t, dtype=float)
        env = np.exp(-((w * t / 8.0) ** 2))
        return self.amplitude * env * (w * np.cos(w * t) - (w * w * t / 32.0) * np.sin(w * t))


# ---------------------------------------------------------------------------
# quadrature caches


@dataclass
class VolumeCache:
    """Batched per-element quadrature data for one patch."""

    patch_index: int
    region: str
    gdofs: np.ndarray  # (n_el, n_loc) global dof ids
    ldofs: np.ndarray  # (n_el, n_loc) patch-local dof ids
    N: np.ndarray  # (n_el, n_qp, n_loc) basis values
    dNdx: np.ndarray  # (n_el, n_qp, n_loc, 2) physical gradients
    detJxW: np.ndarray  # (n_el, n_qp) |det DG| * quadrature weight
    phys: np.ndarray  # (n_el, n_qp, 2) physical coordinates
    params: np.ndarray  # (n_el, n_qp, 2) parametric coordinates


@dataclass
class EdgeCache:
    """Quadrature data along one tagged patch edge."""

    patch_index: int
    edge: str
    gdofs: np.ndarray  # (n_el, q+1) global dofs of the edge row
    N: np.ndarray  # (n_el, n_qp, q+1) edge trace basis values
    dsxW: np.ndarray  # (n_el, n_qp) surface measure * weight
    phys: np.ndarray  # (n_el, n_qp, 2)
    normal: np.ndarray  # (n_el, n_qp, 2) unit outward normal
    params: np.ndarray  # (n_el, n_qp) edge parameter values


def _dir_tables(kv, nq):
    """Per-span values/derivatives of the active univariate functions at Gauss points."""
    xg, wg = np.polynomial.legendre.leggauss(nq)
    spans = kv.spans()
    n_el = len(spans)
    q = kv.degree
    vals = np.empty((n_el, nq, q + 1))
    ders = np.empty((n_el, nq, q + 1))
    first = np.empty(n_el, dtype=np.int64)
    pts = np.empty((n_el, nq))
    wts = np.empty((n_el, nq))
    for e, (s, a, b) in enumerate(spans):
        xs = 0.5 * (a + b) + 0.5 * (b - a) * xg
        for g, x in enumerate(xs):
            d = ders_basis_funs(kv.knots, q, s, x)
            vals[e, g] = d[0]
            ders[e, g] = d[1]
        first[e] = s - q
        pts[e] = xs
        wts[e] = 0.5 * (b - a) * wg
    return vals, ders, first, pts, wts


def build_volume_caches(domain, n_gauss=None):
    """Volume quadrature caches for every patch (degree+1 Gauss points/direction)."""
    caches = []
    for p, patch in enumerate(domain.patches):
        q1, q2 = patch.kv1.degree, patch.kv2.degree
        nq1 = (q1 + 1) if n_gauss is None else n_gauss
        nq2 = (q2 + 1) if n_gauss is None else n_gauss
        v1, d1, f1, x1, w1 = _dir_tables(patch.kv1, nq1)
        v2, d2, f2, x2, w2 = _dir_tables(patch.kv2, nq2)
        n1 = patch.shape[0]
        m1, m2 = q1 + 1, q2 + 1
        E1, E2 = len(f1), len(f2)
        # element index = e2*E1 + e1, qp index = b*nq1 + a, local = j*m1 + i
        B = np.einsum("eai,fbj->febaji", v1, v2).reshape(E1 * E2, nq1 * nq2, m1 * m2)
        D1 = np.einsum("eai,fbj->febaji", d1, v2).reshape(B.shape)
        D2 = np.einsum("eai,fbj->febaji", v1, d2).reshape(B.shape)
        I1 = f1[:, None] + np.arange(m1)
        I2 = f2[:, None] + np.arange(m2)
        loc = (I2[:, None, :, None] * n1 + I1[None, :, None, :]).reshape(E1 * E2, m1 * m2)
        wact = patch.weights_flat[loc][:, None, :]
        wB, wD1, wD2 = wact * B, wact * D1, wact * D2
        W = wB.sum(-1)
        R = wB / W[..., None]
        G1 = (wD1 * W[..., None] - wB * wD1.sum(-1)[..., None]) / (W**2)[..., None]
        G2 = (wD2 * W[..., None] - wB * wD2.sum(-1)[..., None]) / (W**2)[..., None]
        gradpar = np.stack([G1, G2], axis=-1)
        elpts = patch.ctrl_flat[loc]
        DG = np.einsum("ela,eqlb->eqab", elpts, gradpar)
        det = DG[..., 0, 0] * DG[..., 1, 1] - DG[..., 0, 1] * DG[..., 1, 0]
        if det.min() <= 0.0:
            raise GeometryError(
                "patch %d: non-positive Jacobian at quadrature point (min %.3e)"
                % (p, det.min())
            )
        invT = np.empty_like(DG)
        invT[..., 0, 0] = DG[..., 1, 1] / det
        invT[..., 0, 1] = -DG[..., 1, 0] / det
        invT[..., 1, 0] = -DG[..., 0, 1] / det
        invT[..., 1, 1] = DG[..., 0, 0] / det
        dNdx = np.einsum("eqab,eqlb->eqla", invT, gradpar)
        phys = np.einsum("eql,ela->eqa", R, elpts)
        qw = np.einsum("fb,ea->feba", w2, w1).reshape(E1 * E2, nq1 * nq2)
        p1 = np.broadcast_to(x1[None, :, None, :], (E2, E1, nq2, nq1))
        p2 = np.broadcast_to(x2[:, None, :, None], (E2, E1, nq2, nq1))
        qpar = np.stack([p1, p2], axis=-1).reshape(E1 * E2, nq1 * nq2, 2)
        caches.append(
            VolumeCache(
                patch_index=p,
                region=domain.regions[p],
                gdofs=domain.dof_map[p][loc],
                ldofs=loc,
                N=R,
                dNdx=dNdx,
                detJxW=det * qw,
                phys=phys,
                params=qpar,
            )
        )
    return caches


_EDGE_PARAM_NORMAL = {
    "south": (0.0, -1.0),
    "north": (0.0, 1.0),
    "west": (-1.0, 0.0),
    "east": (1.0, 0.0),
}


def build_edge_cache(domain, patch_index, edge, n_gauss=None):
    """Quadrature cache along one patch edge (trace basis, measure, outward normal).

    The edge trace of the patch NURBS basis equals the univariate NURBS basis of
    the edge curve, and the surface measure is the norm of the edge tangent
    (equivalently |det DG| |DG^-T n_hat|).
    """
    patch = domain.patches[patch_index]
    curve = patch.edge_curve(edge)
    kv = curve.kv
    q = kv.degree
    nq = (q + 1) if n_gauss is None else n_gauss
    vals, ders, first, pts, wts = _dir_tables(kv, nq)
    n_el = len(first)
    idx = first[:, None] + np.arange(q + 1)
    wact = curve.weights[idx][:, None, :]
    wB = wact * vals
    wD = wact * ders
    W = wB.sum(-1)
    R = wB / W[..., None]
    dR = (wD * W[..., None] - wB * wD.sum(-1)[..., None]) / (W**2)[..., None]
    cpts = curve.ctrl[idx]
    tang = np.einsum("eqi,eia->eqa", dR, cpts)
    ds = np.hypot(tang[..., 0], tang[..., 1])
    if ds.min() <= 0.0:
        raise GeometryError("degenerate edge %d.%s has zero measure" % (patch_index, edge))
    phys = np.einsum("eqi,eia->eqa", R, cpts)
    nhat = np.array(_EDGE_PARAM_NORMAL[edge])
    normal = np.empty_like(phys)
    for e in range(n_el):
        for g in range(nq):
            x1, x2 = _edge_param_point(edge, pts[e, g])
            J = patch.jacobian(x1, x2)
            v = np.linalg.solve(J.T, nhat)
            normal[e, g] = v / np.hypot(v[0], v[1])
    edge_local = patch.edge_indices(edge)
    gdofs = domain.dof_map[patch_index][edge_local[idx]]
    return EdgeCache(
        patch_index=patch_index,
        edge=edge,
        gdofs=gdofs,
        N=R,
        dsxW=ds * wts,
        phys=phys,
        normal=normal,
        params=pts,
    )


def _edge_param_point(edge, t):
    if edge == "south":
        return t, 0.0
    if edge == "north":
        return t, 1.0
    if edge == "west":
        return 0.0, t
    if edge == "east":
        return 1.0, t
    raise ValueError(edge)


# ---------------------------------------------------------------------------
# matrix assembly


def _accumulate(triplets, gdofs, elmats):
    n_el, n_loc = gdofs.shape
    I = np.repeat(gdofs, n_loc, axis=1).ravel()
    J = np.tile(gdofs, (1, n_loc)).ravel()
    triplets[0].append(I)
    triplets[1].append(J)
    triplets[2].append(elmats.ravel())


def _build_csr(triplets, n):
    I = np.concatenate(triplets[0])
    J = np.concatenate(triplets[1])
    V = np.concatenate(triplets[2])
    return sp.coo_matrix((V, (I, J)), shape=(n, n)).tocsr()


def assemble_mass(domain, caches, coef=None):
    """Global mass matrix; coef optionally maps region name -> scalar factor."""
    trip = ([], [], [])
    for c in caches:
        scale = 1.0 if coef is None else coef(c.region)
        elm = np.einsum("eqi,eqj,eq->eij", c.N, c.N, c.detJxW * scale)
        _accumulate(trip, c.gdofs, elm)
    return _build_csr(trip, domain.n_global)


def _assemble_grad_grad(domain, caches, coef_of_region):
    trip = ([], [], [])
    for c in caches:
        elm = np.einsum(
            "eqid,eqjd,eq->eij", c.dNdx, c.dNdx, c.detJxW * coef_of_region(c.region)
        )
        _accumulate(trip, c.gdofs, elm)
    return _build_csr(trip, domain.n_global)


def assemble_stiffness(domain, caches, materials):
    """Stiffness with the squared sound speed of each region."""
    return _assemble_grad_grad(domain, caches, lambda r: materials.of(r).c ** 2)


def assemble_damping(domain, caches, materials):
    """Strong-damping matrix with the diffusivity of each region."""
    return _assemble_grad_grad(domain, caches, lambda r: materials.of(r).b)


def assemble_tracking_mass(domain, caches, box):
    """Mass matrix restricted to the tracking box D by quadrature-point sampling.

    box = (x0, x1, y0, y1); a quadrature point contributes iff it lies inside.
    """
    x0, x1, y0, y1 = box
    trip = ([], [], [])
    for c in caches:
        chi = (
            (c.phys[..., 0] >= x0)
            & (c.phys[..., 0] <= x1)
            & (c.phys[..., 1] >= y0)
            & (c.phys[..., 1] <= y1)
        ).astype(float)
        if not chi.any():
            continue
        elm = np.einsum("eqi,eqj,eq->eij", c.N, c.N, c.detJxW * chi)
        _accumulate(trip, c.gdofs, elm)
    if not trip[0]:
        return sp.csr_matrix((domain.n_global, domain.n_global))
    return _build_csr(trip, domain.n_global)


def assemble_boundary(domain, materials, n_gauss=None):
    """Absorbing-boundary matrices and the unit excitation load vector.

    Returns (A1, A2, f_unit): A1 has integrand c_f N_i N_j over the absorbing
    edges, A2 has (b_f/c_f) N_i N_j there, and f_unit_i integrates N_i over the
    excitation edges. The time-dependent load is load_at(t, ...) * f_unit.
    """
    fl = materials.fluid
    trip1 = ([], [], [])
    have_abs = False
    for p, edge in domain.tagged_edges("absorbing"):
        if domain.regions[p] != "fluid":
            raise GeometryError("absorbing edge on non-fluid patch %d" % p)
        c = build_edge_cache(domain, p, edge, n_gauss)
        elm = np.einsum("eqi,eqj,eq->eij", c.N, c.N, c.dsxW)
        _accumulate(trip1, c.gdofs, elm)
        have_abs = True
    if have_abs:
        mass_b = _build_csr(trip1, domain.n_global)
    else:
        mass_b = sp.csr_matrix((domain.n_global, domain.n_global))
    a1 = fl.c * mass_b
    a2 = (fl.b / fl.c) * mass_b

    f_unit = np.zeros(domain.n_global)
    for p, edge in domain.tagged_edges("excitation"):
        c = build_edge_cache(domain, p, edge, n_gauss)
        contrib = np.einsum("eqi,eq->ei", c.N, c.dsxW)
        np.add.at(f_unit, c.gdofs.ravel(), contrib.ravel())
    return a1, a2, f_unit


def load_at(t, excitation, materials, f_unit):
    """Excitation load vector (c_f^2 g(t) + b_f g'(t)) * f_unit."""
    fl = materials.fluid
    return (fl.c**2 * excitation.g(t) + fl.b * excitation.dg(t)) * f_unit


# ---------------------------------------------------------------------------
# nonlinear tensor


class TensorOperator:
    """Matrix-free application of the Westervelt nonlinearity.

    T(w) is the symmetric matrix with entries
        T(w)_ij = integral 2 k(x) N_i N_j (sum_l N_l w_l),
    never formed: apply(w, v) evaluates T(w) v by two field evaluations and a
    weighted scatter per element batch.
    """

    def __init__(self, domain, caches, materials):
        self.n_global = domain.n_global
        self._parts = [
            (c.gdofs, c.N, c.detJxW * (2.0 * materials.of(c.region).k)) for c in caches
        ]

    def bind(self, w):
        """Precompute the field values of w at quadrature points (reusable)."""
        return [np.einsum("eql,el->eq", N, w[gd]) for gd, N, _ in self._parts]

    def apply_bound(self, bound, v):
        out = np.zeros(self.n_global)
        for (gd, N, kw), wq in zip(self._parts, bound):
            vq = np.einsum("eql,el->eq", N, v[gd])
            contrib = np.einsum("eql,eq->el", N, kw * wq * vq)
            np.add.at(out, gd.ravel(), contrib.ravel())
        return out

    def apply(self, w, v):
        """T(w) v for coefficient vectors w, v."""
        return self.apply_bound(self.bind(w), v)


def apply_tensor(tensor_op, w, v):
    """Functional alias for TensorOperator.apply."""
    return tensor_op.apply(w, v)


# ---------------------------------------------------------------------------
# bundled operators


@dataclass
class Operators:
    """Everything the time integrators need, on glued global dofs."""

    domain: object
    materials: Materials
    excitation: Excitation
    caches: list
    M: sp.csr_matrix
    C: sp.csr_matrix
    K: sp.csr_matrix
    A1: sp.csr_matrix
    A2: sp.csr_matrix
    f_unit: np.ndarray
    tensor: TensorOperator = None

    @property
    def n(self):
        return self.M.shape[0]

    def load(self, t):
        return load_at(t, self.excitation, self.materials, self.f_unit)


def build_operators(domain, materials=None, excitation=None, nonlinear=True):
    materials = materials or Materials()
    excitation = excitation or Excitation()
    caches = build_volume_caches(domain)
    a1, a2, f_unit = assemble_boundary(domain, materials)
    return Operators(
        domain=domain,
        materials=materials,
        excitation=excitation,
        caches=caches,
        M=assemble_mass(domain, caches),
        C=assemble_damping(domain, caches, materials),
        K=assemble_stiffness(domain, caches, materials),
        A1=a1,
        A2=a2,
        f_unit=f_unit,
        tensor=TensorOperator(domain, caches, materials) if nonlinear else None,
    )
