"""B-spline / NURBS evaluation on open knot vectors, curves, and tensor-product patches.

Everything lives on the parametric interval [0, 1] (per direction). Knot vectors
are open (first and last knot repeated degree+1 times). The convention at the
right end is that the last knot span is closed, so evaluation at 1.0 returns the
last basis function's value 1. Division by empty spans in the Cox-de Boor
recursion never occurs for valid spans; basis functions outside the active span
are identically zero, which realizes the usual 0/0 -> 0 convention.
"""

import numpy as np

__all__ = [
    "KnotVector",
    "find_span",
    "basis_funs",
    "ders_basis_funs",
    "eval_bspline_basis",
    "eval_bspline_deriv",
    "eval_nurbs_basis",
    "Curve",
    "line_curve",
    "TensorPatch",
    "coons_net",
]


def find_span(knots, degree, x):
    """Index of the knot span containing x (closed last span at the right end)."""
    n_basis = len(knots) - degree - 1
    if x >= knots[n_basis]:
        # right end: last non-empty span stays closed
        span = n_basis - 1
        while knots[span] >= knots[span + 1]:
            span -= 1
        return span
    if x <= knots[degree]:
        return degree
    lo, hi = degree, n_basis
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


def basis_funs(knots, degree, span, x):
    """Values of the degree+1 B-spline basis functions active on a span."""
    N = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    N[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            tmp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * tmp
            saved = left[j - r] * tmp
        N[j] = saved
    return N


def ders_basis_funs(knots, degree, span, x):
    """Values and first derivatives of the active basis functions on a span.

    Returns
    -------
    ders : ndarray, shape (2, degree+1)
        Row 0 holds values, row 1 first derivatives, for the functions
        span-degree .. span.
    """
    ndu = np.empty((degree + 1, degree + 1))
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    ndu[0, 0] = 1.0
    for j in range(1, degree + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            tmp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * tmp
            saved = left[j - r] * tmp
        ndu[j, j] = saved

    ders = np.empty((2, degree + 1))
    ders[0] = ndu[:, degree]
    for r in range(degree + 1):
        # first derivative from the degree-1 functions
        d = 0.0
        if r >= 1:
            d += ndu[r - 1, degree - 1] / ndu[degree, r - 1]
        if r <= degree - 1:
            d -= ndu[r, degree - 1] / ndu[degree, r]
        ders[1, r] = d * degree
    return ders


def eval_bspline_basis(knots, degree, x):
    """All B-spline basis function values at parameter x (zeros off-span)."""
    knots = np.asarray(knots, dtype=float)
    n_basis = len(knots) - degree - 1
    span = find_span(knots, degree, x)
    out = np.zeros(n_basis)
    out[span - degree : span + 1] = basis_funs(knots, degree, span, x)
    return out


def eval_bspline_deriv(knots, degree, x):
    """All B-spline basis first derivatives at parameter x."""
    knots = np.asarray(knots, dtype=float)
    n_basis = len(knots) - degree - 1
    span = find_span(knots, degree, x)
    out = np.zeros(n_basis)
    out[span - degree : span + 1] = ders_basis_funs(knots, degree, span, x)[1]
    return out


def eval_nurbs_basis(knots, degree, weights, x):
    """All rational basis values and derivatives at parameter x.

    Returns (values, derivs), each of length n_basis, for the weighted basis
    N_i = w_i B_i / sum_r w_r B_r with quotient-rule derivatives.
    """
    weights = np.asarray(weights, dtype=float)
    B = eval_bspline_basis(knots, degree, x)
    dB = eval_bspline_deriv(knots, degree, x)
    wB = weights * B
    wdB = weights * dB
    W = wB.sum()
    dW = wdB.sum()
    vals = wB / W
    ders = (wdB * W - wB * dW) / W**2
    return vals, ders


class KnotVector:
    """Open knot vector on [0, 1] together with its polynomial degree."""

    def __init__(self, knots, degree):
        self.knots = np.asarray(knots, dtype=float)
        self.degree = int(degree)
        self._validate()

    def _validate(self):
        q = self.degree
        kn = self.knots
        if q < 1:
            raise ValueError("degree must be >= 1")
        if len(kn) < 2 * (q + 1):
            raise ValueError("knot vector too short for degree %d" % q)
        if np.any(np.diff(kn) < 0):
            raise ValueError("knots must be nondecreasing")
        if not (np.all(kn[: q + 1] == kn[0]) and np.all(kn[-(q + 1) :] == kn[-1])):
            raise ValueError("knot vector must be open (end knots repeated degree+1 times)")
        if kn[0] != 0.0 or kn[-1] != 1.0:
            raise ValueError("parametric domain must be [0, 1]")

    @classmethod
    def uniform(cls, degree, n_elements):
        """Open uniform knot vector with n_elements equal spans."""
        if n_elements < 1:
            raise ValueError("need at least one element")
        interior = np.linspace(0.0, 1.0, n_elements + 1)[1:-1]
        knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
        return cls(knots, degree)

    @property
    def n_basis(self):
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self):
        return np.unique(self.knots)

    @property
    def n_elements(self):
        return len(self.breakpoints) - 1

    def spans(self):
        """List of (span_index, x_left, x_right) for the non-empty knot spans."""
        out = []
        for s in range(self.degree, self.n_basis):
            if self.knots[s] < self.knots[s + 1]:
                out.append((s, self.knots[s], self.knots[s + 1]))
        return out

    def greville(self):
        """Greville abscissae (knot averages), one per basis function."""
        q = self.degree
        return np.array([self.knots[i + 1 : i + q + 1].mean() for i in range(self.n_basis)])

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and len(self.knots) == len(other.knots)
            and np.array_equal(self.knots, other.knots)
        )

    def __repr__(self):
        return "KnotVector(degree=%d, n_elements=%d)" % (self.degree, self.n_elements)


class Curve:
    """NURBS curve in the plane: open knot vector, control points, weights."""

    def __init__(self, kv, ctrl, weights=None):
        self.kv = kv
        self.ctrl = np.atleast_2d(np.asarray(ctrl, dtype=float))
        self.weights = (
            np.ones(len(self.ctrl)) if weights is None else np.asarray(weights, dtype=float)
        )
        if len(self.ctrl) != kv.n_basis or len(self.weights) != kv.n_basis:
            raise ValueError("control net size does not match knot vector")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    def point(self, x):
        vals, _ = eval_nurbs_basis(self.kv.knots, self.kv.degree, self.weights, x)
        return vals @ self.ctrl

    def points(self, xs):
        return np.array([self.point(x) for x in np.atleast_1d(xs)])

    def derivative(self, x):
        _, ders = eval_nurbs_basis(self.kv.knots, self.kv.degree, self.weights, x)
        return ders @ self.ctrl

    def insert_knot(self, u):
        """Return a new curve with knot u inserted once (geometry unchanged)."""
        kn, q = self.kv.knots, self.kv.degree
        if not (0.0 < u < 1.0):
            raise ValueError("can only insert interior knots")
        span = find_span(kn, q, u)
        hom = np.column_stack([self.ctrl * self.weights[:, None], self.weights])
        n = len(hom)
        new = np.empty((n + 1, 3))
        new[: span - q + 1] = hom[: span - q + 1]
        new[span + 1 :] = hom[span:]
        for i in range(span - q + 1, span + 1):
            a = (u - kn[i]) / (kn[i + q] - kn[i])
            new[i] = a * hom[i] + (1.0 - a) * hom[i - 1]
        new_kn = np.insert(kn, span + 1, u)
        w = new[:, 2]
        return Curve(KnotVector(new_kn, q), new[:, :2] / w[:, None], w)

    def refined(self, n_elements):
        """Insert knots so the breakpoints include linspace(0, 1, n_elements+1)."""
        cur = self
        for u in np.linspace(0.0, 1.0, n_elements + 1)[1:-1]:
            if np.min(np.abs(cur.kv.breakpoints - u)) > 1e-12:
                cur = cur.insert_knot(u)
        return cur

    def reversed(self):
        """The same geometric curve traversed from parameter 1 to 0."""
        kn = 1.0 - self.kv.knots[::-1]
        return Curve(KnotVector(kn, self.kv.degree), self.ctrl[::-1], self.weights[::-1])


def line_curve(p0, p1, degree, n_elements):
    """Straight segment with a linear-in-parameter map (controls at Greville points)."""
    kv = KnotVector.uniform(degree, n_elements)
    t = kv.greville()[:, None]
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    return Curve(kv, (1.0 - t) * p0 + t * p1)


def coons_net(south, north, west, east, t1, t2):
    """Bilinearly blended Coons interior for a control net (or weight grid).

    Parameters are the four boundary arrays (south/north of length n1, west/east
    of length n2, scalar or vector entries) and the Greville abscissae t1, t2 of
    the two directions. Boundary rows and columns are reproduced exactly when
    the corner entries agree.
    """
    south = np.asarray(south, dtype=float)
    north = np.asarray(north, dtype=float)
    west = np.asarray(west, dtype=float)
    east = np.asarray(east, dtype=float)
    scalar = south.ndim == 1
    if scalar:
        south, north, west, east = (a[:, None] for a in (south, north, west, east))
    n1, n2 = len(south), len(west)
    T1 = np.asarray(t1)[:, None, None]
    T2 = np.asarray(t2)[None, :, None]
    net = (
        (1.0 - T2) * south[:, None, :]
        + T2 * north[:, None, :]
        + (1.0 - T1) * west[None, :, :]
        + T1 * east[None, :, :]
        - (
            (1.0 - T1) * (1.0 - T2) * south[0]
            + T1 * (1.0 - T2) * south[-1]
            + (1.0 - T1) * T2 * north[0]
            + T1 * T2 * north[-1]
        )
    )
    return net[:, :, 0] if scalar else net


class TensorPatch:
    """Tensor-product NURBS patch mapping [0,1]^2 into the plane.

    Control net ``ctrl`` has shape (n1, n2, 2) and weights (n1, n2); the local
    linear dof index runs first along direction 1: loc = i2 * n1 + i1.
    """

    def __init__(self, kv1, kv2, ctrl, weights=None):
        self.kv1 = kv1
        self.kv2 = kv2
        self.ctrl = np.asarray(ctrl, dtype=float)
        n1, n2 = kv1.n_basis, kv2.n_basis
        if self.ctrl.shape != (n1, n2, 2):
            raise ValueError("control net shape %s, expected %s" % (self.ctrl.shape, (n1, n2, 2)))
        self.weights = (
            np.ones((n1, n2)) if weights is None else np.asarray(weights, dtype=float)
        )
        if self.weights.shape != (n1, n2):
            raise ValueError("weight grid shape mismatch")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def shape(self):
        return (self.kv1.n_basis, self.kv2.n_basis)

    @property
    def ndof(self):
        n1, n2 = self.shape
        return n1 * n2

    def local_index(self, i1, i2):
        return i2 * self.shape[0] + i1

    @classmethod
    def from_edges(cls, south, north, west, east):
        """Build a patch from four boundary curves via a Coons control net.

        south/north must share a knot vector, as must west/east; weights are
        Coons-blended the same way as coordinates. Boundary control data are
        copied from the curves verbatim (the blend fills only the interior),
        so boundary traces coincide with the given curves bitwise.
        """
        if south.kv != north.kv or west.kv != east.kv:
            raise ValueError("opposite edges must share knot vectors")
        for corner, a, b in [
            ("south-west", south.ctrl[0], west.ctrl[0]),
            ("south-east", south.ctrl[-1], east.ctrl[0]),
            ("north-west", north.ctrl[0], west.ctrl[-1]),
            ("north-east", north.ctrl[-1], east.ctrl[-1]),
        ]:
            if not np.allclose(a, b, atol=1e-12):
                raise ValueError("edge curves disagree at %s corner" % corner)
        t1 = south.kv.greville()
        t2 = west.kv.greville()
        ctrl = coons_net(south.ctrl, north.ctrl, west.ctrl, east.ctrl, t1, t2)
        wts = coons_net(south.weights, north.weights, west.weights, east.weights, t1, t2)
        for arr, s, n, w, e in (
            (ctrl, south.ctrl, north.ctrl, west.ctrl, east.ctrl),
            (wts, south.weights, north.weights, west.weights, east.weights),
        ):
            arr[:, 0] = s
            arr[:, -1] = n
            arr[0, :] = w
            arr[-1, :] = e
        return cls(south.kv, west.kv, ctrl, wts)

    # -- pointwise evaluation ------------------------------------------------

    def basis_at(self, x1, x2):
        """Active rational basis at a parametric point.

        Returns (loc, vals, grads): local dof indices (length (q1+1)(q2+1)),
        basis values, and parametric gradients (len, 2).
        """
        n1 = self.shape[0]
        q1, q2 = self.kv1.degree, self.kv2.degree
        s1 = find_span(self.kv1.knots, q1, x1)
        s2 = find_span(self.kv2.knots, q2, x2)
        d1 = ders_basis_funs(self.kv1.knots, q1, s1, x1)
        d2 = ders_basis_funs(self.kv2.knots, q2, s2, x2)
        i1 = np.arange(s1 - q1, s1 + 1)
        i2 = np.arange(s2 - q2, s2 + 1)
        w = self.weights[np.ix_(i1, i2)]
        B = np.outer(d1[0], d2[0])
        B1 = np.outer(d1[1], d2[0])
        B2 = np.outer(d1[0], d2[1])
        wB, wB1, wB2 = w * B, w * B1, w * B2
        W, W1, W2 = wB.sum(), wB1.sum(), wB2.sum()
        vals = wB / W
        g1 = (wB1 * W - wB * W1) / W**2
        g2 = (wB2 * W - wB * W2) / W**2
        loc = (i2[None, :] * n1 + i1[:, None]).ravel()
        grads = np.column_stack([g1.ravel(), g2.ravel()])
        return loc, vals.ravel(), grads

    def geometry(self, x1, x2):
        """Physical image of a parametric point."""
        loc, vals, _ = self.basis_at(x1, x2)
        pts = self.ctrl.reshape(-1, 2, order="F")[loc]
        return vals @ pts

    def jacobian(self, x1, x2):
        """Geometry map Jacobian DG (2x2) at a parametric point."""
        loc, _, grads = self.basis_at(x1, x2)
        pts = self.ctrl.reshape(-1, 2, order="F")[loc]
        return pts.T @ grads

    @property
    def ctrl_flat(self):
        """Control points as (ndof, 2) in local linear order."""
        return self.ctrl.reshape(-1, 2, order="F")

    @property
    def weights_flat(self):
        return self.weights.reshape(-1, order="F")

    # -- edges ---------------------------------------------------------------

    def edge_indices(self, edge):
        """Local dof indices along an edge, ordered by increasing parameter."""
        n1, n2 = self.shape
        if edge == "south":
            return np.arange(n1)
        if edge == "north":
            return (n2 - 1) * n1 + np.arange(n1)
        if edge == "west":
            return np.arange(n2) * n1
        if edge == "east":
            return np.arange(n2) * n1 + (n1 - 1)
        raise ValueError("unknown edge %r" % edge)

    def edge_curve(self, edge):
        idx = self.edge_indices(edge)
        kv = self.kv1 if edge in ("south", "north") else self.kv2
        return Curve(kv, self.ctrl_flat[idx], self.weights_flat[idx])

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        n1, n2 = self.shape
        grid = [
            [
                [self.ctrl[i1, i2, 0], self.ctrl[i1, i2, 1], self.weights[i1, i2]]
                for i2 in range(n2)
            ]
            for i1 in range(n1)
        ]
        return {
            "degree": [self.kv1.degree, self.kv2.degree],
            "knots": [self.kv1.knots.tolist(), self.kv2.knots.tolist()],
            "net": grid,
        }

    @classmethod
    def from_dict(cls, d):
        kv1 = KnotVector(d["knots"][0], d["degree"][0])
        kv2 = KnotVector(d["knots"][1], d["degree"][1])
        net = np.asarray(d["net"], dtype=float)
        return cls(kv1, kv2, net[:, :, :2], net[:, :, 2])
