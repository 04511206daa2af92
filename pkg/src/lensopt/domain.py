"""Multipatch domain construction for the lens/fluid geometry and channel benchmarks.

The production domain is the right half of a symmetric focusing setup: a
meniscus-type lens (region with its own material) embedded in a fluid box
[0, B] x [0, L], split into seven conforming tensor-product patches. The
vertical line x = 0 is the symmetry axis, the bottom edge carries the
excitation, and the right/top edges are absorbing. The lens occupies
[0, W] in x, bounded below by a circular arc from (0, R) to the tip (W, K)
and above by an arc (or straight segment) from (0, R+P) to the same tip, so
its thickness collapses to zero at the tip: the lens patch's east edge is a
single physical point whose dofs are all identified.

Patches (0-based index, region, extent):
    0 fluid  [0,W] x [0 .. lower arc]       4 fluid  [W,B] x [K,S]
    1 fluid  [W,B] x [0,K]                  5 fluid  [0,W] x [S,L]
    2 lens   between the arcs               6 fluid  [W,B] x [S,L]
    3 fluid  [0,W] x [upper arc .. S]
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .nurbs import Curve, KnotVector, TensorPatch, line_curve

__all__ = [
    "GeometryError",
    "Refinement",
    "DomainParams",
    "Domain",
    "DesignSet",
    "arc_curve",
    "build_lens_domain",
    "build_channel_domain",
    "glue",
    "design_dof_set",
    "locate_point",
]


class GeometryError(ValueError):
    """Raised for infeasible geometry parameters or broken patch conformity."""


@dataclass
class Refinement:
    """Element counts for the six independent refinement groups of the 7-patch mesh."""

    nx_inner: int = 8
    nx_outer: int = 4
    ny_bottom: int = 8
    ny_lens: int = 2
    ny_mid: int = 6
    ny_top: int = 6

    def validate(self):
        for name, v in self.__dict__.items():
            if not isinstance(v, int) or v < 1:
                raise GeometryError("refinement %s must be a positive integer" % name)

    def doubled(self):
        return Refinement(**{k: 2 * v for k, v in self.__dict__.items()})


@dataclass
class DomainParams:
    """Geometry of the half-domain with the embedded lens (lengths in meters)."""

    L: float = 0.12  # total height
    B: float = 0.05  # total width
    K: float = 0.06  # height of the lens tip corner at x = W
    W: float = 0.04  # lens width (tip abscissa)
    S: float = 0.09  # horizontal split between mid and top fluid bands
    R: float = 0.04  # lens lower boundary height at the symmetry axis
    P: float = 0.02  # lens thickness at the symmetry axis
    degree: int = 1
    refinement: Refinement = field(default_factory=Refinement)

    def validate(self):
        if not (0.0 < self.R < self.K < self.S < self.L):
            raise GeometryError("need 0 < R < K < S < L")
        if not (0.0 < self.W < self.B):
            raise GeometryError("need 0 < W < B")
        if self.P <= 0.0:
            raise GeometryError("lens thickness P must be positive")
        if self.R + self.P > self.K + 1e-14:
            raise GeometryError("lens upper boundary at the axis must not exceed the tip height K")
        if self.degree < 1:
            raise GeometryError("degree must be >= 1")
        for a in (self.R, self.R + self.P):
            if abs(self.K - a) >= self.W and abs(self.K - a) > 1e-14:
                raise GeometryError(
                    "degenerate arc: rise |K - %.6g| must be smaller than the width W" % a
                )
        self.refinement.validate()


def _bezier_elevated(hom, target_degree):
    """Degree-elevate a single-element Bezier curve given in homogeneous coords."""
    cur = np.asarray(hom, dtype=float)
    p = len(cur) - 1
    while p < target_degree:
        new = np.empty((p + 2, cur.shape[1]))
        new[0] = cur[0]
        new[-1] = cur[-1]
        for i in range(1, p + 1):
            a = i / (p + 1)
            new[i] = a * cur[i - 1] + (1.0 - a) * cur[i]
        cur = new
        p += 1
    return cur


def arc_curve(a, width, tip_height, degree, n_elements):
    """Lens boundary curve from (0, a) to the tip (width, tip_height).

    The curve is the x-monotone circular arc with a horizontal tangent at the
    axis (center on the x = 0 line); for a == tip_height it degenerates to a
    straight segment. Degree 1 samples the arc at the control abscissae
    (chord polygon); degree >= 2 represents the circle exactly as a rational
    quadratic (degree-elevated as needed) and refines by knot insertion.
    """
    K = tip_height
    if abs(a - K) <= 1e-14:
        return line_curve((0.0, K), (width, K), degree, n_elements)
    if abs(K - a) >= width:
        raise GeometryError("degenerate arc: |K - a| must be smaller than the width")
    y_c = (a * a - width * width - K * K) / (2.0 * (a - K))
    r = abs(y_c - a)
    if degree == 1:
        kv = KnotVector.uniform(1, n_elements)
        x = kv.greville() * width
        branch = -1.0 if y_c > a else 1.0
        y = y_c + branch * np.sqrt(np.maximum(r * r - x * x, 0.0))
        y[0], y[-1] = a, K  # exact endpoints
        return Curve(kv, np.column_stack([x, y]))
    # exact conic: control point at the tangent intersection, standard conic weight
    p0 = np.array([0.0, a])
    p2 = np.array([width, K])
    x1 = width + (K - a) * (K - y_c) / width
    p1 = np.array([x1, a])
    u0 = (p0 - [0.0, y_c]) / r
    u2 = (p2 - [0.0, y_c]) / r
    w1 = np.sqrt((1.0 + u0 @ u2) / 2.0)
    hom = _bezier_elevated(
        [[*p0, 1.0], [p1[0] * w1, p1[1] * w1, w1], [*p2, 1.0]], degree
    )
    w = hom[:, 2]
    kv = KnotVector(
        np.concatenate([np.zeros(degree + 1), np.ones(degree + 1)]), degree
    )
    return Curve(kv, hom[:, :2] / w[:, None], w).refined(n_elements)


def _collapsed_curve(point, degree, n_elements):
    kv = KnotVector.uniform(degree, n_elements)
    ctrl = np.tile(np.asarray(point, dtype=float), (kv.n_basis, 1))
    return Curve(kv, ctrl)


# ---------------------------------------------------------------------------
# gluing


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        p = self.parent.setdefault(a, a)
        while p != self.parent[p]:
            self.parent[p] = self.parent[self.parent[p]]
            p = self.parent[p]
        root = p
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller (earlier) key as root for determinism
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def glue(patches, interfaces, collapsed_edges=(), tol=1e-12):
    """Identify coincident interface dofs into a global numbering.

    Parameters
    ----------
    patches : list of TensorPatch
    interfaces : list of (patch_a, edge_a, patch_b, edge_b)
        Conforming shared edges; paired control points (and weights) must
        coincide within tol, in matching or exactly reversed orientation.
    collapsed_edges : list of (patch, edge)
        Edges collapsed to a single physical point; all their dofs are merged.

    Returns
    -------
    dof_map : list of int arrays (local dof -> global dof)
    n_global : int

    Global ids are assigned first-seen in (patch, local index) order, so a
    single patch gets the identity map.
    """
    uf = _UnionFind()
    for pa, ea, pb, eb in interfaces:
        la = patches[pa].edge_indices(ea)
        lb = patches[pb].edge_indices(eb)
        if len(la) != len(lb):
            raise GeometryError(
                "interface %d.%s | %d.%s: dof counts differ (%d vs %d)"
                % (pa, ea, pb, eb, len(la), len(lb))
            )
        ca, wa = patches[pa].ctrl_flat[la], patches[pa].weights_flat[la]
        cb, wb = patches[pb].ctrl_flat[lb], patches[pb].weights_flat[lb]
        aligned = np.abs(ca - cb).max() <= tol and np.abs(wa - wb).max() <= tol
        if not aligned:
            if np.abs(ca - cb[::-1]).max() <= tol and np.abs(wa - wb[::-1]).max() <= tol:
                lb = lb[::-1]
            else:
                bad = np.abs(ca - cb).max(axis=1) > tol
                raise GeometryError(
                    "interface %d.%s | %d.%s: control points differ at rows %s"
                    % (pa, ea, pb, eb, np.nonzero(bad)[0].tolist())
                )
        for a, b in zip(la, lb):
            uf.union((pa, int(a)), (pb, int(b)))
    for p, edge in collapsed_edges:
        idx = patches[p].edge_indices(edge)
        for a in idx[1:]:
            uf.union((p, int(idx[0])), (p, int(a)))

    dof_map = []
    table = {}
    for p, patch in enumerate(patches):
        local = np.empty(patch.ndof, dtype=np.int64)
        for loc in range(patch.ndof):
            root = uf.find((p, loc))
            if root not in table:
                table[root] = len(table)
            local[loc] = table[root]
        dof_map.append(local)
    return dof_map, len(table)


# ---------------------------------------------------------------------------
# domain container


@dataclass
class DesignSet:
    """Design dofs of the two lens boundary curves.

    ``ids`` lists the unique global dofs (lower row first, then the upper row
    without duplicates); ``movable`` marks those updated by the optimizer
    (the shared tip dof is always pinned). ``rows`` maps 'lower'/'upper' to
    the per-curve global dof arrays ordered by increasing x.
    """

    ids: np.ndarray
    movable: np.ndarray
    rows: dict
    abscissae: dict  # row name -> control x positions


class Domain:
    """A glued multipatch domain with region and boundary-condition tags."""

    def __init__(
        self,
        patches,
        regions,
        boundary_tags,
        interfaces,
        dof_map,
        n_global,
        lens_interfaces=(),
        collapsed_edges=(),
        params=None,
    ):
        self.patches = patches
        self.regions = list(regions)
        self.boundary_tags = boundary_tags  # list of dicts edge -> tag
        self.interfaces = list(interfaces)
        self.dof_map = dof_map
        self.n_global = n_global
        self.lens_interfaces = list(lens_interfaces)
        self.collapsed_edges = list(collapsed_edges)
        self.params = params

    @property
    def n_patches(self):
        return len(self.patches)

    def tagged_edges(self, tag):
        """All (patch index, edge name) pairs carrying a boundary tag."""
        out = []
        for p, tags in enumerate(self.boundary_tags):
            for edge, t in tags.items():
                if t == tag:
                    out.append((p, edge))
        return out

    def clone(self):
        """Independent copy sharing immutable metadata (dof map, tags)."""
        patches = [
            TensorPatch(p.kv1, p.kv2, p.ctrl.copy(), p.weights.copy())
            for p in self.patches
        ]
        return Domain(
            patches=patches,
            regions=list(self.regions),
            boundary_tags=self.boundary_tags,
            interfaces=self.interfaces,
            dof_map=self.dof_map,
            n_global=self.n_global,
            lens_interfaces=self.lens_interfaces,
            collapsed_edges=self.collapsed_edges,
            params=self.params,
        )

    def global_ctrl(self):
        """Control point coordinates per global dof (coincident by construction)."""
        coords = np.zeros((self.n_global, 2))
        seen = np.zeros(self.n_global, dtype=bool)
        for patch, dmap in zip(self.patches, self.dof_map):
            pts = patch.ctrl_flat
            new = ~seen[dmap]
            coords[dmap[new]] = pts[new]
            seen[dmap[new]] = True
        return coords

    def set_global_ctrl(self, coords):
        """Scatter per-global-dof coordinates back into every patch net."""
        for patch, dmap in zip(self.patches, self.dof_map):
            n1, n2 = patch.shape
            patch.ctrl[:] = coords[dmap].reshape(n2, n1, 2).transpose(1, 0, 2)

    def check_conforming(self, tol=1e-12, n_sample=7):
        """Verify glued edges trace identical physical curves (watertightness)."""
        ts = np.linspace(0.0, 1.0, n_sample)
        for pa, ea, pb, eb in self.interfaces:
            ca = self.patches[pa].edge_curve(ea)
            cb = self.patches[pb].edge_curve(eb)
            for t in ts:
                if not np.allclose(ca.point(t), cb.point(t), atol=tol):
                    raise GeometryError(
                        "interface %d.%s | %d.%s not watertight at t=%.3f" % (pa, ea, pb, eb, t)
                    )

    def min_jacobian(self, n_sample=4):
        """Smallest geometry-map Jacobian determinant over a sample grid.

        Samples interior points of every element (Gauss-like offsets), which is
        where quadrature evaluates the map; collapsed edges themselves are
        excluded by construction.
        """
        worst = np.inf
        offs = np.array([0.2113248654051871, 0.7886751345948129])
        for patch in self.patches:
            b1 = patch.kv1.breakpoints
            b2 = patch.kv2.breakpoints
            x1s = (b1[:-1, None] + np.diff(b1)[:, None] * offs).ravel()
            x2s = (b2[:-1, None] + np.diff(b2)[:, None] * offs).ravel()
            for x1 in x1s:
                for x2 in x2s:
                    det = np.linalg.det(patch.jacobian(x1, x2))
                    worst = min(worst, det)
        return worst


# ---------------------------------------------------------------------------
# builders


def build_lens_domain(params):
    """Construct the glued 7-patch lens/fluid domain from geometry parameters."""
    params.validate()
    q = params.degree
    W, B, K, S, L, R, P = (
        params.W,
        params.B,
        params.K,
        params.S,
        params.L,
        params.R,
        params.P,
    )
    rf = params.refinement

    bottom_in = line_curve((0, 0), (W, 0), q, rf.nx_inner)
    bottom_out = line_curve((W, 0), (B, 0), q, rf.nx_outer)
    lower_arc = arc_curve(R, W, K, q, rf.nx_inner)
    upper_arc = arc_curve(R + P, W, K, q, rf.nx_inner)
    mid_in = line_curve((0, S), (W, S), q, rf.nx_inner)
    mid_out = line_curve((W, S), (B, S), q, rf.nx_outer)
    top_in = line_curve((0, L), (W, L), q, rf.nx_inner)
    top_out = line_curve((W, L), (B, L), q, rf.nx_outer)
    k_out = line_curve((W, K), (B, K), q, rf.nx_outer)

    ax1 = line_curve((0, 0), (0, R), q, rf.ny_bottom)
    ax3 = line_curve((0, R), (0, R + P), q, rf.ny_lens)
    ax4 = line_curve((0, R + P), (0, S), q, rf.ny_mid)
    ax6 = line_curve((0, S), (0, L), q, rf.ny_top)
    v12 = line_curve((W, 0), (W, K), q, rf.ny_bottom)
    east2 = line_curve((B, 0), (B, K), q, rf.ny_bottom)
    tip_col = _collapsed_curve((W, K), q, rf.ny_lens)
    v45 = line_curve((W, K), (W, S), q, rf.ny_mid)
    east5 = line_curve((B, K), (B, S), q, rf.ny_mid)
    v67 = line_curve((W, S), (W, L), q, rf.ny_top)
    east7 = line_curve((B, S), (B, L), q, rf.ny_top)

    patches = [
        TensorPatch.from_edges(bottom_in, lower_arc, ax1, v12),
        TensorPatch.from_edges(bottom_out, k_out, v12, east2),
        TensorPatch.from_edges(lower_arc, upper_arc, ax3, tip_col),
        TensorPatch.from_edges(upper_arc, mid_in, ax4, v45),
        TensorPatch.from_edges(k_out, mid_out, v45, east5),
        TensorPatch.from_edges(mid_in, top_in, ax6, v67),
        TensorPatch.from_edges(mid_out, top_out, v67, east7),
    ]
    regions = ["fluid", "fluid", "lens", "fluid", "fluid", "fluid", "fluid"]
    boundary_tags = [
        {"south": "excitation", "west": "symmetry"},
        {"south": "excitation", "east": "absorbing"},
        {"west": "symmetry"},
        {"west": "symmetry"},
        {"east": "absorbing"},
        {"west": "symmetry", "north": "absorbing"},
        {"east": "absorbing", "north": "absorbing"},
    ]
    interfaces = [
        (0, "east", 1, "west"),
        (0, "north", 2, "south"),
        (2, "north", 3, "south"),
        (3, "east", 4, "west"),
        (1, "north", 4, "south"),
        (3, "north", 5, "south"),
        (4, "north", 6, "south"),
        (5, "east", 6, "west"),
    ]
    lens_interfaces = [(2, "south", 0, "north"), (2, "north", 3, "south")]
    collapsed = [(2, "east")]
    dof_map, n_global = glue(patches, interfaces, collapsed)
    dom = Domain(
        patches,
        regions,
        boundary_tags,
        interfaces,
        dof_map,
        n_global,
        lens_interfaces,
        collapsed,
        params,
    )
    det = dom.min_jacobian()
    if det <= 0.0:
        raise GeometryError("non-positive geometry Jacobian (min det = %.3e)" % det)
    return dom


def build_channel_domain(width, height, nx, ny, degree=1):
    """Single-patch fluid channel: excitation at the bottom, absorbing top, rigid sides."""
    south = line_curve((0, 0), (width, 0), degree, nx)
    north = line_curve((0, height), (width, height), degree, nx)
    west = line_curve((0, 0), (0, height), degree, ny)
    east = line_curve((width, 0), (width, height), degree, ny)
    patch = TensorPatch.from_edges(south, north, west, east)
    dof_map, n_global = glue([patch], [])
    tags = {"south": "excitation", "north": "absorbing", "west": "symmetry", "east": "symmetry"}
    return Domain([patch], ["fluid"], [tags], [], dof_map, n_global)


def design_dof_set(domain, movable="upper"):
    """Design dofs on the lens boundary curves with the tip pinned.

    movable is 'upper', 'lower', or 'both': which boundary rows the optimizer
    may move (in y). Pinned dofs still carry gradient entries.
    """
    if movable not in ("upper", "lower", "both"):
        raise ValueError("movable must be 'upper', 'lower', or 'both'")
    lens = 2
    patch = domain.patches[lens]
    dmap = domain.dof_map[lens]
    rows = {
        "lower": dmap[patch.edge_indices("south")],
        "upper": dmap[patch.edge_indices("north")],
    }
    abscissae = {
        "lower": patch.ctrl_flat[patch.edge_indices("south")][:, 0].copy(),
        "upper": patch.ctrl_flat[patch.edge_indices("north")][:, 0].copy(),
    }
    ids = []
    seen = set()
    for name in ("lower", "upper"):
        for g in rows[name]:
            if int(g) not in seen:
                seen.add(int(g))
                ids.append(int(g))
    ids = np.array(ids, dtype=np.int64)
    tip = int(rows["lower"][-1])
    assert tip == int(rows["upper"][-1]), "lens boundary rows must share the tip dof"
    allowed = set()
    if movable in ("lower", "both"):
        allowed.update(int(g) for g in rows["lower"])
    if movable in ("upper", "both"):
        allowed.update(int(g) for g in rows["upper"])
    allowed.discard(tip)
    movable_mask = np.array([g in allowed for g in ids])
    return DesignSet(ids=ids, movable=movable_mask, rows=rows, abscissae=abscissae)


def locate_point(domain, xy, tol=1e-10):
    """Find (patch, x1, x2) whose geometry maps to a physical point (Newton search)."""
    xy = np.asarray(xy, dtype=float)
    for p, patch in enumerate(domain.patches):
        # quick reject via control net bounding box (NURBS convex hull property)
        pts = patch.ctrl_flat
        pad = 1e-9
        if not (
            pts[:, 0].min() - pad <= xy[0] <= pts[:, 0].max() + pad
            and pts[:, 1].min() - pad <= xy[1] <= pts[:, 1].max() + pad
        ):
            continue
        for s1 in np.linspace(0.15, 0.85, 3):
            for s2 in np.linspace(0.15, 0.85, 3):
                x = np.array([s1, s2])
                ok = False
                for _ in range(60):
                    r = patch.geometry(*x) - xy
                    if np.abs(r).max() < tol:
                        ok = True
                        break
                    J = patch.jacobian(*x)
                    try:
                        step = np.linalg.solve(J, r)
                    except np.linalg.LinAlgError:
                        break
                    x = np.clip(x - step, 0.0, 1.0)
                if ok and np.all(x > -1e-9) and np.all(x < 1.0 + 1e-9):
                    return p, float(x[0]), float(x[1])
    raise GeometryError("point (%g, %g) not found in any patch" % (xy[0], xy[1]))
