"""Convex cells, planes, and generalized polygons (segments + circular arcs).

Coordinates are plain ``numpy`` arrays of shape (3,); all reals are float64.
No exact arithmetic is used anywhere: on-plane and on-sphere tests are made
against a scale-aware tolerance ``tol`` (default ``1e-9`` times the domain
diagonal), and vertices within tolerance of a clip plane are classified inside
so that repeated clips are stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k

Vec3 = np.ndarray

DEFAULT_REL_TOL = 1e-9


class GeomError(Exception):
    """Base class for geometry errors."""


class UnboundedDomain(GeomError):
    pass


class EmptyDomain(GeomError):
    pass


class OpenLoop(GeomError):
    pass


def vec3(x, y, z) -> Vec3:
    return np.array([x, y, z], dtype=np.float64)


# Facet tags: a facet either faces another site or a face of the domain.
def tag_site(j: int) -> int:
    return int(j)


def tag_domain(k: int) -> int:
    return -(int(k) + 1)


def tag_is_site(tag: int) -> bool:
    return tag >= 0


def tag_index(tag: int) -> int:
    """Site index for site tags, domain face index for domain tags."""
    return tag if tag >= 0 else -tag - 1


@dataclass
class Plane:
    """Oriented plane n.x = d; the inside halfspace is n.x <= d."""

    n: Vec3
    d: float

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        nn = float(np.linalg.norm(self.n))
        if not math.isfinite(nn) or abs(nn - 1.0) > 1e-9:
            if nn <= 0.0 or not math.isfinite(nn):
                raise GeomError("plane normal must be a nonzero finite vector")
            self.n = self.n / nn
            self.d = float(self.d) / nn
        self.d = float(self.d)

    @classmethod
    def from_point_normal(cls, point: Vec3, normal: Vec3) -> "Plane":
        normal = np.asarray(normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        return cls(normal, float(np.dot(normal, point)))

    def signed_distance(self, x: Vec3) -> float:
        """Positive outside the halfspace, negative inside."""
        return float(np.dot(self.n, x) - self.d)


@dataclass
class Facet:
    plane: Plane
    loop: np.ndarray  # ordered vertex indices, CCW seen from outside
    tag: int

    def __post_init__(self):
        self.loop = np.asarray(self.loop, dtype=np.int64)


@dataclass
class ConvexCell:
    """Bounded convex polytope as facets with ordered vertex loops."""

    vertices: np.ndarray  # (V, 3)
    facets: list[Facet]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def n_edges(self) -> int:
        return sum(len(f.loop) for f in self.facets) // 2

    def bbox(self) -> tuple[Vec3, Vec3]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def contains(self, x: Vec3, tol: float = 0.0) -> bool:
        for f in self.facets:
            if f.plane.signed_distance(x) > tol:
                return False
        return True

    def validate(self, tol: float | None = None) -> None:
        """Check the polytope invariants; raises GeomError on violation."""
        if tol is None:
            tol = DEFAULT_REL_TOL * max(self.diagonal(), 1.0)
        V = self.n_vertices
        F = self.n_facets
        E = 0
        edge_seen: dict[tuple[int, int], int] = {}
        on_count = np.zeros(V, dtype=int)
        for f in self.facets:
            loop = f.loop
            if len(loop) < 3:
                raise GeomError("facet loop with fewer than 3 vertices")
            for k in range(len(loop)):
                a, b = int(loop[k]), int(loop[(k + 1) % len(loop)])
                key = (min(a, b), max(a, b))
                edge_seen[key] = edge_seen.get(key, 0) + 1
            d = self.vertices @ f.plane.n - f.plane.d
            if np.any(d > tol):
                raise GeomError("vertex outside a facet halfspace")
            on = np.abs(d) <= tol
            on_count[on] += 1
            if not np.all(on[loop]):
                raise GeomError("loop vertex not on its facet plane")
        for key, cnt in edge_seen.items():
            if cnt != 2:
                raise GeomError(f"edge {key} shared by {cnt} facets, expected 2")
        E = len(edge_seen)
        if V - E + F != 2:
            raise GeomError(f"Euler violation: V={V} E={E} F={F}")
        if np.any(on_count < 3):
            raise GeomError("vertex incident to fewer than 3 facet planes")


# ----------------------------------------------------------------------------
# boundary pieces of generalized polygons
# ----------------------------------------------------------------------------

def _canon_basis(axis: Vec3) -> tuple[Vec3, Vec3]:
    """Canonical right-handed in-plane basis (e1, e2) of a unit axis."""
    e1x, e1y, e1z, e2x, e2y, e2z = _k._perp_basis(axis[0], axis[1], axis[2])
    return np.array([e1x, e1y, e1z]), np.array([e2x, e2y, e2z])


@dataclass
class Segment:
    a: Vec3
    b: Vec3

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    def start(self) -> Vec3:
        return self.a

    def end(self) -> Vec3:
        return self.b


@dataclass
class Arc:
    """Circular arc; angles are measured in the canonical basis of ``axis``.

    The arc runs from start_angle to end_angle counter-clockwise around the
    axis when ``ccw`` is true, clockwise otherwise.
    """

    center: Vec3
    radius: float
    axis: Vec3
    start_angle: float
    end_angle: float
    ccw: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.axis = self.axis / np.linalg.norm(self.axis)

    @classmethod
    def from_endpoints(cls, center: Vec3, radius: float, axis: Vec3,
                       start: Vec3, end: Vec3, ccw: bool = True) -> "Arc":
        """Arc through two points on the circle (angles derived from the frame)."""
        center = np.asarray(center, dtype=np.float64)
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        e1, e2 = _canon_basis(axis)
        a0 = math.atan2(float((start - center) @ e2), float((start - center) @ e1))
        a1 = math.atan2(float((end - center) @ e2), float((end - center) @ e1))
        return cls(center, radius, axis, a0, a1, ccw)

    def point_at(self, angle: float) -> Vec3:
        e1, e2 = _canon_basis(self.axis)
        return self.center + self.radius * (math.cos(angle) * e1 + math.sin(angle) * e2)

    def sweep(self) -> float:
        """Signed sweep angle (positive CCW around the axis)."""
        if self.ccw:
            s = (self.end_angle - self.start_angle) % (2.0 * math.pi)
            return s if s > 0.0 else 2.0 * math.pi if self.end_angle != self.start_angle else 0.0
        s = (self.start_angle - self.end_angle) % (2.0 * math.pi)
        return -s

    def start(self) -> Vec3:
        return self.point_at(self.start_angle)

    def end(self) -> Vec3:
        return self.point_at(self.end_angle)


@dataclass
class FullCircle:
    center: Vec3
    radius: float
    axis: Vec3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.axis = self.axis / np.linalg.norm(self.axis)


BoundaryPiece = Segment | Arc | FullCircle


@dataclass
class GeneralizedPolygon:
    """Planar region bounded by one closed loop of segments and arcs.

    The loop must be positively oriented with respect to the plane normal
    (region on the left).  A single FullCircle piece denotes a whole disk.
    """

    plane: Plane
    boundary: list[BoundaryPiece] = field(default_factory=list)

    def is_full_circle(self) -> bool:
        return len(self.boundary) == 1 and isinstance(self.boundary[0], FullCircle)

    def _pieces_2d(self, tol: float) -> np.ndarray:
        """Pack the boundary into kernel piece rows in the plane frame."""
        n = self.plane.n
        e1, e2 = _canon_basis(n)
        origin = self.plane.d * n  # any fixed point on the plane

        def to2d(x):
            r = np.asarray(x, dtype=np.float64) - origin
            return float(r @ e1), float(r @ e2)

        rows = []
        prev_end = None
        first_start = None
        for piece in self.boundary:
            if isinstance(piece, FullCircle):
                cx, cy = to2d(piece.center)
                rows.append([2.0, 0, 0, 0, 0, cx, cy, piece.radius, 0, 0])
                continue
            if isinstance(piece, Segment):
                s3, e3 = piece.a, piece.b
                x0, y0 = to2d(s3)
                x1, y1 = to2d(e3)
                rows.append([0.0, x0, y0, x1, y1, 0, 0, 0, 0, 0])
            else:
                s3, e3 = piece.start(), piece.end()
                cx, cy = to2d(piece.center)
                x0, y0 = to2d(s3)
                x1, y1 = to2d(e3)
                a0 = math.atan2(y0 - cy, x0 - cx)
                a1 = a0 + piece.sweep()
                rows.append([1.0, 0, 0, 0, 0, cx, cy, piece.radius, a0, a1])
            if prev_end is not None and np.linalg.norm(s3 - prev_end) > tol:
                raise OpenLoop("consecutive boundary pieces do not share endpoints")
            if first_start is None:
                first_start = s3
            prev_end = e3
        if prev_end is not None and first_start is not None:
            if np.linalg.norm(first_start - prev_end) > tol:
                raise OpenLoop("boundary loop is not closed")
        return np.asarray(rows, dtype=np.float64)


def polygon_area(g: GeneralizedPolygon, tol: float = 1e-9) -> float:
    """Area of a generalized polygon (full circles give pi r^2)."""
    rows = g._pieces_2d(tol)
    A, _, _, _ = _k._piece_integrals(rows, rows.shape[0])
    return float(A)


def polygon_centroid(g: GeneralizedPolygon, tol: float = 1e-9) -> Vec3:
    """Area-weighted centroid; lies on the polygon plane."""
    rows = g._pieces_2d(tol)
    A, mx, my, _ = _k._piece_integrals(rows, rows.shape[0])
    n = g.plane.n
    e1, e2 = _canon_basis(n)
    origin = g.plane.d * n
    if A == 0.0:
        return origin
    return origin + (mx / A) * e1 + (my / A) * e2


def polygon_second_moment(g: GeneralizedPolygon, about: Vec3, tol: float = 1e-9) -> float:
    """Integral of |x - about|^2 over the polygon (about may be off-plane)."""
    rows = g._pieces_2d(tol)
    A, mx, my, ip = _k._piece_integrals(rows, rows.shape[0])
    n = g.plane.n
    e1, e2 = _canon_basis(n)
    origin = g.plane.d * n
    r = np.asarray(about, dtype=np.float64) - origin
    au, av = float(r @ e1), float(r @ e2)
    h2 = float(r @ n) ** 2
    # shift the in-plane polar moment from the frame origin to `about`
    return float(ip - 2.0 * (au * mx + av * my) + (au * au + av * av) * A + h2 * A)


# ----------------------------------------------------------------------------
# packing between ConvexCell and the kernel layout
# ----------------------------------------------------------------------------

def pack_cell(cell: ConvexCell):
    nv = cell.n_vertices
    nf = cell.n_facets
    nl = sum(len(f.loop) for f in cell.facets)
    if nv > _k.MAX_V or nf > _k.MAX_F or nl > _k.MAX_L:
        raise GeomError("cell exceeds kernel buffer capacity")
    verts = np.zeros((_k.MAX_V, 3))
    planes = np.zeros((_k.MAX_F, 4))
    tags = np.zeros(_k.MAX_F, dtype=np.int64)
    lp = np.zeros(_k.MAX_F + 1, dtype=np.int64)
    lv = np.zeros(_k.MAX_L, dtype=np.int64)
    verts[:nv] = cell.vertices
    pos = 0
    for f, fac in enumerate(cell.facets):
        planes[f, :3] = fac.plane.n
        planes[f, 3] = fac.plane.d
        tags[f] = fac.tag
        lp[f] = pos
        lv[pos:pos + len(fac.loop)] = fac.loop
        pos += len(fac.loop)
    lp[nf] = pos
    cnt = np.array([nv, nf, pos], dtype=np.int64)
    return verts, cnt, planes, tags, lp, lv


def unpack_cell(verts, cnt, planes, tags, lp, lv) -> ConvexCell:
    nv, nf = int(cnt[0]), int(cnt[1])
    facets = []
    for f in range(nf):
        loop = np.array(lv[lp[f]:lp[f + 1]], dtype=np.int64)
        facets.append(Facet(Plane(planes[f, :3].copy(), float(planes[f, 3])),
                            loop, int(tags[f])))
    return ConvexCell(verts[:nv].copy(), facets)


# ----------------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------------

def init_cell_from_domain(halfspaces: list[Plane], tol: float | None = None) -> ConvexCell:
    """Polytope of the intersection of halfspaces, facets tagged DomainFace(k).

    Vertices are enumerated from all plane triples; redundant halfspaces do
    not produce facets.  Raises EmptyDomain / UnboundedDomain.
    """
    m = len(halfspaces)
    if m < 4:
        raise UnboundedDomain("fewer than 4 halfspaces cannot bound a polytope")
    N = np.array([h.n for h in halfspaces])
    d = np.array([h.d for h in halfspaces])

    # boundedness: the recession cone {v : N v <= 0} must be {0}
    from scipy.optimize import linprog

    for sign in (1.0, -1.0):
        for axis in range(3):
            c = np.zeros(3)
            c[axis] = -sign
            res = linprog(c, A_ub=N, b_ub=d, bounds=[(None, None)] * 3,
                          method="highs")
            if res.status == 3:
                raise UnboundedDomain("halfspace intersection is unbounded")
            if res.status == 2:
                raise EmptyDomain("halfspace intersection is empty")

    # rough scale for tolerances from the LP-feasible extent
    pts = []
    for i in range(m):
        for j in range(i + 1, m):
            for k in range(j + 1, m):
                A = np.array([N[i], N[j], N[k]])
                det = np.linalg.det(A)
                if abs(det) < 1e-12:
                    continue
                x = np.linalg.solve(A, np.array([d[i], d[j], d[k]]))
                pts.append(x)
    if not pts:
        raise EmptyDomain("no plane triples intersect")
    pts = np.array(pts)
    scale = float(np.max(np.ptp(pts, axis=0))) if len(pts) > 1 else 1.0
    if tol is None:
        tol = DEFAULT_REL_TOL * max(scale, 1.0)

    feasible = pts[np.all(pts @ N.T - d <= tol, axis=1)]
    if len(feasible) == 0:
        raise EmptyDomain("halfspace intersection is empty")
    # dedup vertices
    verts: list[np.ndarray] = []
    for p in feasible:
        if not any(np.linalg.norm(p - q) <= tol for q in verts):
            verts.append(p)
    V = np.array(verts)
    if len(V) < 4:
        raise EmptyDomain("degenerate (lower-dimensional) intersection")

    facets = []
    for k in range(m):
        on = np.where(np.abs(V @ N[k] - d[k]) <= tol)[0]
        if len(on) < 3:
            continue  # redundant halfspace
        e1, e2 = _canon_basis(N[k])
        center = V[on].mean(axis=0)
        ang = np.arctan2((V[on] - center) @ e2, (V[on] - center) @ e1)
        order = np.lexsort((on, ang))
        facets.append(Facet(Plane(N[k].copy(), float(d[k])), on[order], tag_domain(k)))
    cell = ConvexCell(V, facets)
    cell.validate(tol)
    return cell


def box_domain(lo, hi) -> ConvexCell:
    """Axis-aligned box as a domain cell (6 facets, faces ordered -x +x -y +y -z +z)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    planes = []
    for axis in range(3):
        n = np.zeros(3)
        n[axis] = -1.0
        planes.append(Plane(n, -lo[axis]))
        n = np.zeros(3)
        n[axis] = 1.0
        planes.append(Plane(n, hi[axis]))
    return init_cell_from_domain(planes)


def clip_cell(cell: ConvexCell, plane: Plane, tag: int = -1,
              tol: float | None = None) -> ConvexCell | None:
    """Intersection of a cell with the halfspace n.x <= d.

    Returns the clipped cell (the new facet carries ``tag``), the original
    cell when the plane does not cut it, or None when nothing remains.
    """
    if tol is None:
        tol = DEFAULT_REL_TOL * max(cell.diagonal(), 1.0)
    va, ca, pa, ta, lpa, lva = pack_cell(cell)
    vb = np.empty_like(va)
    cb = np.empty_like(ca)
    pb = np.empty_like(pa)
    tb = np.empty_like(ta)
    lpb = np.empty_like(lpa)
    lvb = np.empty_like(lva)
    st = _k._clip_into(va, ca, pa, ta, lpa, lva, vb, cb, pb, tb, lpb, lvb,
                       float(plane.n[0]), float(plane.n[1]), float(plane.n[2]),
                       float(plane.d), int(tag), tol)
    if st == _k.CLIP_UNTOUCHED or st == _k.CLIP_DEGENERATE:
        return cell
    if st == _k.CLIP_EMPTY:
        return None
    if st == _k.CLIP_OVERFLOW:
        raise GeomError("clip overflowed kernel buffers")
    return unpack_cell(vb, cb, pb, tb, lpb, lvb)


def cell_volume_convex(cell: ConvexCell) -> float:
    """Exact polytope volume via apex-fan tetrahedra from the vertex mean."""
    apex = cell.vertices.mean(axis=0)
    vol = 0.0
    for f in cell.facets:
        loop = f.loop
        p0 = cell.vertices[loop[0]]
        for k in range(1, len(loop) - 1):
            p1 = cell.vertices[loop[k]]
            p2 = cell.vertices[loop[k + 1]]
            vol += np.dot(np.cross(p1 - p0, p2 - p0), p0 - apex)
    # loops are CCW from outside, so the signed fan points away from the apex
    return abs(vol) / 6.0


def cell_centroid_convex(cell: ConvexCell) -> Vec3:
    """Volume centroid of the polytope (apex-fan tetrahedra)."""
    apex = cell.vertices.mean(axis=0)
    vol = 0.0
    mom = np.zeros(3)
    for f in cell.facets:
        loop = f.loop
        p0 = cell.vertices[loop[0]]
        for k in range(1, len(loop) - 1):
            p1 = cell.vertices[loop[k]]
            p2 = cell.vertices[loop[k + 1]]
            v6 = np.dot(np.cross(p1 - p0, p2 - p0), p0 - apex)
            vol += v6
            mom += v6 * (p0 + p1 + p2 + apex)
    if vol == 0.0:
        return apex
    return mom / (4.0 * vol)
