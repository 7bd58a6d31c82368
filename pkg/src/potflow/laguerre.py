"""Laguerre (power) diagrams of weighted sites inside a convex domain.

Cells are built independently: each starts as the full domain polytope and is
clipped by bisector planes of candidate neighbors taken in increasing distance
order, stopping under the security-radius criterion (with a slack term for
non-uniform weights).  Construction is a parallel map over sites and its
output is bitwise independent of the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .geom import ConvexCell, Plane, DEFAULT_REL_TOL, pack_cell, unpack_cell


@dataclass
class Site:
    """Lagrangian parameters of one fluid cell."""

    p: np.ndarray        # position
    psi: float = 0.0     # weight (squared length units)
    nu: float = 1.0      # prescribed volume
    phase: int = 0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.psi < 0.0:
            raise ValueError("site weight must be non-negative")
        if self.nu <= 0.0:
            raise ValueError("prescribed volume must be positive")


def sites_to_arrays(sites: list[Site]):
    pts = np.array([s.p for s in sites], dtype=np.float64).reshape(-1, 3)
    psi = np.array([s.psi for s in sites], dtype=np.float64)
    nu = np.array([s.nu for s in sites], dtype=np.float64)
    phase = np.array([s.phase for s in sites], dtype=np.int64)
    return pts, psi, nu, phase


class SpatialGrid:
    """Uniform bucket grid over the domain bounding box.

    The bucket edge targets (domain volume / n)^(1/3); every site lands in
    exactly one bucket.
    """

    def __init__(self, points: np.ndarray, domain: ConvexCell,
                 target_cell_size: float | None = None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        lo, hi = domain.bbox()
        extent = np.maximum(hi - lo, 1e-300)
        if target_cell_size is None:
            from .geom import cell_volume_convex

            vol = cell_volume_convex(domain)
            target_cell_size = (vol / max(n, 1)) ** (1.0 / 3.0)
        dims = np.clip(np.ceil(extent / max(target_cell_size, 1e-300)).astype(np.int64),
                       1, 128)
        h = extent / dims
        self.lo = lo.copy()
        self.dims = dims
        self.h = h
        self.inv_h = 1.0 / h
        self.h_min = float(h.min())
        self.points = points
        ij = np.clip(((points - lo) * self.inv_h).astype(np.int64), 0, dims - 1)
        lin = (ij[:, 0] * dims[1] + ij[:, 1]) * dims[2] + ij[:, 2]
        order = np.argsort(lin, kind="stable")
        ncell = int(dims[0] * dims[1] * dims[2])
        start = np.zeros(ncell + 1, dtype=np.int64)
        np.add.at(start, lin + 1, 1)
        np.cumsum(start, out=start)
        self.bucket_start = start
        self.bucket_sites = order.astype(np.int64)

    def kernel_args(self):
        return (self.bucket_start, self.bucket_sites,
                float(self.lo[0]), float(self.lo[1]), float(self.lo[2]),
                float(self.inv_h[0]), float(self.inv_h[1]), float(self.inv_h[2]),
                int(self.dims[0]), int(self.dims[1]), int(self.dims[2]),
                self.h_min)


def knn(grid: SpatialGrid, q: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest sites to q, ordered by increasing distance."""
    q = np.asarray(q, dtype=np.float64)
    out = np.empty(min(k, len(grid.points)), dtype=np.int64)
    got = _k._knn(grid.points, *grid.kernel_args(),
                  float(q[0]), float(q[1]), float(q[2]), int(k), out)
    return out[:got]


def bisector_plane(p_i, psi_i, p_j, psi_j) -> Plane:
    """Power bisector of two weighted sites, oriented with cell i inside."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    diff = p_j - p_i
    D2 = float(diff @ diff)
    if D2 == 0.0:
        raise ValueError("coincident sites have no bisector")
    D = np.sqrt(D2)
    n = diff / D
    h = 0.5 * (D2 + psi_i - psi_j) / D
    return Plane(n, float(n @ p_i) + h)


class _DomainPack:
    """Cached packed representation + tolerance of a domain polytope."""

    def __init__(self, domain: ConvexCell):
        self.cell = domain
        (self.verts, self.cnt, self.planes,
         self.tags, self.lp, self.lv) = pack_cell(domain)
        self.tol = DEFAULT_REL_TOL * domain.diagonal()
        from .geom import cell_volume_convex

        self.volume = cell_volume_convex(domain)

    def args(self):
        return (self.verts, self.cnt, self.planes, self.tags, self.lp, self.lv)


_dompack_cache: dict[int, _DomainPack] = {}


def domain_pack(domain: ConvexCell) -> _DomainPack:
    key = id(domain)
    dp = _dompack_cache.get(key)
    if dp is None or dp.cell is not domain:
        dp = _DomainPack(domain)
        _dompack_cache.clear()
        _dompack_cache[key] = dp
    return dp


def _dpsi_max(psi: np.ndarray) -> float:
    if len(psi) == 0:
        return 0.0
    return float(max(psi.max() - psi.min(), 0.0))


def build_cell(i: int, sites: list[Site] | tuple[np.ndarray, np.ndarray],
               domain: ConvexCell, grid: SpatialGrid | None = None,
               ball_aware: bool = False) -> ConvexCell | None:
    """Laguerre cell of site i inside the domain; None when the cell is empty."""
    if isinstance(sites, (list, tuple)) and len(sites) and isinstance(sites[0], Site):
        pts, psi, _, _ = sites_to_arrays(sites)
    else:
        pts, psi = sites
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        psi = np.asarray(psi, dtype=np.float64)
    if grid is None:
        grid = SpatialGrid(pts, domain)
    dp = domain_pack(domain)
    vA = np.empty((_k.MAX_V, 3))
    cA = np.empty(3, dtype=np.int64)
    pA = np.empty((_k.MAX_F, 4))
    tA = np.empty(_k.MAX_F, dtype=np.int64)
    lpA = np.empty(_k.MAX_F + 1, dtype=np.int64)
    lvA = np.empty(_k.MAX_L, dtype=np.int64)
    vB = np.empty_like(vA)
    cB = np.empty_like(cA)
    pB = np.empty_like(pA)
    tB = np.empty_like(tA)
    lpB = np.empty_like(lpA)
    lvB = np.empty_like(lvA)
    st, which = _k._build_cell(int(i), pts, psi, _dpsi_max(psi), ball_aware,
                               *dp.args(), *grid.kernel_args(), dp.tol,
                               vA, cA, pA, tA, lpA, lvA,
                               vB, cB, pB, tB, lpB, lvB)
    if st == 1:
        return None
    if st == 3:
        raise RuntimeError("cell exceeded kernel buffer capacity")
    if which == 0:
        return unpack_cell(vA, cA, pA, tA, lpA, lvA)
    return unpack_cell(vB, cB, pB, tB, lpB, lvB)


class PackedDiagram:
    """All Laguerre cells in fixed-stride packed storage."""

    def __init__(self, pts, psi, status, nv, nf, nl, verts, planes, tags, lp, lv,
                 domain: ConvexCell):
        self.pts = pts
        self.psi = psi
        self.status = status  # 0 ok, 1 empty
        self.nv = nv
        self.nf = nf
        self.nl = nl
        self.verts = verts
        self.planes = planes
        self.tags = tags
        self.lp = lp
        self.lv = lv
        self.domain = domain

    def __len__(self):
        return len(self.status)

    def is_empty(self, i: int) -> bool:
        return self.status[i] != 0

    def cell(self, i: int) -> ConvexCell | None:
        if self.status[i] != 0:
            return None
        nf = int(self.nf[i])
        lp = np.empty(_k.MAX_F + 1, dtype=np.int64)
        lp[:nf + 1] = self.lp[i, :nf + 1]
        return unpack_cell(self.verts[i], np.array([self.nv[i], nf, self.nl[i]]),
                           self.planes[i], self.tags[i], lp, self.lv[i])

    def neighbors(self, i: int) -> np.ndarray:
        """Site indices of the facet neighbors of cell i."""
        nf = int(self.nf[i])
        t = self.tags[i, :nf]
        return t[t >= 0]


def build_diagram_packed(sites, domain: ConvexCell, grid: SpatialGrid | None = None,
                         ball_aware: bool = False) -> PackedDiagram:
    if isinstance(sites, (list, tuple)) and len(sites) and isinstance(sites[0], Site):
        pts, psi, _, _ = sites_to_arrays(sites)
    else:
        pts, psi = sites
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        psi = np.asarray(psi, dtype=np.float64)
    n = len(pts)
    if grid is None:
        grid = SpatialGrid(pts, domain)
    dp = domain_pack(domain)

    smv, smf, sml = 128, 64, 512
    while True:
        status = np.zeros(n, dtype=np.int64)
        nv = np.zeros(n, dtype=np.int64)
        nf = np.zeros(n, dtype=np.int64)
        nl = np.zeros(n, dtype=np.int64)
        verts = np.zeros((n, smv, 3))
        planes = np.zeros((n, smf, 4))
        tags = np.zeros((n, smf), dtype=np.int64)
        lp = np.zeros((n, smf + 1), dtype=np.int64)
        lv = np.zeros((n, sml), dtype=np.int64)
        err = _k._batch_build(pts, psi, *dp.args(), *grid.kernel_args(),
                              dp.tol, _dpsi_max(psi), ball_aware,
                              smv, smf, sml,
                              status, nv, nf, nl, verts, planes, tags, lp, lv)
        if err == 0:
            break
        smv *= 2
        smf *= 2
        sml *= 2
        if smv > _k.MAX_V or smf > _k.MAX_F * 2 or sml > _k.MAX_L:
            raise RuntimeError("diagram cell exceeded kernel buffer capacity")
        smv = min(smv, _k.MAX_V)
        smf = min(smf, _k.MAX_F)
        sml = min(sml, _k.MAX_L)
    return PackedDiagram(pts, psi, status, nv, nf, nl, verts, planes, tags, lp, lv,
                         domain)


def build_diagram(sites, domain: ConvexCell, grid: SpatialGrid | None = None,
                  ball_aware: bool = False) -> list[ConvexCell | None]:
    """One Laguerre cell per site; empty cells are recorded as None."""
    packed = build_diagram_packed(sites, domain, grid, ball_aware)
    return [packed.cell(i) for i in range(len(packed))]
