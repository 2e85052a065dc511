"""Simplicial mesh kernel.

Structured rectangle/cuboid generators, conformity and orientation
validation, point location by element walking, piecewise-linear
interpolation between meshes, and a scale-invariant element quality.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Boundary segment ids of the generating box, 1-based.
# 2D rectangle: bottom, right, top, left.
# 3D cuboid: bottom, left, front, right, back, top.
# Each entry maps segment id -> (axis, side) with side -1 = low face, +1 = high face.
RECT_SEGMENTS = {1: (1, -1), 2: (0, +1), 3: (1, +1), 4: (0, -1)}
BOX_SEGMENTS = {1: (2, -1), 2: (0, -1), 3: (1, -1), 4: (0, +1), 5: (1, +1), 6: (2, +1)}

# Quality normalization so the equilateral simplex scores exactly 1:
# q = C_d * vol / (sum of squared edge lengths)^(d/2).
_QUALITY_NORM = {2: 4.0 * np.sqrt(3.0), 3: 72.0 * np.sqrt(3.0)}


def segment_table(dim):
    """Segment id -> (axis, side) table for the given dimension."""
    if dim == 2:
        return RECT_SEGMENTS
    if dim == 3:
        return BOX_SEGMENTS
    raise ValueError(f"unsupported dimension {dim}")


@dataclass(frozen=True)
class SegmentMap:
    """Mapping from the faces of the generating box to segment ids."""

    dim: int
    box: np.ndarray  # (dim, 2) low/high coordinate per axis

    def ids(self):
        return tuple(sorted(segment_table(self.dim)))

    def plane(self, seg):
        """Return (axis, coordinate value) of the face carrying segment `seg`."""
        axis, side = segment_table(self.dim)[seg]
        return axis, self.box[axis, 0 if side < 0 else 1]

    def on_segment(self, point, seg, tol):
        axis, value = self.plane(seg)
        return abs(point[axis] - value) <= tol


@dataclass
class SimplicialMesh:
    """Conforming simplicial mesh of a coordinate-aligned box.

    All elements are positively oriented. `boundary_node_flags[i]` is the
    (frozen)set of segment ids of boundary facets containing node i; interior
    nodes carry the empty set. Meshes are treated as immutable once built:
    adaptation passes construct new instances.
    """

    dim: int
    nodes: np.ndarray            # (n_nodes, dim) float
    elements: np.ndarray         # (n_elems, dim+1) int
    boundary_facets: np.ndarray  # (n_facets, dim) int, node ids sorted per facet
    facet_segments: np.ndarray   # (n_facets,) int segment ids
    boundary_node_flags: list    # per node: frozenset of segment ids
    box: np.ndarray              # (dim, 2) low/high per axis
    _locator: object = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def segment_map(self):
        return SegmentMap(self.dim, self.box)

    def diameter(self):
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    def element_volumes(self):
        return signed_volumes(self.nodes, self.elements)

    def edges(self):
        return unique_edges(self.elements)

    def locator(self):
        if self._locator is None:
            self._locator = _Locator(self)
        return self._locator


def signed_volumes(nodes, elements):
    """Signed volumes (areas in 2D) of the given simplices, vectorized."""
    p0 = nodes[elements[:, 0]]
    edges = nodes[elements[:, 1:]] - p0[:, None, :]
    d = nodes.shape[1]
    if d == 2:
        return 0.5 * (edges[:, 0, 0] * edges[:, 1, 1] - edges[:, 0, 1] * edges[:, 1, 0])
    return np.linalg.det(edges) / 6.0


def unique_edges(elements):
    """Unique undirected edges (m, 2) with sorted node ids, lexicographic order."""
    nv = elements.shape[1]
    pairs = [(i, j) for i in range(nv) for j in range(i + 1, nv)]
    raw = np.concatenate([elements[:, p] for p in pairs], axis=0)
    raw.sort(axis=1)
    return np.unique(raw, axis=0)


def _sym_linspace(extent, n):
    """Node coordinates on [-extent, extent], exactly antisymmetric about 0."""
    if n % 2:
        half = np.linspace(0.0, extent, (n + 1) // 2)
        return np.concatenate([-half[:0:-1], half])
    # even count: no node at 0
    step = 2.0 * extent / (n - 1)
    half = step / 2.0 + step * np.arange(n // 2)
    half[-1] = extent
    return np.concatenate([-half[::-1], half])


def _facet_counts(dim, elements):
    count = {}
    for elem in elements:
        verts = tuple(int(v) for v in elem)
        for i in range(dim + 1):
            key = tuple(sorted(verts[:i] + verts[i + 1:]))
            count[key] = count.get(key, 0) + 1
    return count


def _derive_boundary(dim, nodes, elements, box):
    """Topological boundary facets, their segment ids, and per-node flag sets."""
    count = _facet_counts(dim, elements)
    bkeys = sorted(k for k, c in count.items() if c == 1)
    table = segment_table(dim)
    tol = 1e-12 * float(np.linalg.norm(box[:, 1] - box[:, 0]))
    facets = np.array(bkeys, dtype=np.int64).reshape(len(bkeys), dim)
    segs = np.zeros(len(bkeys), dtype=np.int64)
    for n, key in enumerate(bkeys):
        candidates = None
        for node in key:
            mine = {
                seg
                for seg, (axis, side) in table.items()
                if abs(nodes[node, axis] - box[axis, 0 if side < 0 else 1]) <= tol
            }
            candidates = mine if candidates is None else candidates & mine
        if not candidates or len(candidates) > 1:
            raise ValueError(f"boundary facet {key} not on a unique box face: {candidates}")
        segs[n] = candidates.pop()
    flags = [set() for _ in range(len(nodes))]
    for key, seg in zip(bkeys, segs):
        for node in key:
            flags[node].add(int(seg))
    return facets, segs, [frozenset(f) for f in flags]


def build_rect_mesh(lx, ly, nx, ny):
    """Structured triangulation of (-lx,lx) x (-ly,ly) with nx*ny nodes.

    Each grid quad is split into 2 triangles with alternating diagonals so
    that meshes with odd nx/ny are mirror symmetric. Boundary facets carry
    segment ids 1..4 in order bottom, right, top, left.
    """
    if not (isinstance(nx, (int, np.integer)) and isinstance(ny, (int, np.integer))):
        raise ValueError("node counts must be integers")
    if nx < 2 or ny < 2:
        raise ValueError(f"node counts must be >= 2, got nx={nx}, ny={ny}")
    if lx <= 0 or ly <= 0:
        raise ValueError("box half-extents must be positive")
    xs = _sym_linspace(float(lx), nx)
    ys = _sym_linspace(float(ly), ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i + nx * j

    elems = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                elems.append((n00, n10, n11))
                elems.append((n00, n11, n01))
            else:
                elems.append((n00, n10, n01))
                elems.append((n10, n11, n01))
    elements = np.array(elems, dtype=np.int64)
    box = np.array([[-lx, lx], [-ly, ly]], dtype=float)
    facets, segs, flags = _derive_boundary(2, nodes, elements, box)
    return SimplicialMesh(2, nodes, elements, facets, segs, flags, box)


# All six permutations of (0,1,2); tets of the Kuhn cube split follow the
# vertex path corner -> +e_p0 -> +e_p1 -> +e_p2, identical in every cube so
# shared faces are triangulated consistently.
_KUHN_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


def build_box_mesh(lx, ly, lz, nx, ny, nz):
    """Structured tetrahedral mesh of (-lx,lx) x (-ly,ly) x (-lz,lz).

    Each grid cube is split into 6 tetrahedra (Kuhn split); segment ids 1..6
    are assigned in order bottom, left, front, right, back, top.
    """
    for n in (nx, ny, nz):
        if not isinstance(n, (int, np.integer)) or n < 2:
            raise ValueError(f"node counts must be integers >= 2, got {(nx, ny, nz)}")
    if lx <= 0 or ly <= 0 or lz <= 0:
        raise ValueError("box half-extents must be positive")
    xs = _sym_linspace(float(lx), nx)
    ys = _sym_linspace(float(ly), ny)
    zs = _sym_linspace(float(lz), nz)
    nodes = np.empty((nx * ny * nz, 3))
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                nodes[i + nx * (j + ny * k)] = (xs[i], ys[j], zs[k])

    def nid(i, j, k):
        return i + nx * (j + ny * k)

    elems = []
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                corner = np.array([i, j, k])
                for perm in _KUHN_PERMS:
                    path = [corner.copy()]
                    b = corner.copy()
                    for axis in perm:
                        b = b.copy()
                        b[axis] += 1
                        path.append(b)
                    elems.append(tuple(nid(*p) for p in path))
    elements = np.array(elems, dtype=np.int64)
    vols = signed_volumes(nodes, elements)
    flip = vols < 0
    elements[flip] = elements[flip][:, [0, 2, 1, 3]]
    box = np.array([[-lx, lx], [-ly, ly], [-lz, lz]], dtype=float)
    facets, segs, flags = _derive_boundary(3, nodes, elements, box)
    return SimplicialMesh(3, nodes, elements, facets, segs, flags, box)


@dataclass
class ValidationReport:
    """Defect counts from `validate`; all zeros for a sound mesh."""

    inverted_elements: int = 0
    nonconforming_facets: int = 0
    orphan_nodes: int = 0
    boundary_defects: int = 0

    @property
    def total_defects(self):
        return (self.inverted_elements + self.nonconforming_facets
                + self.orphan_nodes + self.boundary_defects)

    @property
    def ok(self):
        return self.total_defects == 0


def validate(mesh, boundary_tol=1e-9):
    """Check orientation, conformity, orphan nodes and boundary geometry.

    Boundary node coordinates are compared against the box faces with an
    absolute tolerance of `boundary_tol` times the box diameter. Never
    mutates the mesh; defects are reported as counts, not raised.
    """
    rep = ValidationReport()
    dim = mesh.dim
    vols = mesh.element_volumes()
    rep.inverted_elements = int(np.sum(vols <= 0))

    count = _facet_counts(dim, mesh.elements)
    rep.nonconforming_facets += sum(1 for c in count.values() if c > 2)
    topo_boundary = {k for k, c in count.items() if c == 1}
    stored = {tuple(sorted(f)) for f in mesh.boundary_facets}
    rep.nonconforming_facets += len(topo_boundary ^ stored)

    used = np.zeros(mesh.num_nodes, dtype=bool)
    used[mesh.elements.ravel()] = True
    rep.orphan_nodes = int(np.sum(~used))

    smap = mesh.segment_map
    valid_ids = set(smap.ids())
    tol = boundary_tol * mesh.diameter()
    for seg in mesh.facet_segments:
        if int(seg) not in valid_ids:
            rep.boundary_defects += 1
    derived = [set() for _ in range(mesh.num_nodes)]
    for facet, seg in zip(mesh.boundary_facets, mesh.facet_segments):
        for node in facet:
            derived[node].add(int(seg))
    for i in range(mesh.num_nodes):
        flags = mesh.boundary_node_flags[i]
        if set(flags) != derived[i]:
            rep.boundary_defects += 1
            continue
        for seg in flags:
            if seg in valid_ids and not smap.on_segment(mesh.nodes[i], seg, tol):
                rep.boundary_defects += 1
                break
    return rep


def simplex_quality(coords):
    """Scale-invariant quality of one simplex given its (d+1, d) vertex coords.

    1 for the equilateral simplex, 0 for degenerate or inverted ones.
    """
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[1]
    p0 = coords[0]
    edges = coords[1:] - p0
    if d == 2:
        vol = 0.5 * (edges[0, 0] * edges[1, 1] - edges[0, 1] * edges[1, 0])
    else:
        vol = np.linalg.det(edges) / 6.0
    if vol <= 0.0:
        return 0.0
    ssq = 0.0
    for i in range(d + 1):
        for j in range(i + 1, d + 1):
            diff = coords[i] - coords[j]
            ssq += float(diff @ diff)
    return float(_QUALITY_NORM[d] * vol / ssq ** (d / 2.0))


def element_quality_euclidean(mesh, elem):
    """Quality of mesh element `elem` (index or node tuple) in Euclidean space."""
    if np.isscalar(elem):
        ids = mesh.elements[int(elem)]
    else:
        ids = np.asarray(elem, dtype=np.int64)
    return simplex_quality(mesh.nodes[ids])


def element_qualities(nodes, elements):
    """Vectorized Euclidean qualities of all elements."""
    d = nodes.shape[1]
    vols = signed_volumes(nodes, elements)
    ssq = np.zeros(len(elements))
    nv = d + 1
    for i in range(nv):
        for j in range(i + 1, nv):
            diff = nodes[elements[:, i]] - nodes[elements[:, j]]
            ssq += np.einsum("ij,ij->i", diff, diff)
    q = _QUALITY_NORM[d] * vols / ssq ** (d / 2.0)
    q[vols <= 0.0] = 0.0
    return q


class _Locator:
    """Point location by element walking with KD-tree seeding."""

    def __init__(self, mesh):
        self.mesh = mesh
        d = mesh.dim
        nodes, elements = mesh.nodes, mesh.elements
        p0 = nodes[elements[:, 0]]
        T = nodes[elements[:, 1:]] - p0[:, None, :]          # (ne, d, d) rows = edge vectors
        self.Tinv = np.linalg.inv(np.transpose(T, (0, 2, 1)))  # maps (x - p0) -> lam[1:]
        self.p0 = p0
        self.tree = cKDTree(nodes[elements].mean(axis=1))
        facet2elems = {}
        for e, elem in enumerate(elements):
            verts = tuple(int(v) for v in elem)
            for i in range(d + 1):
                key = tuple(sorted(verts[:i] + verts[i + 1:]))
                facet2elems.setdefault(key, []).append((e, i))
        self.neighbors = -np.ones((len(elements), d + 1), dtype=np.int64)
        for members in facet2elems.values():
            if len(members) == 2:
                (e1, i1), (e2, i2) = members
                self.neighbors[e1, i1] = e2
                self.neighbors[e2, i2] = e1
        # barycentric tolerance equivalent to 1e-9 * diameter in distance,
        # per element through its minimum height
        vols = np.abs(signed_volumes(nodes, elements))
        max_edge = np.zeros(len(elements))
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                diff = nodes[elements[:, i]] - nodes[elements[:, j]]
                max_edge = np.maximum(max_edge, np.einsum("ij,ij->i", diff, diff))
        max_edge = np.sqrt(max_edge)
        if d == 2:
            h_min = 2.0 * vols / np.maximum(max_edge, 1e-300)
        else:
            areas = np.zeros(len(elements))
            for i in range(4):
                tri = np.delete(np.arange(4), i)
                a = nodes[elements[:, tri[1]]] - nodes[elements[:, tri[0]]]
                b = nodes[elements[:, tri[2]]] - nodes[elements[:, tri[0]]]
                areas = np.maximum(areas, 0.5 * np.linalg.norm(np.cross(a, b), axis=1))
            h_min = 3.0 * vols / np.maximum(areas, 1e-300)
        self.lam_tol = 1e-9 * mesh.diameter() / np.maximum(h_min, 1e-300)

    def bary(self, e, x):
        lam_rest = self.Tinv[e] @ (x - self.p0[e])
        return np.concatenate([[1.0 - lam_rest.sum()], lam_rest])

    def bary_many(self, elems, pts):
        lam_rest = np.einsum("eij,ej->ei", self.Tinv[elems], pts - self.p0[elems])
        lam0 = 1.0 - lam_rest.sum(axis=1)
        return np.column_stack([lam0, lam_rest])

    def _walk(self, x, start):
        e = start
        visited = set()
        for _ in range(4 * len(self.mesh.elements) + 16):
            lam = self.bary(e, x)
            j = int(np.argmin(lam))
            if lam[j] >= -self.lam_tol[e]:
                return e, lam
            visited.add(e)
            nxt = self.neighbors[e, j]
            if nxt < 0 or nxt in visited:
                return None
            e = int(nxt)
        return None

    def locate(self, x):
        """Locate point x; returns (elem, lam, inside).

        `inside` is False only when x lies outside every element beyond
        tolerance; `lam` is then the (extrapolating) barycentric coordinate
        in the least-bad element.
        """
        x = np.asarray(x, dtype=float)
        seed = int(self.tree.query(x)[1])
        hit = self._walk(x, seed)
        if hit is not None:
            e, lam = hit
            return e, _clamp_lam(lam), True
        # walk failed (non-convex cavity of dead ends is impossible on a box,
        # but guard against round-off): exhaustive scan
        ne = len(self.mesh.elements)
        all_e = np.arange(ne)
        lam = self.bary_many(all_e, np.broadcast_to(x, (ne, x.size)))
        margin = lam.min(axis=1) / np.maximum(self.lam_tol, 1e-300)
        best = int(np.argmax(margin))
        lam_best = lam[best]
        if lam_best.min() >= -self.lam_tol[best]:
            return best, _clamp_lam(lam_best), True
        return best, lam_best, False


def _clamp_lam(lam):
    lam = np.maximum(lam, 0.0)
    return lam / lam.sum()


def interpolate(old_mesh, u_old, new_mesh, return_stats=False):
    """P1-interpolate nodal values from `old_mesh` onto the nodes of `new_mesh`.

    Both meshes must cover the same box. Points that fall outside the old
    mesh beyond round-off tolerance are extrapolated from the nearest element
    and counted; the count is returned when `return_stats` is true.
    """
    u_old = np.asarray(u_old, dtype=float)
    if u_old.shape != (old_mesh.num_nodes,):
        raise ValueError(f"field length {u_old.shape} does not match node count "
                         f"{old_mesh.num_nodes}")
    if old_mesh.dim != new_mesh.dim or not np.allclose(old_mesh.box, new_mesh.box,
                                                       rtol=1e-9, atol=1e-12):
        raise ValueError("meshes must cover the same box")
    loc = old_mesh.locator()
    pts = new_mesh.nodes
    n = len(pts)
    u_new = np.empty(n)
    n_extrap = 0

    # fast path: nearest-centroid element contains the point
    seeds = loc.tree.query(pts)[1]
    lam = loc.bary_many(seeds, pts)
    ok = lam.min(axis=1) >= -1e-12
    for i in np.nonzero(ok)[0]:
        u_new[i] = _p1_value(old_mesh, u_old, int(seeds[i]), lam[i], pts[i])
    for i in np.nonzero(~ok)[0]:
        e, lam_i, inside = loc.locate(pts[i])
        if not inside:
            n_extrap += 1
        u_new[i] = _p1_value(old_mesh, u_old, e, lam_i, pts[i])
    if n_extrap:
        logger.warning("interpolate: %d of %d points fell outside the source mesh",
                       n_extrap, n)
    if return_stats:
        return u_new, n_extrap
    return u_new


def _p1_value(mesh, u, e, lam, x):
    ids = mesh.elements[e]
    j = int(np.argmax(lam))
    if lam[j] >= 1.0 - 1e-12 and np.array_equal(mesh.nodes[ids[j]], x):
        return float(u[ids[j]])  # coincident node: reproduce exactly
    return float(lam @ u[ids])
