"""
Conforming triangulations generated by newest-vertex bisection.

All meshes derived from one macro triangulation share a :class:`Forest`,
an append-only store of every vertex and element bisection has ever
produced.  Bisecting the same element twice returns the same children,
so a mesh is fully described by the sorted ids of its leaf elements.
This makes meshes cheap, immutable values that can be compared, merged
(overlay) and related to each other (refinement order) by plain array
operations.

Element ``e`` is stored as ``(peak, a, b)`` in counter-clockwise order;
side ``k`` is the side opposite vertex ``k`` and side 0, ``(a, b)``, is the
refinement edge.
"""

from functools import cached_property

import numpy as np

from stafem import kernels
from stafem.errors import InputError

_KEY = np.int64(1) << np.int64(32)


def _edge_key(a, b):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * _KEY + hi


class _Grow:
    """Capacity-doubling array with a fixed trailing shape."""

    def __init__(self, data):
        self.n = len(data)
        self.buf = np.array(data)

    def extend(self, rows):
        need = self.n + len(rows)
        if need > len(self.buf):
            cap = max(need, 2 * len(self.buf), 16)
            new = np.empty((cap,) + self.buf.shape[1:], dtype=self.buf.dtype)
            new[: self.n] = self.buf[: self.n]
            self.buf = new
        self.buf[self.n: need] = rows
        self.n = need

    @property
    def a(self):
        return self.buf[: self.n]


class Forest:
    """Bisection forest rooted at a macro triangulation.

    Parameters
    ----------
    points : array_like, shape (nv, 2)
    triangles : array_like, shape (nt, 3)
        Vertex indices of the macro elements.  The refinement edge of each
        macro element is its longest side.
    """

    def __init__(self, points, triangles):
        points = np.asarray(points, dtype=float)
        tris = np.asarray(triangles, dtype=np.int64)
        if points.ndim != 2 or points.shape[1] != 2 or tris.ndim != 2 or tris.shape[1] != 3:
            raise InputError("macro mesh needs (n, 2) points and (m, 3) triangles")
        if tris.min() < 0 or tris.max() >= len(points):
            raise InputError("triangle references a missing vertex")
        ordered = np.empty_like(tris)
        for i, t in enumerate(tris):
            p = points[t]
            lengths = [np.sum((p[(k + 1) % 3] - p[(k + 2) % 3]) ** 2) for k in range(3)]
            k = int(np.argmax(lengths))
            peak, a, b = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
            da, db = points[a] - points[peak], points[b] - points[peak]
            cross = da[0] * db[1] - da[1] * db[0]
            if cross == 0.0:
                raise InputError(f"macro element {i} is degenerate")
            if cross < 0:
                a, b = b, a
            ordered[i] = (peak, a, b)

        keys = np.concatenate([_edge_key(ordered[:, (k + 1) % 3], ordered[:, (k + 2) % 3])
                               for k in range(3)])
        uniq, counts = np.unique(keys, return_counts=True)
        if counts.max() > 2:
            raise InputError("macro mesh has an edge shared by more than two elements")
        once = np.isin(keys, uniq[counts == 1]).reshape(3, -1).T

        nt = len(ordered)
        self._coords = _Grow(points)
        self._vdepth = _Grow(np.zeros(len(points), dtype=np.int64))
        self._verts = _Grow(ordered)
        self._bnd = _Grow(once)
        self._parent = _Grow(np.full(nt, -1, dtype=np.int64))
        self._child = _Grow(np.full((nt, 2), -1, dtype=np.int64))
        self._gen = _Grow(np.zeros(nt, dtype=np.int64))
        self._root = _Grow(np.arange(nt, dtype=np.int64))
        self._mid_keys = np.empty(0, dtype=np.int64)
        self._mid_vals = np.empty(0, dtype=np.int64)
        self.n_roots = nt
        self.domain_area = float(np.sum(self._areas(np.arange(nt))))

    # array views; callers must not write to them
    @property
    def coords(self):
        return self._coords.a

    @property
    def verts(self):
        return self._verts.a

    @property
    def side_boundary(self):
        return self._bnd.a

    @property
    def parent(self):
        return self._parent.a

    @property
    def children(self):
        return self._child.a

    @property
    def generation(self):
        return self._gen.a

    @property
    def n_elements(self):
        return self._verts.n

    @property
    def n_vertices(self):
        return self._coords.n

    def _areas(self, ids):
        p = self.coords[self.verts[ids]]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def midpoint_of(self, keys):
        """Vertex id of the midpoint of each edge key, or -1 if never created."""
        if self._mid_keys.size == 0:
            return np.full(len(keys), -1, dtype=np.int64)
        pos = np.searchsorted(self._mid_keys, keys)
        pos = np.minimum(pos, len(self._mid_keys) - 1)
        hit = self._mid_keys[pos] == keys
        return np.where(hit, self._mid_vals[pos], -1)

    def bisect(self, ids):
        """Children of the given elements, creating them where needed.

        Returns
        -------
        ndarray, shape (n, 2)
        """
        ids = np.asarray(ids, dtype=np.int64)
        fresh = ids[self.children[ids, 0] < 0]
        if fresh.size:
            fresh = np.unique(fresh)
            v = self.verts[fresh]
            peak, a, b = v[:, 0], v[:, 1], v[:, 2]
            keys = _edge_key(a, b)
            mid = self.midpoint_of(keys)
            missing = mid < 0
            if missing.any():
                new_keys, first, inv = np.unique(keys[missing], return_index=True, return_inverse=True)
                ends_a = a[missing][first]
                ends_b = b[missing][first]
                start = self.n_vertices
                self._coords.extend(0.5 * (self.coords[ends_a] + self.coords[ends_b]))
                vd = self._vdepth.a
                self._vdepth.extend(1 + np.maximum(vd[ends_a], vd[ends_b]))
                new_ids = start + np.arange(len(new_keys), dtype=np.int64)
                mid[missing] = new_ids[inv.ravel()]
                allk = np.concatenate([self._mid_keys, new_keys])
                allv = np.concatenate([self._mid_vals, new_ids])
                order = np.argsort(allk, kind="stable")
                self._mid_keys, self._mid_vals = allk[order], allv[order]
            bnd = self.side_boundary[fresh]
            n = len(fresh)
            c0 = np.stack([mid, peak, a], axis=1)
            c1 = np.stack([mid, b, peak], axis=1)
            b0 = np.stack([bnd[:, 2], bnd[:, 0], np.zeros(n, bool)], axis=1)
            b1 = np.stack([bnd[:, 1], np.zeros(n, bool), bnd[:, 0]], axis=1)
            first_child = self.n_elements
            # interleave so that the children of one parent get consecutive ids
            self._verts.extend(np.stack([c0, c1], axis=1).reshape(-1, 3))
            self._bnd.extend(np.stack([b0, b1], axis=1).reshape(-1, 3))
            self._parent.extend(np.repeat(fresh, 2))
            self._child.extend(np.full((2 * n, 2), -1, dtype=np.int64))
            self._gen.extend(np.repeat(self.generation[fresh] + 1, 2))
            self._root.extend(np.repeat(self._root.a[fresh], 2))
            kids = first_child + np.arange(2 * n, dtype=np.int64).reshape(n, 2)
            self._child.buf[fresh] = kids
        return self.children[ids]

    def leaf_mask(self, leaves):
        mask = np.zeros(self.n_elements, dtype=bool)
        mask[leaves] = True
        return mask


class Mesh:
    """Immutable conforming triangulation: a set of leaves of a :class:`Forest`.

    Per-element arrays are ordered like ``leaves`` (ascending element id).
    Vertices are numbered locally in ascending forest-vertex order.
    """

    def __init__(self, forest, leaves):
        self.forest = forest
        leaves = np.unique(np.asarray(leaves, dtype=np.int64))
        leaves.setflags(write=False)
        self.leaves = leaves

    @classmethod
    def from_macro(cls, points, triangles):
        forest = Forest(points, triangles)
        return cls(forest, np.arange(forest.n_roots))

    def __len__(self):
        return len(self.leaves)

    @cached_property
    def key(self):
        return (id(self.forest), hash(self.leaves.tobytes()), len(self.leaves))

    def __eq__(self, other):
        return (isinstance(other, Mesh) and other.forest is self.forest
                and np.array_equal(other.leaves, self.leaves))

    def __hash__(self):
        return hash(self.key)

    def __le__(self, other):
        """True when ``other`` is a refinement of ``self``."""
        _same_forest(self, other)
        return bool(np.all(_ancestor_positions(self, other.leaves, strict=False) >= 0))

    def __ge__(self, other):
        return other.__le__(self)

    @cached_property
    def vertex_ids(self):
        return np.unique(self.forest.verts[self.leaves])

    @cached_property
    def cells(self):
        local = np.full(self.forest.n_vertices, -1, dtype=np.int64)
        local[self.vertex_ids] = np.arange(len(self.vertex_ids))
        return local[self.forest.verts[self.leaves]]

    @cached_property
    def points(self):
        return self.forest.coords[self.vertex_ids]

    @property
    def n_vertices(self):
        return len(self.vertex_ids)

    @cached_property
    def side_boundary(self):
        return self.forest.side_boundary[self.leaves]

    @cached_property
    def boundary_vertex(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        c = self.cells
        for k in range(3):
            on = self.side_boundary[:, k]
            mask[c[on, (k + 1) % 3]] = True
            mask[c[on, (k + 2) % 3]] = True
        return mask

    @cached_property
    def areas(self):
        p = self.points[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def h(self):
        return np.sqrt(self.areas)

    @cached_property
    def grads(self):
        """Gradients of the barycentric coordinates, shape (ne, 3, 2)."""
        p = self.points[self.cells]
        g = np.empty((len(self.leaves), 3, 2))
        two_a = 2.0 * self.areas
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            e = p[:, j] - p[:, i]
            g[:, k, 0] = -e[:, 1] / two_a
            g[:, k, 1] = e[:, 0] / two_a
        return g

    @cached_property
    def _side_data(self):
        c = self.cells
        ne = len(c)
        a = np.concatenate([c[:, (k + 1) % 3] for k in range(3)])
        b = np.concatenate([c[:, (k + 2) % 3] for k in range(3)])
        keys = _edge_key(a, b)
        uniq, first, inv, counts = np.unique(keys, return_index=True, return_inverse=True,
                                             return_counts=True)
        inv = inv.ravel()
        owner = np.tile(np.arange(ne), 3)
        side_elems = np.full((len(uniq), 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        sorted_inv = inv[order]
        is_first = np.r_[True, sorted_inv[1:] != sorted_inv[:-1]]
        side_elems[sorted_inv[is_first], 0] = owner[order[is_first]]
        side_elems[sorted_inv[~is_first], 1] = owner[order[~is_first]]
        sides = np.stack([a[first], b[first]], axis=1)
        return sides, side_elems, inv.reshape(3, ne).T, counts

    @property
    def sides(self):
        """Vertex pairs of all sides, shape (ns, 2)."""
        return self._side_data[0]

    @property
    def side_elements(self):
        """Adjacent element positions per side, -1 on the boundary, shape (ns, 2)."""
        return self._side_data[1]

    @property
    def element_sides(self):
        """Side index of side k of each element, shape (ne, 3)."""
        return self._side_data[2]

    def positions(self, element_ids):
        """Local positions of forest element ids that are leaves of this mesh."""
        element_ids = np.asarray(element_ids, dtype=np.int64)
        pos = np.searchsorted(self.leaves, element_ids)
        pos = np.minimum(pos, len(self.leaves) - 1)
        if not np.all(self.leaves[pos] == element_ids):
            raise InputError("element id is not a leaf of this mesh")
        return pos

    def min_angle(self):
        p = self.points[self.cells]
        ang = []
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            cosv = np.sum(u * v, axis=1) / np.linalg.norm(u, axis=1) / np.linalg.norm(v, axis=1)
            ang.append(np.arccos(np.clip(cosv, -1.0, 1.0)))
        return float(np.degrees(np.min(ang)))


def square_mesh(n=1, length=1.0):
    """(0, length)^2 split into n x n squares, each cut by its rising diagonal."""
    if n < 1 or length <= 0:
        raise InputError("square_mesh needs n >= 1 and length > 0")
    g = np.linspace(0.0, length, n + 1)
    x, y = np.meshgrid(g, g, indexing="xy")
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10, v01, v11 = idx[j, i], idx[j, i + 1], idx[j + 1, i], idx[j + 1, i + 1]
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return Mesh.from_macro(pts, tris)


def _same_forest(a, b):
    if a.forest is not b.forest:
        raise InputError("meshes belong to different bisection forests")


def _ancestor_positions(coarse, fine_ids, strict=True):
    """Position in ``coarse.leaves`` of the ancestor-or-self of each fine element.

    Elements without such an ancestor get -1, or raise when ``strict``.
    """
    f = coarse.forest
    is_leaf = f.leaf_mask(coarse.leaves)
    cur = np.array(fine_ids, dtype=np.int64)
    found = is_leaf[cur]
    parent = f.parent
    while True:
        todo = ~found & (cur >= 0)
        if not todo.any():
            break
        cur[todo] = parent[cur[todo]]
        ok = cur >= 0
        found[ok] = is_leaf[cur[ok]]
    if strict and np.any(cur < 0):
        raise InputError("mesh is not a refinement of the reference mesh")
    return np.where(cur >= 0, np.searchsorted(coarse.leaves, np.maximum(cur, 0)), -1)


def ancestor_positions(coarse, fine):
    """Map each element of ``fine`` to the containing element of ``coarse``.

    Requires ``coarse <= fine``.
    """
    _same_forest(coarse, fine)
    return _ancestor_positions(coarse, fine.leaves, strict=True)


def _hanging(forest, leaves):
    # leaves owning a side whose midpoint is a vertex of the mesh
    v = forest.verts[leaves]
    bnd = forest.side_boundary[leaves]
    a = np.concatenate([v[:, (k + 1) % 3] for k in range(3)])
    b = np.concatenate([v[:, (k + 2) % 3] for k in range(3)])
    inner = ~np.concatenate([bnd[:, k] for k in range(3)])
    keys = _edge_key(a, b)
    uniq, inv, counts = np.unique(keys[inner], return_inverse=True, return_counts=True)
    lonely = np.flatnonzero(inner)[counts[inv.ravel()] == 1]
    if lonely.size == 0:
        return lonely
    mid = forest.midpoint_of(keys[lonely])
    has = mid >= 0
    if not has.any():
        return np.empty(0, dtype=np.int64)
    active = np.zeros(forest.n_vertices, dtype=bool)
    active[v.ravel()] = True
    hang = lonely[has][active[mid[has]]]
    return np.unique(leaves[hang % len(leaves)])


def refine(mesh, marked):
    """Bisect every marked element once and close the result to a conforming mesh.

    Parameters
    ----------
    mesh : Mesh
    marked : array_like of int
        Forest ids of leaves to bisect.

    Returns
    -------
    Mesh
        The coarsest conforming refinement in which every marked element is bisected.
    """
    forest = mesh.forest
    todo = np.unique(np.asarray(marked, dtype=np.int64))
    if todo.size == 0:
        return mesh
    mesh.positions(todo)
    leaves = mesh.leaves
    while todo.size:
        kids = forest.bisect(todo)
        keep = ~np.isin(leaves, todo, assume_unique=True)
        leaves = np.concatenate([leaves[keep], kids.ravel()])
        todo = _hanging(forest, leaves)
    return Mesh(forest, leaves)


def refine_uniform(mesh, times=1):
    for _ in range(times):
        mesh = refine(mesh, mesh.leaves)
    return mesh


def coarsen(mesh, rounds=1):
    """Undo bisections where this keeps the mesh conforming.

    Each round removes every vertex whose surrounding leaves are all
    children carrying it as their newest vertex with leaf siblings, and
    replaces those children by their parents.  A leaf therefore loses at
    most ``rounds`` generations and macro elements are never merged.
    """
    if rounds < 0:
        raise InputError("rounds must be nonnegative")
    forest = mesh.forest
    leaves = mesh.leaves
    for _ in range(rounds):
        par = forest.parent[leaves]
        has_parent = par >= 0
        is_leaf = forest.leaf_mask(leaves)
        kids = forest.children[np.maximum(par, 0)]
        sib = np.where(kids[:, 0] == leaves, kids[:, 1], kids[:, 0])
        ok = has_parent & is_leaf[sib]
        v = forest.verts[leaves]
        nv = forest.n_vertices
        around = np.bincount(v.ravel(), minlength=nv)
        peaks = np.bincount(v[ok, 0], minlength=nv)
        removable = (around == peaks) & (peaks > 0)
        merge = ok & removable[v[:, 0]]
        if not merge.any():
            break
        leaves = np.concatenate([leaves[~merge], np.unique(par[merge])])
        leaves = np.sort(leaves)
    if leaves is mesh.leaves:
        return mesh
    return Mesh(forest, leaves)


def overlay(a, b):
    """Common refinement of two meshes of the same forest (the deeper leaves win)."""
    _same_forest(a, b)
    if a is b or a == b:
        return a
    forest = a.forest
    union = np.union1d(a.leaves, b.leaves)
    covered = np.zeros(forest.n_elements, dtype=bool)
    cur = forest.parent[union]
    cur = cur[cur >= 0]
    while cur.size:
        cur = np.unique(cur)
        cur = cur[~covered[cur]]
        covered[cur] = True
        cur = forest.parent[cur]
        cur = cur[cur >= 0]
    return Mesh(forest, union[~covered[union]])


def _bary(p, tri):
    p0, p1, p2 = tri
    d = (p1[1] - p2[1]) * (p0[0] - p2[0]) + (p2[0] - p1[0]) * (p0[1] - p2[1])
    l0 = ((p1[1] - p2[1]) * (p[0] - p2[0]) + (p2[0] - p1[0]) * (p[1] - p2[1])) / d
    l1 = ((p2[1] - p0[1]) * (p[0] - p2[0]) + (p0[0] - p2[0]) * (p[1] - p2[1])) / d
    return np.array([l0, l1, 1.0 - l0 - l1])


def locate(mesh, point, tol=1e-12):
    """Forest id of the leaf containing ``point``.

    Points on shared sides or vertices resolve to the lowest element id
    among the containing leaves.
    """
    forest = mesh.forest
    p = np.asarray(point, dtype=float)
    is_leaf = forest.leaf_mask(mesh.leaves)
    coords, verts, children = forest.coords, forest.verts, forest.children
    found = []
    stack = [r for r in range(forest.n_roots)]
    while stack:
        e = stack.pop()
        if np.min(_bary(p, coords[verts[e]])) < -tol:
            continue
        if is_leaf[e]:
            found.append(e)
        elif children[e, 0] >= 0:
            stack.extend(children[e])
    if not found:
        raise InputError(f"point {tuple(p)} lies outside the domain")
    return int(min(found))


def locate_points(mesh, points, tol=1e-10):
    """Containing leaf position and barycentric coordinates for many points.

    Ties on shared sides are resolved arbitrarily, which is harmless for
    continuous piecewise linear functions.

    Returns
    -------
    pos : ndarray of int, shape (n,)
        Positions in ``mesh.leaves``.
    bary : ndarray, shape (n, 3)
    """
    forest = mesh.forest
    pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 2)
    is_leaf = forest.leaf_mask(mesh.leaves).astype(np.uint8)
    elem, bary = kernels.locate_points(pts, forest.coords, forest.verts, forest.children,
                                       forest.n_roots, is_leaf)
    if np.any(elem < 0) or np.any(bary.min(axis=1) < -tol * 1e4):
        raise InputError("point lies outside the domain")
    return np.searchsorted(mesh.leaves, elem), bary


def audit(mesh):
    """Check the structural invariants of a mesh; returns a list of problems."""
    problems = []
    f = mesh.forest
    if np.any(mesh.areas <= 0):
        problems.append("non-positive element area")
    if abs(mesh.areas.sum() - f.domain_area) > 1e-12 * max(1.0, f.domain_area):
        problems.append("leaves do not partition the domain")
    # no leaf may be an ancestor of another
    covered = np.zeros(f.n_elements, dtype=bool)
    cur = f.parent[mesh.leaves]
    cur = cur[cur >= 0]
    while cur.size:
        cur = np.unique(cur)
        covered[cur] = True
        cur = f.parent[cur]
        cur = cur[cur >= 0]
    if covered[mesh.leaves].any():
        problems.append("leaf is an ancestor of another leaf")
    counts = mesh._side_data[3]
    side_bnd = np.zeros(len(mesh.sides), dtype=bool)
    side_bnd[mesh.element_sides[mesh.side_boundary]] = True
    if np.any(counts > 2):
        problems.append("side shared by more than two elements")
    if np.any((counts == 1) & ~side_bnd):
        problems.append("hanging node")
    if np.any((counts == 2) & side_bnd):
        problems.append("boundary side shared by two elements")
    return problems
