"""Pure numpy/scipy versions of the compiled kernels."""

import numpy as np
import scipy.sparse as sp


def pcg_jacobi(indptr, indices, data, b, x0, rtol, maxiter):
    """Jacobi-preconditioned conjugate gradients on a CSR matrix.

    Stops when ``||r|| <= rtol * ||b||``.

    Returns
    -------
    x : ndarray
    iterations : int
    converged : bool
    """
    n = len(b)
    a = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    inv_diag = 1.0 / a.diagonal()
    x = np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, True
    r = b - a @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for k in range(maxiter):
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, k, True
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, bool(np.linalg.norm(r) <= rtol * bnorm)


def _bary(pts, tri):
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    d = (p1[:, 1] - p2[:, 1]) * (p0[:, 0] - p2[:, 0]) + (p2[:, 0] - p1[:, 0]) * (p0[:, 1] - p2[:, 1])
    dx = pts[:, 0] - p2[:, 0]
    dy = pts[:, 1] - p2[:, 1]
    l0 = ((p1[:, 1] - p2[:, 1]) * dx + (p2[:, 0] - p1[:, 0]) * dy) / d
    l1 = ((p2[:, 1] - p0[:, 1]) * dx + (p0[:, 0] - p2[:, 0]) * dy) / d
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=1)


def locate_points(pts, coords, verts, children, n_roots, is_leaf):
    """Descend the bisection forest to the leaf containing each point.

    At every level the candidate with the largest minimal barycentric
    coordinate wins, so points slightly outside due to rounding still land.

    Returns
    -------
    elem : ndarray of int64
        Forest element ids, -1 if no root was found.
    bary : ndarray, shape (n, 3)
    """
    n = len(pts)
    best = np.full(n, -np.inf)
    elem = np.full(n, -1, dtype=np.int64)
    for r in range(n_roots):
        tri = np.broadcast_to(coords[verts[r]], (n, 3, 2))
        m = _bary(pts, tri).min(axis=1)
        better = m > best
        best[better] = m[better]
        elem[better] = r
    elem[best < -1e-6] = -1
    leaf = np.asarray(is_leaf, dtype=bool)
    active = np.flatnonzero((elem >= 0) & ~leaf[np.maximum(elem, 0)])
    while active.size:
        kids = children[elem[active]]
        p = pts[active]
        m0 = _bary(p, coords[verts[kids[:, 0]]]).min(axis=1)
        m1 = _bary(p, coords[verts[kids[:, 1]]]).min(axis=1)
        elem[active] = np.where(m0 >= m1, kids[:, 0], kids[:, 1])
        active = active[~leaf[elem[active]]]
    bary = np.zeros((n, 3))
    ok = elem >= 0
    bary[ok] = _bary(pts[ok], coords[verts[elem[ok]]])
    return elem, bary
