"""
Continuous piecewise linear finite elements on bisection meshes.

Degrees of freedom are the interior vertices (homogeneous Dirichlet
condition) unless a space is built with ``dirichlet=False``.  Functions
living on different meshes of one forest are compared on the overlay
mesh, where both are piecewise linear, so cross-mesh inner products and
projections are exact up to roundoff.
"""

import numpy as np
import scipy.sparse as sp

from stafem import kernels
from stafem.errors import DataError, InputError, NumericError
from stafem.mesh import ancestor_positions, locate_points, overlay
from stafem.quadrature import TRI_BARY, TRI_WEIGHTS, triangle_points


def _mesh_cache(mesh):
    return mesh.__dict__.setdefault("_fe_cache", {})


class FeSpace:
    """P1 space on a mesh.

    Parameters
    ----------
    mesh : Mesh
    dirichlet : bool
        Drop boundary vertices from the dofs (zero boundary values).
    """

    def __init__(self, mesh, dirichlet=True):
        self.mesh = mesh
        self.dirichlet = dirichlet
        if dirichlet:
            self.free = np.flatnonzero(~mesh.boundary_vertex)
        else:
            self.free = np.arange(mesh.n_vertices)
        self.n_dofs = len(self.free)

    def __eq__(self, other):
        return isinstance(other, FeSpace) and other.mesh == self.mesh and other.dirichlet == self.dirichlet

    def __hash__(self):
        return hash((self.mesh.key, self.dirichlet))

    def scatter(self, coeffs):
        """Vertex values from dof coefficients."""
        v = np.zeros(self.mesh.n_vertices)
        v[self.free] = coeffs
        return v

    def zero(self):
        return DiscreteFunction(self, np.zeros(self.n_dofs))

    @property
    def dof_points(self):
        return self.mesh.points[self.free]


class DiscreteFunction:
    """Element of a :class:`FeSpace` given by its dof coefficients."""

    def __init__(self, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.n_dofs,):
            raise InputError(f"expected {space.n_dofs} coefficients, got {coeffs.shape}")
        self.space = space
        self.coeffs = coeffs

    @property
    def mesh(self):
        return self.space.mesh

    @property
    def vertex_values(self):
        return self.space.scatter(self.coeffs)

    def __add__(self, other):
        _check_same_space(self, other)
        return DiscreteFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same_space(self, other)
        return DiscreteFunction(self.space, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return DiscreteFunction(self.space, scalar * self.coeffs)

    __rmul__ = __mul__

    def __repr__(self):
        return f"DiscreteFunction(n_dofs={self.space.n_dofs})"


def _check_same_space(a, b):
    if a.space != b.space:
        raise InputError("functions live on different spaces")


def quadrature_points(mesh):
    """Order-4 quadrature points (ne, 6, 2) and weights (ne, 6) of a mesh."""
    cache = _mesh_cache(mesh)
    if "qp" not in cache:
        p = mesh.points[mesh.cells]
        pts = triangle_points(p[:, 0], p[:, 1], p[:, 2])
        cache["qp"] = (pts, mesh.areas[:, None] * TRI_WEIGHTS[None, :])
    return cache["qp"]


def _assemble_csr(mesh, local):
    c = mesh.cells
    rows = np.repeat(c, 3, axis=1).ravel()
    cols = np.tile(c, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def element_mass(mesh):
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return mesh.areas[:, None, None] * ref[None]


def mass_matrix(mesh):
    """Vertex-level P1 mass matrix (cached on the mesh)."""
    cache = _mesh_cache(mesh)
    if "mass" not in cache:
        cache["mass"] = _assemble_csr(mesh, element_mass(mesh))
    return cache["mass"]


def sample_coefficients(mesh, A=None, c=None):
    """Diffusion tensor and reaction coefficient at the quadrature points.

    ``A(x, y)`` must return shape (n, 2, 2) and ``c(x, y)`` shape (n,).
    ``None`` stands for the identity and zero respectively.
    """
    pts, _ = quadrature_points(mesh)
    ne = len(mesh.leaves)
    x = pts[..., 0].ravel()
    y = pts[..., 1].ravel()
    if A is None:
        Aq = np.broadcast_to(np.eye(2), (ne, 6, 2, 2))
    else:
        Aq = np.asarray(A(x, y), dtype=float).reshape(ne, 6, 2, 2)
        if not np.all(np.isfinite(Aq)):
            raise DataError("diffusion coefficient is not finite")
        sym = np.abs(Aq[..., 0, 1] - Aq[..., 1, 0])
        det = Aq[..., 0, 0] * Aq[..., 1, 1] - Aq[..., 0, 1] * Aq[..., 1, 0]
        if np.any(sym > 1e-12 * np.abs(Aq).max()) or np.any(Aq[..., 0, 0] <= 0) or np.any(det <= 0):
            raise DataError("diffusion coefficient is not symmetric positive definite")
    if c is None:
        cq = np.zeros((ne, 6))
    else:
        cq = np.asarray(c(x, y), dtype=float).reshape(ne, 6)
        if not np.all(np.isfinite(cq)) or np.any(cq < 0):
            raise DataError("reaction coefficient must be finite and nonnegative")
    return Aq, cq


class AssembledForms:
    """Energy form and mass form of one mesh for frozen coefficients.

    Attributes
    ----------
    element_energy : ndarray, shape (ne, 3, 3)
        Local matrices of ``B(w, v) = int A grad w . grad v + c w v``.
    element_mass : ndarray, shape (ne, 3, 3)
    A_elem : ndarray, shape (ne, 2, 2)
        Element average of the diffusion tensor.
    c_qp : ndarray, shape (ne, 6)
        Reaction coefficient at the quadrature points.
    K, M : scipy.sparse.csr_matrix
        Vertex-level global matrices.
    """

    def __init__(self, mesh, A=None, c=None):
        self.mesh = mesh
        self.coefficients = (A, c)
        Aq, cq = sample_coefficients(mesh, A, c)
        _, w = quadrature_points(mesh)
        ne = len(mesh.leaves)
        if A is None:
            A_int = mesh.areas[:, None, None] * np.eye(2)
        else:
            A_int = np.matmul(w[:, None, :], Aq.reshape(ne, 6, 4))[:, 0].reshape(ne, 2, 2)
        g = mesh.grads
        energy = np.matmul(np.matmul(g, A_int), g.transpose(0, 2, 1))
        if c is not None:
            outer = (TRI_BARY[:, :, None] * TRI_BARY[:, None, :]).reshape(6, 9)
            energy += ((w * cq) @ outer).reshape(ne, 3, 3)
        self.element_energy = energy
        self.element_mass = element_mass(mesh)
        self.A_elem = A_int / mesh.areas[:, None, None]
        self.c_qp = cq
        self.K = _assemble_csr(mesh, self.element_energy)
        self.M = mass_matrix(mesh)
        self._restricted = {}

    def restricted(self, space):
        """Dof-level (K, M) for a space on this mesh."""
        key = space.dirichlet
        if key not in self._restricted:
            f = space.free
            self._restricted[key] = (self.K[f][:, f].tocsr(), self.M[f][:, f].tocsr())
        return self._restricted[key]


def assemble(mesh, A=None, c=None):
    return AssembledForms(mesh, A, c)


def solve_spd(matrix, rhs, rtol=1e-10, x0=None):
    """Solve an SPD system by Jacobi-preconditioned CG.

    The iteration cap is ten times the dimension.  Failure to reach the
    relative residual ``rtol`` raises :class:`NumericError`.
    """
    n = len(rhs)
    if n == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(rhs)):
        raise NumericError("right-hand side is not finite")
    matrix = sp.csr_matrix(matrix)
    matrix.sort_indices()
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    x, its, ok = kernels.pcg_jacobi(matrix.indptr, matrix.indices, matrix.data,
                                    np.ascontiguousarray(rhs, dtype=float), x0, rtol, 10 * n)
    if not ok or not np.all(np.isfinite(x)):
        raise NumericError(f"CG did not converge in {its} iterations")
    return x


def prolongation(coarse, fine):
    """Vertex-level matrix mapping P1 vertex values on ``coarse`` to ``fine``.

    Requires ``coarse <= fine``; the transfer is then exact.
    """
    if coarse == fine:
        return sp.identity(coarse.n_vertices, format="csr")
    cache = _mesh_cache(fine)
    key = ("prolongation", coarse.key)
    if key not in cache:
        cache[key] = _prolongation(coarse, fine)
    return cache[key]


def _prolongation(coarse, fine):
    anc = ancestor_positions(coarse, fine)
    nv = fine.n_vertices
    # one fine element per fine vertex
    owner = np.empty(nv, dtype=np.int64)
    owner[fine.cells.ravel()] = np.repeat(np.arange(len(fine.leaves)), 3)
    tri = coarse.cells[anc[owner]]
    p = coarse.points[tri]
    q = fine.points
    d = (p[:, 1, 1] - p[:, 2, 1]) * (p[:, 0, 0] - p[:, 2, 0]) + (p[:, 2, 0] - p[:, 1, 0]) * (p[:, 0, 1] - p[:, 2, 1])
    dx = q[:, 0] - p[:, 2, 0]
    dy = q[:, 1] - p[:, 2, 1]
    l0 = ((p[:, 1, 1] - p[:, 2, 1]) * dx + (p[:, 2, 0] - p[:, 1, 0]) * dy) / d
    l1 = ((p[:, 2, 1] - p[:, 0, 1]) * dx + (p[:, 0, 0] - p[:, 2, 0]) * dy) / d
    lam = np.stack([l0, l1, 1.0 - l0 - l1], axis=1)
    lam[np.abs(lam) < 1e-13] = 0.0
    rows = np.repeat(np.arange(nv), 3)
    return sp.csr_matrix((lam.ravel(), (rows, tri.ravel())), shape=(nv, coarse.n_vertices))


def transfer_values(fn, mesh):
    """Vertex values of ``fn`` on a refinement ``mesh`` of its own mesh."""
    return prolongation(fn.mesh, mesh) @ fn.vertex_values


def interpolate(fn, space):
    """Lagrange interpolant: ``fn(x, y)`` evaluated at the dof vertices."""
    p = space.dof_points
    return DiscreteFunction(space, np.asarray(fn(p[:, 0], p[:, 1]), dtype=float))


def load_vector(space, values_qp):
    """Dof vector of ``int g phi_i`` for ``g`` given at the quadrature points."""
    mesh = space.mesh
    _, w = quadrature_points(mesh)
    local = (w * values_qp) @ TRI_BARY
    full = np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return full[space.free]


def cross_mass(source, target_space):
    """Dof vector ``<source, phi_i>`` for the basis of ``target_space``, exact via the overlay."""
    src_mesh, tgt_mesh = source.mesh, target_space.mesh
    if src_mesh == tgt_mesh:
        full = mass_matrix(src_mesh) @ source.vertex_values
        return full[target_space.free]
    ov = overlay(src_mesh, tgt_mesh)
    ps = prolongation(src_mesh, ov)
    pt = prolongation(tgt_mesh, ov)
    full = pt.T @ (mass_matrix(ov) @ (ps @ source.vertex_values))
    return full[target_space.free]


def l2_project(source, target_space, rtol=1e-13):
    """L2 projection onto ``target_space``.

    ``source`` is either a :class:`DiscreteFunction` on a mesh of the same
    forest (projected exactly via the overlay) or a callable ``f(x, y)``
    integrated by order-4 quadrature.
    """
    if isinstance(source, DiscreteFunction):
        if source.space == target_space:
            return DiscreteFunction(target_space, source.coeffs.copy())
        if source.mesh <= target_space.mesh:
            # nested spaces: the projection is the exact prolongation
            values = transfer_values(source, target_space.mesh)
            return DiscreteFunction(target_space, values[target_space.free])
        rhs = cross_mass(source, target_space)
    elif callable(source):
        pts, _ = quadrature_points(target_space.mesh)
        vals = np.asarray(source(pts[..., 0].ravel(), pts[..., 1].ravel()), dtype=float)
        rhs = load_vector(target_space, vals.reshape(pts.shape[:2]))
    else:
        raise InputError("source must be a DiscreteFunction or a callable")
    m = mass_matrix(target_space.mesh)[target_space.free][:, target_space.free]
    return DiscreteFunction(target_space, solve_spd(m, rhs, rtol=rtol))


def _quad_form(local, v):
    return np.sum(v * np.matmul(local, v[:, :, None])[:, :, 0], axis=1)


def element_energy2(forms, vertex_values):
    """Per-element squared energy norm of a P1 function given by vertex values."""
    v = vertex_values[forms.mesh.cells]
    return _quad_form(forms.element_energy, v)


def element_l2sq(mesh, vertex_values):
    v = vertex_values[mesh.cells]
    # local mass matrix is |E| (1 + delta_ij) / 12
    return mesh.areas * (v.sum(axis=1) ** 2 + (v * v).sum(axis=1)) / 12.0


def energy_norm(fn, forms):
    """Global energy norm ``sqrt(B(v, v))``."""
    if forms.mesh != fn.mesh:
        raise InputError("forms were assembled on a different mesh")
    v = fn.vertex_values
    return float(np.sqrt(max(v @ (forms.K @ v), 0.0)))


def l2_norm(fn):
    v = fn.vertex_values
    return float(np.sqrt(max(v @ (mass_matrix(fn.mesh) @ v), 0.0)))


def eval_on(fn, points):
    """Point values of a discrete function at arbitrary points of the domain."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pos, bary = locate_points(fn.mesh, pts)
    vals = fn.vertex_values[fn.mesh.cells[pos]]
    return np.sum(vals * bary, axis=1)


def values_at_quadrature(fn, mesh):
    """Values of ``fn`` at the quadrature points of ``mesh``, shape (ne, 6).

    Uses exact transfer when ``mesh`` refines the mesh of ``fn`` and point
    location otherwise.
    """
    if fn.mesh == mesh or fn.mesh <= mesh:
        v = transfer_values(fn, mesh)[mesh.cells]
        return v @ TRI_BARY.T
    pts, _ = quadrature_points(mesh)
    return eval_on(fn, pts.reshape(-1, 2)).reshape(pts.shape[:2])


def descend_sum(coarse, fine, values):
    """Sum per-element values of ``fine`` into the containing elements of ``coarse``."""
    anc = ancestor_positions(coarse, fine)
    return np.bincount(anc, weights=values, minlength=len(coarse.leaves))
