"""Discontinuous Galerkin time stepping and its Radau reconstruction."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import Polynomial
from numpy.polynomial import legendre as leg

from stafem.errors import DataError, InputError, NumericError
from stafem.fespace import (DiscreteFunction, cross_mass, l2_project, load_vector,
                            prolongation, quadrature_points, solve_spd)
from stafem.mesh import overlay
from stafem.quadrature import time_rule


@dataclass(frozen=True)
class RadauTable:
    """Right Radau points on (0, 1] with weights and the reconstruction constant.

    Attributes
    ----------
    s : int
        Polynomial degree in time of the dG(s) scheme.
    nodes : ndarray, shape (s + 1,)
        ``c_1 < ... < c_{s+1} = 1``.
    weights : ndarray, shape (s + 1,)
    C_tau : float
        ``int_0^1 L_0^2``.
    """

    s: int
    nodes: np.ndarray
    weights: np.ndarray
    C_tau: float


def _radau_poly(s, t):
    x = 2.0 * np.asarray(t) - 1.0
    cs = np.zeros(s + 2)
    cs[s] = 1.0
    cs[s + 1] = -1.0
    return leg.legval(x, cs), 2.0 * leg.legval(x, leg.legder(cs))


def _newton_roots(s):
    n = s + 1
    k = np.arange(n)
    t = 0.5 * (1.0 - np.cos((2 * k + 1) * np.pi / (2 * n + 1)))
    t[-1] = 1.0
    for _ in range(100):
        p, dp = _radau_poly(s, t)
        step = p / dp
        t = t - step
        if np.max(np.abs(step)) < 1e-15:
            break
    return np.sort(t)


def radau_table(s):
    """Radau IIA nodes and weights for dG(s).

    The nodes are the roots of ``P_s(2t-1) - P_{s+1}(2t-1)`` (Legendre
    polynomials), found by Newton's method from Chebyshev-type guesses; the
    weights solve the moment conditions ``sum_j b_j c_j^k = 1/(k+1)``.
    """
    if int(s) != s or s < 0:
        raise InputError("s must be a nonnegative integer")
    s = int(s)
    c = _newton_roots(s)
    if np.any(np.diff(c) <= 1e-10) or c[0] <= 0.0 or abs(c[-1] - 1.0) > 1e-12:
        cs = np.zeros(s + 2)
        cs[s], cs[s + 1] = 1.0, -1.0
        c = np.sort((leg.legroots(cs).real + 1.0) / 2.0)
        for _ in range(5):
            p, dp = _radau_poly(s, c)
            c = c - p / dp
    c[-1] = 1.0
    V = np.vander(c, s + 1, increasing=True).T
    b = np.linalg.solve(V, 1.0 / np.arange(1, s + 2))
    C_tau = 0.25 * (1.0 / (2 * s + 3) + 1.0 / (2 * s + 1))
    return RadauTable(s, c, b, C_tau)


def lagrange_basis(table):
    """Lagrange polynomials on ``{0, c_1, ..., c_{s+1}}`` as :class:`numpy.polynomial.Polynomial`.

    ``L_0`` vanishes at all Radau points and equals one at 0.
    """
    z = np.concatenate([[0.0], table.nodes])
    basis = []
    for j in range(len(z)):
        others = np.delete(z, j)
        p = Polynomial.fromroots(others)
        basis.append(p / p(z[j]))
    return basis


def stage_basis(table):
    """Lagrange polynomials on the Radau points alone (degree s)."""
    c = table.nodes
    if len(c) == 1:
        return [Polynomial([1.0])]
    basis = []
    for j in range(len(c)):
        p = Polynomial.fromroots(np.delete(c, j))
        basis.append(p / p(c[j]))
    return basis


def radau_matrix(table):
    """Butcher matrix ``a_ij = int_0^{c_i} l_j`` of the Radau IIA method."""
    ell = stage_basis(table)
    c = table.nodes
    return np.array([[ell[j].integ()(c[i]) for j in range(len(c))] for i in range(len(c))])


class DataPolynomial:
    """Time polynomial of degree s with spatial fields as Legendre coefficients.

    ``coeffs[k]`` multiplies ``P_k(2 (t - t0) / tau - 1)``.
    """

    def __init__(self, t0, tau, coeffs):
        self.t0 = t0
        self.tau = tau
        self.coeffs = np.asarray(coeffs, dtype=float)

    @property
    def degree(self):
        return len(self.coeffs) - 1

    def at(self, t):
        theta = 2.0 * (np.asarray(t, dtype=float) - self.t0) / self.tau - 1.0
        vals = leg.legvander(np.atleast_1d(theta), self.degree)  # (nt, s+1)
        out = np.tensordot(vals, self.coeffs, axes=(1, 0))
        return out if np.ndim(t) else out[0]

    def norm2_density(self):
        """``int_I |fbar|^2 dt`` pointwise in space."""
        k = np.arange(self.degree + 1)
        w = self.tau / (2 * k + 1)
        return np.tensordot(w, self.coeffs ** 2, axes=(0, 0))


def project_data(f, t0, tau, s, x, y, n_time=None, singular_times=()):
    """Time-L2 projection of ``f(x, y, t)`` onto polynomials of degree s.

    The projection is computed pointwise at the given spatial points with
    a Gauss rule of ``n_time`` points (default ``s + 3``) graded towards
    ``singular_times``.
    """
    if tau <= 0:
        raise InputError("tau must be positive")
    n_time = s + 3 if n_time is None else n_time
    tq, wq = time_rule(t0, tau, n_time, singular_times)
    theta = 2.0 * (tq - t0) / tau - 1.0
    P = leg.legvander(theta, s)  # (nq, s+1)
    coeffs = np.zeros((s + 1,) + np.shape(x))
    for q in range(len(tq)):
        fq = np.broadcast_to(np.asarray(f(x, y, tq[q]), dtype=float), np.shape(x))
        coeffs += wq[q] * np.multiply.outer(P[q], fq)
    k = np.arange(s + 1)
    scale = (2 * k + 1) / tau
    coeffs *= scale.reshape((-1,) + (1,) * (coeffs.ndim - 1))
    if not np.all(np.isfinite(coeffs)):
        raise DataError("right-hand side is not finite on the slab")
    return DataPolynomial(t0, tau, coeffs)


@dataclass
class SlabSolution:
    """Discrete solution on one time slab ``(t0, t0 + tau]``.

    Attributes
    ----------
    stages : list of DiscreteFunction
        ``U(t0 + c_j tau)`` on the slab space.
    u_minus : DiscreteFunction
        Trace from the previous slab, possibly on another mesh.
    fbar : DataPolynomial
        Projected data, sampled at the quadrature points of the slab mesh.
    """

    t0: float
    tau: float
    table: RadauTable
    space: object
    forms: object
    u_minus: DiscreteFunction
    stages: list
    fbar: DataPolynomial

    @property
    def t1(self):
        return self.t0 + self.tau

    @property
    def u_end(self):
        return self.stages[-1]

    @cached_property
    def u_start(self):
        """Right limit ``U(t0+)`` of the dG polynomial."""
        ell = stage_basis(self.table)
        coeffs = sum(ell[j](0.0) * self.stages[j].coeffs for j in range(len(self.stages)))
        return DiscreteFunction(self.space, coeffs)

    def discrete_at(self, t):
        """dG solution at time ``t`` in the slab."""
        theta = (t - self.t0) / self.tau
        ell = stage_basis(self.table)
        coeffs = sum(ell[j](theta) * self.stages[j].coeffs for j in range(len(self.stages)))
        return DiscreteFunction(self.space, coeffs)

    @cached_property
    def projected_minus(self):
        """L2 projection of ``u_minus`` onto the slab space."""
        return l2_project(self.u_minus, self.space)

    @cached_property
    def transfer(self):
        return SlabTransfer(self.u_minus.mesh, self.space.mesh)


class SlabTransfer:
    """Overlay of the previous and the current mesh with both prolongations."""

    def __init__(self, old_mesh, new_mesh):
        self.old = old_mesh
        self.new = new_mesh
        self.mesh = overlay(old_mesh, new_mesh)
        self.P_old = prolongation(old_mesh, self.mesh)
        self.P_new = prolongation(new_mesh, self.mesh)


def solve_slab(space, forms, u_minus, fbar, t0, tau, table=None, rtol=1e-10):
    """One dG(s) step.

    For s = 0 this solves ``(M + tau K) U = <u_minus, phi> + tau <fbar, phi>``
    by preconditioned CG; higher degrees use the equivalent Radau IIA
    stage system, solved directly.

    Parameters
    ----------
    space : FeSpace
    forms : AssembledForms
        Assembled on ``space.mesh`` with the coefficients of this slab.
    u_minus : DiscreteFunction
    fbar : DataPolynomial
        Projected data at the quadrature points of ``space.mesh``.
    """
    table = radau_table(0) if table is None else table
    if tau <= 0:
        raise InputError("tau must be positive")
    K, M = forms.restricted(space)
    m_u = cross_mass(u_minus, space)
    s = table.s
    if s == 0:
        rhs = m_u + tau * load_vector(space, fbar.at(t0 + tau))
        x0 = u_minus.coeffs if u_minus.space == space else None
        U = solve_spd(M + tau * K, rhs, rtol=rtol, x0=x0)
        stages = [DiscreteFunction(space, U)]
    else:
        a = radau_matrix(table)
        n = space.n_dofs
        loads = np.concatenate([load_vector(space, fbar.at(t0 + c * tau)) for c in table.nodes])
        big = sp.kron(sp.identity(s + 1), M) + tau * sp.kron(sp.csr_matrix(a), K)
        rhs = np.tile(m_u, s + 1) + tau * (np.kron(a, np.eye(n)) @ loads if n < 400 else
                                           sp.kron(sp.csr_matrix(a), sp.identity(n)) @ loads)
        Y = spla.spsolve(big.tocsc(), rhs)
        if not np.all(np.isfinite(Y)):
            raise NumericError("stage system solve failed")
        stages = [DiscreteFunction(space, Y[j * n:(j + 1) * n]) for j in range(s + 1)]
    return SlabSolution(t0, tau, table, space, forms, u_minus, stages, fbar)


class Reconstruction:
    """Radau reconstruction of a slab solution, represented on the overlay mesh.

    ``U_hat(t) = L_0(theta) u_minus + sum_j L_j(theta) U(t0 + c_j tau)``.
    """

    def __init__(self, slab):
        self.slab = slab
        self.transfer = slab.transfer
        self.basis = lagrange_basis(slab.table)
        self.dbasis = [p.deriv() for p in self.basis]
        tr = self.transfer
        cols = [tr.P_old @ slab.u_minus.vertex_values]
        cols += [tr.P_new @ st.vertex_values for st in slab.stages]
        self.values = np.stack(cols)  # (s+2, nv_overlay)

    @property
    def mesh(self):
        return self.transfer.mesh

    def at(self, t):
        theta = (t - self.slab.t0) / self.slab.tau
        w = np.array([p(theta) for p in self.basis])
        return w @ self.values

    def dt_at(self, t):
        theta = (t - self.slab.t0) / self.slab.tau
        w = np.array([p(theta) for p in self.dbasis]) / self.slab.tau
        return w @ self.values

    def discrete_at(self, t):
        """dG solution at ``t`` prolonged to the overlay."""
        return self.transfer.P_new @ self.slab.discrete_at(t).vertex_values


def reconstruct(slab):
    return Reconstruction(slab)


def slab_data(problem_f, space, t0, tau, s, singular_times=()):
    """Project the right-hand side onto the slab at the quadrature points of ``space``."""
    pts, _ = quadrature_points(space.mesh)
    return project_data(problem_f, t0, tau, s, pts[..., 0], pts[..., 1],
                        singular_times=singular_times)
