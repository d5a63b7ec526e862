"""
A posteriori indicators for one time slab.

All values are on the squared scale.  Local indicators are arrays aligned
with the leaves of the slab mesh.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as leg

from stafem.fespace import (AssembledForms, descend_sum, element_energy2, element_l2sq,
                            quadrature_points, values_at_quadrature)
from stafem.quadrature import (TRI4_BARY, TRI4_WEIGHTS, TRI_BARY, TRI_WEIGHTS, time_rule,
                               triangle_points)
from stafem.timestepping import lagrange_basis

C_G = 1.0


@dataclass
class Indicators:
    """Indicators of one slab.

    ``E_t`` and ``E_ctau`` are scalars; ``E_c``, ``E_G`` and ``E_star`` are
    per element of the slab mesh.  The remaining fields are the terms of
    the discrete energy balance of the slab: ``jump2`` is
    ``|||U(t0+) - Pi u-|||^2``, ``dt_l2`` is
    ``int_I ||Pi dt U_hat||^2``, ``pi_minus2`` and ``end2`` are the squared
    energy norms of ``Pi u-`` and of the final value, ``fbar2`` is
    ``int_I ||fbar||^2``.
    """

    E_t: float
    E_ctau: float
    E_c: np.ndarray
    E_G: np.ndarray
    E_star: np.ndarray
    dt_l2: float = 0.0
    pi_minus2: float = 0.0
    end2: float = 0.0
    fbar2: float = 0.0
    jump2: float = 0.0

    @property
    def E_c_sum(self):
        return float(np.sum(self.E_c))

    @property
    def E_G_sum(self):
        return float(np.sum(self.E_G))

    @property
    def E_star_sum(self):
        return float(np.sum(self.E_star))


def initial_error(u0, fn):
    """Per-element ``||u0 - fn||^2`` with the order-4 rule on four subtriangles."""
    mesh = fn.mesh
    p = mesh.points[mesh.cells]
    pts = triangle_points(p[:, 0], p[:, 1], p[:, 2], TRI4_BARY)
    exact = np.asarray(u0(pts[..., 0], pts[..., 1]), dtype=float)
    approx = fn.vertex_values[mesh.cells] @ TRI4_BARY.T
    return mesh.areas * np.sum(TRI4_WEIGHTS * (exact - approx) ** 2, axis=1)


def data_oscillation(f, t0, tau, s, rule, singular_times=()):
    """Time-consistency indicator ``3 inf_{g in P_s} int_I ||f - g||^2``.

    The best approximation is taken with respect to the same quadrature
    (``s + 4`` Gauss points in time, graded at singular times; ``rule`` in
    space), which keeps the value nonnegative.
    """
    pts, w = rule
    tq, wq = time_rule(t0, tau, s + 4, singular_times)
    theta = 2.0 * (tq - t0) / tau - 1.0
    P = leg.legvander(theta, s)  # (nq, s+1)
    F = np.stack([f(pts[:, 0], pts[:, 1], t) for t in tq])  # (nq, npts)
    # weighted least squares in time at every spatial point
    G = P.T @ (wq[:, None] * P)
    coef = np.linalg.solve(G, P.T @ (wq[:, None] * F))
    R = F - P @ coef
    return 3.0 * float(np.sum(wq[:, None] * R ** 2 * w[None, :]))


def _jumps(mesh, forms, vertex_values):
    """Per-element ``h_E * ||[A grad U . n]||^2`` over interior sides."""
    g = np.matmul(vertex_values[mesh.cells][:, None, :], mesh.grads)  # (ne, 1, 2)
    flux = np.matmul(g, forms.A_elem)[:, 0]  # A_elem is symmetric
    se = mesh.side_elements
    inner = se[:, 1] >= 0
    e0, e1 = se[inner, 0], se[inner, 1]
    sv = mesh.sides[inner]
    tvec = mesh.points[sv[:, 1]] - mesh.points[sv[:, 0]]
    length = np.linalg.norm(tvec, axis=1)
    normal = np.stack([tvec[:, 1], -tvec[:, 0]], axis=1) / length[:, None]
    jump = np.sum((flux[e0] - flux[e1]) * normal, axis=1)
    contrib = length * jump ** 2
    ne = len(mesh.leaves)
    per = np.bincount(e0, weights=contrib, minlength=ne) + np.bincount(e1, weights=contrib, minlength=ne)
    return mesh.h * per


def compute_indicators(slab, overlay_forms=None, transfer=None):
    """All solution-dependent indicators of a slab.

    Parameters
    ----------
    slab : SlabSolution
    overlay_forms : AssembledForms, optional
        Energy form on the overlay of the previous and current mesh with the
        coefficients of this slab; assembled here when not given.
    """
    table = slab.table
    tau = slab.tau
    C = table.C_tau
    space = slab.space
    mesh = space.mesh
    forms = slab.forms
    tr = slab.transfer if transfer is None else transfer
    ov = tr.mesh
    if overlay_forms is None:
        overlay_forms = forms if ov == mesh else AssembledForms(ov, *forms.coefficients)

    u_minus = slab.u_minus
    pi_minus = slab.projected_minus
    u_start = slab.u_start

    # temporal and coarsening terms
    diff_t = u_start.vertex_values - pi_minus.vertex_values
    jump2 = float(np.sum(element_energy2(forms, diff_t)))
    E_t = 6.0 * C * tau * jump2

    um_ov = tr.P_old @ u_minus.vertex_values
    us_ov = tr.P_new @ u_start.vertex_values
    pim_ov = tr.P_new @ pi_minus.vertex_values
    E_ctau = 3.0 * tau * C * float(np.sum(element_energy2(overlay_forms, um_ov - us_ov)))

    if ov == mesh:
        local_c = element_energy2(forms, pim_ov - um_ov)
        local_um = element_energy2(forms, um_ov)
    else:
        local_c = descend_sum(mesh, ov, element_energy2(overlay_forms, pim_ov - um_ov))
        local_um = descend_sum(mesh, ov, element_energy2(overlay_forms, um_ov))
    E_c = 6.0 * C * tau * local_c

    # energy indicator: |||Pi u-|||_E^2 - |||u-|||_E^2 - 1/2 int_I ||Pi dt U_hat||_E^2
    L = lagrange_basis(table)
    dL = [p.deriv() for p in L]
    nodes = [pi_minus.vertex_values] + [st.vertex_values for st in slab.stages]
    tg, wg = time_rule(0.0, 1.0, table.s + 1)
    dt_int = np.zeros(len(mesh.leaves))
    for th, wt in zip(tg, wg):
        d = sum(dL[k](th) * nodes[k] for k in range(len(nodes))) / tau
        dt_int += wt * tau * element_l2sq(mesh, d)
    local_pim = element_energy2(forms, pi_minus.vertex_values)
    E_star = local_pim - local_um - 0.5 * dt_int

    # space indicator
    um_qp = values_at_quadrature(u_minus, mesh)
    stages_qp = [st.vertex_values[mesh.cells] @ TRI_BARY.T for st in slab.stages]
    areas = mesh.areas
    h2 = areas
    E_G = np.zeros(len(mesh.leaves))
    for j, (cj, bj) in enumerate(zip(table.nodes, table.weights)):
        dU = dL[0](cj) * um_qp + sum(dL[k + 1](cj) * stages_qp[k] for k in range(len(stages_qp)))
        dU = dU / tau
        res = dU + forms.c_qp * stages_qp[j] - slab.fbar.at(slab.t0 + cj * tau)
        interior = h2 * areas * np.sum(TRI_WEIGHTS * res ** 2, axis=1)
        jumps = _jumps(mesh, forms, slab.stages[j].vertex_values)
        E_G += bj * (interior + jumps)
    E_G *= 3.0 * C_G * tau

    _, qw = quadrature_points(mesh)
    fbar2 = float(np.sum(qw * slab.fbar.norm2_density()))
    end2 = float(np.sum(element_energy2(forms, slab.u_end.vertex_values)))
    return Indicators(E_t, E_ctau, E_c, E_G, E_star, float(np.sum(dt_int)),
                      float(np.sum(local_pim)), end2, fbar2, jump2)
