"""Model problems with exact solutions where available, and exact-error computation."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from stafem.errors import InputError
from stafem.fespace import quadrature_points
from stafem.mesh import Mesh, refine_uniform, square_mesh
from stafem.quadrature import TRI_BARY, time_rule
from stafem.timestepping import reconstruct


@dataclass
class ProblemSpec:
    """Linear parabolic problem ``du/dt - div(A grad u) + c u = f`` with zero boundary values.

    ``A(x, y, t)`` returns an array of shape (n, 2, 2) and may be ``None``
    for the identity.  ``c`` is a constant or a callable ``c(x, y)``.
    ``breaks`` lists times at which ``A`` jumps; time steps never straddle them.
    """

    name: str
    T: float
    make_mesh: Callable[[], Mesh]
    u0: Callable
    f: Callable
    A: Optional[Callable] = None
    c: Optional[object] = None
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None
    singular_times: tuple = ()
    breaks: tuple = ()
    data_levels: int = 6
    piece: Optional[Callable] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def coefficients(self, t0, t1):
        """Frozen ``(A(x, y), c(x, y), key)`` for the slab ``(t0, t1]``."""
        tm = 0.5 * (t0 + t1)
        key = self.piece(tm) if self.piece is not None else 0
        A = None if self.A is None else (lambda x, y, _t=tm: self.A(x, y, _t))
        if self.c is None:
            c = None
        elif callable(self.c):
            c = self.c
        else:
            value = float(self.c)
            c = (lambda x, y: np.full(np.shape(x), value)) if value != 0.0 else None
        return A, c, key

    def next_break(self, t, eps=1e-12):
        """First coefficient break strictly after ``t``, or ``T``."""
        for b in self.breaks:
            if b > t + eps * max(1.0, abs(t)):
                return min(b, self.T)
        return self.T

    def data_rule(self):
        """Fixed spatial rule for data integrals: points (n, 2) and weights (n,)."""
        if "rule" not in self._cache:
            mesh = refine_uniform(self.make_mesh(), self.data_levels)
            pts, w = quadrature_points(mesh)
            self._cache["rule"] = (pts.reshape(-1, 2), w.ravel())
        return self._cache["rule"]

    def f_norm2(self, t0=0.0, t1=None, panels=64):
        """``int_{t0}^{t1} ||f||^2`` by composite quadrature in time."""
        t1 = self.T if t1 is None else t1
        key = ("fnorm", t0, t1, panels)
        if key not in self._cache:
            pts, w = self.data_rule()
            total = 0.0
            edges = np.linspace(t0, t1, panels + 1)
            for a, b in zip(edges[:-1], edges[1:]):
                tq, wq = time_rule(a, b - a, 6, self.singular_times)
                for t, wt in zip(tq, wq):
                    total += wt * np.sum(w * self.f(pts[:, 0], pts[:, 1], t) ** 2)
            self._cache[key] = total
        return self._cache[key]


def _sin_sin(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def smooth_manufactured():
    """``u = exp(-t) sin(pi x) sin(pi y)`` on the unit square with ``A = I`` and ``c = 1``."""
    def u(x, y, t):
        return np.exp(-t) * _sin_sin(x, y)

    def grad(x, y, t):
        e = np.exp(-t) * np.pi
        return (e * np.cos(np.pi * x) * np.sin(np.pi * y),
                e * np.sin(np.pi * x) * np.cos(np.pi * y))

    return ProblemSpec(
        name="smooth", T=1.0, make_mesh=lambda: square_mesh(3),
        u0=lambda x, y: _sin_sin(x, y),
        f=lambda x, y, t: 2.0 * np.pi ** 2 * u(x, y, t),
        c=1.0, exact=u, exact_grad=grad)


T_BAR = np.pi / 3.0
ALPHA = 0.7


def _singular_parts(x, y, t):
    d = t - T_BAR
    ad = np.abs(d)
    phi = ad ** ALPHA
    with np.errstate(divide="ignore", invalid="ignore"):
        dphi = np.where(ad > 0, ALPHA * np.sign(d) * ad ** (ALPHA - 1.0), 0.0)
    qx, qy = np.pi * (x * x - x), np.pi * (y * y - y)
    gx, gy = np.sin(qx * t), np.sin(qy * t)
    cx, cy = np.cos(qx * t), np.cos(qy * t)
    return phi, dphi, qx, qy, gx, gy, cx, cy


def singularity_in_time():
    """Solution with an ``|t - pi/3|^0.7`` singularity: data in L2 but not H1 in time."""
    def u(x, y, t):
        phi, _, _, _, gx, gy, _, _ = _singular_parts(x, y, t)
        return phi * gx * gy

    def grad(x, y, t):
        phi, _, _, _, gx, gy, cx, cy = _singular_parts(x, y, t)
        return (phi * cx * np.pi * (2 * x - 1) * t * gy,
                phi * gx * cy * np.pi * (2 * y - 1) * t)

    def f(x, y, t):
        phi, dphi, qx, qy, gx, gy, cx, cy = _singular_parts(x, y, t)
        dt_u = dphi * gx * gy + phi * (cx * qx * gy + gx * cy * qy)
        bx, by = np.pi * (2 * x - 1) * t, np.pi * (2 * y - 1) * t
        gxx = cx * 2 * np.pi * t - gx * bx * bx
        gyy = cy * 2 * np.pi * t - gy * by * by
        return dt_u - phi * (gxx * gy + gx * gyy)

    return ProblemSpec(
        name="singular", T=2.0, make_mesh=lambda: square_mesh(3),
        u0=lambda x, y: u(x, y, 0.0), f=f, exact=u, exact_grad=grad,
        singular_times=(T_BAR,))


A1 = 161.4476387975881
A2 = 1.0
GAMMA = 0.1
RHO = np.pi / 4.0
SIGMA = -14.92256510455152
CENTERS = np.array([[1.0, 2.0], [1.0, 1.0], [2.0, 1.0], [2.0, 2.0]])


def _mu(theta):
    g = GAMMA
    out = np.empty_like(theta)
    d_out = np.empty_like(theta)
    branches = [
        (theta < np.pi / 2, np.cos((np.pi / 2 - SIGMA) * g), theta - np.pi / 2 + RHO),
        ((theta >= np.pi / 2) & (theta < np.pi), np.cos(RHO * g), theta - np.pi + SIGMA),
        ((theta >= np.pi) & (theta < 1.5 * np.pi), np.cos(SIGMA * g), theta - np.pi - RHO),
        (theta >= 1.5 * np.pi, np.cos((np.pi / 2 - RHO) * g), theta - 1.5 * np.pi - SIGMA),
    ]
    for mask, amp, arg in branches:
        out[mask] = amp * np.cos(arg[mask] * g)
        d_out[mask] = -amp * g * np.sin(arg[mask] * g)
    return out, d_out


def jump_mu(theta):
    """Angular profile of the jumping-coefficient solution."""
    return _mu(np.asarray(theta, dtype=float))[0]


def _index(t):
    return int(np.clip(np.ceil(t), 1, 4))


def _bump(t, i):
    a, b = t - (i - 1), t - i
    return a * a * b * b, 2 * a * b * (a + b)


def _polar(x, y, i):
    cx, cy = CENTERS[i - 1]
    dx, dy = x - cx, y - cy
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    return dx, dy, r, theta


def jumping_singularity():
    """Moving corner singularity ``r^0.1 mu(theta)`` with a coefficient jumping by 161."""
    def A(x, y, t):
        i = _index(t)
        dx, dy, _, _ = _polar(x, y, i)
        a = np.where(dx * dy > 0, A1, A2)
        out = np.zeros(np.shape(x) + (2, 2))
        out[..., 0, 0] = a
        out[..., 1, 1] = a
        return out

    def space_part(x, y, t):
        i = _index(t)
        _, _, r, theta = _polar(x, y, i)
        return r ** GAMMA * jump_mu(theta), i

    def u(x, y, t):
        sp_, i = space_part(x, y, t)
        return sp_ * _bump(t, i)[0]

    def f(x, y, t):
        sp_, i = space_part(x, y, t)
        return sp_ * _bump(t, i)[1]

    def grad(x, y, t):
        i = _index(t)
        _, _, r, theta = _polar(x, y, i)
        m, dm = _mu(theta)
        s = _bump(t, i)[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            rg = np.where(r > 0, r ** (GAMMA - 1.0), 0.0)
        gr = GAMMA * rg * m
        gt = rg * dm
        ct, st = np.cos(theta), np.sin(theta)
        return s * (ct * gr - st * gt), s * (st * gr + ct * gt)

    return ProblemSpec(
        name="jumping", T=4.0, make_mesh=lambda: square_mesh(3, 3.0),
        u0=lambda x, y: np.zeros(np.shape(x)), f=f, A=A, exact=u, exact_grad=grad,
        breaks=(1.0, 2.0, 3.0), data_levels=4, piece=_index)


def _checkerboard(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mid_x = (x > 1 / 3) & (x < 2 / 3)
    mid_y = (y > 1 / 3) & (y < 2 / 3)
    out_x = ((x > 0) & (x < 1 / 3)) | ((x > 2 / 3) & (x < 1))
    out_y = ((y > 0) & (y < 1 / 3)) | ((y > 2 / 3) & (y < 1))
    inside = (x > 0) & (x < 1) & (y > 0) & (y < 1)
    minus = (mid_x & out_y) | (out_x & mid_y)
    return np.where(inside, np.where(minus, -1.0, 1.0), 0.0)


def rough_initial_data():
    """Heat equation without source from a discontinuous checkerboard initial value."""
    return ProblemSpec(
        name="checkerboard", T=1.0, make_mesh=lambda: square_mesh(3),
        u0=_checkerboard, f=lambda x, y, t: np.zeros(np.shape(x)))


PROBLEMS = {
    "smooth": smooth_manufactured,
    "singular": singularity_in_time,
    "jumping": jumping_singularity,
    "checkerboard": rough_initial_data,
}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise InputError(f"unknown experiment {name!r}; choose from {sorted(PROBLEMS)}") from None


def slab_errors2(slab, problem, n_time=None):
    """Squared ``L2(H1)`` and ``L2(L2)`` errors of the reconstruction on one slab.

    The slab is integrated on the overlay of its two meshes, where the
    reconstruction is piecewise linear, with an order-4 rule in space and
    an ``s + 3`` point Gauss rule in time (graded near singular times).
    """
    rec = reconstruct(slab)
    mesh = rec.mesh
    pts, w = quadrature_points(mesh)
    x, y = pts[..., 0], pts[..., 1]
    cells = mesh.cells
    grads = mesh.grads
    tq, wq = time_rule(slab.t0, slab.tau, (n_time or slab.table.s + 3), problem.singular_times)
    h1 = 0.0
    l2 = 0.0
    for t, wt in zip(tq, wq):
        v = rec.at(t)[cells]  # (ne, 3)
        uh = v @ TRI_BARY.T
        gh = np.matmul(v[:, None, :], grads)[:, 0]
        ue = problem.exact(x, y, t)
        gx, gy = problem.exact_grad(x, y, t)
        l2 += wt * np.sum(w * (ue - uh) ** 2)
        h1 += wt * np.sum(w * ((gx - gh[:, None, 0]) ** 2 + (gy - gh[:, None, 1]) ** 2))
    return float(h1), float(l2)


def compute_errors(slabs, problem, n_time=None):
    """``(err_L2H1, err_L2L2)`` of the reconstruction against the exact solution."""
    if problem.exact is None or problem.exact_grad is None:
        raise InputError(f"problem {problem.name!r} has no exact solution")
    h1 = 0.0
    l2 = 0.0
    for slab in slabs:
        a, b = slab_errors2(slab, problem, n_time)
        h1 += a
        l2 += b
    return float(np.sqrt(h1)), float(np.sqrt(l2))
