"""
Adaptive control: consistency control of the data, tolerance splitting,
initial refinement, marking, the space-time adaptation of one step, and
the two drivers (TAFEM and an ASTFEM-style baseline).

Both drivers return a :class:`RunLog`.  When a resource cap fires they
raise :class:`~stafem.errors.ResourceError` whose ``partial`` attribute
holds the log accumulated so far.
"""

import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from stafem.errors import InputError, NumericError, ResourceError
from stafem.estimators import compute_indicators, data_oscillation, initial_error
from stafem.fespace import AssembledForms, FeSpace, element_energy2, interpolate
from stafem.mesh import coarsen, overlay, refine
from stafem.problems import slab_errors2
from stafem.timestepping import radau_table, slab_data, solve_slab

SPLITS = {
    # (TOL_0^2, TOL_f^2, TOL_Gtau^2) as fractions of TOL^2
    "strict": (0.1, 0.1, 0.6),
    "paper-numerics": (0.1, 0.4, 0.6),
}


@dataclass(frozen=True)
class AlgorithmParams:
    """Parameters of the adaptive modules and the resource caps.

    Attributes
    ----------
    sigma, kappa1, kappa2 : float
        Enlargement threshold and shrink/growth factors of the consistency control.
    kappa : float
        Time-step reduction factor inside the space-time adaptation.
    tau0 : float, optional
        Initial step size; ``None`` starts from the whole interval.
    theta : float
        Marking threshold relative to the mean indicator.
    s : int
        Polynomial degree in time.
    coarsen_rounds : int
        Bisection generations removed per time-step before adaptation.
    max_steps, max_dofs, max_inner : int
        Caps on accepted steps, cumulative dofs and adaptation iterations per step.
    max_mesh_dofs : int
        Largest dof count of any single trial mesh; bounds memory use.
    max_wall : float, optional
        Wall-clock cap in seconds, checked after every accepted step.
    """

    sigma: float = 0.5
    kappa1: float = 0.5
    kappa2: float = 2.0
    kappa: float = 0.5
    tau0: Optional[float] = None
    theta: float = 1.0
    s: int = 0
    coarsen_rounds: int = 2
    max_steps: int = 100_000
    max_dofs: int = 10_000_000
    max_mesh_dofs: int = 400_000
    max_inner: int = 1000
    max_consistency: int = 1_000_000
    max_wall: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma", "kappa1", "kappa"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InputError(f"{name} must lie in (0, 1), got {v}")
        if not self.kappa2 > 1.0:
            raise InputError(f"kappa2 must exceed 1, got {self.kappa2}")
        if self.tau0 is not None and not self.tau0 > 0.0:
            raise InputError("tau0 must be positive")
        if not self.theta > 0.0:
            raise InputError("theta must be positive")
        if self.s < 0 or self.coarsen_rounds < 0:
            raise InputError("s and coarsen_rounds must be nonnegative")
        if min(self.max_steps, self.max_dofs, self.max_mesh_dofs, self.max_inner, self.max_consistency) < 1:
            raise InputError("resource caps must be positive")
        if self.max_wall is not None and not self.max_wall > 0:
            raise InputError("max_wall must be positive")


@dataclass
class ToleranceBudget:
    """Squared tolerances of one TAFEM run.

    ``tol_f2`` and ``C_T`` are filled in once TOLFIND and the initial
    refinement have run.
    """

    TOL: float
    TOL0_2: float
    TOLf_2: float
    TOLGt_2: float
    split: str = "strict"
    tol_f2: float = math.nan
    N_f: int = 0
    C_T: float = math.nan

    @property
    def tol_Gt(self):
        """Local tolerance ``TOL_Gtau^2 / C_T`` handed to the step adaptation."""
        return self.TOLGt_2 / self.C_T

    @property
    def identity_defect(self):
        """``TOL_0^2 + 3 TOL_f^2 + TOL_Gtau^2 - TOL^2``; zero for a consistent split."""
        return self.TOL0_2 + 3.0 * self.TOLf_2 + self.TOLGt_2 - self.TOL ** 2


def split_tolerance(TOL, split="strict"):
    """Split ``TOL`` into initial, consistency and space-time parts.

    ``"strict"`` satisfies ``TOL_0^2 + 3 TOL_f^2 + TOL_Gtau^2 = TOL^2``;
    ``"paper-numerics"`` uses 0.1/0.4/0.6, which does not.
    """
    if not TOL > 0:
        raise InputError("TOL must be positive")
    try:
        a, b, c = SPLITS[split]
    except KeyError:
        raise InputError(f"unknown split {split!r}; choose from {sorted(SPLITS)}") from None
    t2 = TOL * TOL
    return ToleranceBudget(TOL, a * t2, b * t2, c * t2, split)


class ConsistencyIndicator:
    """``E_f(t, tau)`` of a problem, memoized per slab.

    Steps never cross a coefficient break of the problem; ``horizon(t)``
    is the next such break (or the final time).
    """

    def __init__(self, problem, s=0):
        self.problem = problem
        self.s = s
        self.calls = 0
        self._memo = {}

    @property
    def T(self):
        return self.problem.T

    def horizon(self, t):
        return self.problem.next_break(t)

    def __call__(self, t, tau):
        key = (float(t), float(tau))
        if key not in self._memo:
            self.calls += 1
            if len(self._memo) >= 4096:
                self._memo.clear()
            p = self.problem
            E = data_oscillation(p.f, t, tau, self.s, p.data_rule(), p.singular_times)
            if not math.isfinite(E):
                # quadrature nodes collapsed onto a singularity of f
                raise NumericError(f"consistency indicator is not finite on ({t}, {t + tau}]")
            self._memo[key] = E
        return self._memo[key]


@dataclass(frozen=True)
class SlabData:
    """Right-hand side restricted to ``(t, t + tau]``, projected onto a mesh on demand."""

    problem: object
    t: float
    tau: float
    s: int
    E_f: float

    def on(self, space):
        return slab_data(self.problem.f, space, self.t, self.tau, self.s, self.problem.singular_times)


def _advance(t, tau, horizon):
    """``t + tau``, snapped onto ``horizon`` when the step was clipped there."""
    t1 = t + tau
    if abs(t1 - horizon) <= 1e-13 * max(1.0, abs(horizon)):
        return horizon
    return t1


def consistency_module(indicator, t, tau_in, tol_f, params):
    """Choose a step size whose consistency indicator is at most ``tol_f^2``.

    The step is first enlarged by ``kappa2`` while ``E_f < sigma tol_f^2``
    and the horizon is not reached, then reduced by ``kappa1`` while
    ``E_f > tol_f^2``.

    Parameters
    ----------
    indicator : ConsistencyIndicator
    t : float
    tau_in : float
        Proposed step; must satisfy ``0 < tau_in <= horizon(t) - t``.
    tol_f : float
    params : AlgorithmParams

    Returns
    -------
    (SlabData, float)
        Data of the chosen slab and the step size.
    """
    room = indicator.horizon(t) - t
    if not 0.0 < tau_in <= room * (1 + 1e-12):
        raise InputError(f"tau_in={tau_in} outside (0, {room}]")
    tau = min(tau_in, room)
    tol2 = tol_f * tol_f
    E = indicator(t, tau)
    it = 0
    while E < params.sigma * tol2 and tau < room:
        tau = min(params.kappa2 * tau, room)
        E = indicator(t, tau)
        it += 1
        if it > params.max_consistency:
            raise NumericError("consistency enlargement did not terminate")
    while E > tol2:
        tau = params.kappa1 * tau
        E = indicator(t, tau)
        it += 1
        if it > params.max_consistency or tau <= 0.0:
            raise NumericError("consistency reduction did not terminate; data may not be square integrable")
    return SlabData(indicator.problem, t, tau, indicator.s, E), tau


def tolfind(indicator, T, TOL_f, params, info=None):
    """Local consistency tolerance from the global one.

    Sweeps ``[0, T]`` with :func:`consistency_module`, halving ``tol_f^2``
    until the accumulated indicators are at most ``TOL_f^2 / 2``, and caps
    the result by ``TOL_f^2 / (2 N_f)`` with ``N_f`` the number of slabs of
    the last sweep.

    Parameters
    ----------
    info : dict, optional
        Receives ``N_f``, ``passes`` and ``accumulated``.

    Returns
    -------
    float
        ``tol_f``.
    """
    if not TOL_f > 0:
        raise InputError("TOL_f must be positive")
    TOL2 = TOL_f * TOL_f
    tol2 = TOL2
    tau_start = T if params.tau0 is None else min(params.tau0, T)
    passes = 0
    while True:
        passes += 1
        eps = 0.0
        n = 0
        t = 0.0
        tau = tau_start
        while t < T:
            n += 1
            room = indicator.horizon(t) - t
            data, tau = consistency_module(indicator, t, min(tau, room), math.sqrt(tol2), params)
            eps += data.E_f
            t = _advance(t, tau, indicator.horizon(t))
            if n > params.max_consistency:
                raise NumericError("TOLFIND sweep did not reach the final time")
        N_f = n
        if eps > 0.5 * TOL2:
            tol2 *= 0.5
            if passes > 200:
                raise NumericError("TOLFIND did not terminate")
        else:
            break
    tol2 = min(tol2, TOL2 / (2 * N_f))
    if info is not None:
        info.update(N_f=N_f, passes=passes, accumulated=eps)
    return math.sqrt(tol2)


def tolf_from_regularity(T, TOL_f, s_reg, seminorm):
    """``tol_f`` for data with ``H^s`` regularity in time.

    ``tol_f^2 = 2^{-(2s+1)/(2s)} T^{-1} |f|^{-1/s} TOL_f^{(2s+1)/s}`` with
    ``|f|`` the ``H^s(0, T; L2)`` seminorm.
    """
    if not 0.0 < s_reg <= 1.0:
        raise InputError("s_reg must lie in (0, 1]")
    if not seminorm > 0 or not TOL_f > 0 or not T > 0:
        raise InputError("seminorm, TOL_f and T must be positive")
    e = (2.0 * s_reg + 1.0) / s_reg
    tol2 = 2.0 ** (-e / 2.0) / T * seminorm ** (-1.0 / s_reg) * TOL_f ** e
    return math.sqrt(tol2)


def _mark(eta, candidates, theta):
    sub = eta[candidates]
    if sub.size == 0:
        return candidates
    chosen = candidates[sub >= theta * sub.mean()]
    if chosen.size == 0:
        chosen = candidates[[int(np.argmax(sub))]]
    return chosen


def mark_refine(eta, mesh, theta=1.0):
    """Refine every element whose indicator is at least ``theta`` times the mean."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (len(mesh.leaves),):
        raise InputError("one indicator per element expected")
    pos = _mark(eta, np.arange(len(eta)), theta)
    return refine(mesh, mesh.leaves[pos])


def coarsened_elements(mesh, mesh_old):
    """Mask of the elements of ``mesh`` that are strictly coarser than ``mesh_old`` there."""
    ov = overlay(mesh, mesh_old)
    return ~np.isin(mesh.leaves, ov.leaves, assume_unique=True)


def mark_refine_coarsened(eta, mesh, mesh_old, theta=1.0):
    """Equidistribution marking restricted to the coarsened elements."""
    eta = np.asarray(eta, dtype=float)
    cand = np.flatnonzero(coarsened_elements(mesh, mesh_old))
    if cand.size == 0:
        raise InputError("no coarsened elements to refine")
    return refine(mesh, mesh.leaves[_mark(eta, cand, theta)])


def adapt_init(u0, mesh, TOL0_2, theta=1.0, max_dofs=10_000_000):
    """Interpolate ``u0`` and refine until ``||u0 - U_0||^2 <= TOL0_2``.

    Returns
    -------
    (DiscreteFunction, Mesh, float)
        ``U_0``, its mesh and the attained initial error ``E_0``.
    """
    if not TOL0_2 > 0:
        raise InputError("TOL_0 must be positive")
    while True:
        space = FeSpace(mesh)
        U0 = interpolate(u0, space)
        eta = initial_error(u0, U0)
        E0 = float(np.sum(eta))
        if E0 <= TOL0_2:
            return U0, mesh, E0
        if space.n_dofs > max_dofs:
            raise ResourceError(f"initial refinement exceeded {max_dofs} dofs", partial=(U0, mesh, E0))
        mesh = mark_refine(eta, mesh, theta)


class FormsCache:
    """Assembled forms keyed by mesh and coefficient piece."""

    def __init__(self, problem, size=8):
        self.problem = problem
        self.size = size
        self._store = OrderedDict()

    def get(self, mesh, t0, t1):
        A, c, piece = self.problem.coefficients(t0, t1)
        key = (mesh.key, piece)
        forms = self._store.get(key)
        if forms is None or forms.mesh != mesh:
            forms = AssembledForms(mesh, A, c)
            self._store[key] = forms
            if len(self._store) > self.size:
                self._store.popitem(last=False)
        else:
            self._store.move_to_end(key)
        return forms


@dataclass
class AdaptedStep:
    """Outcome of one space-time adaptation."""

    slab: object
    tau: float
    fbar: SlabData
    mesh: object
    indicators: object
    E_f: float
    branches: dict
    exit: str = "standard"


def _solve_and_estimate(u_minus, data, mesh, forms_cache, table):
    t, tau = data.t, data.tau
    space = FeSpace(mesh)
    forms = forms_cache.get(mesh, t, t + tau)
    fbar = data.on(space)
    slab = solve_slab(space, forms, u_minus, fbar, t, tau, table)
    ov = slab.transfer.mesh
    ov_forms = forms if ov == mesh else forms_cache.get(ov, t, t + tau)
    return slab, compute_indicators(slab, ov_forms)


def _dof_guard(mesh, dof_room, what):
    n = int(np.count_nonzero(~mesh.boundary_vertex))
    if n > dof_room:
        raise ResourceError(f"{what}: mesh with {n} dofs exceeds the remaining dof budget {dof_room}")


def st_adaptation(u_minus, indicator, t, tau, mesh, mesh_old, tol_Gt, params,
                  forms_cache=None, dof_room=None):
    """Adapt step size and mesh of one time-step.

    Loop: solve the slab, then in this order reduce ``tau`` if
    ``E_t > tol_Gt^2`` (A), refine by ``E_G`` if it exceeds
    ``E_t + E_f + tau tol_Gt`` (B), refine by ``E_c`` under the same
    threshold (C), refine coarsened elements by ``E_*`` if ``E_* > 0`` (D),
    otherwise accept.

    Parameters
    ----------
    u_minus : DiscreteFunction
        Final value of the previous step on ``mesh_old``.
    indicator : ConsistencyIndicator
    mesh : Mesh
        Starting mesh, usually a coarsening of ``mesh_old``.
    tol_Gt : float
    forms_cache : FormsCache, optional
    dof_room : int, optional
        Largest admissible dof count of a trial mesh.

    Returns
    -------
    AdaptedStep
    """
    problem = indicator.problem
    forms_cache = forms_cache or FormsCache(problem)
    dof_room = min(params.max_dofs if dof_room is None else dof_room, params.max_mesh_dofs)
    table = radau_table(params.s)
    E_f = indicator(t, tau)
    counts = dict(A=0, B=0, C=0, D=0)
    for _ in range(params.max_inner):
        data = SlabData(problem, t, tau, params.s, E_f)
        slab, ind = _solve_and_estimate(u_minus, data, mesh, forms_cache, table)
        slack = ind.E_t + E_f + tau * tol_Gt
        if ind.E_t > tol_Gt * tol_Gt:
            counts["A"] += 1
            tau = params.kappa * tau
            E_f = indicator(t, tau)
            continue
        if ind.E_G_sum > slack:
            counts["B"] += 1
            mesh = mark_refine(ind.E_G, mesh, params.theta)
        elif ind.E_c_sum > slack:
            counts["C"] += 1
            mesh = mark_refine(ind.E_c, mesh, params.theta)
        elif ind.E_star_sum > 0 and coarsened_elements(mesh, mesh_old).any():
            # without coarsened elements E_* <= 0 holds exactly; a positive
            # value is roundoff and must not enter the restricted marking
            counts["D"] += 1
            mesh = mark_refine_coarsened(ind.E_star, mesh, mesh_old, params.theta)
        else:
            return AdaptedStep(slab, tau, data, mesh, ind, E_f, counts)
        _dof_guard(mesh, dof_room, "space-time adaptation")
    raise ResourceError(f"space-time adaptation exceeded {params.max_inner} iterations")


def afem(u_minus, data, mesh, tol, params, forms_cache=None, max_dofs=None):
    """Adaptive elliptic loop of a single slab with fixed data and step.

    Solves, estimates ``E_G`` and refines by equidistribution until
    ``E_G <= tol``.

    Returns
    -------
    list of (Mesh, SlabSolution, float)
        Every iterate with its space indicator.
    """
    forms_cache = forms_cache or FormsCache(data.problem)
    max_dofs = min(params.max_dofs if max_dofs is None else max_dofs, params.max_mesh_dofs)
    table = radau_table(params.s)
    history = []
    for _ in range(params.max_inner):
        slab, ind = _solve_and_estimate(u_minus, data, mesh, forms_cache, table)
        history.append((mesh, slab, ind.E_G_sum))
        if ind.E_G_sum <= tol:
            return history
        mesh = mark_refine(ind.E_G, mesh, params.theta)
        _dof_guard(mesh, max_dofs, "AFEM")
    raise ResourceError(f"AFEM exceeded {params.max_inner} iterations", partial=history)


@dataclass
class StepRecord:
    """One accepted time-step."""

    n: int
    t: float
    tau: float
    dofs: int
    E_t: float
    E_ctau: float
    E_c: float
    E_G: float
    E_star: float
    E_f: float
    jump2: float
    dt_l2: float
    pi_minus2: float
    end2: float
    fbar2: float
    minus2: float
    A: int = 0
    B: int = 0
    C: int = 0
    D: int = 0
    exit: str = "standard"


@dataclass
class RunLog:
    """Record of a complete or interrupted adaptive run."""

    problem: str
    algorithm: str
    T: float
    tolerances: ToleranceBudget
    params: AlgorithmParams
    E_0: float = 0.0
    dofs0: int = 0
    U0_energy2: float = 0.0
    f_norm2: float = 0.0
    tau_star: float = math.nan
    thresholds: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    status: str = "running"
    reason: str = ""
    err2_h1: float = 0.0
    err2_l2: float = 0.0
    has_exact: bool = False
    coefficient_breaks: int = 0
    wall_time: float = 0.0

    @property
    def final_time(self):
        return self.steps[-1].t if self.steps else 0.0

    @property
    def cumulative_dofs(self):
        return int(sum(r.dofs for r in self.steps))

    @property
    def sum_E_f(self):
        return float(sum(r.E_f for r in self.steps))

    @property
    def sum_space_time(self):
        """``sum_n (E_G + E_ctau)``."""
        return float(sum(r.E_G + r.E_ctau for r in self.steps))

    @property
    def total_estimate(self):
        return self.E_0 + self.sum_E_f + self.sum_space_time

    @property
    def err_L2H1(self):
        return math.sqrt(self.err2_h1) if self.has_exact else math.nan

    @property
    def err_L2L2(self):
        return math.sqrt(self.err2_l2) if self.has_exact else math.nan

    def summary(self):
        """Flat dictionary of scalar results."""
        tb = self.tolerances
        out = dict(
            problem=self.problem, algorithm=self.algorithm, T=self.T, TOL=tb.TOL, split=tb.split,
            TOL0_2=tb.TOL0_2, TOLf_2=tb.TOLf_2, TOLGt_2=tb.TOLGt_2, tol_f2=tb.tol_f2, N_f=tb.N_f,
            C_T=tb.C_T, tau_star=self.tau_star, status=self.status, reason=self.reason,
            steps=len(self.steps), final_time=self.final_time, cumulative_dofs=self.cumulative_dofs,
            dofs0=self.dofs0, E_0=self.E_0, sum_E_f=self.sum_E_f, sum_E_G_E_ctau=self.sum_space_time,
            total_estimate=self.total_estimate, U0_energy2=self.U0_energy2, f_norm2=self.f_norm2,
            wall_time=self.wall_time,
        )
        if self.algorithm == "tafem":
            out["tol_Gt"] = tb.tol_Gt
        out.update({f"threshold_{k}": v for k, v in self.thresholds.items()})
        if self.has_exact:
            out.update(err_L2H1=self.err_L2H1, err_L2L2=self.err_L2L2)
        out["params"] = asdict(self.params)
        return out


class _Tracker:
    """Shared bookkeeping of both drivers: caps, step records, errors."""

    def __init__(self, problem, log, params, callback=None):
        self.problem = problem
        self.callback = callback
        self.log = log
        self.params = params
        self.exact = problem.exact is not None and problem.exact_grad is not None
        log.has_exact = self.exact
        log.coefficient_breaks = sum(1 for b in problem.breaks if b < problem.T)
        self.t_start = time.perf_counter()

    def dof_room(self):
        return self.params.max_dofs - self.log.cumulative_dofs

    def accept(self, step, t_new, u_minus_energy2):
        log = self.log
        slab, ind = step.slab, step.indicators
        rec = StepRecord(
            n=len(log.steps) + 1, t=t_new, tau=step.tau,
            dofs=int(slab.space.n_dofs),
            E_t=ind.E_t, E_ctau=ind.E_ctau, E_c=ind.E_c_sum, E_G=ind.E_G_sum,
            E_star=ind.E_star_sum, E_f=step.E_f, jump2=ind.jump2, dt_l2=ind.dt_l2,
            pi_minus2=ind.pi_minus2, end2=ind.end2, fbar2=ind.fbar2, minus2=u_minus_energy2,
            exit=step.exit, **step.branches)
        log.steps.append(rec)
        if self.exact:
            h1, l2 = slab_errors2(slab, self.problem)
            log.err2_h1 += h1
            log.err2_l2 += l2
        if self.callback is not None:
            self.callback(rec, slab)
        self.check()

    def check(self):
        log = self.log
        if len(log.steps) >= self.params.max_steps and log.final_time < log.T:
            self.fail(f"step cap {self.params.max_steps} reached at t={log.final_time:.6g}")
        if log.cumulative_dofs > self.params.max_dofs:
            self.fail(f"cumulative dof cap {self.params.max_dofs} exceeded at t={log.final_time:.6g}")
        wall = self.params.max_wall
        if wall is not None and time.perf_counter() - self.t_start > wall and log.final_time < log.T:
            self.fail(f"wall-clock cap {wall:g} s reached at t={log.final_time:.6g}")

    def fail(self, reason):
        self.log.status = "budget-exhausted"
        self.log.reason = reason
        self.finish()
        raise ResourceError(reason, partial=self.log)

    def finish(self):
        self.log.wall_time = time.perf_counter() - self.t_start


def _initial_stage(problem, TOL0_2, params, tracker):
    U0, mesh, E0 = adapt_init(problem.u0, problem.make_mesh(), TOL0_2, params.theta,
                              min(params.max_dofs, params.max_mesh_dofs))
    A, c, _ = problem.coefficients(0.0, min(problem.next_break(0.0), problem.T))
    forms = AssembledForms(mesh, A, c)
    energy2 = float(np.sum(element_energy2(forms, U0.vertex_values)))
    log = tracker.log
    log.E_0, log.dofs0, log.U0_energy2 = E0, U0.space.n_dofs, energy2
    log.f_norm2 = problem.f_norm2()
    return U0, mesh


def _energy2(fn, forms_cache, t0, t1):
    forms = forms_cache.get(fn.mesh, t0, t1)
    return float(np.sum(element_energy2(forms, fn.vertex_values)))


def _run_guarded(tracker, body):
    try:
        body()
    except ResourceError as err:
        log = tracker.log
        if log.status == "running":
            log.status = "budget-exhausted"
            log.reason = str(err)
            tracker.finish()
        raise ResourceError(str(err), partial=log) from None
    tracker.log.status = "completed"
    tracker.finish()
    return tracker.log


def tafem(problem, TOL, params=None, split="strict", callback=None):
    """Run TAFEM on ``problem`` to the final time.

    Parameters
    ----------
    problem : ProblemSpec
    TOL : float
    params : AlgorithmParams, optional
    split : {"strict", "paper-numerics"}
    callback : callable, optional
        Called as ``callback(record, slab)`` after every accepted step.

    Returns
    -------
    RunLog
    """
    params = params or AlgorithmParams()
    tb = split_tolerance(TOL, split)
    log = RunLog(problem.name, "tafem", problem.T, tb, params)
    tracker = _Tracker(problem, log, params, callback)
    indicator = ConsistencyIndicator(problem, params.s)
    T = problem.T
    C_tau = radau_table(params.s).C_tau

    def body():
        info = {}
        tol_f = tolfind(indicator, T, math.sqrt(tb.TOLf_2), params, info)
        tb.tol_f2, tb.N_f = tol_f * tol_f, info["N_f"]
        U, mesh = _initial_stage(problem, tb.TOL0_2, params, tracker)
        tb.C_T = 6.0 * math.sqrt(6.0 * C_tau * T) * math.sqrt(log.f_norm2 + log.U0_energy2) + 2.0 * T
        tol_Gt = tb.tol_Gt
        log.thresholds = dict(tol_Gt2=tol_Gt * tol_Gt, tol_Gt=tol_Gt, tol_f2=tb.tol_f2)
        forms_cache = FormsCache(problem)
        t = 0.0
        tau = T if params.tau0 is None else params.tau0
        while t < T:
            horizon = indicator.horizon(t)
            tau = min(tau, horizon - t)
            _, tau = consistency_module(indicator, t, tau, tol_f, params)
            coarse = coarsen(mesh, params.coarsen_rounds)
            minus2 = _energy2(U, forms_cache, t, t + tau)
            step = st_adaptation(U, indicator, t, tau, coarse, mesh, tol_Gt, params,
                                 forms_cache, tracker.dof_room())
            tau = step.tau
            t = _advance(t, tau, horizon)
            tracker.accept(step, t, minus2)
            U, mesh = step.slab.u_end, step.mesh

    return _run_guarded(tracker, body)


def _astfem_step(u_minus, indicator, t, tau, tau_star, mesh, mesh_old, thr_f, thr_Gt,
                 params, forms_cache, dof_room):
    problem = indicator.problem
    table = radau_table(params.s)
    counts = dict(A=0, B=0, C=0, D=0)
    E_f = indicator(t, tau)
    while E_f > tau * thr_f:
        # consistency reductions are not floored
        tau = params.kappa1 * tau
        E_f = indicator(t, tau)
        if tau <= 1e-300:
            raise NumericError("consistency reduction underflowed")
    exit_kind = "standard"
    for _ in range(params.max_inner):
        data = SlabData(problem, t, tau, params.s, E_f)
        slab, ind = _solve_and_estimate(u_minus, data, mesh, forms_cache, table)
        if exit_kind == "standard" and ind.E_t > tau * thr_Gt:
            if tau > tau_star:
                counts["A"] += 1
                tau = max(params.kappa * tau, tau_star)
                E_f = indicator(t, tau)
                continue
            exit_kind = "nonstandard"
        if exit_kind == "standard" and ind.E_G_sum > tau * thr_Gt:
            counts["B"] += 1
            mesh = mark_refine(ind.E_G, mesh, params.theta)
        elif exit_kind == "standard" and ind.E_c_sum > tau * thr_Gt:
            counts["C"] += 1
            mesh = mark_refine(ind.E_c, mesh, params.theta)
        elif ind.E_star_sum > 0 and coarsened_elements(mesh, mesh_old).any():
            counts["D"] += 1
            mesh = mark_refine_coarsened(ind.E_star, mesh, mesh_old, params.theta)
        else:
            return AdaptedStep(slab, tau, data, mesh, ind, E_f, counts, exit_kind)
        _dof_guard(mesh, dof_room, "ASTFEM step")
    raise ResourceError(f"ASTFEM step exceeded {params.max_inner} iterations")


def astfem_baseline(problem, TOL, params=None, callback=None):
    """ASTFEM-style run with pointwise-in-time thresholds.

    A step is accepted when ``E_f <= tau TOL_f~^2`` and
    ``E_t, E_G, E_c <= tau TOL_Gt~^2``.  Step reductions driven by the time
    indicator stop at the a priori minimal step ``tau_*``; at ``tau_*`` the
    step is accepted regardless of the remaining thresholds (nonstandard
    exit).  Reductions required by the consistency indicator may go below
    ``tau_*``.  The step size grows by ``kappa2`` after a step whose time
    and consistency indicators both stayed below ``sigma`` times their
    thresholds.
    """
    params = params or AlgorithmParams()
    T = problem.T
    t2 = TOL * TOL
    if not TOL > 0:
        raise InputError("TOL must be positive")
    tb = ToleranceBudget(TOL, 0.1 * t2, 0.4 * t2, 0.6 * t2, "astfem")
    thr_f = 0.4 * t2 / T
    thr_Gt = 0.59 * t2 / T
    tol_star2 = 0.01 * t2
    log = RunLog(problem.name, "astfem", T, tb, params)
    tracker = _Tracker(problem, log, params, callback)
    indicator = ConsistencyIndicator(problem, params.s)
    C_tau = radau_table(params.s).C_tau

    def body():
        U, mesh = _initial_stage(problem, tb.TOL0_2, params, tracker)
        scale = log.f_norm2 + log.U0_energy2
        tau_star = params.kappa * tol_star2 / (6.0 * C_tau * scale) if scale > 0 else T
        log.tau_star = tau_star
        log.thresholds = dict(TOLf_tilde2=thr_f, TOLGt_tilde2=thr_Gt, TOLstar2=tol_star2)
        forms_cache = FormsCache(problem)
        t = 0.0
        tau = T if params.tau0 is None else params.tau0
        while t < T:
            horizon = indicator.horizon(t)
            tau = min(tau, horizon - t)
            coarse = coarsen(mesh, params.coarsen_rounds)
            minus2 = _energy2(U, forms_cache, t, t + tau)
            step = _astfem_step(U, indicator, t, tau, tau_star, coarse, mesh, thr_f, thr_Gt,
                                params, forms_cache, min(tracker.dof_room(), params.max_mesh_dofs))
            tau = step.tau
            t = _advance(t, tau, horizon)
            tracker.accept(step, t, minus2)
            U, mesh = step.slab.u_end, step.mesh
            ind = step.indicators
            if ind.E_t <= params.sigma * tau * thr_Gt and step.E_f <= params.sigma * tau * thr_f:
                tau = params.kappa2 * tau

    return _run_guarded(tracker, body)
