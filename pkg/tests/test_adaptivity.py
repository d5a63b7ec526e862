import math

import numpy as np
import pytest

from stafem.adaptivity import (AlgorithmParams, ConsistencyIndicator, FormsCache, SlabData, adapt_init,
                               afem, astfem_baseline, coarsened_elements, consistency_module,
                               mark_refine, mark_refine_coarsened, split_tolerance, st_adaptation,
                               tafem, tolf_from_regularity, tolfind)
from stafem.errors import InputError, NumericError, ResourceError
from stafem.fespace import FeSpace, interpolate
from stafem.mesh import coarsen, refine_uniform, square_mesh
from stafem.problems import T_BAR, ProblemSpec, get_problem

P = AlgorithmParams()


def _problem(f, T=1.0, u0=None, singular=(), c=None, name="test"):
    u0 = u0 or (lambda x, y: 0 * x)
    return ProblemSpec(name, T, lambda: square_mesh(2), u0, f, c=c, singular_times=singular, data_levels=2)


def test_params_validation():
    for bad in (dict(sigma=1.0), dict(kappa1=0.0), dict(kappa2=1.0), dict(kappa=1.5), dict(tau0=0.0),
                dict(theta=0.0), dict(s=-1), dict(max_steps=0), dict(max_wall=-1.0)):
        with pytest.raises(InputError):
            AlgorithmParams(**bad)


def test_split_identity():
    tb = split_tolerance(0.5)
    assert abs(tb.identity_defect) < 1e-15
    assert np.isclose(tb.TOL0_2, 0.025) and np.isclose(tb.TOLf_2, 0.025) and np.isclose(tb.TOLGt_2, 0.15)
    pn = split_tolerance(1.0, "paper-numerics")
    # 0.1 + 3 * 0.4 + 0.6 - 1
    assert np.isclose(pn.identity_defect, 0.9)
    with pytest.raises(InputError):
        split_tolerance(0.0)
    with pytest.raises(InputError):
        split_tolerance(1.0, "other")


def test_consistency_constant_data_saturates():
    ind = ConsistencyIndicator(_problem(lambda x, y, t: 1 + x + 0 * t, T=2.0))
    data, tau = consistency_module(ind, 0.5, 0.01, 1e-3, P)
    assert tau == 1.5 and data.E_f < 1e-25
    with pytest.raises(InputError):
        consistency_module(ind, 0.5, 2.0, 1e-3, P)


def _step_energy(t, tau, a):
    # 3 int (f - mean)^2 for f = H(t - a) on the unit square
    p = np.clip((t + tau - a) / tau, 0.0, 1.0)
    return 3.0 * tau * p * (1.0 - p)


@pytest.mark.parametrize("t,tau_in,tol", [(0.0, 0.1, 0.05), (0.3, 0.05, 0.02), (0.36, 0.001, 0.01),
                                          (0.2, 0.6, 0.001)])
def test_consistency_step_function_against_grid(t, tau_in, tol):
    a = 0.37
    ind = ConsistencyIndicator(_problem(lambda x, y, s: (s > a) + 0.0 * x, singular=(a,)))
    data, tau = consistency_module(ind, t, tau_in, tol, P)
    # brute force oracle on the exact indicator: same enlargement, then the
    # first point of the kappa1 grid meeting the tolerance
    room = 1.0 - t
    te = tau_in
    while _step_energy(t, te, a) < P.sigma * tol ** 2 and te < room:
        te = min(P.kappa2 * te, room)
    k = 0
    while _step_energy(t, te * P.kappa1 ** k, a) > tol ** 2:
        k += 1
    assert np.isclose(tau, te * P.kappa1 ** k, rtol=1e-12)
    assert data.E_f <= tol ** 2


def test_consistency_near_singularity():
    prob = get_problem("singular")
    ind = ConsistencyIndicator(prob)
    tol = 1e-3
    t, tau = 0.9, 0.05
    taus = []
    while t < T_BAR - 1e-6:
        room = min(prob.T - t, 1.0)
        data, tau = consistency_module(ind, t, min(tau, room), tol, P)
        assert data.E_f <= tol ** 2
        taus.append(tau)
        t += tau
    assert taus[-1] < 0.1 * taus[0]


def test_tolfind_constant_data():
    ind = ConsistencyIndicator(_problem(lambda x, y, t: 1 + 0 * x))
    info = {}
    tol_f = tolfind(ind, 1.0, 0.2, P, info)
    assert info["N_f"] == 1 and info["passes"] == 1
    assert np.isclose(tol_f ** 2, 0.04 / 2)


def test_tolfind_singular_guarantee():
    prob = get_problem("singular")
    ind = ConsistencyIndicator(prob)
    TOL_f = math.sqrt(0.025)
    info = {}
    tol_f = tolfind(ind, prob.T, TOL_f, P, info)
    assert 0 < info["N_f"] < 10_000
    assert info["accumulated"] <= 0.5 * TOL_f ** 2
    assert tol_f ** 2 <= TOL_f ** 2 / (2 * info["N_f"]) * (1 + 1e-12)


def test_tolf_from_regularity():
    assert np.isclose(tolf_from_regularity(1.0, 1.0, 1.0, 1.0) ** 2, 2 ** -1.5)
    for s in (0.5, 1.0):
        a = tolf_from_regularity(2.0, 0.4, s, 3.0) ** 2
        b = tolf_from_regularity(2.0, 0.2, s, 3.0) ** 2
        assert np.isclose(b / a, 2 ** (-(2 * s + 1) / s))
    with pytest.raises(InputError):
        tolf_from_regularity(1.0, 1.0, 1.5, 1.0)
    with pytest.raises(InputError):
        tolf_from_regularity(1.0, 1.0, 0.5, 0.0)


def test_adapt_init_meets_tolerance():
    u0 = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    U0, mesh, E0 = adapt_init(u0, square_mesh(2), 1e-5)
    assert E0 <= 1e-5
    assert U0.mesh == mesh
    with pytest.raises(InputError):
        adapt_init(u0, square_mesh(2), 0.0)
    with pytest.raises(ResourceError):
        adapt_init(u0, square_mesh(2), 1e-12, max_dofs=50)


def test_marking():
    m = refine_uniform(square_mesh(1), 2)
    eta = np.zeros(len(m))
    eta[0] = 1.0
    r = mark_refine(eta, m)
    assert len(r) > len(m)
    with pytest.raises(InputError):
        mark_refine(np.ones(3), m)
    fine = refine_uniform(m, 2)
    coarse = coarsen(fine, 1)
    mask = coarsened_elements(coarse, fine)
    assert mask.any()
    r = mark_refine_coarsened(np.ones(len(coarse)), coarse, fine)
    assert len(r) > len(coarse)
    with pytest.raises(InputError):
        mark_refine_coarsened(np.ones(len(fine)), fine, fine)
    assert not coarsened_elements(fine, coarse).any()


def test_afem_zero_data():
    prob = _problem(lambda x, y, t: 0 * x)
    m = square_mesh(2)
    u = FeSpace(m).zero()
    hist = afem(u, SlabData(prob, 0.0, 0.1, 0, 0.0), m, 1e-12, P)
    assert len(hist) == 1 and hist[0][2] == 0.0


def test_afem_rate():
    prob = _problem(lambda x, y, t: 10.0 * np.sin(np.pi * x) * np.sin(np.pi * y) + 0 * t)
    m = square_mesh(2)
    u = FeSpace(m).zero()
    hist = afem(u, SlabData(prob, 0.0, 0.05, 0, 0.0), m, 2e-4, P)
    dofs = np.array([h[1].space.n_dofs for h in hist], dtype=float)
    est = np.array([h[2] for h in hist])
    assert est[-1] <= 2e-4
    keep = dofs > 50
    slope = -np.polyfit(np.log(dofs[keep]), np.log(est[keep]), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_afem_jumping_refines_at_cross_point():
    prob = get_problem("jumping")
    m = prob.make_mesh()
    u = FeSpace(m).zero()
    params = AlgorithmParams(max_inner=10)
    with pytest.raises(ResourceError) as err:
        afem(u, SlabData(prob, 1.4, 0.01, 0, 0.0), m, 0.0, params)
    last_mesh = err.value.partial[-1][0]
    c = last_mesh.points[last_mesh.cells].mean(axis=1)
    finest = np.argsort(last_mesh.areas)[:10]
    # the active centre on (1, 2] is (1, 1)
    assert np.all(np.linalg.norm(c[finest] - [1.0, 1.0], axis=1) < 0.3)


def test_st_adaptation_exit_conditions():
    prob = _problem(lambda x, y, t: 5 * np.sin(np.pi * x) * np.sin(np.pi * y) * np.cos(t),
                    u0=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    ind = ConsistencyIndicator(prob)
    fine = refine_uniform(prob.make_mesh(), 4)
    U = interpolate(prob.u0, FeSpace(fine))
    tol_Gt = 0.05
    step = st_adaptation(U, ind, 0.0, 0.5, coarsen(fine, 2), fine, tol_Gt, P)
    i = step.indicators
    assert i.E_t <= tol_Gt ** 2
    slack = i.E_t + step.E_f + step.tau * tol_Gt
    assert i.E_G_sum <= slack and i.E_c_sum <= slack
    assert i.E_star_sum <= 0 or not coarsened_elements(step.mesh, fine).any()
    assert step.tau <= 0.5 and sum(step.branches.values()) >= 1


def test_forms_cache_reuses():
    prob = get_problem("jumping")
    cache = FormsCache(prob, size=2)
    m = prob.make_mesh()
    a = cache.get(m, 0.1, 0.2)
    assert cache.get(m, 0.3, 0.4) is a
    assert cache.get(m, 1.1, 1.2) is not a


def _decay_problem():
    u0 = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    return ProblemSpec("decay", 0.2, lambda: square_mesh(2), u0, lambda x, y, t: 0 * x, data_levels=2)


def test_tafem_decay_completes_with_budgets():
    log = tafem(_decay_problem(), 0.8)
    tb = log.tolerances
    assert log.status == "completed"
    assert log.final_time == 0.2
    assert all(abs(r.t - (prev.t if prev else 0.0) - r.tau) < 1e-12
               for prev, r in zip([None] + log.steps[:-1], log.steps))
    assert log.E_0 <= tb.TOL0_2
    assert log.sum_E_f <= tb.TOLf_2
    assert log.sum_space_time <= tb.TOLGt_2 + 2 * tb.TOLf_2
    for r in log.steps:
        assert r.E_t <= tb.tol_Gt ** 2
        assert max(r.E_G, r.E_c) <= r.E_t + r.E_f + r.tau * tb.tol_Gt
    s = log.summary()
    assert s["status"] == "completed" and s["steps"] == len(log.steps)


def test_baseline_decay_completes():
    log = astfem_baseline(_decay_problem(), 0.8)
    assert log.status == "completed" and log.final_time == 0.2
    assert log.tau_star > 0
    thr = log.thresholds
    for r in log.steps:
        assert r.E_f <= r.tau * thr["TOLf_tilde2"] * (1 + 1e-12)
        if r.exit == "standard":
            assert max(r.E_t, r.E_G, r.E_c) <= r.tau * thr["TOLGt_tilde2"]


def test_resource_cap_returns_partial_log():
    with pytest.raises(ResourceError) as err:
        tafem(_decay_problem(), 0.3, AlgorithmParams(max_steps=2))
    log = err.value.partial
    assert log.status == "budget-exhausted" and len(log.steps) == 2
    assert "step cap" in log.reason


def test_consistency_near_l2_limit_and_nonfinite_data():
    # |t - a|^(-0.45) needs steps of order 1e-14 at the singular time
    ind = ConsistencyIndicator(_problem(lambda x, y, t: np.abs(t - 0.5) ** -0.45 + 0 * x, singular=(0.5,)))
    data, tau = consistency_module(ind, 0.5, 0.5, 0.5, P)
    assert 0 < tau < 1e-10 and 0 < data.E_f <= 0.25
    bad = ConsistencyIndicator(_problem(lambda x, y, t: np.where(t > 0.5, np.nan, 1.0) + 0 * x))
    with pytest.raises(NumericError):
        consistency_module(bad, 0.25, 0.5, 0.5, P)
