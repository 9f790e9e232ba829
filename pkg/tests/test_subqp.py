import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from evshare.errors import InfeasibleProblemError, InvalidParameterError, NonConvergenceError
from evshare.model import QueueState, simultaneous_flags
from evshare.queues import LyapunovParams, p3_station_objective
from evshare.subqp import (
    GenericQp,
    SubproblemSpec,
    build_subproblem,
    generic_qp_solve,
    interior_qp_solve,
    solve_dual_bisection,
)
from evshare.subqp.bisection import BATT_CHG, BATT_DIS, DEMAND, GRID_BUY, GRID_SELL

from conftest import cvx_spec_optimum, random_spec, random_state, state, stations


def lp(v=1.0, w=0.0, n=1):
    return LyapunovParams(v, w, np.zeros(n), 0.0)


def coef(spec, name):
    return spec.linear[spec.names.index(name)]


def test_spec_invariants():
    kw = dict(names=("a", "b"), linear=[0, 0], quadratic=[0, 0], lo=[0, 0], hi=[1, 1], balance=[1, 1], rhs=1.0)
    SubproblemSpec(**kw)
    with pytest.raises(InvalidParameterError):
        SubproblemSpec(**{**kw, "quadratic": [-1, 0]})
    with pytest.raises(InvalidParameterError):
        SubproblemSpec(**{**kw, "lo": [2, 0]})
    with pytest.raises(InvalidParameterError):
        SubproblemSpec(**{**kw, "balance": [0, 0]})


def test_build_subproblem_queue_free_coefficients():
    p = stations(1)[0]
    s = state(buy=0.12, sell=0.01, pv=(1.0,), dmin=(1.0,), dmax=(4.0,))
    spec = build_subproblem(0, s, QueueState([50.0], [0.0], [0.0]), lp(), p, rho=1.0)
    assert coef(spec, GRID_BUY) == pytest.approx(0.12)
    assert coef(spec, GRID_SELL) == pytest.approx(-0.01)
    assert coef(spec, BATT_DIS) == pytest.approx(p.c_batt)
    assert coef(spec, BATT_CHG) == pytest.approx(p.c_batt)
    assert coef(spec, DEMAND) == pytest.approx(-2 * p.alpha * 4.0)
    assert spec.quadratic[spec.names.index(DEMAND)] == pytest.approx(p.alpha)


def test_build_subproblem_negative_queue_encourages_charging():
    p = stations(1)[0]
    s = state()
    spec = build_subproblem(0, s, QueueState([50.0], [-30.0], [0.0]), lp(v=2.0), p)
    assert coef(spec, BATT_CHG) == pytest.approx(-28.5 + 2.0 * p.c_batt)


def test_build_subproblem_share_terms():
    params = stations(3, share=4.0)
    s = state(pv=(0, 0, 0), dmin=(1, 1, 1), dmax=(3, 3, 3))
    eps = np.array([0.0, 1.5, -0.5])
    duals = np.array([0.0, 0.2, -0.4])
    spec = build_subproblem(0, s, QueueState([50] * 3, [0] * 3, [0] * 3), lp(v=3.0, n=3), params[0], eps, duals, rho=2.0)
    k1 = spec.names.index("share_1")
    assert spec.linear[k1] == pytest.approx(3.0 * s.price_share + 2.0 * (0.2 / 2.0 - 1.5))
    assert spec.quadratic[k1] == pytest.approx(1.0)
    assert (spec.lo[k1], spec.hi[k1]) == (-4.0, 4.0)


def test_spec_objective_matches_p3_plus_penalty(rng):
    params = stations(3, share=4.0)
    for _ in range(20):
        s = random_state(rng, 3)
        q = QueueState([50] * 3, rng.normal(0, 20, 3), rng.uniform(0, 1, 3))
        lpar = LyapunovParams(rng.uniform(1, 100), rng.uniform(0, 10), np.zeros(3), 0.0)
        eps = rng.normal(0, 2, 3)
        duals = rng.normal(0, 1, 3)
        rho = rng.uniform(0.1, 3)
        spec = build_subproblem(1, s, q, lpar, params[1], eps, duals, rho=rho)
        x = solve_dual_bisection(spec).x
        d = spec.to_decision(x)
        penalty = sum(rho / 2 * (d.share[j] - eps[j] + duals[j] / rho) ** 2 for j in (0, 2))
        expected = p3_station_objective(d, s, q, lpar, params[1], check=False) + penalty
        assert spec.objective(x) == pytest.approx(expected, abs=1e-9 * max(1.0, abs(expected)))


def test_self_sufficient_station():
    p = stations(1)[0]
    # a zero feed-in price; with price_sell > 0 shedding the last
    # price_sell/(2*alpha) kWh and selling it is strictly better
    s = state(buy=0.12, sell=0.0, pv=(4.0,), dmin=(1.0,), dmax=(4.0,))
    spec = build_subproblem(0, s, QueueState([50.0], [0.0], [0.0]), lp(), p)
    sol = solve_dual_bisection(spec)
    d = sol.decision
    assert d.demand_served == pytest.approx(4.0)
    assert d.grid_buy == d.grid_sell == d.batt_dis == d.batt_chg == 0.0
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_arbitrage_is_flagged_not_hidden():
    # buy below sell breaks the no-arbitrage ordering: the station buys and
    # sells at once, up to the cap on the side balance allows
    p = stations(1)[0]
    s = state(buy=0.12, sell=0.01, pv=(4.0,), dmin=(1.0,), dmax=(4.0,))
    s.price_buy, s.price_sell = 0.01, 0.05
    spec = build_subproblem(0, s, QueueState([50.0], [0.0], [0.0]), lp(), p, grid_cap=30.0)
    d = solve_dual_bisection(spec).decision
    assert d.grid_sell == pytest.approx(30.0) and d.grid_buy > 20.0
    assert "grid" in simultaneous_flags(d)


def test_infeasible_spec_raises():
    spec = SubproblemSpec(("a", "b"), [0, 0], [0, 0], [0, 0], [1, 1], [1, 1], rhs=5.0)
    with pytest.raises(InfeasibleProblemError):
        solve_dual_bisection(spec)


def test_bisection_matches_convex_oracle(rng):
    for _ in range(60):
        spec = random_spec(rng)
        sol = solve_dual_bisection(spec)
        ref, _ = cvx_spec_optimum(spec)
        assert sol.objective == pytest.approx(ref, abs=1e-6)
        assert abs(spec.balance_residual(sol.x)) <= 1e-6
        assert spec.kkt_violation(sol.x, sol.multiplier) <= 1e-6


def test_bisection_matches_generic_qp(rng):
    for _ in range(30):
        spec = random_spec(rng)
        sol = solve_dual_bisection(spec)
        res = generic_qp_solve(spec.as_qp())
        assert sol.objective == pytest.approx(res.objective + spec.const, abs=1e-6)


def test_bisection_deterministic(rng):
    spec = random_spec(rng, n_share=2)
    a = solve_dual_bisection(spec)
    b = solve_dual_bisection(spec)
    assert np.array_equal(a.x, b.x)


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_bisection_kkt_certificate(seed):
    spec = random_spec(np.random.default_rng(seed))
    sol = solve_dual_bisection(spec)
    assert np.all(sol.x >= spec.lo - 1e-12) and np.all(sol.x <= spec.hi + 1e-12)
    assert abs(spec.balance_residual(sol.x)) <= 1e-6
    assert spec.kkt_violation(sol.x, sol.multiplier) <= 1e-6


# ---- generic QP -----------------------------------------------------------


def test_generic_unconstrained():
    res = generic_qp_solve(GenericQp(P=[[1.0]], q=[-1.0], lo=[-1e30], hi=[1e30]))
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)


def test_generic_active_bound():
    res = generic_qp_solve(GenericQp(P=[[1.0]], q=[-10.0], lo=[0.0], hi=[3.0]))
    assert res.x[0] == pytest.approx(3.0, abs=1e-8)


def test_generic_nonconvergence_reports_residuals():
    qp = GenericQp(P=sp.identity(3), q=[1.0, -2.0, 0.5], lo=[-1, -1, -1], hi=[1, 1, 1], A_eq=[[1, 1, 1]], b_eq=[0.3])
    with pytest.raises(NonConvergenceError) as info:
        generic_qp_solve(qp, max_iter=1, polish=False)
    assert "primal" in info.value.residuals


def test_generic_two_slot_battery_brute_force():
    # two slots, one battery: buy energy to serve demand, shift it with the battery
    price = np.array([0.05, 0.3])
    demand = np.array([2.0, 4.0])
    soc0, cap, pmax, eta = 1.0, 5.0, 3.0, 0.9
    # variables per slot: buy, dis, chg ; balance buy + dis - chg = demand
    # soc_t+1 = soc_t - dis/eta + eta*chg within [0, cap]; small quadratic on buy
    n = 6
    P = sp.diags([0.02, 0, 0, 0.02, 0, 0])
    q = np.array([price[0], 0.01, 0.01, price[1], 0.01, 0.01])
    A_eq = [[1, 1, -1, 0, 0, 0], [0, 0, 0, 1, 1, -1]]
    A_in = [
        [0, -1 / eta, eta, 0, 0, 0],
        [0, 1 / eta, -eta, 0, 0, 0],
        [0, -1 / eta, eta, 0, -1 / eta, eta],
        [0, 1 / eta, -eta, 0, 1 / eta, -eta],
    ]
    b_in = [cap - soc0, soc0, cap - soc0, soc0]
    qp = GenericQp(P, q, np.zeros(n), [20, pmax, pmax, 20, pmax, pmax], A_eq, demand, A_in, b_in)
    res = generic_qp_solve(qp)
    assert qp.max_violation(res.x) <= 1e-7
    ipm = interior_qp_solve(qp)
    assert ipm.objective == pytest.approx(res.objective, abs=1e-7)

    def grid_best(d0, c0, d1, c1):
        X = np.stack(np.broadcast_arrays(demand[0] - d0 + c0, d0, c0, demand[1] - d1 + c1, d1, c1), axis=-1)
        X = X.reshape(-1, n)
        obj = 0.5 * np.einsum("ij,jk,ik->i", X, P.toarray(), X) + X @ q
        ok = np.all(X >= -1e-12, axis=1) & np.all(X <= np.asarray(qp.hi) + 1e-12, axis=1)
        ok &= np.all(X @ np.asarray(A_in).T <= np.asarray(b_in) + 1e-12, axis=1)
        return float(np.min(np.where(ok, obj, np.inf)))

    # charging and discharging in one slot is dominated (degradation cost and
    # efficiency loss), so each slot's battery move is one signed amount
    a = np.round(np.arange(-pmax, pmax + 1e-9, 0.01), 2)
    a0, a1 = np.meshgrid(a, a, indexing="ij")
    best = grid_best(np.maximum(-a0, 0), np.maximum(a0, 0), np.maximum(-a1, 0), np.maximum(a1, 0))
    # grid error: each coordinate within 0.01 of the optimum, gradient below ~0.5
    assert res.objective <= best + 1e-9
    assert res.objective >= best - 0.02


def test_generic_matches_cvxpy_random(rng):
    import cvxpy as cp

    for _ in range(10):
        n, m_eq, m_in = 8, 2, 3
        M = rng.normal(size=(n, n))
        P = M @ M.T * 0.1 + np.diag(rng.uniform(0, 1, n))
        q = rng.normal(size=n)
        lo, hi = -rng.uniform(0.5, 3, n), rng.uniform(0.5, 3, n)
        x0 = rng.uniform(lo, hi)
        A_eq = rng.normal(size=(m_eq, n))
        A_in = rng.normal(size=(m_in, n))
        b_in = A_in @ x0 + rng.uniform(0, 1, m_in)
        qp = GenericQp(P, q, lo, hi, A_eq, A_eq @ x0, A_in, b_in)
        res = generic_qp_solve(qp)
        x = cp.Variable(n)
        prob = cp.Problem(
            cp.Minimize(0.5 * cp.quad_form(x, P) + q @ x),
            [x >= lo, x <= hi, A_eq @ x == A_eq @ x0, A_in @ x <= b_in],
        )
        prob.solve(solver=cp.CLARABEL)
        assert res.objective == pytest.approx(prob.value, abs=1e-7)


def test_generic_deterministic(rng):
    spec = random_spec(rng, n_share=2)
    a = generic_qp_solve(spec.as_qp())
    b = generic_qp_solve(spec.as_qp())
    assert np.array_equal(a.x, b.x)


def test_interior_matches_generic_on_random_qps(rng):
    for _ in range(10):
        n, m_eq, m_in = 8, 2, 3
        M = rng.normal(size=(n, n))
        P = M @ M.T * 0.1
        q = rng.normal(size=n)
        lo, hi = -rng.uniform(0.5, 3, n), rng.uniform(0.5, 3, n)
        lo[0] = hi[0] = 0.25  # a fixed variable
        hi[1] = np.inf
        x0 = np.clip(rng.uniform(lo, np.minimum(hi, 3)), lo, hi)
        A_eq = rng.normal(size=(m_eq, n))
        A_in = rng.normal(size=(m_in, n))
        b_in = A_in @ x0 + rng.uniform(0, 1, m_in)
        qp = GenericQp(P + np.eye(n) * 1e-3, q, lo, hi, A_eq, A_eq @ x0, A_in, b_in)
        a = interior_qp_solve(qp)
        b = generic_qp_solve(qp)
        assert a.x[0] == 0.25
        assert qp.max_violation(a.x) <= 1e-7
        assert a.objective == pytest.approx(b.objective, abs=1e-6)


def test_interior_reports_infeasibility():
    from evshare.errors import InfeasibleProblemError

    qp = GenericQp(P=np.eye(2), q=np.zeros(2), lo=[0, 0], hi=[1, 1], A_eq=[[1.0, 1.0]], b_eq=[5.0])
    with pytest.raises(InfeasibleProblemError):
        interior_qp_solve(qp)


def test_bisection_root_on_rounded_breakpoint():
    # the balance root sits on grid_buy's breakpoint, where the left-limit
    # residual evaluates to -9e-16 instead of 0
    spec = SubproblemSpec(
        names=("grid_buy", "grid_sell", "share_0", "share_2", "batt_dis", "batt_chg", "demand_served"),
        linear=np.array([27.221877798443202, -13.610938899221601, 28.61042752652219, 28.886126123023278,
                         56.717982635342175, -25.293168072627218, -572.7709590141263]),
        quadratic=np.array([0.0, 0.0, 1.5, 1.5, 0.0, 0.0, 136.10938899221603]),
        lo=np.array([0.0, 0.0, -15.0, -15.0, 0.0, 0.0, 1.0069595429884561]),
        hi=np.array([37.128209255981524, 37.128209255981524, 15.0, 15.0, 3.3333333333333335,
                     3.3333333333333335, 1.6782659049807602]),
        balance=np.array([-1.0, 1.0, -1.0, -1.0, -1.0, 1.0, 1.0]),
        rhs=2.6958652558671155,
        const=601.0458174235719,
        station=1,
        n_stations=3,
        share_index=(0, 2),
        share_target=np.array([-2.7313397258965972, -2.823239258063626]),
    )
    sol = solve_dual_bisection(spec)
    assert abs(spec.balance_residual(sol.x)) <= 1e-9
    assert spec.kkt_violation(sol.x, sol.multiplier) <= 1e-6
    assert sol.objective == pytest.approx(cvx_spec_optimum(spec)[0], abs=1e-6)
