import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from statsmodels.stats.proportion import proportion_confint

from slowfast_ldp import (LadderTable, TailEvent, builtin_linear_model, crude_tail, gaussian_tail,
                          is_tail, ldp_gap, linear_endpoint_law, scale_ladder, variance_reduction)
from slowfast_ldp.errors import EstimatorStarvedError, InsufficientDataError
from slowfast_ldp.ldp import TABLE_COLUMNS, LadderRow, wilson_interval

from conftest import LINEAR


def _lyapunov_endpoint(p, scale, T=1.0):
    """Mean and variance of X_T by stiff integration of the moment ODEs."""
    eps, delta = scale.epsilon, scale.delta
    A = np.array([[-p["a"], p["d"]], [0.0, -p["kappa"] / eps]])
    Am = np.array([[-p["a"] + p.get("c", 0.0), p["d"] + p.get("e", 0.0)],
                   [0.0, -p["kappa"] / eps]])
    BB = np.diag([delta * p["sigma0"] ** 2, p["gamma"] ** 2 / eps])

    def rhs(t, z):
        m, S = z[:2], z[2:].reshape(2, 2)
        return np.concatenate([Am @ m, (A @ S + S @ A.T + BB).ravel()])

    z0 = np.concatenate([[p.get("x0", 0.0), p.get("y0", 0.0)], np.zeros(4)])
    sol = solve_ivp(rhs, (0.0, T), z0, method="Radau", rtol=1e-11, atol=1e-14)
    z = sol.y[:, -1]
    return z[0], z[2]


@pytest.mark.parametrize("delta", [0.2, 0.1, 0.05])
@pytest.mark.parametrize("extra", [{}, {"c": 0.5, "e": 0.3, "x0": 1.0, "y0": 0.5}])
def test_endpoint_law_matches_moment_odes(delta, extra):
    p = {**LINEAR, **extra}
    (s,) = scale_ladder([delta])
    mean, var = linear_endpoint_law(p, s)
    m2, v2 = _lyapunov_endpoint(p, s)
    assert mean == pytest.approx(m2, rel=1e-7, abs=1e-10)
    assert var == pytest.approx(v2, rel=1e-7)


def test_gaussian_tail():
    assert gaussian_tail(0.0, 1.0, 1.959963984540054) == pytest.approx(0.025, rel=1e-9)


@pytest.mark.parametrize("hits,n", [(0, 10), (3, 10), (39, 100000), (10, 10)])
def test_wilson_matches_statsmodels(hits, n):
    lo, hi = wilson_interval(hits, n)
    lo2, hi2 = proportion_confint(hits, n, alpha=0.05, method="wilson")
    assert (lo, hi) == pytest.approx((lo2, hi2), abs=1e-12)


def test_tail_event_parse_and_indicator():
    e = TailEvent.parse("X_T >= 1.5")
    assert (e.kind, e.q, e.index) == ("halfspace", 1.5, 0)
    assert TailEvent.parse("X_T[1]>=-2e-1").index == 1
    with pytest.raises(ValueError):
        TailEvent.parse("X_T <= 1")
    X = np.array([[1.4], [1.5], [2.0]])
    assert e.indicator(X).tolist() == [False, True, True]
    ball = TailEvent.ball_complement([0.0, 0.0], 1.0)
    assert ball.indicator(np.array([[0.5, 0.5], [1.0, 0.1]])).tolist() == [False, True]
    with pytest.raises(ValueError):
        ball.terminal()


def _exact(model, scale, q):
    mean, var = linear_endpoint_law(model.params, scale)
    return gaussian_tail(mean, var, q)


def test_crude_tail_covers_exact(linear_model):
    ladder = scale_ladder([0.2, 0.1])
    event = TailEvent.halfspace(0.3)
    table = crude_tail(linear_model, ladder, event, replicas=4000, N_particles=2000, seed=1)
    for row, s in zip(table.rows, ladder):
        p = _exact(linear_model, s, 0.3)
        assert abs(row.p_hat - p) < 4 * math.sqrt(p * (1 - p) / row.replicas)
        assert row.replicas == 4000 and row.ess == 4000


def test_crude_threads_are_bit_identical(linear_model):
    ladder = scale_ladder([0.2])
    event = TailEvent.halfspace(0.2)
    a = crude_tail(linear_model, ladder, event, replicas=1500, N_particles=400, seed=3, threads=1)
    b = crude_tail(linear_model, ladder, event, replicas=1500, N_particles=400, seed=3, threads=3)
    assert a.rows[0].hits == b.rows[0].hits and a.rows[0].p_hat == b.rows[0].p_hat


def test_crude_starved(linear_model):
    with pytest.raises(EstimatorStarvedError):
        crude_tail(linear_model, scale_ladder([0.1]), TailEvent.halfspace(5.0), replicas=100)


def test_importance_sampling_small(linear_model, small_bank):
    from slowfast_ldp import Terminal, minimize_action, solve_averaged_ode
    q = float(solve_averaged_ode(linear_model, small_bank).values[-1, 0]) + 1.0
    psi, _ = minimize_action(linear_model, small_bank, Terminal.halfspace(q), K_nodes=100)
    ladder = scale_ladder([0.2])
    t = is_tail(linear_model, ladder, TailEvent.halfspace(q), psi, small_bank, replicas=2000,
                N_particles=1000, seed=0)
    row = t.rows[0]
    p = _exact(linear_model, ladder[0], q)
    assert abs(row.p_hat - p) < 4 * math.sqrt(row.variance / row.replicas)
    assert variance_reduction(row) > 10
    assert row.ess > 100 and row.flag == ""


def test_ldp_gap_recovers_affine_intercept():
    rows = [LadderRow(delta=d, p_hat=math.exp(-(1.2 + 0.5 * d) / d), ci_low=0, ci_high=1,
                      neg_delta_log_p=1.2 + 0.5 * d, ess=1) for d in (0.2, 0.1, 0.05)]
    g = ldp_gap(LadderTable(rows), 1.2)
    assert g["intercept"] == pytest.approx(1.2) and g["slope"] == pytest.approx(0.5)
    assert g["monotone"] and g["relative_error"] == pytest.approx(0.0, abs=1e-12)


def test_ldp_gap_needs_three_rungs():
    rows = [LadderRow(delta=d, p_hat=0.0, ci_low=0, ci_high=0, neg_delta_log_p=math.nan, ess=0)
            for d in (0.2, 0.1)]
    rows.append(LadderRow(delta=0.05, p_hat=0.1, ci_low=0, ci_high=1,
                          neg_delta_log_p=0.1, ess=1))
    with pytest.raises(InsufficientDataError):
        ldp_gap(LadderTable(rows), 1.0)


def test_variance_reduction_definition():
    row = LadderRow(delta=0.1, p_hat=0.01, ci_low=0, ci_high=1, neg_delta_log_p=0, ess=1,
                    variance=1e-5)
    assert variance_reduction(row) == pytest.approx(0.0099 / 1e-5)


def test_table_csv(tmp_path):
    rows = [LadderRow(delta=0.1, p_hat=0.5, ci_low=0.4, ci_high=0.6,
                      neg_delta_log_p=0.1 * math.log(2), ess=10.0)]
    LadderTable(rows).to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TABLE_COLUMNS)
    back = LadderTable.from_csv(tmp_path / "t.csv")
    assert back.rows[0].p_hat == 0.5 and back.rows[0].neg_delta_log_p == rows[0].neg_delta_log_p


def test_is_ladder_rate_matches_action(is_reference):
    """The exponential rate from importance sampling agrees with I*."""
    table, I_star, exact = is_reference
    for row, p in zip(table.rows, exact):
        assert abs(row.p_hat - p) < 4 * math.sqrt(row.variance / row.replicas)
    gap = ldp_gap(table, I_star)
    assert gap["relative_error"] < 0.1
