"""Acceptance criteria 1-10, each at its stated tolerance.

Every criterion is a function returning ``(passed, detail, fingerprint)``;
the fingerprint holds the raw numbers so criterion 10 can demand bit-identical
reruns. A one-line verdict per criterion is printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from slowfast_ldp import (Control, TailEvent, Terminal, builtin_linear_model,
                          controlled_averaged_path, crude_tail, estimate_invariant,
                          evaluate_action, fast_modulated_noise_model, feedback_control,
                          gaussian_tail, is_tail, ldp_gap, linear_endpoint_law, minimize_action,
                          product_occupation, q_matrix, relaxed_cost, scale_ladder,
                          solve_averaged_ode, variance_reduction)
from slowfast_ldp.errors import InsufficientDataError
from slowfast_ldp.model import MeasureFeatures
from slowfast_ldp.occupation import check_viability
from slowfast_ldp.suite import averaging_errors, holder_increments, moment_sups, \
    occupation_diagnostics

from conftest import LINEAR, record

LADDER = [0.2, 0.1, 0.05]
SEED = 0
SIGMA_T = (1 - math.exp(-2.0)) / 2
I_EXACT = 1 / (2 * SIGMA_T)            # 1.156517...


def _model(**over):
    return builtin_linear_model(**{**LINEAR, **over})


def _bank(model, K=20000):
    return estimate_invariant(model, K=K, seed=SEED)


def _shifted_target(model, bank, shift=1.0):
    return solve_averaged_ode(model, bank).values[-1] + shift


# ---------------------------------------------------------------- criteria

def criterion_1():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    _, res = minimize_action(m, bank, Terminal.point(_shifted_target(m, bank)))
    elapsed = time.perf_counter() - t0
    err = abs(res.value - I_EXACT)
    ok = err < 1e-3 and elapsed < 10
    return ok, f"I*={res.value:.6f} exact={I_EXACT:.6f} |err|={err:.1e} ({elapsed:.1f}s)", \
        (res.value,)


def criterion_2():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    xbar = solve_averaged_ode(m, bank)
    on_path = evaluate_action(xbar, m, bank).value
    _, res = minimize_action(m, bank, Terminal.point(xbar.values[-1]))
    elapsed = time.perf_counter() - t0
    ok = on_path <= 1e-6 and res.value <= 1e-6 and elapsed < 5
    return ok, f"I(Xbar)={on_path:.1e} I*(Xbar_T)={res.value:.1e} ({elapsed:.1f}s)", \
        (on_path, res.value)


AVERAGING_MODEL = dict(c=0.5, x0=1.0)


def criterion_3():
    t0 = time.perf_counter()
    m = _model(**AVERAGING_MODEL)
    bank = _bank(m)
    rows = averaging_errors(m, scale_ladder(LADDER), bank, N=2000, seed=SEED)
    elapsed = time.perf_counter() - t0
    e = [r["mean_sup_sq"] for r in rows]
    decreasing = all(b < a for a, b in zip(e, e[1:]))
    ok = decreasing and e[-1] < 0.05 and elapsed < 300
    se = rows[-1]["stderr"]
    return ok, (f"E sup|X-Xbar|^2 = {', '.join(f'{v:.4f}' for v in e)} "
                f"(decreasing={decreasing}, need <0.05 at delta=0.05, "
                f"got {e[-1]:.4f} +- {se:.4f}) ({elapsed:.0f}s)"), tuple(e)


def criterion_4():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    var = float(np.var(bank.samples))
    x = np.zeros(1)
    q_const = float(q_matrix(x, MeasureFeatures.point_mass(x), bank, m)[0, 0])
    mod = fast_modulated_noise_model(a=1.0, d=1.0, kappa=2.0, gamma=1.0)
    mbank = _bank(mod)
    q_mod = float(q_matrix(x, MeasureFeatures.point_mass(x), mbank, mod)[0, 0])
    elapsed = time.perf_counter() - t0
    target_var = 1.0 / (2 * 2.0)
    ok = (abs(var - target_var) <= 0.1 * target_var and q_const == 1.0
          and abs(q_mod - 1.25) <= 0.05 * 1.25 and elapsed < 60)
    return ok, (f"var={var:.4f} (0.25+-10%) Q_const={q_const!r} Q_mod={q_mod:.4f} "
                f"(1.25+-5%) ({elapsed:.1f}s)"), (var, q_const, q_mod)


def criterion_5():
    t0 = time.perf_counter()
    m = _model()
    # the y-marginal distance sits near the bank's own sampling error; a larger bank
    # resolves the ladder trend
    bank = _bank(m, K=200000)
    W = 50
    rows = occupation_diagnostics(m, scale_ladder(LADDER), bank, N=2000, windows=W,
                                  atoms_per_window=10, seed=SEED)
    elapsed = time.perf_counter() - t0
    w2s = [r["y_marginal_w2"] for r in rows]
    ks = [r["t_marginal_ks"] for r in rows]
    nonincreasing = all(b <= a for a, b in zip(w2s, w2s[1:]))
    ok = w2s[-1] < 0.1 and nonincreasing and all(k <= 1 / (2 * W) for k in ks) and elapsed < 120
    return ok, (f"y-W2 = {', '.join(f'{v:.4f}' for v in w2s)} (nonincreasing={nonincreasing}) "
                f"KS max={max(ks)!r} vs 1/(2W)={1 / (2 * W)!r} ({elapsed:.0f}s)"), \
        tuple(w2s) + tuple(ks)


def criterion_6():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    xbar = solve_averaged_ode(m, bank)
    P = product_occupation(bank, 1.0, 100, d=m.d1 + m.d2)
    good = check_viability(xbar, P, m, bank).ode_residual
    bad = check_viability(xbar.shifted(0.5), P, m, bank).ode_residual
    elapsed = time.perf_counter() - t0
    ok = good < 1e-3 and bad >= 0.4 and elapsed < 30
    return ok, f"residual={good:.1e} shifted={bad:.3f} ({elapsed:.1f}s)", (good, bad)


def criterion_7():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    q = float(_shifted_target(m, bank)[0])
    _, res = minimize_action(m, bank, Terminal.halfspace(q))
    ladder = scale_ladder(LADDER)
    table = crude_tail(m, ladder, TailEvent.halfspace(q), replicas=100000, N_particles=10000,
                       seed=SEED, threads=1)
    elapsed = time.perf_counter() - t0
    exact = [gaussian_tail(*linear_endpoint_law(m.params, s), q) for s in ladder]
    cross = ", ".join(f"d={r.delta}: {r.hits} hits p={r.p_hat:.2e} exact={p:.2e}"
                      for r, p in zip(table.rows, exact))
    fingerprint = tuple(r.hits for r in table.rows)
    try:
        gap = ldp_gap(table, res.value)
    except InsufficientDataError as exc:
        return False, f"{exc}; {cross} ({elapsed:.0f}s)", fingerprint
    ok = gap["relative_error"] < 0.1 and elapsed < 900
    return ok, (f"intercept={gap['intercept']:.4f} vs I*={res.value:.4f} "
                f"(rel {gap['relative_error']:.3f}); {cross} ({elapsed:.0f}s)"), \
        fingerprint + (gap["intercept"],)


def criterion_8():
    t0 = time.perf_counter()
    m = _model()
    bank = _bank(m)
    q = float(_shifted_target(m, bank)[0])
    psi, res = minimize_action(m, bank, Terminal.halfspace(q))
    ctrl = feedback_control(psi, m, bank)
    cost = relaxed_cost(ctrl, bank)
    rebuilt = controlled_averaged_path(ctrl, m, bank)
    recon = float(np.max(np.abs(rebuilt.values - psi.values)))
    ladder = scale_ladder([0.05])
    table = is_tail(m, ladder, TailEvent.halfspace(q), psi, bank, replicas=10000,
                    N_particles=10000, seed=SEED, threads=1)
    row = table.rows[0]
    exact = gaussian_tail(*linear_endpoint_law(m.params, ladder[0]), q)
    vr = variance_reduction(row)
    elapsed = time.perf_counter() - t0
    cost_err = abs(cost - res.value) / res.value
    ok = (cost_err < 1e-3 and recon < 1e-4 and row.ci_low <= exact <= row.ci_high
          and vr >= 10 and elapsed < 600)
    return ok, (f"cost rel err={cost_err:.1e} recon={recon:.1e} "
                f"IS p={row.p_hat:.3e} CI=[{row.ci_low:.3e},{row.ci_high:.3e}] "
                f"exact={exact:.3e} VR={vr:.2e} ESS={row.ess:.0f} ({elapsed:.0f}s)"), \
        (cost, recon, row.p_hat, row.variance)


def criterion_9():
    t0 = time.perf_counter()
    m = _model(c=0.5, x0=1.0)
    control = Control.constant([1.0, 1.0], 1.0)
    rows = moment_sups(m, scale_ladder(LADDER), control, N=2000, seed=SEED)
    sups = [r["mean_sup_sq"] for r in rows]
    ratio = max(sups) / min(sups)
    lags, means, slope = holder_increments(_model(c=0.5), scale_ladder([0.05])[0], N=2000,
                                           seed=SEED)
    elapsed = time.perf_counter() - t0
    ok = ratio < 3 and 0.8 <= slope <= 1.2 and elapsed < 300
    return ok, (f"E sup|X^h|^2 = {', '.join(f'{v:.3f}' for v in sups)} ratio={ratio:.3f}; "
                f"Holder slope={slope:.3f} ({elapsed:.0f}s)"), tuple(sups) + (slope,)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}
_RESULTS = {}


def _run(number):
    if number not in _RESULTS:
        _RESULTS[number] = CRITERIA[number]()
    return _RESULTS[number]


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail, _ = _run(number)
    record(number, ok, detail)
    assert ok, detail


def test_criterion_10_determinism():
    mismatched = []
    for number in sorted(CRITERIA):
        first = _run(number)[2]
        second = CRITERIA[number]()[2]
        if not np.array_equal(np.asarray(first, dtype=float), np.asarray(second, dtype=float)):
            mismatched.append(number)
    ok = not mismatched
    detail = ("all criteria rerun bit-identically with threads=1, seed=0" if ok
              else f"criteria {mismatched} differ on rerun")
    record(10, ok, detail)
    assert ok, detail
