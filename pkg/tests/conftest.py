import pytest

from slowfast_ldp import builtin_linear_model, estimate_invariant, fast_modulated_noise_model

# Reference linear model: b = -x + y, sigma = 1, f = -2y, g = 1.
LINEAR = dict(a=1.0, c=0.0, d=1.0, e=0.0, sigma0=1.0, kappa=2.0, gamma=1.0)

ACCEPTANCE = {}


def record(number, passed, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def linear_model():
    return builtin_linear_model(**LINEAR)


@pytest.fixture(scope="session")
def linear_bank(linear_model):
    return estimate_invariant(linear_model, K=20000, seed=0)


@pytest.fixture(scope="session")
def small_bank(linear_model):
    return estimate_invariant(linear_model, K=2000, seed=1, chains=50)


@pytest.fixture(scope="session")
def modulated_model():
    return fast_modulated_noise_model(a=1.0, d=1.0, kappa=2.0, gamma=1.0)


@pytest.fixture(scope="session")
def reference_minimiser(linear_model, linear_bank):
    """Minimiser of the action for the tail event ``X_T >= Xbar_T + 1``."""
    from slowfast_ldp import Terminal, minimize_action, solve_averaged_ode
    q = float(solve_averaged_ode(linear_model, linear_bank).values[-1, 0]) + 1.0
    psi, result = minimize_action(linear_model, linear_bank, Terminal.halfspace(q))
    return q, psi, result


@pytest.fixture(scope="session")
def is_reference(linear_model, linear_bank, reference_minimiser):
    """Importance-sampled ladder, the minimum action and the exact Gaussian tails."""
    from slowfast_ldp import (TailEvent, gaussian_tail, is_tail, linear_endpoint_law,
                              scale_ladder)
    q, psi, result = reference_minimiser
    ladder = scale_ladder([0.2, 0.1, 0.05])
    table = is_tail(linear_model, ladder, TailEvent.halfspace(q), psi, linear_bank,
                    replicas=10000, N_particles=10000, seed=0)
    exact = [gaussian_tail(*linear_endpoint_law(linear_model.params, s), q) for s in ladder]
    return table, result.value, exact
