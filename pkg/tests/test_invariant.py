import math

import numpy as np
import pytest

from slowfast_ldp import (InvariantBank, MeasureFeatures, ModelSpec, averaged_coefficients,
                          averaged_drift, builtin_linear_model, ergodicity_rate,
                          estimate_invariant, q_matrix)
from slowfast_ldp.errors import NotDissipativeError, RangeError, SingularQError


def test_bank_matches_lyapunov_variance(linear_bank):
    # -2 kappa v + gamma^2 = 0
    assert np.var(linear_bank.samples) == pytest.approx(0.25, rel=0.05)
    assert abs(linear_bank.samples.mean()) < 0.02
    assert linear_bank.K == 20000


def test_ergodicity_rate_recovers_kappa(linear_model):
    rate = ergodicity_rate(linear_model, (np.ones(1), -np.ones(1)))
    # Euler contraction factor (1 - kappa dt) per step
    dt = 0.001 / 2.0
    assert rate == pytest.approx(-math.log(1 - 2.0 * dt) / dt, rel=1e-9)


def test_ergodicity_rate_errors(linear_model):
    with pytest.raises(RangeError):
        ergodicity_rate(linear_model, (np.zeros(1), np.zeros(1)))
    base = linear_model
    expanding = ModelSpec(n=1, m=1, d1=1, d2=1, b=base.b, sigma=base.sigma, f=lambda y: 0.5 * y,
                          g=base.g, x0=0.0, y0=0.0)
    with pytest.raises(NotDissipativeError):
        ergodicity_rate(expanding, (np.ones(1), -np.ones(1)))


def test_bank_guards(linear_model):
    with pytest.raises(RangeError):
        estimate_invariant(linear_model, burn_in=1.0, K=10, kappa_hat=2.0)
    with pytest.raises(RangeError):
        estimate_invariant(linear_model, thin=0.1, K=10, kappa_hat=2.0)
    with pytest.raises(RangeError):
        estimate_invariant(linear_model, K=0, kappa_hat=2.0)


def test_bank_is_deterministic(linear_model):
    a = estimate_invariant(linear_model, K=500, seed=11, chains=20)
    b = estimate_invariant(linear_model, K=500, seed=11, chains=20)
    assert np.array_equal(a.samples, b.samples)


def test_bank_save_load_roundtrip(tmp_path, small_bank):
    small_bank.save(tmp_path)
    back = InvariantBank.load(tmp_path)
    assert np.array_equal(back.samples, small_bank.samples)
    assert back.kappa_hat == small_bank.kappa_hat and back.chains == small_bank.chains


def test_q_constant_sigma_is_exact(linear_bank):
    m = builtin_linear_model(sigma0=1.7)
    x = np.array([0.3])
    assert q_matrix(x, MeasureFeatures.point_mass(x), linear_bank, m)[0, 0] == pytest.approx(
        1.7 ** 2, rel=1e-14)


def test_q_modulated_noise(modulated_model):
    bank = estimate_invariant(modulated_model, K=20000, seed=2)
    x = np.zeros(1)
    Q = q_matrix(x, MeasureFeatures.point_mass(x), bank, modulated_model)
    # E[1 + y^2] under N(0, 1/4), and exactly the bank's own second moment
    assert Q[0, 0] == pytest.approx(1.25, rel=0.05)
    assert Q[0, 0] == pytest.approx(1 + np.mean(bank.samples ** 2), rel=1e-12)


def test_singular_q_detected(small_bank):
    base = builtin_linear_model()
    flat = ModelSpec(n=1, m=1, d1=1, d2=1, b=base.b,
                     sigma=lambda x, mu, y, nu: np.zeros(np.broadcast_shapes(
                         np.shape(x)[:-1], np.shape(y)[:-1]) + (1, 1)),
                     f=base.f, g=base.g, x0=0.0, y0=0.0)
    x = np.zeros(1)
    with pytest.raises(SingularQError):
        q_matrix(x, MeasureFeatures.point_mass(x), small_bank, flat)


def test_averaged_drift_linear(small_bank):
    a, c, d, e = 1.2, 0.4, 0.9, -0.3
    m = builtin_linear_model(a=a, c=c, d=d, e=e)
    x = np.array([[0.5], [-1.0]])
    mu = MeasureFeatures.point_mass(np.array([[0.2], [0.7]]))
    ybar = small_bank.samples.mean()
    expect = -a * x + c * mu.mean + (d + e) * ybar
    assert np.allclose(averaged_drift(x, mu, small_bank, m), expect, atol=1e-13)


def test_averaged_jacobians_match_finite_differences(small_bank):
    def sigma(x, mu, y, nu):
        return ((1.0 + 0.5 * np.sin(x)) * np.sqrt(1.0 + y ** 2))[..., None]

    def b(x, mu, y, nu):
        return -x ** 3 / 3 + y * np.cos(x)

    base = builtin_linear_model()
    m = ModelSpec(n=1, m=1, d1=1, d2=1, b=b, sigma=sigma, f=base.f, g=base.g, x0=0.0, y0=0.0)
    x = np.array([0.4])
    mu = MeasureFeatures.point_mass(x)
    _, _, db, dQ = averaged_coefficients(x, mu, small_bank, m, jacobians=True)
    h = 1e-5
    bp, Qp = averaged_coefficients(x + h, mu, small_bank, m)
    bm, Qm = averaged_coefficients(x - h, mu, small_bank, m)
    assert db[0, 0] == pytest.approx((bp - bm)[0] / (2 * h), rel=1e-6)
    assert dQ[0, 0, 0] == pytest.approx((Qp - Qm)[0, 0] / (2 * h), rel=1e-6)
