"""Coefficients, scale schedules and built-in test models.

Coefficient functions follow a broadcasting contract: every array argument
carries arbitrary leading batch axes, and ``MeasureFeatures`` fields broadcast
against those axes. Shapes:

* ``b(x, mu, y, nu)``     x ``(..., n)``, y ``(..., m)``  -> ``(..., n)``
* ``sigma(x, mu, y, nu)`` -> ``(..., n, d1)``
* ``f(y)``                -> ``(..., m)``
* ``g(y)``                -> ``(..., m, d2)``

``mu.mean`` has shape ``(..., n)`` and ``mu.second_moment`` shape ``(...)``.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidModelError, ModelEvaluationError, RangeError
from .rng import substream


@dataclass(frozen=True)
class MeasureFeatures:
    """Moment summary of a probability measure on R^k.

    ``second_moment`` is E|X|^2, i.e. the covariance trace plus ``|mean|^2``.
    ``samples`` optionally keeps the atoms for quadrature.
    """

    mean: np.ndarray
    second_moment: np.ndarray
    samples: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def point_mass(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(mean=x, second_moment=np.sum(x * x, axis=-1))

    @classmethod
    def from_samples(cls, samples, weights=None):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] == 0:
            raise ValueError("cannot take features of an empty sample set")
        if weights is None:
            mean = samples.mean(axis=0)
            second = np.mean(np.sum(samples * samples, axis=1))
        else:
            w = np.asarray(weights, dtype=float)
            mean = w @ samples
            second = w @ np.sum(samples * samples, axis=1)
        return cls(mean=mean, second_moment=np.asarray(second), samples=samples)

    @property
    def variance_trace(self):
        return self.second_moment - np.sum(self.mean * self.mean, axis=-1)

    def expand(self, axis):
        """Insert a batch axis (counted on the batch dims, negative allowed)."""
        mean = np.expand_dims(self.mean, axis - 1 if axis < 0 else axis)
        second = np.expand_dims(self.second_moment, axis)
        return MeasureFeatures(mean=mean, second_moment=second)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient quadruple of the slow-fast mean-field system.

    Optional ``b_dx`` ``(..., n, n)`` and ``sigma_dx`` ``(..., n, d1, n)``
    supply x-Jacobians for the action gradient; when absent they are taken by
    central differences of ``b`` and ``sigma``.
    """

    n: int
    m: int
    d1: int
    d2: int
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    x0: np.ndarray
    y0: np.ndarray
    b_dx: Optional[Callable] = None
    sigma_dx: Optional[Callable] = None
    measure_dependent: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.n))
        object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float).reshape(self.m))

    def drift_jacobian(self, x, mu, y, nu, h=1e-6):
        if self.b_dx is not None:
            return self.b_dx(x, mu, y, nu)
        cols = []
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = h
            cols.append((self.b(x + e, mu, y, nu) - self.b(x - e, mu, y, nu)) / (2 * h))
        return np.stack(cols, axis=-1)

    def sigma_jacobian(self, x, mu, y, nu, h=1e-6):
        if self.sigma_dx is not None:
            return self.sigma_dx(x, mu, y, nu)
        cols = []
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = h
            cols.append((self.sigma(x + e, mu, y, nu) - self.sigma(x - e, mu, y, nu)) / (2 * h))
        return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ScalePoint:
    delta: float
    epsilon: float
    Delta: float

    def __post_init__(self):
        if min(self.delta, self.epsilon, self.Delta) <= 0:
            raise RangeError("scale parameters must be strictly positive")

    @property
    def eps_over_delta(self):
        return self.epsilon / self.delta

    @property
    def separation(self):
        """epsilon / (delta * Delta), which must be below 1."""
        return self.epsilon / (self.delta * self.Delta)

    def is_valid(self):
        return self.eps_over_delta < 1 and self.separation < 1


def scale_ladder(delta_values):
    """Build rungs with ``epsilon = delta**2`` and ``Delta = sqrt(delta)``."""
    deltas = [float(d) for d in delta_values]
    if not deltas:
        raise RangeError("empty delta ladder")
    for d in deltas:
        if not 0 < d < 1:
            raise RangeError(f"delta={d} outside (0, 1)")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise RangeError("delta ladder must be strictly decreasing")
    return [ScalePoint(delta=d, epsilon=d * d, Delta=d ** 0.5) for d in deltas]


def default_dt(scale, fast_rate=1.0):
    """Step size resolving the fast drift.

    The fast-time step ``dt / eps`` is ``min(1/10, delta/2) / max(1, rate)``, so the
    Euler bias of the fast stationary law is O(delta) and vanishes along the ladder.
    The result is also capped at ``Delta / 20``.
    """
    h = min(0.1, scale.delta / 2.0) / max(1.0, float(fast_rate))
    return min(scale.epsilon * h, scale.Delta / 20.0)


# ---------------------------------------------------------------- builders

def builtin_linear_model(a=1.0, c=0.0, d=0.0, e=0.0, sigma0=1.0, kappa=1.0, gamma=1.0,
                         x0=0.0, y0=0.0, dim=1):
    """Linear slow drift with an Ornstein-Uhlenbeck fast process.

    ``b = -a x + c mean(mu) + d y + e mean(nu)``, ``sigma = sigma0 I``,
    ``f = -kappa y``, ``g = gamma I``; all dimensions equal ``dim``.
    """
    if not kappa > 0:
        raise InvalidModelError(f"kappa must be positive, got {kappa}")
    if not sigma0 > 0:
        raise InvalidModelError(f"sigma0 must be positive, got {sigma0}")
    k = int(dim)
    eye = np.eye(k)

    def b(x, mu, y, nu):
        return -a * x + c * mu.mean + d * y + e * nu.mean

    def sigma(x, mu, y, nu):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(sigma0 * eye, shape + (k, k))

    def f(y):
        return -kappa * y

    def g(y):
        return np.broadcast_to(gamma * eye, np.shape(y)[:-1] + (k, k))

    def b_dx(x, mu, y, nu):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(-a * eye, shape + (k, k))

    def sigma_dx(x, mu, y, nu):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.zeros(shape + (k, k, k))

    return ModelSpec(
        n=k, m=k, d1=k, d2=k, b=b, sigma=sigma, f=f, g=g,
        x0=np.broadcast_to(np.asarray(x0, dtype=float), (k,)),
        y0=np.broadcast_to(np.asarray(y0, dtype=float), (k,)),
        b_dx=b_dx, sigma_dx=sigma_dx,
        measure_dependent=(c != 0 or e != 0),
        name="linear",
        params=dict(a=a, c=c, d=d, e=e, sigma0=sigma0, kappa=kappa, gamma=gamma,
                    x0=x0, y0=y0, dim=dim),
    )


def fast_modulated_noise_model(a=1.0, c=0.0, d=0.0, kappa=2.0, gamma=1.0, x0=0.0, y0=0.0):
    """1-D linear model whose slow noise satisfies ``sigma(y)^2 = 1 + y^2``."""
    base = builtin_linear_model(a=a, c=c, d=d, kappa=kappa, gamma=gamma, x0=x0, y0=y0)

    def sigma(x, mu, y, nu):
        s = np.sqrt(1.0 + y[..., :1] ** 2)
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(s[..., None], shape + (1, 1))

    return ModelSpec(
        n=1, m=1, d1=1, d2=1, b=base.b, sigma=sigma, f=base.f, g=base.g,
        x0=base.x0, y0=base.y0, b_dx=base.b_dx, sigma_dx=base.sigma_dx,
        measure_dependent=base.measure_dependent, name="modulated",
        params=dict(a=a, c=c, d=d, kappa=kappa, gamma=gamma, x0=x0, y0=y0),
    )


MODEL_REGISTRY = {
    "linear": builtin_linear_model,
    "modulated": fast_modulated_noise_model,
}


def register_model(name, builder):
    """Make ``builder(**params) -> ModelSpec`` available to configs as ``model.kind``."""
    MODEL_REGISTRY[name] = builder


def build_model(kind, params=None):
    try:
        builder = MODEL_REGISTRY[kind]
    except KeyError:
        raise InvalidModelError(f"unknown model kind {kind!r}") from None
    return builder(**(params or {}))


# ---------------------------------------------------------------- probing

@dataclass
class AssumptionReport:
    lipschitz_b: float
    lipschitz_sigma: float
    lipschitz_f: float
    lipschitz_g: float
    dissipativity_kappa: float
    ellipticity: tuple
    g_bound: float
    probe_count: int
    radius: float
    violations: list = field(default_factory=list)

    @property
    def accepted(self):
        return self.dissipativity_kappa > 0 and self.ellipticity[0] > 0

    def to_dict(self):
        return {
            "lipschitz_b": self.lipschitz_b,
            "lipschitz_sigma": self.lipschitz_sigma,
            "lipschitz_f": self.lipschitz_f,
            "lipschitz_g": self.lipschitz_g,
            "dissipativity_kappa": self.dissipativity_kappa,
            "ellipticity": list(self.ellipticity),
            "g_bound": self.g_bound,
            "probe_count": self.probe_count,
            "radius": self.radius,
            "violations": self.violations,
        }


def _ball(rng, count, dim, radius):
    v = rng.standard_normal((count, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return v * r[:, None]


def _features_batch(rng, count, dim, radius):
    mean = _ball(rng, count, dim, radius)
    spread = radius * rng.random(count)
    return MeasureFeatures(mean=mean, second_moment=np.sum(mean ** 2, axis=1) + spread ** 2)


def _feature_distance(p, q):
    # Gaussian representative: W2^2 = |dm|^2 + (d sd)^2
    sd_p = np.sqrt(np.maximum(p.variance_trace, 0.0))
    sd_q = np.sqrt(np.maximum(q.variance_trace, 0.0))
    return np.sqrt(np.sum((p.mean - q.mean) ** 2, axis=-1) + (sd_p - sd_q) ** 2)


def _check_finite(value, label, args):
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(value.reshape(value.shape[0], -1)))[0, 0]
        point = {k: np.asarray(v)[bad].tolist() for k, v in args.items()}
        raise ModelEvaluationError(f"{label} returned a non-finite value", point=point)
    return value


def _fro(a):
    return np.sqrt(np.sum(np.asarray(a) ** 2, axis=(-2, -1)))


def probe_assumptions(model, probe_count=256, radius=5.0, seed=0):
    """Estimate Lipschitz, dissipativity and ellipticity constants on a ball.

    Each probe pair is evaluated jointly and with a single argument perturbed,
    so per-argument constants of linear coefficients are recovered exactly.
    """
    if probe_count < 2:
        raise RangeError("probe_count must be at least 2")
    rng = substream(seed, "probe")
    n, m, P = model.n, model.m, int(probe_count)

    def draw():
        return (_ball(rng, P, n, radius), _features_batch(rng, P, n, radius),
                _ball(rng, P, m, radius), _features_batch(rng, P, m, radius))

    base = draw()
    other = draw()

    def sel(mask, p, q):
        if isinstance(p, MeasureFeatures):
            return MeasureFeatures(np.where(mask[:, None], q.mean, p.mean),
                                   np.where(mask, q.second_moment, p.second_moment))
        return np.where(mask[:, None], q, p)

    def dist(p, q):
        return (np.linalg.norm(p[0] - q[0], axis=1) + _feature_distance(p[1], q[1])
                + np.linalg.norm(p[2] - q[2], axis=1) + _feature_distance(p[3], q[3]))

    # zero-distance pairs are redrawn
    for _ in range(10):
        zero = dist(base, other) <= 1e-12
        if not zero.any():
            break
        fresh = draw()
        other = tuple(sel(zero, o, f) for o, f in zip(other, fresh))

    pairs = [other]
    for i in range(4):
        pert = list(base)
        if isinstance(base[i], MeasureFeatures):
            # mean shift at equal spread, so the feature distance is |d mean|
            mean = other[i].mean
            pert[i] = MeasureFeatures(mean, np.sum(mean ** 2, axis=1) + base[i].variance_trace)
        else:
            pert[i] = other[i]
        pairs.append(tuple(pert))

    def evaluate(args):
        x, mu, y, nu = args
        named = {"x": x, "y": y}
        bv = _check_finite(model.b(x, mu, y, nu), "b", named)
        sv = _check_finite(model.sigma(x, mu, y, nu), "sigma", named)
        return bv, sv

    b0, s0 = evaluate(base)
    lip_b = lip_s = 0.0
    for q in pairs:
        dq = dist(base, q)
        ok = dq > 1e-12
        if not ok.any():
            continue
        b1, s1 = evaluate(q)
        lip_b = max(lip_b, float(np.max(np.linalg.norm(b1 - b0, axis=1)[ok] / dq[ok])))
        lip_s = max(lip_s, float(np.max(_fro(s1 - s0)[ok] / dq[ok])))

    y1, y2 = base[2], other[2]
    dy = np.linalg.norm(y1 - y2, axis=1)
    keep = dy > 1e-12
    y1, y2, dy = y1[keep], y2[keep], dy[keep]
    f1 = _check_finite(model.f(y1), "f", {"y": y1})
    f2 = _check_finite(model.f(y2), "f", {"y": y2})
    g1 = _check_finite(model.g(y1), "g", {"y": y1})
    g2 = _check_finite(model.g(y2), "g", {"y": y2})
    lip_f = float(np.max(np.linalg.norm(f1 - f2, axis=1) / dy))
    lip_g = float(np.max(_fro(g1 - g2) / dy))
    ratio = (2 * np.sum((f1 - f2) * (y1 - y2), axis=1) + 3 * _fro(g1 - g2) ** 2) / dy ** 2
    kappa_hat = float(-np.max(ratio))
    g_bound = float(max(np.max(_fro(g1)), np.max(_fro(g2))))

    eig = np.linalg.eigvalsh(np.einsum("...ij,...kj->...ik", s0, s0))
    c1, c2 = float(np.min(eig)), float(np.max(eig))

    violations = []
    for idx in np.flatnonzero(ratio >= 0):
        violations.append({"kind": "dissipativity", "y1": y1[idx].tolist(), "y2": y2[idx].tolist(),
                           "ratio": float(ratio[idx])})
    for idx in np.flatnonzero(eig.min(axis=-1) <= 0):
        violations.append({"kind": "ellipticity", "x": base[0][idx].tolist(),
                           "y": base[2][idx].tolist()})

    return AssumptionReport(
        lipschitz_b=lip_b, lipschitz_sigma=lip_s, lipschitz_f=lip_f, lipschitz_g=lip_g,
        dissipativity_kappa=kappa_hat, ellipticity=(c1, c2), g_bound=g_bound,
        probe_count=P, radius=float(radius), violations=violations,
    )
