"""Empirical measures and Wasserstein-2 distances."""
import csv
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from .errors import RangeError
from .model import MeasureFeatures
from .rng import substream

QUANTILE_GRID = 2048
KS_DENOMINATOR = 10 ** 12


@dataclass(frozen=True)
class EmpiricalMeasure:
    samples: np.ndarray
    weights: np.ndarray

    def __init__(self, samples, weights=None):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise ValueError("samples must be a (count, dim) array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("non-finite sample in empirical measure")
        count = samples.shape[0]
        if weights is None:
            weights = np.full(count, 1.0 / count) if count else np.zeros(0)
        else:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (count,) or np.any(weights < 0):
                raise ValueError("weights must be nonnegative, one per sample")
            if count and abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError("weights must sum to 1")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    @property
    def uniform(self):
        return np.allclose(self.weights, 1.0 / len(self), rtol=0, atol=1e-15)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["w"] + [f"x{i + 1}" for i in range(self.dim)])
            for wi, row in zip(self.weights, self.samples):
                w.writerow([repr(float(wi))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        w = data[:, 0]
        return cls(data[:, 1:], w / w.sum())


def features(m):
    """Weighted mean and second moment of ``m``."""
    if len(m) == 0:
        raise ValueError("features of an empty measure")
    weights = None if m.uniform else m.weights
    return MeasureFeatures.from_samples(m.samples, weights)


def _as_measure(m):
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m)


def _quantiles(m, levels):
    x = m.samples[:, 0]
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], m.weights[order]
    cdf = np.cumsum(ws)
    idx = np.searchsorted(cdf, levels * cdf[-1], side="left")
    return xs[np.minimum(idx, len(xs) - 1)]


def w2_1d(a, b):
    """Quantile-coupling W2 distance between two 1-D empirical measures.

    Equal-size uniform measures use the exact order-statistic coupling;
    otherwise quantile functions are compared on a 2048-point midpoint grid.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != 1 or b.dim != 1:
        raise RangeError("w2_1d needs 1-D measures; use sliced_w2 for dim > 1")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("w2_1d of an empty measure")
    if len(a) == len(b) and a.uniform and b.uniform:
        xa = np.sort(a.samples[:, 0])
        xb = np.sort(b.samples[:, 0])
        return float(np.sqrt(np.mean((xa - xb) ** 2)))
    levels = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
    qa = _quantiles(a, levels)
    qb = _quantiles(b, levels)
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


def sliced_w2(a, b, directions=64, seed=0):
    """Root-mean-square of 1-D W2 over random unit projections."""
    if directions < 1:
        raise RangeError("directions must be at least 1")
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    rng = substream(seed, "sliced_w2")
    v = rng.standard_normal((int(directions), a.dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    total = 0.0
    for u in v:
        pa = EmpiricalMeasure(a.samples @ u, a.weights)
        pb = EmpiricalMeasure(b.samples @ u, b.weights)
        total += w2_1d(pa, pb) ** 2
    return float(np.sqrt(total / len(v)))


def w2(a, b, directions=64, seed=0):
    """Exact W2 in 1-D, sliced surrogate otherwise."""
    a, b = _as_measure(a), _as_measure(b)
    if a.dim == 1:
        return w2_1d(a, b)
    return sliced_w2(a, b, directions, seed)


def ks_uniform(t, T):
    """Kolmogorov-Smirnov distance of the sample ``t`` to Uniform[0, T].

    Ties are grouped and the statistic is evaluated in exact rational
    arithmetic. Each ``t / T`` is snapped to the nearest rational with
    denominator at most ``1e12`` (a shift below float resolution), so
    stratified midpoints give exactly ``1 / (2 * strata)``.
    """
    values, counts = np.unique(np.asarray(t, dtype=float).ravel(), return_counts=True)
    k = int(counts.sum())
    T = Fraction(float(T))
    worst = Fraction(0)
    below = 0
    for v, c in zip(values.tolist(), counts.tolist()):
        u = (Fraction(v) / T).limit_denominator(KS_DENOMINATOR)
        worst = max(worst, abs(u - Fraction(below, k)), abs(Fraction(below + c, k) - u))
        below += c
    return float(worst)
