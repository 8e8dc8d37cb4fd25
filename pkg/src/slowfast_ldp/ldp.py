"""Tail-probability ladders and their comparison with the minimised action."""
import csv
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .action import Terminal, feedback_control
from .errors import EstimatorStarvedError, InsufficientDataError
from .rng import sim_stream_name
from .simulate import fast_rate, simulate_paths
from .model import default_dt

Z95 = 1.959963984540054


@dataclass(frozen=True)
class TailEvent:
    """Endpoint event ``{X_T[index] >= q}`` or ``{|X_T - center| >= radius}``."""

    kind: str
    T: float = 1.0
    q: float = 0.0
    index: int = 0
    center: tuple = ()
    radius: float = math.inf

    @classmethod
    def halfspace(cls, q, T=1.0, index=0):
        return cls(kind="halfspace", T=float(T), q=float(q), index=int(index))

    @classmethod
    def ball_complement(cls, center, radius, T=1.0):
        return cls(kind="ball_complement", T=float(T), center=tuple(np.atleast_1d(center)),
                   radius=float(radius))

    @classmethod
    def parse(cls, text, T=1.0):
        """Parse ``"X_T>=1"`` or ``"X_T[2]>=0.5"``."""
        m = re.fullmatch(r"\s*X_T(?:\[(\d+)\])?\s*>=\s*([-+0-9.eE]+)\s*", text)
        if not m:
            raise ValueError(f"cannot parse event {text!r}")
        return cls.halfspace(float(m.group(2)), T=T, index=int(m.group(1) or 0))

    def indicator(self, X):
        X = np.asarray(X)
        if self.kind == "halfspace":
            return X[:, self.index] >= self.q
        return np.linalg.norm(X - np.asarray(self.center), axis=1) >= self.radius

    def terminal(self):
        if self.kind != "halfspace":
            raise ValueError("only halfspace events map to a terminal constraint")
        return Terminal.halfspace(self.q, self.index)


@dataclass
class LadderRow:
    delta: float
    p_hat: float
    ci_low: float
    ci_high: float
    neg_delta_log_p: float
    ess: float
    replicas: int = 0
    hits: int = 0
    variance: float = 0.0
    flag: str = ""


TABLE_COLUMNS = ("delta", "p_hat", "ci_low", "ci_high", "neg_delta_log_p", "ess")


@dataclass
class LadderTable:
    rows: list = field(default_factory=list)
    estimator: str = "crude"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(TABLE_COLUMNS)
            for r in self.rows:
                out.writerow([repr(float(getattr(r, c))) for c in TABLE_COLUMNS])

    def to_json(self):
        return {"estimator": self.estimator, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            rows = [LadderRow(**{k: float(v) for k, v in r.items()}) for r in csv.DictReader(fh)]
        return cls(rows=rows)


def wilson_interval(hits, n, z=Z95):
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def _neg_delta_log(delta, p):
    return -delta * math.log(p) if p > 0 else math.nan


def _batches(replicas, size):
    size = max(1, int(size))
    full, rest = divmod(int(replicas), size)
    return [size] * full + ([rest] if rest else [])


def _run_batches(job, sizes, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            return list(pool.map(job, range(len(sizes)), sizes))
    return [job(b, s) for b, s in enumerate(sizes)]


def crude_tail(model, ladder, event, replicas, N_particles=10000, seed=0, threads=1, dt=None):
    """Plain Monte Carlo tail estimates with Wilson 95% intervals per rung.

    Replicas run in independent interacting ensembles of ``N_particles``
    whose random streams are keyed by ``(seed, delta, batch)``.
    """
    rate = fast_rate(model)
    rows = []
    for scale in ladder:
        step = dt if dt is not None else default_dt(scale, rate)

        def job(b, size, scale=scale, step=step):
            traj = simulate_paths(model, scale, size, event.T, dt=step, seed=seed,
                                  stream=sim_stream_name(scale.delta, b))
            return int(np.count_nonzero(event.indicator(traj.X_T)))

        sizes = _batches(replicas, N_particles)
        hits = sum(_run_batches(job, sizes, threads))
        n = int(sum(sizes))
        p = hits / n
        lo, hi = wilson_interval(hits, n)
        rows.append(LadderRow(delta=scale.delta, p_hat=p, ci_low=lo, ci_high=hi,
                              neg_delta_log_p=_neg_delta_log(scale.delta, p), ess=float(n),
                              replicas=n, hits=hits, variance=p * (1 - p),
                              flag="" if hits else "no-hits"))
    if all(r.hits == 0 for r in rows):
        raise EstimatorStarvedError("no event hits at any rung; use importance sampling")
    return LadderTable(rows=rows, estimator="crude")


def is_tail(model, ladder, event, psi_star, bank, replicas, N_particles=10000, seed=0,
            threads=1, dt=None):
    """Importance-sampled tail estimates under the feedback control of ``psi_star``.

    Each replica carries ``1_event * exp(log L)``; the reported ESS is that of
    these per-replica contributions.
    """
    control = feedback_control(psi_star, model, bank)
    rate = fast_rate(model)
    rows = []
    for scale in ladder:
        step = dt if dt is not None else default_dt(scale, rate)

        def job(b, size, scale=scale, step=step):
            traj = simulate_paths(model, scale, size, event.T, dt=step, control=control,
                                  seed=seed, stream=sim_stream_name(scale.delta, b, tag="is"),
                                  track_log_weight=True)
            hit = event.indicator(traj.X_T)
            return np.where(hit, np.exp(traj.log_weight), 0.0)

        sizes = _batches(replicas, N_particles)
        v = np.concatenate(_run_batches(job, sizes, threads))
        n = len(v)
        p = math.fsum(v) / n
        var = math.fsum((v - p) ** 2) / (n - 1) if n > 1 else 0.0
        half = Z95 * math.sqrt(var / n)
        s2 = math.fsum(v * v)
        ess = (math.fsum(v) ** 2 / s2) if s2 > 0 else 0.0
        flag = "degenerate-weights" if ess < 10 else ""
        rows.append(LadderRow(delta=scale.delta, p_hat=p, ci_low=max(0.0, p - half),
                              ci_high=p + half, neg_delta_log_p=_neg_delta_log(scale.delta, p),
                              ess=ess, replicas=n, hits=int(np.count_nonzero(v)),
                              variance=var, flag=flag))
    return LadderTable(rows=rows, estimator="importance")


def variance_reduction(row):
    """Bernoulli variance ``p(1-p)`` of a crude estimator over the IS per-replica variance."""
    if row.variance <= 0:
        return math.inf
    return row.p_hat * (1 - row.p_hat) / row.variance


def ldp_gap(table, I_star):
    """Per-rung gaps and an affine-in-delta extrapolation of ``-delta log p``."""
    rows = [r for r in table.rows if r.p_hat > 0 and math.isfinite(r.neg_delta_log_p)]
    if len(rows) < 3:
        raise InsufficientDataError(f"need at least 3 rungs with hits, have {len(rows)}")
    rows.sort(key=lambda r: -r.delta)
    deltas = np.array([r.delta for r in rows])
    y = np.array([r.neg_delta_log_p for r in rows])
    slope, intercept = np.polyfit(deltas, y, 1)
    gaps = y - I_star
    monotone = bool(np.all(np.diff(np.abs(gaps)) <= 1e-12))
    return {
        "deltas": deltas.tolist(),
        "gaps": gaps.tolist(),
        "monotone": monotone,
        "intercept": float(intercept),
        "slope": float(slope),
        "relative_error": float(abs(intercept - I_star) / abs(I_star)) if I_star else math.nan,
    }


# ---------------------------------------------------------------- Gaussian oracle

def _int_exp(alpha, T):
    return T if abs(alpha * T) < 1e-12 else math.expm1(alpha * T) / alpha


def linear_endpoint_law(params, scale, T=1.0):
    """Exact mean and variance of ``X_T`` for the 1-D linear model.

    Uses the closed-form solution of the linear (X, Y) system with
    ``dY = -kappa/eps Y dt + gamma/sqrt(eps) dW2``.
    """
    a, c, d, e = (params.get(k, 0.0) for k in ("a", "c", "d", "e"))
    s0, kappa, gamma = params["sigma0"], params["kappa"], params["gamma"]
    x0, y0 = float(params.get("x0", 0.0)), float(params.get("y0", 0.0))
    eps, delta = scale.epsilon, scale.delta
    l1, l2 = -a, -kappa / eps
    # mean: mean-field terms act on E X and E Y
    lm = -a + c
    my = y0
    mean = x0 * math.exp(lm * T)
    if d + e:
        mean += (d + e) * my * (math.exp(lm * T) - math.exp(l2 * T)) / (lm - l2)
    var = delta * s0 ** 2 * _int_exp(2 * l1, T)
    if d:
        var += (gamma ** 2 * d ** 2 / eps) / (l1 - l2) ** 2 * (
            _int_exp(2 * l1, T) - 2 * _int_exp(l1 + l2, T) + _int_exp(2 * l2, T))
    return mean, var


def gaussian_tail(mean, var, q):
    return float(norm.sf((q - mean) / math.sqrt(var)))
