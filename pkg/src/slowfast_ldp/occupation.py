"""Occupation measures of (control, fast state, time) and viable-pair diagnostics.

An occupation measure over ``[0, T]`` has total mass ``T`` (its time marginal
is Lebesgue measure); atoms are stored with uniform probability weights and
the mass is restored wherever an integral against the measure is taken.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .action import solve_averaged_ode
from .errors import ResolutionError
from .invariant import averaged_drift
from .measures import EmpiricalMeasure, ks_uniform, w2
from .model import MeasureFeatures


@dataclass
class OccupationMeasure:
    h: np.ndarray        # (count, d1 + d2)
    y: np.ndarray        # (count, m)
    t: np.ndarray        # (count,)
    Delta: float
    T: float
    windows: int

    @property
    def count(self):
        return len(self.t)

    @property
    def weights(self):
        return np.full(self.count, 1.0 / self.count)

    def to_csv(self, path):
        d, m = self.h.shape[1], self.y.shape[1]
        w = 1.0 / self.count
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow([f"h{i + 1}" for i in range(d)] + [f"y{i + 1}" for i in range(m)]
                         + ["t", "w"])
            for hi, yi, ti in zip(self.h, self.y, self.t):
                out.writerow([repr(float(v)) for v in hi] + [repr(float(v)) for v in yi]
                             + [repr(float(ti)), repr(w)])

    @classmethod
    def from_csv(cls, path, d, Delta, T, windows):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(h=data[:, :d], y=data[:, d:-2], t=data[:, -2], Delta=Delta, T=T,
                   windows=windows)


def window_midpoints(T, windows):
    return (np.arange(windows) + 0.5) * T / windows


def build_occupation(traj, control, scale, atoms_per_window=10, windows=100, T=None):
    """Discretise the occupation measure of a controlled trajectory.

    For each outer time ``t_j`` (stratified midpoints of ``[0, T]``) the inner
    window ``[t_j, t_j + Delta]`` is sampled at ``atoms_per_window`` midpoints,
    recording ``(h_s, Y_s, t_j)``. Atoms from every replica are pooled. The
    trajectory must reach ``T + Delta``; the control is zero beyond ``T``.
    """
    Delta = scale.Delta
    A = int(atoms_per_window)
    if T is None:
        T = float(traj.grid[-1]) - Delta
    if traj.grid[-1] < T + Delta - 1e-9:
        raise ResolutionError("trajectory must extend to T + Delta")
    spacing = float(np.max(np.diff(traj.grid)))
    if spacing > Delta / A * (1 + 1e-9):
        raise ResolutionError(f"stored fast path spacing {spacing:.3g} coarser than "
                              f"Delta/atoms_per_window = {Delta / A:.3g}")
    outer = window_midpoints(T, windows)
    inner = (np.arange(A) + 0.5) * Delta / A
    s = (outer[:, None] + inner[None, :]).ravel()
    idx = np.clip(np.searchsorted(traj.grid, s), 1, len(traj.grid) - 1)
    left = traj.grid[idx - 1]
    idx = np.where(s - left < traj.grid[idx] - s, idx - 1, idx)

    N, m = traj.Y_path.shape[1], traj.Y_path.shape[2]
    ys = traj.Y_path[idx]                               # (W*A, N, m)
    hs = np.stack([control(si, ys[k]) for k, si in enumerate(s)])   # (W*A, N, d)
    t_atoms = np.repeat(outer, A)
    return OccupationMeasure(
        h=hs.reshape(-1, hs.shape[-1]), y=ys.reshape(-1, m),
        t=np.repeat(t_atoms, N), Delta=Delta, T=float(T), windows=int(windows),
    )


def product_occupation(bank, T, windows, control=None, per_window=None, d=None):
    """Occupation measure ``eta (x) nu (x) dt`` with ``h = control(t, y)`` (zero by default)."""
    ys = bank.samples if per_window is None else bank.samples[:per_window]
    outer = window_midpoints(T, windows)
    if control is None:
        d = d if d is not None else ys.shape[1]
        hs = np.zeros((windows, len(ys), d))
    else:
        hs = np.stack([control(t, ys) for t in outer])
    return OccupationMeasure(
        h=hs.reshape(-1, hs.shape[-1]), y=np.tile(ys, (windows, 1)),
        t=np.repeat(outer, len(ys)), Delta=0.0, T=float(T), windows=int(windows),
    )


@dataclass
class ViabilityReport:
    moment: float
    ode_residual: float
    y_marginal_w2: float
    t_marginal_ks: float

    def to_dict(self):
        return {"moment": self.moment, "ode_residual": self.ode_residual,
                "y_marginal_w2": self.y_marginal_w2, "t_marginal_ks": self.t_marginal_ks}


def check_viability(phi, P, model, bank, seed=0):
    """Diagnostics of how far ``(phi, P)`` is from a viable pair.

    ``ode_residual`` is the sup over window boundaries of
    ``|phi_t - x0 - int_{s<=t} Phi(phi_s, delta_Xbar_s, y, nu, h) P(dh dy ds)|``.
    """
    mass = P.T
    moment = mass * float(np.mean(np.sum(P.h ** 2, axis=1) + np.sum(P.y ** 2, axis=1)))

    xbar = solve_averaged_ode(model, bank, T=P.T, dt=min(1e-3 * P.T, P.T / (20 * P.windows)))
    outer, inverse = np.unique(P.t, return_inverse=True)
    phi_t = phi(outer)
    xbar_t = xbar(outer)
    drift = averaged_drift(phi_t, MeasureFeatures.point_mass(xbar_t), bank, model)  # (W, n)
    counts = np.bincount(inverse, minlength=len(outer)).astype(float)
    w = mass / P.count

    push = np.zeros_like(drift)
    h1 = P.h[:, :model.d1]
    if np.any(h1):
        mu = MeasureFeatures.point_mass(xbar_t[inverse])
        S = model.sigma(phi_t[inverse], mu, P.y, bank.features)
        S = np.broadcast_to(S, (P.count, model.n, model.d1))
        contrib = np.einsum("kij,kj->ki", S, h1)
        for i in range(model.n):
            push[:, i] = np.bincount(inverse, weights=contrib[:, i], minlength=len(outer))
    per_window = drift * (counts * w)[:, None] + push * w

    edges = np.linspace(0.0, P.T, P.windows + 1)
    order = np.searchsorted(edges, outer)           # window j closes at edges[order]
    cum = np.zeros((len(edges), model.n))
    np.add.at(cum, order, per_window)
    cum = model.x0 + np.cumsum(cum, axis=0)
    residual = float(np.max(np.linalg.norm(phi(edges) - cum, axis=1)))

    y_w2 = w2(EmpiricalMeasure(P.y), EmpiricalMeasure(bank.samples), seed=seed)
    return ViabilityReport(moment=moment, ode_residual=residual, y_marginal_w2=float(y_w2),
                           t_marginal_ks=ks_uniform(P.t, P.T))
