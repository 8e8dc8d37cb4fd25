"""Invariant measure of the frozen fast process and averaged coefficients.

The invariant measure is represented by a fixed sample bank; every integral
against it is a Monte Carlo average over the bank's atoms.
"""
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BlowUpError, NotDissipativeError, RangeError, SingularQError
from .model import MeasureFeatures, probe_assumptions
from .simulate import simulate_frozen_fast

DEFAULT_BANK_SIZE = 20000
DEFAULT_CHAINS = 100


@dataclass(frozen=True)
class InvariantBank:
    samples: np.ndarray
    kappa_hat: float
    seed: int
    burn_in: float
    thin: float
    dt: float
    chains: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def K(self):
        return self.samples.shape[0]

    @cached_property
    def features(self):
        return MeasureFeatures.from_samples(self.samples)

    def metadata(self):
        return {"seed": self.seed, "burn_in": self.burn_in, "thin": self.thin, "dt": self.dt,
                "kappa_hat": self.kappa_hat, "chains": self.chains, "K": self.K, **self.meta}

    def save(self, directory):
        """Write ``atoms.csv`` and ``atoms.meta.json`` into ``directory``."""
        os.makedirs(directory, exist_ok=True)
        m = self.samples.shape[1]
        header = ",".join(f"y{i + 1}" for i in range(m))
        np.savetxt(os.path.join(directory, "atoms.csv"), self.samples, delimiter=",",
                   header=header, comments="", fmt="%.17g")
        with open(os.path.join(directory, "atoms.meta.json"), "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        samples = np.loadtxt(os.path.join(directory, "atoms.csv"), delimiter=",", skiprows=1,
                             ndmin=2)
        with open(os.path.join(directory, "atoms.meta.json")) as fh:
            meta = json.load(fh)
        extra = {k: v for k, v in meta.items()
                 if k not in ("seed", "burn_in", "thin", "dt", "kappa_hat", "chains", "K")}
        return cls(samples=samples, kappa_hat=meta["kappa_hat"], seed=meta["seed"],
                   burn_in=meta["burn_in"], thin=meta["thin"], dt=meta["dt"],
                   chains=meta.get("chains", 1), meta=extra)


def ergodicity_rate(model, y_pair, T_fast=None, dt=None, seed=0):
    """Decay rate of the synchronous-coupling distance between two fast chains.

    Both chains see identical noise; ``log|Y^a_t - Y^b_t|`` is fitted linearly
    in ``t`` and the negated slope is returned.
    """
    y_a, y_b = (np.asarray(v, dtype=float).reshape(model.m) for v in y_pair)
    if np.allclose(y_a, y_b, rtol=0, atol=0):
        raise RangeError("ergodicity_rate needs two distinct starting points")
    lip = max(probe_assumptions(model, 64, 1.0, seed).lipschitz_f, 1e-6)
    if dt is None:
        dt = 0.001 / lip
    if T_fast is None:
        T_fast = 10.0 / lip
    path = simulate_frozen_fast(model, np.stack([y_a, y_b]), T_fast, dt, seed=seed,
                                shared_noise=True, stream="coupling")
    dist = np.linalg.norm(path[:, 0] - path[:, 1], axis=1)
    t = np.arange(len(dist)) * dt
    usable = dist > max(dist[0] * 1e-10, 1e-280)
    # stop at the first underflow so the fit sees one contiguous stretch
    cut = np.argmin(usable) if not usable.all() else len(usable)
    if cut < 3:
        raise NotDissipativeError("coupling distance collapsed before a fit was possible")
    slope = np.polyfit(t[:cut], np.log(dist[:cut]), 1)[0]
    if not slope < 0:
        raise NotDissipativeError(f"coupling distance does not decay (slope {slope:.3g})")
    return float(-slope)


def estimate_invariant(model, burn_in=None, K=DEFAULT_BANK_SIZE, thin=None, seed=0, dt=None,
                       chains=DEFAULT_CHAINS, kappa_hat=None):
    """Sample bank of ``K`` atoms from the frozen fast process's invariant law.

    ``chains`` independent chains start at ``y0``, discard ``burn_in`` and
    are read every ``thin`` time units. Defaults: ``burn_in = 50/kappa``,
    ``thin = 2/kappa``, ``dt = 0.01/max(kappa, Lip f)``.
    """
    if K < 1:
        raise RangeError("K must be positive")
    if kappa_hat is None:
        e1 = np.zeros(model.m)
        e1[0] = 1.0
        kappa_hat = ergodicity_rate(model, (model.y0 + e1, model.y0 - e1), seed=seed)
    burn_in = 50.0 / kappa_hat if burn_in is None else float(burn_in)
    thin = 2.0 / kappa_hat if thin is None else float(thin)
    if burn_in < 20.0 / kappa_hat * (1 - 1e-12):
        raise RangeError("burn_in must be at least 20/kappa_hat")
    if thin < 1.0 / kappa_hat * (1 - 1e-12):
        raise RangeError("thin must be at least 1/kappa_hat")
    if dt is None:
        lip = probe_assumptions(model, 64, 1.0, seed).lipschitz_f
        dt = 0.01 / max(kappa_hat, lip)
    chains = max(1, min(int(chains), int(K)))
    per_chain = int(math.ceil(K / chains))
    burn_steps = int(math.ceil(burn_in / dt - 1e-9))
    thin_steps = max(1, int(math.ceil(thin / dt - 1e-9)))
    total = burn_steps + (per_chain - 1) * thin_steps
    try:
        path = simulate_frozen_fast(model, np.tile(model.y0, (chains, 1)), total * dt, dt,
                                    seed=seed, stream="invariant")
    except BlowUpError as exc:
        raise NotDissipativeError(f"fast process blew up during burn-in: {exc}") from exc
    draws = path[burn_steps::thin_steps][:per_chain]
    samples = draws.reshape(-1, model.m)[:K].copy()
    return InvariantBank(samples=samples, kappa_hat=float(kappa_hat), seed=int(seed),
                         burn_in=burn_in, thin=thin, dt=float(dt), chains=chains)


# ---------------------------------------------------------------- averaged coefficients

def _atom_axis(mu):
    return MeasureFeatures(mean=np.asarray(mu.mean)[..., None, :],
                           second_moment=np.asarray(mu.second_moment)[..., None])


def averaged_drift(x, mu, bank, model):
    """Bank average of ``b(x, mu, y_i, nu_bank)``; ``x`` may carry batch axes."""
    x = np.asarray(x, dtype=float)
    vals = model.b(x[..., None, :], _atom_axis(mu), bank.samples, bank.features)
    return np.mean(np.broadcast_to(vals, x.shape[:-1] + (bank.K, model.n)), axis=-2)


def _q_from_sigma(S):
    return np.mean(np.einsum("...kij,...klj->...kil", S, S), axis=-3)


def q_matrix(x, mu, bank, model, check=True):
    """Bank average of ``sigma sigma^T`` (first d1 Brownian columns)."""
    x = np.asarray(x, dtype=float)
    S = model.sigma(x[..., None, :], _atom_axis(mu), bank.samples, bank.features)
    S = np.broadcast_to(S, x.shape[:-1] + (bank.K, model.n, model.d1))
    Q = _q_from_sigma(S)
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    if check:
        lam = np.linalg.eigvalsh(Q)
        if np.min(lam) < 1e-10:
            raise SingularQError(f"Q has eigenvalue {np.min(lam):.3g} < 1e-10")
    return Q


def averaged_coefficients(x, mu, bank, model, jacobians=False):
    """Return ``(b_bar, Q)`` and optionally ``(d b_bar/dx, dQ/dx)``.

    Shapes: ``b_bar (..., n)``, ``Q (..., n, n)``, ``db (..., n, n)`` with the
    derivative index last, ``dQ (..., n, n, n)`` likewise.
    """
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    n, K = model.n, bank.K
    xa, mua, nu = x[..., None, :], _atom_axis(mu), bank.features
    bvals = np.broadcast_to(model.b(xa, mua, bank.samples, nu), batch + (K, n))
    S = np.broadcast_to(model.sigma(xa, mua, bank.samples, nu), batch + (K, n, model.d1))
    bbar = bvals.mean(axis=-2)
    Q = _q_from_sigma(S)
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    if np.min(np.linalg.eigvalsh(Q)) < 1e-10:
        raise SingularQError("Q is singular along the path")
    if not jacobians:
        return bbar, Q
    Jb = np.broadcast_to(model.drift_jacobian(xa, mua, bank.samples, nu), batch + (K, n, n))
    Js = np.broadcast_to(model.sigma_jacobian(xa, mua, bank.samples, nu),
                         batch + (K, n, model.d1, n))
    dbbar = Jb.mean(axis=-3)
    # d(S S^T)_{il}/dx_p = dS_ijp S_lj + S_ij dS_ljp
    dSS = np.einsum("...kijp,...klj->...kilp", Js, S)
    dQ = (dSS + np.swapaxes(dSS, -2, -3)).mean(axis=-4)
    return bbar, Q, dbbar, dQ
