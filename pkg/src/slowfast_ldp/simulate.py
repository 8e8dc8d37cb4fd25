"""Euler-Maruyama integration of the slow-fast mean-field particle system.

The controlled system shifts both Brownian drivers by ``h / sqrt(delta)``:

    dX = b dt + sigma h1 dt + sqrt(delta) sigma dW1
    dY = f / eps dt + g h2 / sqrt(delta eps) dt + g / sqrt(eps) dW2

and its measure arguments are the laws of the *uncontrolled* processes,
supplied by a companion ensemble driven by its own noise.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid

from .errors import BlowUpError, ContractError, RangeError, StabilityError
from .model import MeasureFeatures, default_dt, probe_assumptions
from .rng import substream

BLOWUP_LEVEL = 1e8


# ---------------------------------------------------------------- controls

@dataclass(frozen=True)
class Control:
    """Control process ``h`` with values in R^(d1 + d2); zero after ``T``.

    ``fn`` is ``fn(t) -> (d,)`` for open-loop controls and
    ``fn(t, y) -> (..., d)`` for feedback controls, ``y`` of shape ``(..., m)``.
    """

    kind: str
    d: int
    T: float = math.inf
    fn: Optional[Callable] = None
    M: float = 0.0
    plan: object = field(default=None, repr=False, compare=False)

    @classmethod
    def zero(cls, d):
        return cls(kind="zero", d=int(d))

    @classmethod
    def open_loop(cls, fn, d, T, M=None, check_points=2001):
        ts = np.linspace(0.0, T, check_points)
        energy = trapezoid([np.sum(np.asarray(fn(t), dtype=float) ** 2) for t in ts], ts)
        if M is None:
            M = float(energy)
        elif energy > M * (1 + 1e-9):
            raise RangeError(f"control energy {energy:.6g} exceeds bound M={M}")
        return cls(kind="open_loop", d=int(d), T=float(T), fn=fn, M=float(M))

    @classmethod
    def constant(cls, value, T):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls.open_loop(lambda t: value, len(value), T, M=float(value @ value) * T)

    @classmethod
    def feedback(cls, fn, d, T, plan=None):
        return cls(kind="feedback", d=int(d), T=float(T), fn=fn, M=math.inf, plan=plan)

    @property
    def is_zero(self):
        return self.kind == "zero"

    def __call__(self, t, y):
        """Evaluate at time ``t`` for fast states ``y`` of shape ``(N, m)``."""
        y = np.asarray(y)
        shape = y.shape[:-1] + (self.d,)
        if self.is_zero or t > self.T:
            return np.zeros(shape)
        if self.kind == "open_loop":
            return np.broadcast_to(np.asarray(self.fn(t), dtype=float), shape)
        return np.broadcast_to(self.fn(t, y), shape)


# ---------------------------------------------------------------- ensembles

@dataclass
class ParticleEnsemble:
    t: float
    X: np.ndarray
    Y: np.ndarray

    @property
    def N(self):
        return self.X.shape[0]

    @classmethod
    def initial(cls, model, N):
        X = np.tile(model.x0, (int(N), 1))
        Y = np.tile(model.y0, (int(N), 1))
        return cls(t=0.0, X=X, Y=Y)

    def features(self):
        return (MeasureFeatures.from_samples(self.X), MeasureFeatures.from_samples(self.Y))


def _matvec(S, v):
    if S.shape[-2:] == (1, 1):
        return S[..., 0, :] * v
    return np.einsum("...ij,...j->...i", S, v)


_NULL = {}


def _null_features(model):
    key = (model.n, model.m)
    if key not in _NULL:
        _NULL[key] = (MeasureFeatures(np.zeros(model.n), np.zeros(())),
                      MeasureFeatures(np.zeros(model.m), np.zeros(())))
    return _NULL[key]


def _ensemble_features(model, X, Y, alive=None):
    if not model.measure_dependent:
        return _null_features(model)
    if alive is not None and not alive.all():
        X, Y = X[alive], Y[alive]
    return MeasureFeatures.from_samples(X), MeasureFeatures.from_samples(Y)


def _check_dt(scale, dt):
    if dt > scale.epsilon / 10 * (1 + 1e-12):
        raise StabilityError(f"dt={dt:.3g} exceeds eps/10={scale.epsilon / 10:.3g}")


def _advance(model, scale, t, X, Y, dt, control, dW, feats):
    """One Euler-Maruyama step; ``dW`` has shape ``(N, d1 + d2)``."""
    mu, nu = feats
    d1 = model.d1
    dW1, dW2 = dW[:, :d1], dW[:, d1:]
    S = model.sigma(X, mu, Y, nu)
    G = model.g(Y)
    eps, delta = scale.epsilon, scale.delta
    dX = model.b(X, mu, Y, nu) * dt + math.sqrt(delta) * _matvec(S, dW1)
    dY = model.f(Y) * (dt / eps) + _matvec(G, dW2) / math.sqrt(eps)
    h = None
    if control is not None and not control.is_zero:
        h = control(t, Y)
        dX = dX + _matvec(S, h[:, :d1]) * dt
        if np.any(h[:, d1:]):
            dY = dY + _matvec(G, h[:, d1:]) * (dt / math.sqrt(delta * eps))
    return X + dX, Y + dY, h


def step_system(ens, model, scale, dt, control=None, rng=None, features=None):
    """Advance ``ens`` by one step of the (controlled) system.

    ``features`` overrides the measure arguments (the uncontrolled companion's
    empirical laws); by default they are taken from ``ens`` itself.
    """
    _check_dt(scale, dt)
    if rng is None:
        raise ContractError("step_system needs an explicit generator")
    dW = rng.standard_normal((ens.N, model.d1 + model.d2)) * math.sqrt(dt)
    feats = features if features is not None else _ensemble_features(model, ens.X, ens.Y)
    X, Y, _ = _advance(model, scale, ens.t, ens.X, ens.Y, dt, control, dW, feats)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise BlowUpError("non-finite state after step", step=0)
    return ParticleEnsemble(t=ens.t + dt, X=X, Y=Y)


# ---------------------------------------------------------------- trajectories

@dataclass
class SlowFastTrajectory:
    grid: np.ndarray            # stored times
    X_path: np.ndarray          # (len(grid), N, n)
    Y_path: np.ndarray          # (len(grid), N, m)
    dt: float
    steps: int
    scale: object
    W_increments: Optional[np.ndarray] = None   # (steps, N, d1 + d2) when keep="full"
    log_weight: Optional[np.ndarray] = None     # accumulated online when requested
    aborted: np.ndarray = field(default=None)

    @property
    def X_T(self):
        return self.X_path[-1]

    @property
    def Y_T(self):
        return self.Y_path[-1]

    @property
    def W1_increments(self):
        return None if self.W_increments is None else self.W_increments[..., :self.X_path.shape[2]]

    def to_csv(self, path):
        N, n, m = self.X_path.shape[1], self.X_path.shape[2], self.Y_path.shape[2]
        rows = []
        for k, t in enumerate(self.grid):
            block = np.column_stack([np.arange(N), np.full(N, t), self.X_path[k], self.Y_path[k]])
            rows.append(block)
        header = ",".join(["replica", "t"] + [f"X{i + 1}" for i in range(n)]
                          + [f"Y{i + 1}" for i in range(m)])
        data = np.concatenate(rows)
        fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)

    def to_json(self, path):
        n, m = self.X_path.shape[2], self.Y_path.shape[2]
        K, N = len(self.grid), self.X_path.shape[1]
        cols = {"replica": np.tile(np.arange(N), K).tolist(),
                "t": np.repeat(self.grid, N).tolist()}
        for i in range(n):
            cols[f"X{i + 1}"] = self.X_path[:, :, i].ravel().tolist()
        for i in range(m):
            cols[f"Y{i + 1}"] = self.Y_path[:, :, i].ravel().tolist()
        with open(path, "w") as fh:
            json.dump(cols, fh)


def fast_rate(model, seed=0):
    """Lipschitz constant of ``f`` on a unit ball, used by the step-size rule."""
    return probe_assumptions(model, probe_count=64, radius=1.0, seed=seed).lipschitz_f


def simulate_paths(model, scale, N, T, dt=None, control=None, seed=0, keep="endpoints",
                   thin_every=None, stream="sim", track_log_weight=False, observers=()):
    """Iterate Euler-Maruyama steps from ``(x0, y0)`` to time ``T``.

    ``keep`` is ``"endpoints"``, ``"full"`` (every step plus Brownian
    increments) or ``"thinned"`` (every ``thin_every`` steps; default puts the
    stored grid at spacing about ``Delta``). ``observers`` are called as
    ``obs(t, X, Y)`` after every step, including ``t = 0``. When
    ``track_log_weight`` is set, the Girsanov log-weight is accumulated online.
    """
    if N < 1:
        raise RangeError("N must be at least 1")
    if keep not in ("endpoints", "full", "thinned"):
        raise ValueError(f"unknown keep mode {keep!r}")
    if dt is None:
        dt = default_dt(scale, fast_rate(model))
    steps = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / steps
    _check_dt(scale, dt)
    control = control if control is not None else Control.zero(model.d1 + model.d2)
    if control.d != model.d1 + model.d2:
        raise ContractError("control dimension must be d1 + d2")

    rng = substream(seed, stream)
    companion = (not control.is_zero) and model.measure_dependent
    crng = substream(seed, stream + ":companion") if companion else None

    X = np.tile(model.x0, (int(N), 1))
    Y = np.tile(model.y0, (int(N), 1))
    if companion:
        Xc, Yc = X.copy(), Y.copy()
    alive = np.ones(int(N), dtype=bool)
    sqdt = math.sqrt(dt)
    d = model.d1 + model.d2
    inv_sqrt_delta = 1.0 / math.sqrt(scale.delta)

    if keep == "thinned" and thin_every is None:
        thin_every = max(1, int(round(scale.Delta / dt)))
    store_every = {"endpoints": steps, "full": 1, "thinned": thin_every}[keep]
    grid, Xs, Ys = [0.0], [X.copy()], [Y.copy()]
    dWs = [] if keep == "full" else None
    lw = np.zeros(int(N)) if track_log_weight else None

    for obs in observers:
        obs(0.0, X, Y)
    for k in range(steps):
        t = k * dt
        dW = rng.standard_normal((int(N), d)) * sqdt
        if companion:
            feats = _ensemble_features(model, Xc, Yc)
            dWc = crng.standard_normal((int(N), d)) * sqdt
            Xc, Yc, _ = _advance(model, scale, t, Xc, Yc, dt, None, dWc, feats)
        else:
            feats = _ensemble_features(model, X, Y, alive)
        Xn, Yn, h = _advance(model, scale, t, X, Y, dt, control, dW, feats)
        if lw is not None and h is not None:
            lw -= inv_sqrt_delta * np.sum(h * dW, axis=1) + (0.5 / scale.delta) * np.sum(h * h, axis=1) * dt
        bad = ~(np.all(np.abs(Xn) < BLOWUP_LEVEL, axis=1) & np.all(np.abs(Yn) < BLOWUP_LEVEL, axis=1))
        if bad.any():
            Xn[bad], Yn[bad] = X[bad], Y[bad]
            alive &= ~bad
            if not alive.any():
                raise BlowUpError(f"every replica exceeded {BLOWUP_LEVEL:g}", step=k)
        X, Y = Xn, Yn
        if dWs is not None:
            dWs.append(dW)
        for obs in observers:
            obs(t + dt, X, Y)
        if (k + 1) % store_every == 0 or k + 1 == steps:
            if keep != "endpoints" or k + 1 == steps:
                grid.append((k + 1) * dt)
                Xs.append(X.copy())
                Ys.append(Y.copy())

    return SlowFastTrajectory(
        grid=np.asarray(grid), X_path=np.stack(Xs), Y_path=np.stack(Ys), dt=dt, steps=steps,
        scale=scale, W_increments=None if dWs is None else np.stack(dWs),
        log_weight=lw, aborted=~alive,
    )


def log_weight_increment(h, dW, dt, delta):
    return -np.sum(h * dW, axis=-1) / math.sqrt(delta) - 0.5 * np.sum(h * h, axis=-1) * dt / delta


def girsanov_log_weight(traj, control, scale):
    """Log likelihood ratio converting controlled expectations to the original law.

    ``log L = -(1/sqrt(delta)) sum h.dW - (1/(2 delta)) sum |h|^2 dt``, with ``h``
    evaluated at the pre-step state (Ito convention).
    """
    if traj.W_increments is None or len(traj.grid) != traj.steps + 1:
        raise ContractError("girsanov_log_weight needs a trajectory recorded with keep='full'")
    N = traj.X_path.shape[1]
    total = np.zeros(N)
    if control.is_zero:
        return total
    for k in range(traj.steps):
        h = control(traj.grid[k], traj.Y_path[k])
        total += log_weight_increment(h, traj.W_increments[k], traj.dt, scale.delta)
    return total


# ---------------------------------------------------------------- frozen fast process

def simulate_frozen_fast(model, y0, T_fast, dt, seed=0, kappa_hat=None, shared_noise=False,
                         stream="frozen"):
    """Euler-Maruyama path of ``dY = f(Y) dt + g(Y) dW`` in unit (fast) time.

    ``y0`` may be ``(m,)`` for one chain or ``(C, m)`` for ``C`` chains. With
    ``shared_noise`` every chain sees the same increments (synchronous
    coupling). Returns an array of shape ``(steps + 1,) + y0.shape``.
    """
    if kappa_hat is not None and dt > 0.1 / kappa_hat * (1 + 1e-12):
        raise StabilityError(f"dt={dt:.3g} exceeds 0.1/kappa_hat")
    y = np.array(y0, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    steps = max(1, int(math.ceil(T_fast / dt - 1e-9)))
    rng = substream(seed, stream)
    sqdt = math.sqrt(dt)
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    for k in range(steps):
        if shared_noise:
            dW = np.broadcast_to(rng.standard_normal(model.d2) * sqdt, (y.shape[0], model.d2))
        else:
            dW = rng.standard_normal((y.shape[0], model.d2)) * sqdt
        y = y + model.f(y) * dt + _matvec(model.g(y), dW)
        if not np.all(np.isfinite(y)) or np.any(np.abs(y) > BLOWUP_LEVEL):
            raise BlowUpError("frozen fast process blew up", step=k)
        out[k + 1] = y
    return out[:, 0] if single else out
