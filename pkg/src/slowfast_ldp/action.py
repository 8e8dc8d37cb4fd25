"""Averaged dynamics, the explicit action functional and its minimisation.

Paths live on a uniform grid. The action of a path is discretised with
forward differences and midpoint quadrature:

    S = sum_k 1/2 r_k^T Q_k^{-1} r_k h,   r_k = (phi_{k+1} - phi_k)/h - b_bar(m_k, delta_{Xbar(t_k + h/2)})

where ``m_k`` is the interval midpoint. The measure argument is always the
point mass of the *uncontrolled* averaged path.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import BlowUpError, ContractError
from .invariant import averaged_coefficients, averaged_drift
from .model import MeasureFeatures
from .simulate import Control


@dataclass
class DiscretePath:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values differ in length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    @property
    def T(self):
        return float(self.grid[-1])

    @property
    def K(self):
        return len(self.grid) - 1

    @property
    def step(self):
        return np.diff(self.grid)

    @property
    def derivative(self):
        return np.diff(self.values, axis=0) / self.step[:, None]

    @property
    def midpoints(self):
        return 0.5 * (self.values[1:] + self.values[:-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.grid, self.values[:, i])
                         for i in range(self.values.shape[1])], axis=-1)

    def shifted(self, offset):
        return DiscretePath(self.grid.copy(), self.values + offset)

    def to_csv(self, path):
        n = self.values.shape[1]
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)])
        np.savetxt(path, np.column_stack([self.grid, self.values]), delimiter=",",
                   header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:])

    @classmethod
    def uniform(cls, T, K, values):
        return cls(np.linspace(0.0, T, K + 1), values)


@dataclass
class ActionResult:
    value: float
    integrand: np.ndarray
    q_conditioning: tuple
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def is_infinite(self):
        return math.isinf(self.value)

    def to_dict(self):
        return {"value": self.value, "q_min": self.q_conditioning[0],
                "q_max": self.q_conditioning[1], "converged": self.converged,
                "iterations": self.iterations}


INFINITE_ACTION = ActionResult(value=math.inf, integrand=np.zeros(0),
                               q_conditioning=(math.nan, math.nan))


# ---------------------------------------------------------------- averaged ODE

def _point_mass(x):
    return MeasureFeatures.point_mass(x)


def solve_averaged_ode(model, bank, x0=None, T=1.0, dt=None):
    """RK4 solution of ``dX/dt = b_bar(X, delta_X)`` on a uniform grid."""
    x = np.array(model.x0 if x0 is None else x0, dtype=float).reshape(model.n)
    if dt is None:
        dt = 1e-3 * T
    steps = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / steps

    def rhs(z):
        return averaged_drift(z, _point_mass(z), bank, model)

    out = np.empty((steps + 1, model.n))
    out[0] = x
    for k in range(steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise BlowUpError("averaged ODE blew up", step=k)
        out[k + 1] = x
    return DiscretePath(np.linspace(0.0, T, steps + 1), out)


_REFERENCE_CACHE = {}


def reference_midpoints(model, bank, T, K):
    """Uncontrolled averaged path at the ``K`` interval midpoints of ``[0, T]``."""
    key = (id(model), id(bank), float(T), int(K))
    hit = _REFERENCE_CACHE.get(key)
    if hit is not None and hit[0] is model and hit[1] is bank:
        return hit[2]
    half = T / (2 * K)
    refine = max(1, int(math.ceil(half / (1e-3 * T) - 1e-9)))
    ref = solve_averaged_ode(model, bank, T=T, dt=half / refine)
    mids = ref.values[refine::2 * refine][:K].copy()
    if len(_REFERENCE_CACHE) > 32:
        _REFERENCE_CACHE.clear()
    _REFERENCE_CACHE[key] = (model, bank, mids)
    return mids


# ---------------------------------------------------------------- action

def _interval_terms(values, h, xbar_mid, model, bank, jacobians=False):
    mids = 0.5 * (values[1:] + values[:-1])
    coeffs = averaged_coefficients(mids, _point_mass(xbar_mid), bank, model, jacobians=jacobians)
    r = np.diff(values, axis=0) / h - coeffs[0]
    return (r,) + tuple(coeffs[1:])


def _check_uniform(path):
    h = path.step
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise ContractError("action evaluation needs a uniform grid")
    return float(h[0])


def evaluate_action(path, model, bank, x0=None, tol_start=1e-9):
    """Discrete action of ``path``; infinite if it does not start at ``x0``."""
    x0 = model.x0 if x0 is None else np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(path.values)) or np.max(np.abs(path.values[0] - x0)) > tol_start:
        return INFINITE_ACTION
    h = _check_uniform(path)
    xbar = reference_midpoints(model, bank, path.T, path.K)
    r, Q = _interval_terms(path.values, h, xbar, model, bank)
    u = np.linalg.solve(Q, r[..., None])[..., 0]
    integrand = 0.5 * np.sum(r * u, axis=1) * h
    lam = np.linalg.eigvalsh(Q)
    return ActionResult(value=float(np.sum(integrand)), integrand=integrand,
                        q_conditioning=(float(lam.min()), float(lam.max())))


def action_and_gradient(values, h, model, bank, xbar_mid):
    """Discrete action and its gradient with respect to every node."""
    r, Q, Jb, dQ = _interval_terms(values, h, xbar_mid, model, bank, jacobians=True)
    u = np.linalg.solve(Q, r[..., None])[..., 0]
    S = 0.5 * h * float(np.sum(r * u))
    # derivative of the interval term with respect to its midpoint
    gm = -h * np.einsum("kip,ki->kp", Jb, u) - 0.5 * h * np.einsum("ki,kilp,kl->kp", u, dQ, u)
    grad = np.zeros_like(values)
    grad[:-1] -= u
    grad[1:] += u
    grad[:-1] += 0.5 * gm
    grad[1:] += 0.5 * gm
    return S, grad


# ---------------------------------------------------------------- minimisation

@dataclass(frozen=True)
class Terminal:
    """Endpoint constraint: a point ``z`` or a halfspace ``x[index] >= q``."""

    kind: str
    z: Optional[np.ndarray] = None
    q: float = 0.0
    index: int = 0

    @classmethod
    def point(cls, z):
        return cls(kind="point", z=np.atleast_1d(np.asarray(z, dtype=float)))

    @classmethod
    def halfspace(cls, q, index=0):
        return cls(kind="halfspace", q=float(q), index=int(index))

    def project(self, x):
        if self.kind == "point":
            return self.z.copy()
        x = x.copy()
        x[self.index] = max(x[self.index], self.q)
        return x


def _laplacian_bands(count, free_end):
    ab = np.zeros((3, count))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    if free_end:
        ab[1, -1] = 1.0
    return ab


def minimize_action(model, bank, terminal, K_nodes=200, init=None, tol=1e-12, max_iter=500,
                    T=None):
    """Minimise the discrete action over paths from ``x0`` meeting ``terminal``.

    Gradient descent with Armijo backtracking in the discrete H^1 metric (the
    gradient is preconditioned by the path Laplacian, scaled by the average
    Q). For a point target both endpoints are pinned. For a halfspace that
    excludes the averaged endpoint the constrained coordinate is pinned on the
    boundary and the remaining terminal coordinates are free; otherwise the
    whole terminal node is free.
    """
    if init is not None:
        T, K_nodes = init.T, init.K
    else:
        T = 1.0 if T is None else float(T)
    n = model.n
    h = T / K_nodes
    grid = np.linspace(0.0, T, K_nodes + 1)
    xbar = solve_averaged_ode(model, bank, T=T, dt=min(1e-3 * T, h))(grid)

    free = np.ones((K_nodes + 1, n), dtype=bool)
    free[0] = False
    if terminal.kind == "point":
        end = terminal.z.copy()
        free[-1] = False
    elif xbar[-1, terminal.index] < terminal.q:
        end = xbar[-1].copy()
        end[terminal.index] = terminal.q
        free[-1, terminal.index] = False
    else:
        end = xbar[-1].copy()

    if init is None:
        values = xbar + (grid / T)[:, None] * (end - xbar[-1])[None, :]
    else:
        if not np.allclose(init.grid, grid):
            raise ContractError("init must be on a uniform grid")
        values = init.values.copy()
        values[-1, ~free[-1]] = end[~free[-1]]
    if np.max(np.abs(values[0] - model.x0)) > 1e-12:
        raise ContractError("initial path must start at x0")

    xmid = reference_midpoints(model, bank, T, K_nodes)
    S, grad = action_and_gradient(values, h, model, bank, xmid)
    Qbar = np.mean(averaged_coefficients(0.5 * (values[1:] + values[:-1]), _point_mass(xmid),
                                         bank, model)[1], axis=0)
    end_free = free[-1]
    shared = end_free.all() or not end_free.any()
    bands = {flag: _laplacian_bands(K_nodes - 1 + int(flag), flag) for flag in (False, True)}
    qscale = float(np.trace(Qbar)) / n

    def direction(g):
        G = (g @ Qbar.T if shared else qscale * g) * h
        d = np.zeros_like(g)
        for j in range(n):
            top = K_nodes + int(end_free[j])
            d[1:top, j] = -solve_banded((1, 1), bands[bool(end_free[j])], G[1:top, j])
        return d

    history = [S]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = direction(grad)
        slope = float(np.sum(grad * d))
        if not slope < 0:
            converged = True
            break
        step = min(1.0, 2.0 * step)
        while True:
            trial = values + step * d
            S_new, grad_new = action_and_gradient(trial, h, model, bank, xmid)
            if S_new <= S + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        if S_new > S:
            converged = True
            break
        improvement = S - S_new
        values, S, grad = trial, S_new, grad_new
        history.append(S)
        if improvement < tol:
            converged = True
            break

    path = DiscretePath(grid, values)
    result = evaluate_action(path, model, bank)
    result.converged = converged
    result.iterations = it
    result.history = history
    return path, result


# ---------------------------------------------------------------- feedback control

@dataclass
class FeedbackPlan:
    """Per-interval data behind the optimal feedback control."""

    grid: np.ndarray
    mids: np.ndarray
    xbar_mid: np.ndarray
    weights: np.ndarray      # Q^{-1}(psi_dot - b_bar) per interval
    model: object = field(repr=False)
    bank: object = field(repr=False)

    @property
    def step(self):
        return float(self.grid[1] - self.grid[0])

    def interval(self, t):
        k = int(np.floor(t / self.step + 1e-12))
        return min(max(k, 0), len(self.mids) - 1)

    def h1(self, k, y):
        """First d1 components of the control on interval ``k`` at fast states ``y``."""
        model, bank = self.model, self.bank
        S = model.sigma(self.mids[k], _point_mass(self.xbar_mid[k]), y, bank.features)
        S = np.broadcast_to(S, np.shape(y)[:-1] + (model.n, model.d1))
        return np.einsum("...ij,i->...j", S, self.weights[k])


def feedback_plan(psi, model, bank):
    h = _check_uniform(psi)
    xmid = reference_midpoints(model, bank, psi.T, psi.K)
    r, Q = _interval_terms(psi.values, h, xmid, model, bank)
    u = np.linalg.solve(Q, r[..., None])[..., 0]
    return FeedbackPlan(grid=psi.grid, mids=psi.midpoints, xbar_mid=xmid, weights=u,
                        model=model, bank=bank)


def feedback_control(psi, model, bank):
    """Feedback control ``h(t, y) = sigma(psi_t, y)^T Q^{-1} (psi_dot - b_bar)``.

    Piecewise constant in ``t`` on the path grid, exact in ``y``; the last
    ``d2`` components vanish.
    """
    plan = feedback_plan(psi, model, bank)
    d1, d = model.d1, model.d1 + model.d2

    def fn(t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (d,))
        out[..., :d1] = plan.h1(plan.interval(t), y)
        return out

    return Control.feedback(fn, d, psi.T, plan=plan)


def plan_of(control):
    if control.plan is None:
        raise ContractError("control was not built by feedback_control")
    return control.plan


def relaxed_cost(control, bank):
    """``1/2 int int |h_t(y)|^2 nu(dy) dt`` with the bank as ``nu``."""
    plan = plan_of(control)
    h = plan.step
    total = 0.0
    for k in range(len(plan.mids)):
        hk = plan.h1(k, bank.samples)
        total += 0.5 * h * float(np.mean(np.sum(hk * hk, axis=-1)))
    return total


def controlled_averaged_path(control, model, bank, x0=None, tol=1e-14, max_sweeps=100):
    """Push a feedback control through the averaged controlled dynamics.

    Implicit midpoint on the control's grid:
    ``phi' = b_bar(phi, delta_Xbar) + int sigma(phi, y) h1(t, y) nu(dy)``.
    """
    plan = plan_of(control)
    h = plan.step
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    out = [x.copy()]
    nu = bank.features
    for k in range(len(plan.mids)):
        hk = plan.h1(k, bank.samples)
        mu = _point_mass(plan.xbar_mid[k])
        nxt = x.copy()
        for _ in range(max_sweeps):
            m = 0.5 * (x + nxt)
            S = np.broadcast_to(model.sigma(m, mu, bank.samples, nu), (bank.K, model.n, model.d1))
            push = np.mean(np.einsum("kij,kj->ki", S, hk), axis=0)
            cand = x + h * (averaged_drift(m, mu, bank, model) + push)
            done = np.max(np.abs(cand - nxt)) < tol
            nxt = cand
            if done:
                break
        x = nxt
        out.append(x.copy())
    return DiscretePath(plan.grid.copy(), np.asarray(out))
