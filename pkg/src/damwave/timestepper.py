"""Generalized-alpha integration of ``M a + C v + B(u) u = 0``.

Balance equation of one step::

    M a_{n+1-am} + C v_{n+1-af} + B u_{n+1-af} = 0
    x_{n+1-a} = (1 - a) x_{n+1} + a x_n

closed with the Newmark updates::

    v_{n+1} = v_n + tau ((1 - gamma) a_n + gamma a_{n+1})
    u_{n+1} = u_n + tau v_n + tau^2 ((1/2 - beta) a_n + beta a_{n+1})

``B`` is frozen at ``u_n`` for the whole step (lagged coefficient).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional

import numpy as np

from .femcore import SparseSym, combine, solve_spd

TIMING_CATEGORIES = ("mesh_loading", "setup", "assembly", "solver", "step_update", "file_output")


class Convention(str, Enum):
    STANDARD = "standard-second-order"
    PAPER_LITERAL = "paper-literal"


@dataclass(frozen=True)
class AlphaParams:
    rho: float
    alpha_m: float
    alpha_f: float
    beta: float
    gamma: float
    convention: Convention = Convention.STANDARD


def derive_params(rho: float = 0.2, convention: Convention | str = Convention.STANDARD) -> AlphaParams:
    """Parameters from the spectral radius at infinity ``rho``.

    ``paper-literal`` uses ``gamma = 1/2 - am - af``, which is only first
    order accurate; it is kept for comparison runs.
    """
    convention = Convention(convention)
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    am = (2.0 * rho - 1.0) / (rho + 1.0)
    af = rho / (rho + 1.0)
    if convention is Convention.STANDARD:
        gamma = 0.5 - am + af
        beta = 0.25 * (1.0 - am + af) ** 2
    else:
        gamma = 0.5 - am - af
        beta = 0.25 * (1.0 - am - af) ** 2
    return AlphaParams(rho, am, af, beta, gamma, convention)


@dataclass
class SimulationState:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    t: float = 0.0
    step: int = 0

    def copy(self) -> "SimulationState":
        return SimulationState(self.u.copy(), self.v.copy(), self.a.copy(), self.t, self.step)


class LinearSystem:
    """Constant matrices; ``stiffness(u)`` ignores ``u``."""

    def __init__(self, mass: SparseSym, stiffness: SparseSym, damping: Optional[SparseSym] = None):
        self.mass = mass
        self.damping = damping
        self._stiffness = stiffness

    def stiffness(self, u) -> SparseSym:
        return self._stiffness


def _timed(timer, key, t0):
    if timer is not None:
        now = time.perf_counter()
        timer[key] = timer.get(key, 0.0) + now - t0
        return now
    return 0.0


def initial_acceleration(u0, v0, system, tol: float = 1e-10) -> np.ndarray:
    """Solve ``M a0 = -C v0 - B(u0) u0``."""
    rhs = -system.stiffness(u0).matvec(u0)
    if system.damping is not None:
        rhs -= system.damping.matvec(v0)
    return solve_spd(system.mass, rhs, tol=tol)


def step(state: SimulationState, system, params: AlphaParams, tau: float, *, tol: float = 1e-10,
         stiffness: Optional[SparseSym] = None, timer: Optional[dict] = None,
         stats: Optional[dict] = None) -> SimulationState:
    """Advance one step of length ``tau``; ``stiffness`` defaults to B(state.u)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    am, af, beta, gamma = params.alpha_m, params.alpha_f, params.beta, params.gamma
    u, v, a = state.u, state.v, state.a
    t0 = time.perf_counter()
    M, C = system.mass, system.damping
    B = system.stiffness(u) if stiffness is None else stiffness

    terms = [(1.0 - am, M), ((1.0 - af) * beta * tau * tau, B)]
    if C is not None:
        terms.append(((1.0 - af) * gamma * tau, C))
    A = combine(terms)
    u_pred = u + tau * v + (0.5 - beta) * tau * tau * a
    v_pred = v + (1.0 - gamma) * tau * a
    rhs = -M.matvec(am * a)
    rhs -= B.matvec((1.0 - af) * u_pred + af * u)
    if C is not None:
        rhs -= C.matvec((1.0 - af) * v_pred + af * v)
    t0 = _timed(timer, "assembly", t0)

    try:
        a_new = solve_spd(A, rhs, tol=tol, stats=stats)
    except Exception as exc:
        raise type(exc)(f"step {state.step + 1}: {exc}") from exc
    t0 = _timed(timer, "solver", t0)

    v_new = v_pred + gamma * tau * a_new
    u_new = u_pred + beta * tau * tau * a_new
    out = SimulationState(u_new, v_new, a_new, (state.step + 1) * tau, state.step + 1)
    _timed(timer, "step_update", t0)
    return out


@dataclass
class StepRecord:
    step: int
    t: float
    timings: dict
    cg_iterations: int


@dataclass
class Hook:
    """Callback run every ``every`` steps (and on the initial state)."""

    fn: Callable[[SimulationState], None]
    every: int = 1


def run_transient(state0: SimulationState, system, params: AlphaParams, tau: float, n_steps: int,
                  hooks: Iterable[Hook] = (), *, tol: float = 1e-10, picard: int = 0,
                  records: Optional[list] = None) -> SimulationState:
    """Repeat (assemble B at u_n, step) ``n_steps`` times.

    ``picard > 0`` re-solves each step with B evaluated at the provisional
    ``u_{n+1-af}``.  Per-step timings go to ``records`` when given.
    """
    hooks = list(hooks)
    state = state0
    for h in hooks:
        h.fn(state)
    for _ in range(n_steps):
        timer = dict.fromkeys(TIMING_CATEGORIES, 0.0)
        stats: dict = {}
        t0 = time.perf_counter()
        B = system.stiffness(state.u)
        _timed(timer, "assembly", t0)
        try:
            new = step(state, system, params, tau, tol=tol, stiffness=B, timer=timer, stats=stats)
            for _ in range(picard):
                t0 = time.perf_counter()
                u_mid = (1.0 - params.alpha_f) * new.u + params.alpha_f * state.u
                B = system.stiffness(u_mid)
                _timed(timer, "assembly", t0)
                new = step(state, system, params, tau, tol=tol, stiffness=B, timer=timer, stats=stats)
        except Exception as exc:
            raise RuntimeError(f"time step {state.step + 1} (t = {state.t + tau:g} s) failed: {exc}") from exc
        state = new
        t0 = time.perf_counter()
        for h in hooks:
            if state.step % h.every == 0:
                h.fn(state)
        _timed(timer, "file_output", t0)
        if records is not None:
            records.append(StepRecord(state.step, state.t, timer, stats.get("iterations", 0)))
    return state


def amplification_matrix(params: AlphaParams, omega: float, tau: float) -> np.ndarray:
    """One-step map of ``(u, tau v, tau^2 a)`` for ``u'' + omega^2 u = 0``."""
    M = SparseSym.from_dense([[1.0]])
    K = SparseSym.from_dense([[omega * omega]])
    system = LinearSystem(M, K)
    cols = []
    for e in np.eye(3):
        s = SimulationState(np.array([e[0]]), np.array([e[1] / tau]), np.array([e[2] / tau ** 2]))
        n = step(s, system, params, tau, tol=1e-14)
        cols.append([n.u[0], n.v[0] * tau, n.a[0] * tau ** 2])
    return np.array(cols).T


def spectral_radius(params: AlphaParams, omega: float, tau: float) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(amplification_matrix(params, omega, tau)))))


def simulated_time(step_index: int, tau: float) -> float:
    """Seconds of simulated time after ``step_index`` steps."""
    return step_index * tau


def format_duration(seconds: float) -> str:
    """``"8 days 16 hours 20 minutes"`` style, truncated to whole minutes."""
    minutes = int(seconds // 60)
    days, rem = divmod(minutes, 1440)
    hours, mins = divmod(rem, 60)
    parts = []
    if days:
        parts.append(f"{days} day{'s' if days != 1 else ''}")
    if hours:
        parts.append(f"{hours} hour{'s' if hours != 1 else ''}")
    parts.append(f"{mins} minute{'s' if mins != 1 else ''}")
    return " ".join(parts)
