"""Numerical solution of generated systems on a fixed time grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .exprtree import OdeSystem, compile_system

AMPLITUDE_LIMIT = 100.0
BLOWUP_LIMIT = 1e6


def default_grid(n_points: int = 100, t0: float = 1.0, t1: float = 10.0) -> np.ndarray:
    return np.linspace(t0, t1, n_points)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.ndim != 1 or self.times.shape[0] < 2:
            raise ValueError("a trajectory needs at least two time points")
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError(
                f"states have {self.states.shape[0]} rows for {self.times.shape[0]} times"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states must be finite")

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def n_points(self) -> int:
        return self.times.shape[0]

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]


@dataclass(frozen=True)
class Divergent:
    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 20_000

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


class _Abort(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def solve(system: OdeSystem, x0, grid=None, cfg: SolverConfig | None = None,
          guard: float = BLOWUP_LIMIT) -> Trajectory | Divergent:
    """Integrate ``system`` from ``x0`` at ``grid[0]`` with Dormand-Prince 4(5).

    States are read off the dense output at the grid points.  Any state
    magnitude reaching ``guard``, a non-finite right-hand side and step
    exhaustion return :class:`Divergent`.  Corpus generation passes the
    amplitude limit as ``guard`` to reject early.
    """
    cfg = cfg or SolverConfig()
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != system.dim:
        raise ValueError(f"initial value has length {x0.shape[0]}, system has dimension {system.dim}")
    if grid.ndim != 1 or grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial value must be finite")

    f = compile_system(system)
    # RK45 uses 6 evaluations per step (FSAL), plus rejected steps
    max_evals = 6 * cfg.max_steps + 2
    n_evals = 0

    def rhs(t, x):
        nonlocal n_evals
        n_evals += 1
        if n_evals > max_evals:
            raise _Abort("step limit")
        dx = f(x)
        if not np.all(np.isfinite(dx)):
            raise _Abort("non-finite right-hand side")
        return dx

    def blowup(t, x):
        return guard - np.max(np.abs(x))

    blowup.terminal = True

    try:
        sol = solve_ivp(
            rhs,
            (grid[0], grid[-1]),
            x0,
            method="RK45",
            t_eval=grid,
            rtol=cfg.rtol,
            atol=cfg.atol,
            events=blowup,
        )
    except _Abort as exc:
        return Divergent(exc.reason)
    if sol.status == 1:
        return Divergent("blow-up")
    if sol.status != 0:
        return Divergent(f"solver failure: {sol.message}")
    states = sol.y.T
    if states.shape[0] != grid.shape[0] or not np.all(np.isfinite(states)):
        return Divergent("incomplete solution")
    return Trajectory(grid.copy(), states)


def amplitude_ok(traj: Trajectory, limit: float = AMPLITUDE_LIMIT) -> bool:
    """True when no state component exceeds ``limit`` in magnitude (boundary passes)."""
    return bool(np.max(np.abs(traj.states)) <= limit)
