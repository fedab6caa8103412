import numpy as np
import pytest
from scipy.linalg import expm

from odemil.exprtree import OdeSystem, add, const, mul, unary, var
from odemil.integrate import (
    Divergent,
    SolverConfig,
    Trajectory,
    amplitude_ok,
    default_grid,
    solve,
)
from oracles import rk4_reference

T = default_grid()


def test_grid():
    assert T.shape == (100,) and T[0] == 1 and T[-1] == 10
    assert np.allclose(np.diff(T), 9 / 99)


def test_exponential_decay():
    tr = solve(OdeSystem((mul(const(-1.0), var(0)),)), [1.0], T)
    exact = np.exp(-(T - 1))
    assert np.max(np.abs(tr.states[:, 0] - exact) / exact) <= 1e-2
    assert abs(tr.states[-1, 0] - 1.2341e-4) / 1.2341e-4 <= 1e-2


def test_harmonic_oscillator():
    tr = solve(OdeSystem((var(1), mul(const(-1.0), var(0)))), [1.0, 0.0], T)
    assert np.max(np.abs(tr.states[:, 0] - np.cos(T - 1))) <= 1e-2
    assert np.max(np.abs(tr.states[:, 1] + np.sin(T - 1))) <= 1e-2


def test_blow_up_is_divergent():
    out = solve(OdeSystem((unary("square", var(0)),)), [1.0], T)
    assert isinstance(out, Divergent) and not out


def test_nonfinite_rhs_is_divergent():
    out = solve(OdeSystem((unary("inv", var(0)),)), [0.0], T)
    assert isinstance(out, Divergent)


def test_step_limit_is_divergent():
    stiff = OdeSystem((mul(const(-1e5), add(var(0), const(-1.0))),))
    out = solve(stiff, [0.0], T, SolverConfig(max_steps=50))
    assert isinstance(out, Divergent)


def test_amplitude_filter():
    assert amplitude_ok(Trajectory(T, np.zeros((100, 1))))
    growth = solve(OdeSystem((var(0),)), [1.0], T)
    assert growth and np.isclose(growth.states[-1, 0], np.exp(9), rtol=1e-2)
    assert not amplitude_ok(growth)
    edge = np.zeros((100, 1))
    edge[5] = -100.0
    assert amplitude_ok(Trajectory(T, edge))
    edge[5] = -100.0000001
    assert not amplitude_ok(Trajectory(T, edge))


def test_linear_system_matches_matrix_exponential():
    A = np.array([[-0.3, 1.2], [-0.8, -0.1]])
    s = OdeSystem((add(mul(const(A[0, 0]), var(0)), mul(const(A[0, 1]), var(1))),
                   add(mul(const(A[1, 0]), var(0)), mul(const(A[1, 1]), var(1)))))
    x0 = np.array([0.7, -1.1])
    tr = solve(s, x0, T)
    exact = np.array([expm(A * (t - 1)) @ x0 for t in T])
    scale = np.abs(exact).max()
    assert np.max(np.abs(tr.states - exact)) / scale <= 1e-2


def test_nonlinear_against_rk4():
    s = OdeSystem((add(var(1), mul(const(-0.1), unary("square", var(0)))),
                   add(mul(const(-1.0), unary("sin", var(0))), mul(const(-0.2), var(1)))))
    tr = solve(s, [1.0, 0.0], T)
    from odemil.exprtree import compile_system
    ref = rk4_reference(compile_system(s), [1.0, 0.0], T, substeps=20)
    assert np.max(np.abs(tr.states - ref)) <= 1e-2


def test_tolerance_halving_is_stable():
    s = OdeSystem((var(1), mul(const(-1.0), var(0))))
    a = solve(s, [1.0, 0.5], T, SolverConfig(rtol=1e-3, atol=1e-6))
    b = solve(s, [1.0, 0.5], T, SolverConfig(rtol=5e-4, atol=5e-7))
    assert np.max(np.abs(a.states - b.states) / np.maximum(np.abs(b.states), 1e-3)) < 10 * 1e-3 or \
        np.max(np.abs(a.states - b.states)) < 10 * 1e-3


def test_deterministic():
    s = OdeSystem((add(var(0), mul(const(-1.0), unary("square", var(0)))),))
    a, b = solve(s, [0.2], T), solve(s, [0.2], T)
    np.testing.assert_array_equal(a.states, b.states)


def test_validation():
    with pytest.raises(ValueError):
        solve(OdeSystem((var(0),)), [1.0, 2.0], T)
    with pytest.raises(ValueError):
        Trajectory(np.array([1.0, 1.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        Trajectory(np.array([1.0]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        Trajectory(np.array([1.0, 2.0]), np.array([[np.nan], [0.0]]))
    with pytest.raises(ValueError):
        SolverConfig(rtol=0)
