"""Independent reference implementations used as test oracles.

None of these import the code under test's internals; they recompute the
expected values by a different route.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
import torch


def codec_oracle(v: float) -> tuple[str, int, int]:
    """4-significant-digit (sign, mantissa, exponent) by exact rational arithmetic
    on the shortest repr, rounding half away from zero."""
    if v == 0:
        return "+", 0, 0
    sign = "-" if v < 0 else "+"
    x = Fraction(repr(abs(v)))
    # find q with 1000 <= x / 10**q < 10000
    q = math.floor(math.log10(abs(v))) - 3
    while x / Fraction(10) ** q >= 10000:
        q += 1
    while x / Fraction(10) ** q < 1000:
        q -= 1
    y = x / Fraction(10) ** q
    m = int(y)
    if y - m >= Fraction(1, 2):
        m += 1
    if m == 10000:
        m, q = 1000, q + 1
    return sign, m, q


def monomials_bruteforce(dim: int, order: int) -> set[tuple[int, ...]]:
    return {o for o in itertools.product(range(order + 1), repeat=dim) if sum(o) <= order}


def rk4_reference(f, x0, t, substeps=200):
    """Classical fixed-step RK4 sampled on ``t`` (oracle for the adaptive solver)."""
    x = np.asarray(x0, dtype=float)
    out = [x.copy()]
    for a, b in zip(t[:-1], t[1:]):
        h = (b - a) / substeps
        for _ in range(substeps):
            k1 = f(x)
            k2 = f(x + h / 2 * k1)
            k3 = f(x + h / 2 * k2)
            k4 = f(x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(x.copy())
    return np.array(out)


def r2_oracle(y_true, y_pred) -> float:
    a = [float(v) for v in np.ravel(y_true)]
    b = [float(v) for v in np.ravel(y_pred)]
    mean = math.fsum(a) / len(a)
    ss_res = math.fsum((u - w) ** 2 for u, w in zip(a, b))
    ss_tot = math.fsum((u - mean) ** 2 for u in a)
    return 1 - ss_res / ss_tot


def rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(f, steps=(2e-2, 2e-3)):
    """Derivative of the scalar function ``f(h)`` at ``h = 0``.

    For each step the sixth-order central stencil ``(45 D1 - 9 D2 + D3) / 60h``
    (``Dk = f(kh) - f(-kh)``) is compared with the fourth-order one
    ``(8 D1 - D2) / 12h``; their gap estimates the error (truncation at wide
    steps, float64 round-off at narrow ones).  The step with the smaller gap
    wins.  The choice never looks at the analytic gradient.
    """
    best = None
    for h in steps:
        d1, d2, d3 = (f(k * h) - f(-k * h) for k in (1, 2, 3))
        o6 = (45 * d1 - 9 * d2 + d3) / (60 * h)
        o4 = (8 * d1 - d2) / (12 * h)
        if best is None or abs(o6 - o4) < best[1]:
            best = (o6, abs(o6 - o4))
    return best[0]


def gradient_check(loss_fn, params, rng, n_dirs=2, n_coords=6, floor=1e-9):
    """Finite differences against autograd for every parameter tensor.

    Each tensor is checked along ``n_dirs`` random unit directions (covers every
    entry at once) and at ``n_coords`` single coordinates: the largest-gradient
    entries plus random ones.  ``floor`` only guards the relative error of
    gradients that are exactly zero.  Returns ``[(name, kind, analytic,
    numeric, rel)]``.
    """
    named = list(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in named}
    report = []

    def along(p, direction):
        def f(h):
            with torch.no_grad():
                p.add_(h * direction)
                v = float(loss_fn())
                p.sub_(h * direction)
            return v
        return central_difference(f)

    for name, p in named:
        g = grads[name]
        for _ in range(n_dirs):
            v = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
            v /= v.norm()
            ana = float((g * v).sum())
            num = along(p, v)
            report.append((name, "direction", ana, num, rel_err(ana, num, floor)))
        flat = g.reshape(-1)
        top = torch.topk(flat.abs(), min(n_coords // 2, flat.numel())).indices.tolist()
        rand = rng.integers(0, flat.numel(), size=n_coords - len(top)).tolist()
        for idx in dict.fromkeys(top + rand):
            e = torch.zeros_like(p).reshape(-1)
            e[idx] = 1.0
            ana = float(flat[idx])
            num = along(p, e.view_as(p))
            report.append((name, f"coord {idx}", ana, num, rel_err(ana, num, floor)))
    return report
