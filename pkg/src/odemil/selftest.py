"""Fast invariant checks runnable from the CLI (``odemil selftest``)."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .datagen import enumerate_monomials
from .exprtree import OdeSystem, compile_system, const, mul, var
from .infer import rms_scale, scale_system, unscale_system
from .integrate import Trajectory, amplitude_ok, default_grid, solve
from .model import AGGREGATORS, ModelConfig, MultiInstanceSeq2Seq
from .tokenizer import build_vocab, decode_float, encode_float
from .train import CosineParams, NoamParams, cosine_schedule, cycle_bounds, noam_schedule


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _vocab():
    n = build_vocab().n_numeric
    return n == 10_203, f"numeric tokens = {n}"


def _codec():
    rng = np.random.default_rng(0)
    v = rng.choice([-1, 1], 10_000) * 10 ** rng.uniform(-50, 50, 10_000)
    err = max(abs(decode_float(encode_float(x)) - x) / abs(x) for x in v)
    exact = decode_float(encode_float(0.0)) == 0.0
    return err <= 5e-4 and exact, f"max rel error {err:.2e}"


def _monomials():
    bad = [(d, o) for d in range(1, 5) for o in range(1, 4)
           if len(enumerate_monomials(d, o)) != math.comb(d + o, d)]
    return not bad, f"mismatches {bad}"


def _integrator():
    t = default_grid()
    decay = solve(OdeSystem((mul(const(-1.0), var(0)),)), [1.0], t)
    err = float(np.max(np.abs(decay.states[:, 0] - np.exp(-(t - t[0])))))
    growth = solve(OdeSystem((var(0),)), [1.0], t)
    rejected = (not growth) or not amplitude_ok(growth)
    return err <= 1e-2 and rejected, f"decay error {err:.1e}, growth rejected {rejected}"


def _schedules():
    c = CosineParams()
    ok = math.isclose(cosine_schedule(1000, c), 2e-4)
    _, length, peak = cycle_bounds(1, c)
    ok &= math.isclose(length, 33_000) and math.isclose(peak, 1.5e-4)
    ok &= math.isclose(noam_schedule(8000, NoamParams()), NoamParams().lr_max / 2)
    return ok, f"cycle 2: length {length:g}, peak {peak:g}"


def _rescale():
    tr = Trajectory(np.array([0.0, 1.0]), np.array([[3.0, 4.0], [3.0, 4.0]]))
    scaled, R = rms_scale([tr])
    ok = math.isclose(R, math.sqrt(12.5)) and math.isclose(float(np.sqrt(np.mean(scaled[0].states[0] ** 2))), 1.0)
    s = OdeSystem((mul(const(0.7), mul(var(0), var(1))), mul(const(-2.0), var(0))))
    back = unscale_system(scale_system(s, R), R)
    x = np.random.default_rng(1).normal(size=(50, 2))
    f, g = compile_system(s), compile_system(back)
    err = max(float(np.max(np.abs(f(p) - g(p)))) for p in x)
    return ok and err <= 1e-12, f"R = {R:.6f}, round-trip error {err:.1e}"


def _aggregators():
    torch.manual_seed(0)
    worst = 0.0
    for agg in AGGREGATORS:
        m = MultiInstanceSeq2Seq(ModelConfig.toy(aggregator=agg)).eval()
        z = torch.randn(1, 3, 6, 64)
        mask = torch.ones(1, 3, dtype=torch.bool)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            a, b = m.aggregator(z, mask), m.aggregator(z[:, perm], mask)
        worst = max(worst, float((a - b).abs().max()))
    return worst <= 1e-5, f"max permutation deviation {worst:.1e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "vocab size": _vocab,
    "float codec": _codec,
    "monomial counts": _monomials,
    "integrator": _integrator,
    "schedules": _schedules,
    "rescaling": _rescale,
    "aggregator permutation invariance": _aggregators,
}


def run_selftest() -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a failed run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
