"""Scoring predicted systems, and the sequentially thresholded least-squares baseline.

Every R^2 compares against noiseless ground truth; noise only ever touches
model inputs.  A prediction passes a task when its R^2 exceeds 0.9
(reconstruction: the minimum over the observed instances).
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import SystemRecord, enumerate_monomials, monomial_term, sum_terms
from .exprtree import OdeSystem, compile_system, const
from .integrate import SolverConfig, Trajectory, amplitude_ok, solve

THRESHOLD = 0.9
TASKS = ("reconstruction", "generalization")
NOISE_GRID = (0.0, 0.01, 0.05, 0.1)


def r2(y_true, y_pred) -> float:
    """Pooled coefficient of determination over all entries.

    Constant truth gives 1.0 for an exact match and NaN (undefined, never a
    pass) otherwise.
    """
    a = np.asarray(y_true, dtype=float).ravel()
    b = np.asarray(y_pred, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two values")
    ss_res = float(np.sum((a - b) ** 2))
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else math.nan
    return 1.0 - ss_res / ss_tot


def r2_per_dim(y_true, y_pred) -> list[float]:
    a = np.atleast_2d(np.asarray(y_true, dtype=float).T).T
    b = np.atleast_2d(np.asarray(y_pred, dtype=float).T).T
    return [r2(a[:, i], b[:, i]) for i in range(a.shape[1])]


def passes(score: float, threshold: float = THRESHOLD) -> bool:
    return bool(score > threshold)  # NaN compares False


@dataclass
class EvalOutcome:
    system_id: int
    method: str = ""
    dim: int = 0
    n_instances: int = 0
    sigma: float = 0.0
    recon_r2: list[float] = field(default_factory=list)
    recon_pass: bool = False
    recon_failure: str = ""
    gen_r2: float = math.nan
    gen_pass: bool = False
    gen_excluded: bool = False
    gen_failure: str = ""

    def rows(self) -> list[dict]:
        base = dict(system_id=self.system_id, method=self.method, dim=self.dim,
                    n_instances=self.n_instances, sigma=self.sigma)
        rmin = min(self.recon_r2) if self.recon_r2 else math.nan
        return [
            dict(base, task="reconstruction", r2=rmin, passed=int(self.recon_pass), excluded=0,
                 failure=self.recon_failure),
            dict(base, task="generalization", r2=self.gen_r2, passed=int(self.gen_pass),
                 excluded=int(self.gen_excluded), failure=self.gen_failure),
        ]


def reconstruction_score(record: SystemRecord, pred: OdeSystem | None,
                         solver: SolverConfig | None = None) -> tuple[list[float], bool, str]:
    """Re-integrate ``pred`` from every instance's initial value on the record grid.

    Returns (per-instance R^2, pass, failure reason).  Pass requires the
    minimum R^2 over instances to exceed the threshold.
    """
    if pred is None:
        return [], False, "parse failure"
    if pred.dim != record.dim:
        return [], False, "dimension mismatch"
    scores = []
    for tr in record.instances:
        sol = solve(pred, tr.states[0], tr.times, solver)
        if not sol:
            return scores, False, f"divergent ({sol.reason})"
        scores.append(r2(tr.states, sol.states))
    ok = all(passes(s) for s in scores)
    return scores, ok, ""


def unseen_initial_value(record: SystemRecord, seed: int, solver: SolverConfig | None = None,
                         max_redraws: int = 10) -> tuple[np.ndarray, Trajectory] | None:
    """Standard-normal initial value, redrawn while the true solution fails the
    amplitude filter.  Depends only on ``(seed, record.id)``."""
    rng = np.random.default_rng([seed, record.id, 99])
    for _ in range(max_redraws + 1):
        x0 = rng.standard_normal(record.dim)
        truth = solve(record.system, x0, record.times, solver)
        if truth and amplitude_ok(truth):
            return x0, truth
    return None


def generalization_score(record: SystemRecord, pred: OdeSystem | None, seed: int = 0,
                         solver: SolverConfig | None = None,
                         max_redraws: int = 10) -> tuple[float, bool, bool, str]:
    """Returns (R^2, pass, excluded, failure reason)."""
    drawn = unseen_initial_value(record, seed, solver, max_redraws)
    if drawn is None:
        return math.nan, False, True, "no admissible initial value"
    if pred is None:
        return math.nan, False, False, "parse failure"
    if pred.dim != record.dim:
        return math.nan, False, False, "dimension mismatch"
    x0, truth = drawn
    sol = solve(pred, x0, record.times, solver)
    if not sol:
        return math.nan, False, False, f"divergent ({sol.reason})"
    score = r2(truth.states, sol.states)
    return score, passes(score), False, ""


def evaluate_prediction(record: SystemRecord, pred: OdeSystem | None, *, method: str = "",
                        sigma: float = 0.0, seed: int = 0,
                        solver: SolverConfig | None = None) -> EvalOutcome:
    """Both tasks for one prediction.  ``record`` holds the observed instances."""
    rs, rp, rf = reconstruction_score(record, pred, solver)
    g, gp, gx, gf = generalization_score(record, pred, seed, solver)
    return EvalOutcome(record.id, method, record.dim, record.n_instances, sigma,
                       rs, rp, rf, g, gp, gx, gf)


def accuracy(outcomes: Sequence[EvalOutcome], task: str) -> float:
    """Fraction passing; failures count as misses, excluded systems are dropped."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task == "reconstruction":
        flags = [o.recon_pass for o in outcomes]
    else:
        flags = [o.gen_pass for o in outcomes if not o.gen_excluded]
    if not flags:
        raise ValueError("accuracy of an empty outcome set is undefined")
    return sum(flags) / len(flags)


# --- results files --------------------------------------------------------

RESULT_FIELDS = ("system_id", "method", "dim", "n_instances", "sigma", "task", "r2", "passed",
                 "excluded", "failure")
SUMMARY_FIELDS = ("method", "task", "dim", "n_instances", "sigma", "n_systems", "n_pass",
                  "n_excluded", "accuracy")


def write_results(path, outcomes: Iterable[EvalOutcome]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for o in outcomes:
            for row in o.rows():
                row = dict(row, r2="" if math.isnan(row["r2"]) else f"{row['r2']:.6f}")
                w.writerow(row)
                n += 1
    return n


def read_results(paths) -> list[dict]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(RESULT_FIELDS) <= set(reader.fieldnames):
                raise ValueError(f"{p} is not a results file")
            for r in reader:
                rows.append(dict(
                    system_id=int(r["system_id"]), method=r["method"], dim=int(r["dim"]),
                    n_instances=int(r["n_instances"]), sigma=float(r["sigma"]), task=r["task"],
                    r2=float(r["r2"]) if r["r2"] else math.nan, passed=int(r["passed"]),
                    excluded=int(r["excluded"]), failure=r["failure"],
                ))
    return rows


def summarize(rows: Sequence[dict]) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["method"], r["task"], r["dim"], r["n_instances"], r["sigma"])].append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        kept = [r for r in rs if not r["excluded"]]
        n_pass = sum(r["passed"] for r in kept)
        out.append(dict(zip(SUMMARY_FIELDS[:5], key), n_systems=len(kept), n_pass=n_pass,
                        n_excluded=len(rs) - len(kept),
                        accuracy=n_pass / len(kept) if kept else math.nan))
    return out


def write_summary(path, summary: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for s in summary:
            w.writerow(dict(s, accuracy="" if math.isnan(s["accuracy"]) else f"{s['accuracy']:.4f}"))


# --- sparse regression baseline -------------------------------------------

@dataclass(frozen=True)
class StlsqConfig:
    threshold: float = 0.1
    max_iter: int = 400
    degree: int = 3
    fd_order: int = 2

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.fd_order not in (1, 2):
            raise ValueError("finite-difference order must be 1 or 2")


def finite_diff(traj: Trajectory, order: int = 2) -> np.ndarray:
    """Central differences inside, one-sided ``order``-accurate at the ends."""
    return np.gradient(traj.states, traj.times, axis=0, edge_order=order)


def library(states: np.ndarray, exponents: Sequence[Sequence[int]]) -> np.ndarray:
    x = np.asarray(states, dtype=float)
    return np.stack([np.prod(x ** np.asarray(o, dtype=float), axis=1) for o in exponents], axis=1)


@dataclass
class StlsqResult:
    coef: np.ndarray  # (n_features, D)
    exponents: list[tuple[int, ...]]
    n_rows: int
    iterations: int

    def system(self) -> OdeSystem:
        exprs = []
        for i in range(self.coef.shape[1]):
            terms = [monomial_term(float(c), o) for c, o in zip(self.coef[:, i], self.exponents) if c != 0]
            exprs.append(sum_terms(terms) if terms else const(0.0))
        return OdeSystem(tuple(exprs))


def _lstsq(theta, y):
    sol, _, rank, _ = np.linalg.lstsq(theta, y, rcond=None)
    if rank < theta.shape[1]:
        warnings.warn(f"rank-deficient library ({rank} < {theta.shape[1]}); minimum-norm solution",
                      RuntimeWarning, stacklevel=3)
    return sol


def stlsq_fit(instances: Sequence[Trajectory], cfg: StlsqConfig | None = None,
              derivatives: Sequence[np.ndarray] | None = None) -> StlsqResult:
    """Stack (state, derivative) rows of all instances and threshold-regress onto
    the monomial library until the support stops changing.

    Derivatives come from finite differences unless given explicitly (one
    array per instance, same shape as its states).
    """
    cfg = cfg or StlsqConfig()
    if not instances:
        raise ValueError("need at least one instance")
    dim = instances[0].dim
    exps = enumerate_monomials(dim, cfg.degree)
    X = np.concatenate([tr.states for tr in instances])
    if derivatives is None:
        derivatives = [finite_diff(tr, cfg.fd_order) for tr in instances]
    elif len(derivatives) != len(instances):
        raise ValueError("one derivative array per instance")
    dX = np.concatenate([np.asarray(d, dtype=float) for d in derivatives])
    if dX.shape != X.shape:
        raise ValueError(f"derivatives have shape {dX.shape}, states {X.shape}")
    theta = library(X, exps)
    coef = _lstsq(theta, dX)
    support = np.abs(coef) >= cfg.threshold
    it = 0
    for it in range(1, cfg.max_iter + 1):
        coef = np.where(support, coef, 0.0)
        for d in range(dim):
            cols = np.nonzero(support[:, d])[0]
            if cols.size:
                coef[cols, d] = _lstsq(theta[:, cols], dX[:, d])
        new = support & (np.abs(coef) >= cfg.threshold)
        if np.array_equal(new, support):
            coef = np.where(new, coef, 0.0)
            break
        support = new
    else:
        coef = np.where(support, coef, 0.0)
    return StlsqResult(coef, exps, X.shape[0], it)


def library_coefficients(system: OdeSystem, degree: int = 3, n_points: int = 200,
                         seed: int = 0) -> np.ndarray:
    """Coefficients of a polynomial ``system`` in the monomial library (by exact fit
    at random points)."""
    exps = enumerate_monomials(system.dim, degree)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(max(n_points, 4 * len(exps)), system.dim))
    f = compile_system(system)
    Y = np.stack([f(x) for x in X])
    coef, *_ = np.linalg.lstsq(library(X, exps), Y, rcond=None)
    coef[np.abs(coef) < 1e-9] = 0.0
    return coef
