"""Random ODE systems, initial values, noise and multi-instance corpora.

Two generators are provided: sparse polynomial systems built from an
enumerated monomial basis, and random operator trees with bounded numbers of
binary/unary operators.  Records are generated independently from
``default_rng([seed, index])`` so the corpus does not depend on worker count.
"""
from __future__ import annotations

import itertools
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .exprtree import (
    BINARY_OPS,
    UNARY_OPS,
    Expression,
    OdeSystem,
    add,
    const,
    mul,
    unary,
    var,
)
from .integrate import AMPLITUDE_LIMIT, SolverConfig, Trajectory, amplitude_ok, default_grid, solve

log = logging.getLogger(__name__)


class GenerationStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class PolyGenConfig:
    max_order: int = 3
    max_terms: int = 5
    terms_mu: float = 2.0
    terms_sigma: float = 2.0
    coef_mu: float = 0.0
    coef_sigma: float = 1.0
    decimals: int = 5


@dataclass(frozen=True)
class TreeGenConfig:
    max_binary: int = 5
    max_unary: int = 3
    const_range: tuple[float, float] = (0.05, 20.0)
    max_depth: int = 6
    unary_probs: tuple[float, ...] = (1 / 6, 1 / 6, 1 / 6, 1 / 2)  # sin, square, inv, id
    binary_probs: tuple[float, ...] = (3 / 4, 1 / 4)  # add, mul
    const_leaf_prob: float = 0.2

    def __post_init__(self):
        for probs in (self.unary_probs, self.binary_probs):
            if abs(sum(probs) - 1.0) > 1e-12:
                raise ValueError("operator probabilities must sum to 1")
        if min(self.max_binary, self.max_unary, self.max_depth) < 0:
            raise ValueError("bounds must be non-negative")
        lo, hi = self.const_range
        if not 0 < lo < hi:
            raise ValueError("constant range must satisfy 0 < c_min < c_max")


# --- polynomial systems ---------------------------------------------------

def enumerate_monomials(dim: int, max_order: int) -> list[tuple[int, ...]]:
    """Exponent vectors with total degree <= ``max_order``, lexicographic order."""
    if dim < 1 or max_order < 0:
        raise ValueError("need dim >= 1 and max_order >= 0")
    return [
        o for o in itertools.product(range(max_order + 1), repeat=dim) if sum(o) <= max_order
    ]


def _power(i: int, p: int) -> Expression:
    x = var(i)
    if p == 1:
        return x
    if p == 2:
        return unary("square", x)
    # odd powers peel one factor off the square chain
    return mul(x, _power(i, p - 1)) if p % 2 else unary("square", _power(i, p // 2))


def monomial_term(coef: float, exponents: Sequence[int]) -> Expression:
    factors = [_power(i, p) for i, p in enumerate(exponents) if p > 0]
    if not factors:
        return const(coef)
    prod = factors[0]
    for f in factors[1:]:
        prod = mul(prod, f)
    return mul(const(coef), prod)


def sum_terms(terms: Sequence[Expression]) -> Expression:
    out = terms[-1]
    for t in reversed(terms[:-1]):
        out = add(t, out)
    return out


def _round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def sample_n_terms(rng: np.random.Generator, cfg: PolyGenConfig) -> int:
    x = float(np.clip(rng.normal(cfg.terms_mu, cfg.terms_sigma), 1, cfg.max_terms))
    return _round_half_away(x)


def sample_coefficient(rng: np.random.Generator, cfg: PolyGenConfig) -> float:
    while True:
        c = round(float(rng.lognormal(cfg.coef_mu, cfg.coef_sigma)), cfg.decimals)
        if c != 0.0:
            return c if rng.random() < 0.5 else -c


def sample_polynomial_system(dim: int, rng: np.random.Generator, cfg: PolyGenConfig | None = None) -> OdeSystem:
    cfg = cfg or PolyGenConfig()
    if not 1 <= dim <= 4:
        raise ValueError("dimension must be in [1, 4]")
    order = int(rng.integers(1, cfg.max_order + 1))
    basis = enumerate_monomials(dim, order)
    exprs = []
    for _ in range(dim):
        k = sample_n_terms(rng, cfg)
        if k < len(basis):
            picked = sorted(rng.choice(len(basis), size=k, replace=False))
            monos = [basis[j] for j in picked]
        else:
            monos = basis
        exprs.append(sum_terms([monomial_term(sample_coefficient(rng, cfg), o) for o in monos]))
    return OdeSystem(tuple(exprs))


# --- tree systems ---------------------------------------------------------

def sample_signed_loguniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    v = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return v if rng.random() < 0.5 else -v


def sample_unary_op(rng: np.random.Generator, cfg: TreeGenConfig) -> str:
    return UNARY_OPS[rng.choice(len(UNARY_OPS), p=cfg.unary_probs)]


def sample_binary_op(rng: np.random.Generator, cfg: TreeGenConfig) -> str:
    return BINARY_OPS[rng.choice(len(BINARY_OPS), p=cfg.binary_probs)]


class _Node:
    __slots__ = ("op", "children", "wrap")

    def __init__(self, op, children=()):
        self.op = op
        self.children = list(children)
        self.wrap = None


def _skeleton(n_binary: int, rng: np.random.Generator, cfg: TreeGenConfig) -> _Node:
    if n_binary == 0:
        return _Node("leaf")
    left = int(rng.integers(0, n_binary))
    return _Node(
        sample_binary_op(rng, cfg),
        [_skeleton(left, rng, cfg), _skeleton(n_binary - 1 - left, rng, cfg)],
    )


def _walk(node: _Node) -> Iterator[_Node]:
    yield node
    for c in node.children:
        yield from _walk(c)


def sample_tree_expr(dim: int, rng: np.random.Generator, cfg: TreeGenConfig | None = None) -> Expression:
    """One random right-hand side under the binary/unary/depth budgets.

    Affine maps ``a*u(.)+b`` wrap unary nodes while binary budget remains;
    their ``add``/``mul`` count against the binary cap.
    """
    cfg = cfg or TreeGenConfig()
    while True:
        n_bin = int(rng.integers(0, cfg.max_binary + 1))
        root = _skeleton(n_bin, rng, cfg)
        nodes = list(_walk(root))
        n_un = min(int(rng.integers(0, cfg.max_unary + 1)), len(nodes))
        for j in sorted(rng.choice(len(nodes), size=n_un, replace=False)):
            nodes[j].wrap = sample_unary_op(rng, cfg)
        budget = cfg.max_binary - n_bin
        expr = _realize(root, dim, rng, cfg, [budget])
        if expr.depth() <= cfg.max_depth:
            return expr


def _realize(node: _Node, dim: int, rng, cfg: TreeGenConfig, budget: list[int]) -> Expression:
    lo, hi = cfg.const_range
    if node.op == "leaf":
        # unary operators never act on a bare constant
        if node.wrap is None and rng.random() < cfg.const_leaf_prob:
            e = const(sample_signed_loguniform(rng, lo, hi))
        else:
            e = var(int(rng.integers(0, dim)))
    else:
        a = _realize(node.children[0], dim, rng, cfg, budget)
        b = _realize(node.children[1], dim, rng, cfg, budget)
        e = Expression(node.op, (a, b))
    if node.wrap is not None:
        e = unary(node.wrap, e)
        if budget[0] >= 1:
            e = mul(const(sample_signed_loguniform(rng, lo, hi)), e)
            budget[0] -= 1
            if budget[0] >= 1:
                e = add(e, const(sample_signed_loguniform(rng, lo, hi)))
                budget[0] -= 1
    return e


def sample_tree_system(dim: int, rng: np.random.Generator, cfg: TreeGenConfig | None = None) -> OdeSystem:
    if not 1 <= dim <= 4:
        raise ValueError("dimension must be in [1, 4]")
    return OdeSystem(tuple(sample_tree_expr(dim, rng, cfg) for _ in range(dim)))


# --- instances and noise --------------------------------------------------

def sample_initial_values(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= n <= 4:
        raise ValueError("instance count must be in [1, 4]")
    return rng.standard_normal((n, dim))


def apply_noise(traj: Trajectory, sigma: float, rng: np.random.Generator) -> Trajectory:
    """Multiplicative noise ``x * eps``, ``eps ~ N(1, sigma^2)`` per entry."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Trajectory(traj.times.copy(), traj.states.copy())
    eps = rng.normal(1.0, sigma, size=traj.states.shape)
    return Trajectory(traj.times.copy(), traj.states * eps)


@dataclass
class SystemRecord:
    id: int
    system: OdeSystem
    instances: list[Trajectory]
    sigma: float = 0.0
    generator: str = "poly"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.instances) <= 4:
            raise ValueError("a record holds 1 to 4 instances")
        t0 = self.instances[0].times
        for tr in self.instances:
            if tr.dim != self.system.dim:
                raise ValueError("instance dimension differs from the system")
            if tr.times.shape != t0.shape or np.any(tr.times != t0):
                raise ValueError("all instances must share one time grid")

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @property
    def times(self) -> np.ndarray:
        return self.instances[0].times


def select_first_n_instances(record: SystemRecord, n: int) -> SystemRecord:
    if not 1 <= n <= record.n_instances:
        raise ValueError(f"cannot select {n} of {record.n_instances} instances")
    return replace(record, instances=list(record.instances[:n]))


def noisy_instances(record: SystemRecord, sigma: float | None = None, seed: int = 0) -> list[Trajectory]:
    """Model inputs: the record's clean instances with seed-deterministic noise.

    Noise for instance ``j`` depends only on ``(seed, record id, j)``, so the
    first ``n`` noisy instances are shared across instance-count sweeps.
    """
    sigma = record.sigma if sigma is None else sigma
    out = []
    for j, tr in enumerate(record.instances):
        rng = np.random.default_rng([seed, record.id, j, 7])
        out.append(apply_noise(tr, sigma, rng))
    return out


# --- corpora --------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    count: int = 100
    generator: str = "poly"
    dims: tuple[int, ...] = (1, 2, 3, 4)
    instances: tuple[int, ...] = (1, 2, 3, 4)
    sigma: float = 0.0
    seed: int = 0
    n_points: int = 100
    t_span: tuple[float, float] = (1.0, 10.0)
    # trajectories needing more steps are rejected rather than waited on
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_steps=2000))
    poly: PolyGenConfig = field(default_factory=PolyGenConfig)
    tree: TreeGenConfig = field(default_factory=TreeGenConfig)
    coef_retries: int = 50
    stall_window: int = 2000

    def __post_init__(self):
        if self.generator not in ("poly", "tree"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if not self.dims or any(not 1 <= d <= 4 for d in self.dims):
            raise ValueError("dims must be a non-empty subset of 1..4")
        if not self.instances or any(not 1 <= n <= 4 for n in self.instances):
            raise ValueError("instances must be a non-empty subset of 1..4")
        if self.count < 0 or self.sigma < 0:
            raise ValueError("count and sigma must be non-negative")


def regime(name: str, **overrides) -> CorpusConfig:
    """Preset corpora: ``exp1`` (polynomial, D and n uniform on 1..4) or
    ``exp2`` (tree systems, fixed D, four instances, sigma 0.05)."""
    if name == "exp1":
        base = dict(generator="poly", dims=(1, 2, 3, 4), instances=(1, 2, 3, 4), sigma=0.0)
    elif name == "exp2":
        base = dict(generator="tree", dims=(2,), instances=(4,), sigma=0.05)
    else:
        raise ValueError(f"unknown regime {name!r}")
    base.update(overrides)
    return CorpusConfig(**base)


def _resample_constants(system: OdeSystem, rng, cfg: CorpusConfig) -> OdeSystem:
    if cfg.generator == "poly":
        return system.map_constants(lambda _: sample_coefficient(rng, cfg.poly))
    lo, hi = cfg.tree.const_range
    return system.map_constants(lambda _: sample_signed_loguniform(rng, lo, hi))


def generate_record(index: int, cfg: CorpusConfig) -> tuple[SystemRecord, int]:
    """Record ``index`` and the number of rejected attempts it took."""
    rng = np.random.default_rng([cfg.seed, index])
    dim = int(rng.choice(cfg.dims))
    n = int(rng.choice(cfg.instances))
    grid = default_grid(cfg.n_points, *cfg.t_span)
    attempts = 0
    while True:
        if cfg.generator == "poly":
            system = sample_polynomial_system(dim, rng, cfg.poly)
        else:
            system = sample_tree_system(dim, rng, cfg.tree)
        for retry in range(cfg.coef_retries):
            if retry:
                system = _resample_constants(system, rng, cfg)
            x0s = sample_initial_values(dim, n, rng)
            trajs = []
            for x0 in x0s:
                # anything above the amplitude limit is rejected, so stop integrating there
                tr = solve(system, x0, grid, cfg.solver, guard=AMPLITUDE_LIMIT * (1 + 1e-9))
                if not tr or not amplitude_ok(tr):
                    break
                trajs.append(tr)
            attempts += 1
            if len(trajs) == n:
                rec = SystemRecord(index, system, trajs, cfg.sigma, cfg.generator, cfg.seed)
                return rec, attempts - 1
            if attempts >= cfg.stall_window:
                raise GenerationStalled(
                    f"record {index}: {attempts} consecutive rejections "
                    f"(generator={cfg.generator}, dim={dim}, n={n})"
                )


def _gen_chunk(args):
    indices, cfg = args
    return [generate_record(i, cfg) for i in indices]


@dataclass
class CorpusStats:
    accepted: int = 0
    rejected: int = 0
    by_dim: Counter = field(default_factory=Counter)
    by_instances: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        total = self.accepted + self.rejected
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejection_rate": self.rejected / total if total else 0.0,
            "by_dim": {str(k): v for k, v in sorted(self.by_dim.items())},
            "by_instances": {str(k): v for k, v in sorted(self.by_instances.items())},
        }


def build_corpus(cfg: CorpusConfig, workers: int = 1, stats: CorpusStats | None = None,
                 chunk: int = 8) -> Iterator[SystemRecord]:
    """Stream ``cfg.count`` accepted records in index order."""
    stats = stats if stats is not None else CorpusStats()

    def account(rec, rej):
        stats.accepted += 1
        stats.rejected += rej
        stats.by_dim[rec.dim] += 1
        stats.by_instances[rec.n_instances] += 1
        return rec

    if workers <= 1:
        for i in range(cfg.count):
            yield account(*generate_record(i, cfg))
        return
    chunks = [(list(range(s, min(s + chunk, cfg.count))), cfg) for s in range(0, cfg.count, chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for res in pool.map(_gen_chunk, chunks):
            for rec, rej in res:
                yield account(rec, rej)
