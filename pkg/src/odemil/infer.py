"""Inference: shared RMS rescaling, beam decoding and mapping predictions back."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .exprtree import Expression, OdeSystem, ParseError, add, const, mul, render_system, to_prefix, prefix_to_str
from .integrate import Trajectory
from .tokenizer import Vocab, build_vocab, decode_system, encode_trajectory

log = logging.getLogger(__name__)

SCALE_CONVENTIONS = ("rms", "inverse-rms")


# --- rescaling ------------------------------------------------------------

def rms_factor(instances: Sequence[Trajectory], convention: str = "rms") -> float:
    """One scale for the whole system from the initial values of all instances.

    ``rms``: R is the root mean square of every initial-value component, so
    dividing by R gives unit-RMS initials.  ``inverse-rms`` takes the
    published formula literally (1/R = RMS).  All-zero initials give R = 1.
    """
    if convention not in SCALE_CONVENTIONS:
        raise ValueError(f"unknown scale convention {convention!r}")
    if not instances:
        raise ValueError("need at least one instance")
    x0 = np.concatenate([np.asarray(tr.states[0], dtype=float).ravel() for tr in instances])
    rms = math.sqrt(float(np.mean(x0 ** 2)))
    if rms == 0 or not math.isfinite(rms):
        return 1.0
    return rms if convention == "rms" else 1.0 / rms


def rms_scale(instances: Sequence[Trajectory], convention: str = "rms") -> tuple[list[Trajectory], float]:
    R = rms_factor(instances, convention)
    return [Trajectory(tr.times, tr.states / R) for tr in instances], R


def _scaled(e: Expression, R: float, var_power: int) -> tuple[float, int, Expression | None]:
    """Factor ``e`` (with every variable x_i replaced by R**var_power * x_i) as
    ``c * R**k * rest``; ``rest`` is None for a pure constant."""
    op = e.op
    if op == "const":
        return e.value, 0, None
    if op == "var":
        return 1.0, var_power, e
    if op == "mul":
        ca, ka, ra = _scaled(e.children[0], R, var_power)
        cb, kb, rb = _scaled(e.children[1], R, var_power)
        if ra is None:
            rest = rb
        elif rb is None:
            rest = ra
        else:
            rest = mul(ra, rb)
        return ca * cb, ka + kb, rest
    if op == "add":
        fa = _scaled(e.children[0], R, var_power)
        fb = _scaled(e.children[1], R, var_power)
        if fa[2] is None and fb[2] is None:
            return fa[0] * R ** fa[1] + fb[0] * R ** fb[1], 0, None
        return 1.0, 0, add(_build(*fa, R), _build(*fb, R))
    (child,) = e.children
    c, k, r = _scaled(child, R, var_power)
    if op == "square":
        return c * c, 2 * k, (None if r is None else Expression("square", (r,)))
    if op == "inv":
        if c == 0:
            return 1.0, 0, Expression("inv", (_build(c, k, r, R),))
        return 1.0 / c, -k, (None if r is None else Expression("inv", (r,)))
    if op == "id":
        return c, k, (None if r is None else Expression("id", (r,)))
    # sin is not homogeneous: its argument keeps the scale inside
    inner = _build(c, k, r, R)
    if r is None:
        return float(np.sin(inner.value)), 0, None
    return 1.0, 0, Expression(op, (inner,))


def _build(c: float, k: int, rest: Expression | None, R: float) -> Expression:
    coef = c * R ** k if k else c
    if rest is None:
        return const(coef)
    if rest.op == "add":
        # distribute so polynomial terms keep their own coefficients
        a, b = rest.children
        return add(_build(coef, 0, a, R) if a.op != "const" else const(coef * a.value),
                   _build(coef, 0, b, R) if b.op != "const" else const(coef * b.value))
    if coef == 1.0:
        return rest
    if rest.op == "mul" and rest.children[0].op == "const":
        return mul(const(coef * rest.children[0].value), rest.children[1])
    return mul(const(coef), rest)


def _rescale_system(system: OdeSystem, R: float, var_power: int, outer_power: int) -> OdeSystem:
    if not (R > 0 and math.isfinite(R)):
        raise ValueError("scale factor must be positive and finite")
    exprs = []
    for e in system.expressions:
        c, k, rest = _scaled(e, R, var_power)
        exprs.append(_build(c, k + outer_power, rest, R))
    return OdeSystem(tuple(exprs))


def unscale_system(pred: OdeSystem, R: float) -> OdeSystem:
    """For a prediction ``d(x/R)/dt = g(x/R)`` return ``dx/dt = R * g(x/R)``."""
    if R == 1.0:
        return pred
    return _rescale_system(pred, R, -1, 1)


def scale_system(system: OdeSystem, R: float) -> OdeSystem:
    """The system obeyed by ``x / R``: ``f(R * y) / R``.  Inverse of :func:`unscale_system`."""
    if R == 1.0:
        return system
    return _rescale_system(system, R, 1, -1)


# --- model inputs ---------------------------------------------------------

def trajectory_slots(traj: Trajectory, d_max: int, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """(s, 3(d_max+1)) token ids and slot mask for one instance."""
    if traj.dim > d_max:
        raise ValueError(f"dimension {traj.dim} exceeds d_max={d_max}")
    ids = encode_trajectory(traj.times, traj.states, vocab)
    n_slots = 3 * (d_max + 1)
    out = np.full((ids.shape[0], n_slots), vocab.pad, dtype=np.int64)
    mask = np.zeros((ids.shape[0], n_slots), dtype=bool)
    out[:, : ids.shape[1]] = ids
    mask[:, : ids.shape[1]] = True
    return out, mask


def instances_to_tensors(groups: Sequence[Sequence[Trajectory]], d_max: int, vocab: Vocab | None = None):
    """Flatten per-system instance lists into encoder inputs plus group counts."""
    vocab = vocab or build_vocab()
    ids, masks, counts = [], [], []
    s = None
    for inst in groups:
        if not inst:
            raise ValueError("system with zero instances")
        counts.append(len(inst))
        for tr in inst:
            if s is None:
                s = tr.n_points
            elif tr.n_points != s:
                raise ValueError("all trajectories in a batch need the same number of points")
            i, m = trajectory_slots(tr, d_max, vocab)
            ids.append(i)
            masks.append(m)
    return (torch.from_numpy(np.stack(ids)), torch.from_numpy(np.stack(masks)), counts)


# --- beam search ----------------------------------------------------------

@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 20
    temperature: float = 0.1
    max_len: int = 200
    sample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class Candidate:
    ids: list[int]
    logprob: float
    complete: bool

    @property
    def score(self) -> float:
        """Length-normalized log-probability (BOS excluded)."""
        return self.logprob / max(len(self.ids) - 1, 1)


@torch.no_grad()
def beam_decode(model, mem: torch.Tensor, cfg: BeamConfig | None = None,
                vocab: Vocab | None = None) -> list[Candidate]:
    """Beam search for one system; ``mem`` is (1, s, d_dec).

    Scores use ``log_softmax(logits / temperature)``.  Ties go to the earlier
    beam, then to the lower token id.  With ``cfg.sample`` the expansion is
    Gumbel-top-k (sampling without replacement) instead of arg-top-k.
    Returns candidates sorted by normalized score; if nothing reached EOS the
    best partial hypotheses come back flagged incomplete.
    """
    cfg = cfg or BeamConfig()
    vocab = vocab or build_vocab()
    max_len = min(cfg.max_len, model.cfg.max_target_len)
    gen = torch.Generator().manual_seed(cfg.seed) if cfg.sample else None
    alive = [Candidate([vocab.bos], 0.0, False)]
    finished: list[Candidate] = []
    for _ in range(max_len - 1):
        tgt = torch.tensor([c.ids for c in alive], dtype=torch.long)
        logits = model.decode_logits(mem.expand(len(alive), -1, -1), tgt)[:, -1]
        logp = torch.log_softmax(logits.double() / cfg.temperature, dim=-1)
        total = (torch.tensor([c.logprob for c in alive], dtype=torch.float64)[:, None] + logp).reshape(-1)
        key = total
        if gen is not None:
            u = torch.rand(total.shape, generator=gen, dtype=torch.float64).clamp_min(1e-300)
            key = total - torch.log(-torch.log(u))
        order = torch.sort(-key, stable=True).indices[: cfg.beam_size]
        V = logp.shape[1]
        nxt = []
        for flat in order.tolist():
            b, tok = divmod(flat, V)
            cand = Candidate(alive[b].ids + [tok], float(total[flat]), tok == vocab.eos)
            (finished if cand.complete else nxt).append(cand)
        alive = nxt
        if len(finished) >= cfg.beam_size or not alive:
            break
    pool = finished if finished else alive
    return sorted(pool, key=lambda c: -c.score)[: cfg.beam_size]


# --- prediction -----------------------------------------------------------

@dataclass(frozen=True)
class PredictConfig:
    beam: BeamConfig = field(default_factory=BeamConfig)
    rescale: bool = True
    scale_convention: str = "rms"


@dataclass
class Prediction:
    system: OdeSystem | None
    R: float
    candidates: list[Candidate]
    parse_failures: int
    chosen: int | None = None

    @property
    def ok(self) -> bool:
        return self.system is not None

    @property
    def scores(self) -> list[float]:
        return [c.score for c in self.candidates]


@torch.no_grad()
def predict(instances: Sequence[Trajectory], model, cfg: PredictConfig | None = None,
            vocab: Vocab | None = None) -> Prediction:
    """Rescale, encode all instances, aggregate, beam-decode, parse, unscale."""
    cfg = cfg or PredictConfig()
    vocab = vocab or build_vocab()
    dim = instances[0].dim
    if cfg.rescale:
        scaled, R = rms_scale(instances, cfg.scale_convention)
    else:
        scaled, R = list(instances), 1.0
    model.eval()
    ids, mask, counts = instances_to_tensors([scaled], model.cfg.d_max, vocab)
    mem = model.memory(model.system_latent(ids, mask, counts))
    cands = beam_decode(model, mem, cfg.beam, vocab)
    failures = 0
    for i, c in enumerate(cands):
        if not c.complete:
            failures += 1
            continue
        try:
            sys_scaled = decode_system(c.ids, dim, vocab)
        except (ParseError, ValueError):
            failures += 1
            continue
        return Prediction(unscale_system(sys_scaled, R), R, cands, failures, i)
    return Prediction(None, R, cands, failures, None)


def prediction_row(system_id: int, pred: Prediction | None, *, method: str, sigma: float,
                   n_instances: int, system: OdeSystem | None = None, R: float = 1.0,
                   scores: Sequence[float] = (), parse_failures: int = 0) -> dict:
    """One line of the predictions JSONL file."""
    if pred is not None:
        system, R, scores, parse_failures = pred.system, pred.R, pred.scores, pred.parse_failures
    return {
        "id": system_id,
        "method": method,
        "sigma": sigma,
        "n_instances": n_instances,
        "prefix": prefix_to_str(to_prefix(system)) if system is not None else None,
        "infix": render_system(system) if system is not None else None,
        "R": R,
        "beam_scores": [float(s) for s in scores],
        "parse_failures": parse_failures,
    }
