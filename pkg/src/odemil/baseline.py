"""STLSQ baseline run through the same corpus, prediction and scoring interfaces
as the learned model."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .datagen import SystemRecord, noisy_instances, select_first_n_instances
from .evaluation import NOISE_GRID, EvalOutcome, StlsqConfig, evaluate_prediction, stlsq_fit
from .infer import prediction_row
from .integrate import SolverConfig

log = logging.getLogger(__name__)

METHOD = "stlsq"


@dataclass
class BaselineRun:
    predictions: list[dict]
    outcomes: list[EvalOutcome]


def _one(args) -> tuple[list[dict], list[EvalOutcome]]:
    rec, cfg, ns, sigmas, seed, eval_seed, solver = args
    preds, outs = [], []
    for sigma in sigmas:
        for n in ns:
            if n > rec.n_instances:
                continue
            sub = select_first_n_instances(rec, n)
            obs = noisy_instances(sub, sigma, seed)
            system = stlsq_fit(obs, cfg).system()
            preds.append(prediction_row(rec.id, None, method=METHOD, sigma=sigma, n_instances=n,
                                        system=system))
            # scoring always sees the clean instances
            outs.append(evaluate_prediction(sub, system, method=METHOD, sigma=sigma, seed=eval_seed,
                                            solver=solver))
    return preds, outs


def run_baseline(records: Sequence[SystemRecord], cfg: StlsqConfig | None = None,
                 ns: Sequence[int] = (1, 2, 3, 4), sigmas: Sequence[float] = NOISE_GRID,
                 seed: int = 0, eval_seed: int = 0, solver: SolverConfig | None = None,
                 workers: int = 1) -> BaselineRun:
    """Fit on the first ``n`` noisy instances of every system, for every ``n`` and
    noise level, and score each fit.  Output order is (system, sigma, n)."""
    cfg = cfg or StlsqConfig()
    jobs = [(r, cfg, tuple(ns), tuple(sigmas), seed, eval_seed, solver) for r in records]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_one, jobs, chunksize=4))
    else:
        parts = [_one(j) for j in jobs]
    run = BaselineRun([], [])
    for p, o in parts:
        run.predictions.extend(p)
        run.outcomes.extend(o)
    log.info("baseline: %d fits over %d systems", len(run.outcomes), len(records))
    return run
