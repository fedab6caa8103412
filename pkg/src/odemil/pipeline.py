"""Corpus-level prediction and scoring shared by the CLI, the baseline and tests."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .datagen import SystemRecord, noisy_instances, select_first_n_instances
from .evaluation import NOISE_GRID, EvalOutcome, evaluate_prediction
from .exprtree import OdeSystem, ParseError, parse_prefix, str_to_prefix
from .infer import PredictConfig, predict, prediction_row
from .integrate import SolverConfig
from .tokenizer import build_vocab

log = logging.getLogger(__name__)

PREDICTION_KEYS = ("id", "method", "sigma", "n_instances", "prefix", "infix", "R", "beam_scores",
                   "parse_failures")


class PredictionFormatError(ValueError):
    pass


def sweep(record: SystemRecord, ns: Sequence[int], sigmas: Sequence[float]):
    """(sigma, n, clean sub-record) for every admissible setting, in a fixed order."""
    for sigma in sigmas:
        for n in ns:
            if n <= record.n_instances:
                yield sigma, n, select_first_n_instances(record, n)


def predict_corpus(records: Iterable[SystemRecord], model, cfg: PredictConfig | None = None,
                   ns: Sequence[int] = (1, 2, 3, 4), sigmas: Sequence[float] = NOISE_GRID,
                   seed: int = 0, method: str | None = None) -> Iterator[dict]:
    """Model predictions over the instance-count and noise sweeps."""
    cfg = cfg or PredictConfig()
    vocab = build_vocab()
    method = method or model.cfg.aggregator
    for rec in records:
        for sigma, n, sub in sweep(rec, ns, sigmas):
            pred = predict(noisy_instances(sub, sigma, seed), model, cfg, vocab)
            yield prediction_row(rec.id, pred, method=method, sigma=sigma, n_instances=n)


def truth_predictions(records: Iterable[SystemRecord], ns: Sequence[int] = (1, 2, 3, 4),
                      sigmas: Sequence[float] = (0.0,), method: str = "truth") -> Iterator[dict]:
    """Ground-truth systems written as predictions (the self-consistency ceiling)."""
    for rec in records:
        for sigma, n, _ in sweep(rec, ns, sigmas):
            yield prediction_row(rec.id, None, method=method, sigma=sigma, n_instances=n,
                                 system=rec.system)


def write_predictions(path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            n += 1
    return n


def read_predictions(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in ("id", "method", "sigma", "n_instances", "prefix") if k not in row]
            if missing:
                raise PredictionFormatError(f"{path}:{lineno}: missing {missing}")
            rows.append(row)
    return rows


def row_system(row: dict, dim: int) -> OdeSystem | None:
    """The predicted system, or None when absent or unparsable."""
    if row.get("prefix") is None:
        return None
    try:
        return parse_prefix(str_to_prefix(row["prefix"]), dim)
    except (ParseError, ValueError):
        return None


def _score(args) -> EvalOutcome:
    row, rec, seed, solver = args
    sub = select_first_n_instances(rec, int(row["n_instances"]))
    return evaluate_prediction(sub, row_system(row, rec.dim), method=row["method"],
                               sigma=float(row["sigma"]), seed=seed, solver=solver)


def evaluate_rows(rows: Sequence[dict], records: Sequence[SystemRecord], seed: int = 0,
                  solver: SolverConfig | None = None, workers: int = 1) -> list[EvalOutcome]:
    """Score prediction rows against the clean corpus records they refer to."""
    by_id = {r.id: r for r in records}
    jobs = []
    for row in rows:
        rec = by_id.get(row["id"])
        if rec is None:
            raise PredictionFormatError(f"prediction for unknown system id {row['id']}")
        if not 1 <= int(row["n_instances"]) <= rec.n_instances:
            raise PredictionFormatError(f"system {rec.id} has {rec.n_instances} instances, "
                                        f"prediction uses {row['n_instances']}")
        jobs.append((row, rec, seed, solver))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_score, jobs, chunksize=8))
    return [_score(j) for j in jobs]
