"""Command-line entry point: ``odemil {datagen,train,predict,eval,baseline,report,selftest}``.

Settings are layered: command-line flags, then ``ODEMIL_*`` environment
variables (paths only), then the JSON ``--config`` file, then defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("odemil")

# path settings that may come from the environment
ENV_PATHS = {
    "corpus": "ODEMIL_CORPUS",
    "checkpoint": "ODEMIL_CHECKPOINT",
    "predictions": "ODEMIL_PREDICTIONS",
    "results": "ODEMIL_RESULTS",
    "out": "ODEMIL_OUT",
}

DEFAULTS = {
    "datagen": dict(out=None, regime=None, generator="poly", dims=[1, 2, 3, 4], instances=[1, 2, 3, 4],
                    count=100, sigma=0.0, seed=None, workers=1, n_points=100),
    "train": dict(corpus=None, out=None, resume=None, preset="toy", aggregator="mean", d_enc=None,
                  d_dec=None, enc_layers=None, dec_layers=None, steps=2000, batch_size=16,
                  schedule="cosine", lr=1e-3, warmup=100, cycle=None, lr_min=1e-6, seed=0,
                  checkpoint_every=0, sigma=None, rescale=True),
    "predict": dict(corpus=None, checkpoint=None, out=None, oracle=False, instances=[1, 2, 3, 4],
                    sigmas=[0.0, 0.01, 0.05, 0.1], beam=20, temperature=0.1, max_len=200, seed=0,
                    limit=None, rescale=True),
    "eval": dict(corpus=None, predictions=None, out=None, seed=None, workers=1, max_steps=20000),
    "baseline": dict(corpus=None, out=None, instances=[1, 2, 3, 4], sigmas=[0.0, 0.01, 0.05, 0.1],
                     threshold=0.1, degree=3, max_iter=400, seed=None, eval_seed=None, workers=1,
                     limit=None),
    "report": dict(results=None, out=None, sigma=None, n=None),
    "selftest": dict(),
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odemil", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file; keys are subcommand settings (optionally nested per subcommand)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # unset flags stay absent so lower layers can fill them

    d = sub.add_parser("datagen", help="generate a corpus", argument_default=S)
    d.add_argument("--out", help="corpus path (.jsonl or .jsonl.gz)")
    d.add_argument("--regime", choices=["exp1", "exp2"])
    d.add_argument("--generator", choices=["poly", "tree"])
    d.add_argument("--dims", type=_ints)
    d.add_argument("--instances", type=_ints)
    d.add_argument("--count", type=int)
    d.add_argument("--sigma", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--workers", type=int)
    d.add_argument("--n-points", dest="n_points", type=int)

    t = sub.add_parser("train", help="train a model", argument_default=S)
    t.add_argument("--corpus")
    t.add_argument("--out", help="run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--preset", choices=["toy", "exp1", "exp2"])
    t.add_argument("--aggregator", choices=["mean", "attentive", "xattn", "timeaware"])
    for name in ("d_enc", "d_dec", "enc_layers", "dec_layers"):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--schedule", choices=["cosine", "noam"])
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--lr-min", dest="lr_min", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--cycle", type=int, help="first cosine cycle length (default: all steps)")
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--sigma", type=float, help="override the corpus noise level")
    t.add_argument("--no-rescale", dest="rescale", action="store_false")

    pr = sub.add_parser("predict", help="predict systems for a corpus", argument_default=S)
    pr.add_argument("--corpus")
    pr.add_argument("--checkpoint")
    pr.add_argument("--out", help="predictions JSONL")
    pr.add_argument("--oracle", action="store_true", help="emit the ground truth instead of model output")
    pr.add_argument("--instances", type=_ints)
    pr.add_argument("--sigmas", type=_floats)
    pr.add_argument("--beam", type=int)
    pr.add_argument("--temperature", type=float)
    pr.add_argument("--max-len", dest="max_len", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--limit", type=int, help="only the first N systems")
    pr.add_argument("--no-rescale", dest="rescale", action="store_false")

    e = sub.add_parser("eval", help="score predictions", argument_default=S)
    e.add_argument("--corpus")
    e.add_argument("--predictions")
    e.add_argument("--out", help="results CSV")
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--max-steps", dest="max_steps", type=int)

    b = sub.add_parser("baseline", help="run the STLSQ baseline", argument_default=S)
    b.add_argument("--corpus")
    b.add_argument("--out", help="output directory")
    b.add_argument("--instances", type=_ints)
    b.add_argument("--sigmas", type=_floats)
    b.add_argument("--threshold", type=float)
    b.add_argument("--degree", type=int)
    b.add_argument("--max-iter", dest="max_iter", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--eval-seed", dest="eval_seed", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--limit", type=int)

    r = sub.add_parser("report", help="tables and plots from results CSVs", argument_default=S)
    r.add_argument("--results", nargs="+")
    r.add_argument("--out", help="output directory")
    r.add_argument("--sigma", type=float, help="noise level for the instance plot")
    r.add_argument("--n", type=int, help="instance count for the noise plot")

    sub.add_parser("selftest", help="run the quick invariant checks")
    return p


def resolve(args: argparse.Namespace, env=None) -> dict:
    """Merge defaults < config file < environment (paths) < flags."""
    env = os.environ if env is None else env
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            blob = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from None
        if not isinstance(blob, dict):
            raise ConfigError("config file must hold a JSON object")
        section = blob.get(cmd, blob) if isinstance(blob.get(cmd), dict) else blob
        for k, v in section.items():
            if k in cfg:
                cfg[k] = v
            elif k not in DEFAULTS and not any(k in d for d in DEFAULTS.values()):
                raise ConfigError(f"unknown {cmd} setting {k!r} in {args.config}")
    for key, var in ENV_PATHS.items():
        if key in cfg and env.get(var):
            cfg[key] = env[var]
    for k, v in vars(args).items():
        if k in cfg:
            cfg[k] = v
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            env = f" (or ${ENV_PATHS[k]})" if k in ENV_PATHS else ""
            raise ConfigError(f"missing required setting --{k.replace('_', '-')}{env}")


def _exists(path, what):
    if not Path(path).exists():
        raise DataError(f"{what} {path} does not exist")


# --- subcommands ----------------------------------------------------------

def cmd_datagen(cfg: dict) -> int:
    from .corpus import write_corpus, write_manifest
    from .datagen import CorpusConfig, CorpusStats, build_corpus, regime

    _need(cfg, "out", "seed")
    fields = dict(count=cfg["count"], seed=cfg["seed"], n_points=cfg["n_points"])
    try:
        if cfg["regime"]:
            cc = regime(cfg["regime"], **fields)
        else:
            cc = CorpusConfig(generator=cfg["generator"], dims=tuple(cfg["dims"]),
                              instances=tuple(cfg["instances"]), sigma=cfg["sigma"], **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    stats = CorpusStats()
    n = write_corpus(cfg["out"], build_corpus(cc, workers=cfg["workers"], stats=stats))
    write_manifest(cfg["out"], asdict(cc), cc.seed, kind="corpus", records=n, stats=stats.as_dict())
    print(f"wrote {n} systems to {cfg['out']} (rejection rate {stats.as_dict()['rejection_rate']:.3f})")
    return EXIT_OK


def model_config(cfg: dict):
    from .model import ModelConfig

    if cfg["preset"] == "toy":
        base = ModelConfig.toy(aggregator=cfg["aggregator"])
    else:
        base = ModelConfig.preset(1 if cfg["preset"] == "exp1" else 2, aggregator=cfg["aggregator"])
    over = {k: cfg[k] for k in ("d_enc", "d_dec", "enc_layers", "dec_layers") if cfg.get(k)}
    return replace(base, **over)


def train_config(cfg: dict):
    from .train import CosineParams, NoamParams, TrainConfig

    cos = CosineParams(warmup=cfg["warmup"], cycle=cfg["cycle"] or cfg["steps"], lr_max=cfg["lr"],
                       lr_min=cfg["lr_min"], shrink=1.0 if cfg["cycle"] is None else 0.75)
    noam = NoamParams(warmup=cfg["warmup"], lr_max=cfg["lr"])
    return TrainConfig(batch_size=cfg["batch_size"], schedule=cfg["schedule"], cosine=cos, noam=noam,
                       total_steps=cfg["steps"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
                       sigma=cfg["sigma"], rescale=cfg["rescale"])


def cmd_train(cfg: dict) -> int:
    from .corpus import read_corpus, write_manifest
    from .train import train

    _need(cfg, "corpus", "out")
    _exists(cfg["corpus"], "corpus")
    if cfg["resume"]:
        _exists(cfg["resume"], "checkpoint")
    try:
        mc, tc = model_config(cfg), train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    records = read_corpus(cfg["corpus"])
    _, hist = train(records, mc, tc, out_dir=cfg["out"], resume=cfg["resume"])
    ckpt = Path(cfg["out"]) / "checkpoint.pt"
    write_manifest(ckpt, {"model": mc.to_dict(), "train": tc.to_dict(), "corpus": str(cfg["corpus"])},
                   tc.seed, kind="checkpoint", steps=tc.total_steps)
    last = hist[-1]["loss"] if hist else float("nan")
    print(f"trained {len(hist)} steps, final loss {last:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    from .corpus import read_corpus, write_manifest
    from .infer import BeamConfig, PredictConfig
    from .model import load_checkpoint
    from .pipeline import predict_corpus, truth_predictions, write_predictions

    _need(cfg, "corpus", "out")
    _exists(cfg["corpus"], "corpus")
    records = read_corpus(cfg["corpus"])[: cfg["limit"]]
    if cfg["oracle"]:
        rows = truth_predictions(records, cfg["instances"], cfg["sigmas"])
        meta = {"oracle": True}
    else:
        _need(cfg, "checkpoint")
        _exists(cfg["checkpoint"], "checkpoint")
        model, _ = load_checkpoint(cfg["checkpoint"])
        pc = PredictConfig(BeamConfig(cfg["beam"], cfg["temperature"], cfg["max_len"]), rescale=cfg["rescale"])
        rows = predict_corpus(records, model, pc, cfg["instances"], cfg["sigmas"], cfg["seed"])
        meta = {"model": model.cfg.to_dict()}
    n = write_predictions(cfg["out"], rows)
    write_manifest(cfg["out"], dict(cfg, **meta), cfg["seed"], kind="predictions", rows=n)
    print(f"wrote {n} predictions to {cfg['out']}")
    return EXIT_OK


def _write_results(path, outcomes, cfg, seed):
    from .corpus import write_manifest
    from .evaluation import accuracy, write_results

    n = write_results(path, outcomes)
    write_manifest(path, cfg, seed, kind="results", rows=n)
    for task in ("reconstruction", "generalization"):
        try:
            print(f"{task}: accuracy {accuracy(outcomes, task):.3f} over {len(outcomes)} predictions")
        except ValueError:
            print(f"{task}: no scorable predictions")
    return n


def cmd_eval(cfg: dict) -> int:
    from .corpus import read_corpus
    from .integrate import SolverConfig
    from .pipeline import evaluate_rows, read_predictions

    _need(cfg, "corpus", "predictions", "out", "seed")
    _exists(cfg["corpus"], "corpus")
    _exists(cfg["predictions"], "predictions")
    rows = read_predictions(cfg["predictions"])
    if not rows:
        raise DataError(f"{cfg['predictions']} holds no predictions")
    outcomes = evaluate_rows(rows, read_corpus(cfg["corpus"]), cfg["seed"],
                             SolverConfig(max_steps=cfg["max_steps"]), cfg["workers"])
    _write_results(cfg["out"], outcomes, cfg, cfg["seed"])
    return EXIT_OK


def cmd_baseline(cfg: dict) -> int:
    from .baseline import run_baseline
    from .corpus import read_corpus, write_manifest
    from .evaluation import StlsqConfig
    from .pipeline import write_predictions

    _need(cfg, "corpus", "out", "seed")
    _exists(cfg["corpus"], "corpus")
    try:
        sc = StlsqConfig(cfg["threshold"], cfg["max_iter"], cfg["degree"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    records = read_corpus(cfg["corpus"])[: cfg["limit"]]
    eval_seed = cfg["seed"] if cfg["eval_seed"] is None else cfg["eval_seed"]
    run = run_baseline(records, sc, cfg["instances"], cfg["sigmas"], cfg["seed"], eval_seed,
                       workers=cfg["workers"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n = write_predictions(out / "predictions.jsonl", run.predictions)
    write_manifest(out / "predictions.jsonl", cfg, cfg["seed"], kind="predictions", rows=n)
    _write_results(out / "results.csv", run.outcomes, cfg, eval_seed)
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    from .corpus import write_manifest
    from .report import EmptyResults, build_report

    _need(cfg, "results", "out")
    paths = cfg["results"] if isinstance(cfg["results"], list) else [cfg["results"]]
    for p in paths:
        _exists(p, "results file")
    try:
        out = build_report(paths, cfg["out"], cfg["sigma"], cfg["n"])
    except EmptyResults as exc:
        raise DataError(str(exc)) from None
    write_manifest(out["summary_csv"], cfg, None, kind="report")
    for p in out.values():
        print(p)
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.2f}s)")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "baseline": cmd_baseline, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        # malformed corpora, predictions or checkpoints surface as ValueErrors
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
